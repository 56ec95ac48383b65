//! RK4 integration of the coupled `(ω, J)` flow with compatibility projection,
//! volume normalization and singularity monitoring.
//!
//! The state is `(g, J)`; the `ω` equation enters through
//! `ġ(X, Y) = ω̇(X, JY) + ω(X, J̇Y)`.

use serde::{Deserialize, Serialize};

use crate::connection::{self, QuadraticHook};
use crate::error::{Error, Result};
use crate::lattice::{self, LatticeField, Slot, ENDO, FORM};
use crate::structure::{self, AHStructure, StructureDiagnostics, EVOLUTION_TOL};
use crate::tensor;

/// `dt · λ_max ≤ CFL_BOUND`, inside the RK4 stability interval on the negative axis.
pub const CFL_BOUND: f64 = 2.7;
/// Accepted failure of `d_J` to anti-commute with `J`.
pub const ANTICOMMUTE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub dt: f64,
    pub q_hook: Option<QuadraticHook>,
    pub h_hook: Option<QuadraticHook>,
    pub normalize_volume: bool,
    /// Volume restored after each projection; the lattice volume when absent.
    pub target_volume: Option<f64>,
    pub project_every: usize,
    /// Add the Lie derivative along `W^k = g^{ij} Γ^k_{ij}` of the canonical
    /// connection, which makes the flow strictly parabolic.
    pub deturck: bool,
    /// 2/3-rule truncation of the velocity.
    pub dealias: bool,
    /// Abort when the gauge exceeds `factor × initial + 1`.
    pub singularity_factor: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            dt: 0.01,
            q_hook: None,
            h_hook: None,
            normalize_volume: true,
            target_volume: None,
            project_every: 1,
            deturck: true,
            dealias: true,
            singularity_factor: 1e3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if self.project_every == 0 {
            return Err(Error::InvalidInput("project_every must be positive".into()));
        }
        if let Some(v) = self.target_volume {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("target volume must be positive, got {v}")));
            }
        }
        if !(self.singularity_factor.is_finite() && self.singularity_factor > 0.0) {
            return Err(Error::InvalidInput("singularity_factor must be positive".into()));
        }
        Ok(())
    }

    /// Largest `dt` allowed on `lattice`.
    pub fn cfl_limit(&self, lattice: &lattice::Lattice) -> f64 {
        CFL_BOUND / lattice.max_laplacian_eigenvalue(self.dealias)
    }

    pub fn check_cfl(&self, lattice: &lattice::Lattice) -> Result<()> {
        let bound = self.cfl_limit(lattice);
        if self.dt > bound {
            return Err(Error::Cfl { dt: self.dt, bound });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowVelocity {
    pub omega_dot: LatticeField,
    pub j_dot: LatticeField,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub rm_sup: f64,
    pub torsion_sq_sup: f64,
    pub dtorsion_sup: f64,
    pub gauge: f64,
    pub volume: f64,
    pub structure: StructureDiagnostics,
    /// Largest pointwise change made by the last projection.
    pub projection: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub step: usize,
    pub structure: AHStructure,
    pub diagnostics: FlowDiagnostics,
}

impl FlowState {
    pub fn new(structure: AHStructure) -> Result<FlowState> {
        let diagnostics = diagnose(&structure, 0.0)?;
        Ok(FlowState {
            t: 0.0,
            step: 0,
            structure,
            diagnostics,
        })
    }
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowFailure {
    pub t: f64,
    pub step: usize,
    pub kind: String,
    pub message: String,
}

impl FlowFailure {
    fn new(t: f64, step: usize, e: &Error) -> FlowFailure {
        FlowFailure {
            t,
            step,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<FlowState>,
    pub failure: Option<FlowFailure>,
    pub initial_gauge: f64,
    pub ceiling: f64,
}

/// Outcome of [`run_with`]; the frames went to the observer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub last: FlowState,
    pub failure: Option<FlowFailure>,
    pub initial_gauge: f64,
    pub ceiling: f64,
}

fn diagnose(s: &AHStructure, projection: f64) -> Result<FlowDiagnostics> {
    let geo = connection::geometry(s.g(), s.j())?;
    let g = s.g();
    let rm_sup = connection::sup_norm(&connection::curvature(&geo.levi_civita), g)?;
    let t = connection::torsion(&geo.canonical);
    let tn = connection::sup_norm(&t, g)?;
    let dtorsion_sup = connection::sup_norm(&connection::covariant_derivative(&t, &geo.levi_civita), g)?;
    let torsion_sq_sup = tn * tn;
    Ok(FlowDiagnostics {
        rm_sup,
        torsion_sq_sup,
        dtorsion_sup,
        gauge: rm_sup.max(torsion_sq_sup).max(dtorsion_sup),
        volume: s.volume(),
        structure: structure::check_structure(s),
        projection,
    })
}

fn raw_omega(g: &LatticeField, j: &LatticeField) -> LatticeField {
    let d = g.lattice().dim();
    LatticeField::map(&[g, j], FORM, |x, o| o.copy_from_slice(&structure::omega_point(x[0], x[1], d)))
}

/// Pure flow velocity `(−2S + H + Q, −𝒦 + 𝓗)` at `(g, J)`, no gauge or filtering.
fn pure_velocity(
    g: &LatticeField,
    j: &LatticeField,
    omega: &LatticeField,
    p: &FlowParams,
) -> Result<(LatticeField, LatticeField, connection::Geometry)> {
    let terms = connection::flow_terms(g, j, omega)?;
    let mut j_dot = terms.k.scale(-1.0);
    let s_view = AHStructure::from_parts_unchecked(g.clone(), j.clone(), omega.clone());
    if let Some(h) = p.h_hook.as_ref().filter(|h| !h.is_zero()) {
        j_dot = j_dot.add(&connection::nh_from(&s_view, &terms.nijenhuis, &terms.geometry.ginv, h));
    }
    let mut omega_dot = terms
        .s_form
        .scale(-2.0)
        .add(&connection::h_of(omega, j, &j_dot));
    if let Some(q) = p.q_hook.as_ref().filter(|q| !q.is_zero()) {
        omega_dot = omega_dot.add(&connection::q_from(&s_view, &terms.torsion, &terms.geometry.ginv, q));
    }
    Ok((omega_dot, j_dot, terms.geometry))
}

fn check_hooks(p: &FlowParams) -> Result<()> {
    if let Some(q) = &p.q_hook {
        if q.coefficients.len() != connection::Q_TERMS {
            return Err(Error::InvalidInput(format!("Q hook needs {} coefficients", connection::Q_TERMS)));
        }
    }
    if let Some(h) = &p.h_hook {
        if h.coefficients.len() != connection::NIJENHUIS_TERMS {
            return Err(Error::InvalidInput(format!(
                "𝓗 hook needs {} coefficients",
                connection::NIJENHUIS_TERMS
            )));
        }
    }
    Ok(())
}

/// Right-hand side of the flow: `d_J = −𝒦 + 𝓗`, `d_ω = −2S + H(d_J) + Q`.
pub fn rhs(s: &AHStructure, p: &FlowParams) -> Result<FlowVelocity> {
    check_hooks(p)?;
    let (omega_dot, j_dot, geo) = pure_velocity(s.g(), s.j(), s.omega(), p)?;
    let r = geo.residuals;
    if r.max() > connection::CANONICAL_TOL {
        return Err(Error::ConnectionConstruction {
            metric: r.metric,
            complex: r.complex,
            torsion: r.torsion_11,
        });
    }
    let d = s.lattice().dim();
    let anti = LatticeField::map(&[&j_dot, s.j()], ENDO, |x, o| {
        let a = tensor::mul(x[0], x[1], d);
        let b = tensor::mul(x[1], x[0], d);
        for i in 0..d * d {
            o[i] = a[i] + b[i];
        }
    })
    .max_abs();
    if anti > ANTICOMMUTE_TOL {
        return Err(Error::Residual {
            what: "d_J J + J d_J",
            residual: anti,
            tolerance: ANTICOMMUTE_TOL,
        });
    }
    Ok(FlowVelocity { omega_dot, j_dot })
}

/// `W^k = g^{ij} Γ^k_{ij}` for the canonical connection.
pub fn gauge_field(s: &AHStructure) -> Result<LatticeField> {
    let geo = connection::geometry(s.g(), s.j())?;
    Ok(gauge_from(&geo))
}

fn gauge_from(geo: &connection::Geometry) -> LatticeField {
    let d = geo.ginv.lattice().dim();
    LatticeField::map(&[&geo.ginv, &geo.canonical.coefficients], &[Slot::Up], |x, o| {
        for k in 0..d {
            let mut v = 0.0;
            for i in 0..d {
                for j in 0..d {
                    v += x[0][i * d + j] * x[1][(k * d + i) * d + j];
                }
            }
            o[k] = v;
        }
    })
}

/// `(L_W ω)_{ab} = W^c ∂_c ω_{ab} + ω_{cb} ∂_a W^c + ω_{ac} ∂_b W^c`.
pub fn lie_derivative_form(w: &LatticeField, omega: &LatticeField) -> LatticeField {
    let d = w.lattice().dim();
    let dw = lattice::gradient(w);
    let dom = lattice::gradient(omega);
    LatticeField::map(&[w, &dw, omega, &dom], FORM, |x, o| {
        let (w, dw, om, dom) = (x[0], x[1], x[2], x[3]);
        for a in 0..d {
            for b in 0..d {
                let mut v = 0.0;
                for c in 0..d {
                    v += w[c] * dom[(c * d + a) * d + b]
                        + om[c * d + b] * dw[a * d + c]
                        + om[a * d + c] * dw[b * d + c];
                }
                o[a * d + b] = v;
            }
        }
    })
}

/// `(L_W J)^i_j = W^k ∂_k J^i_j − J^k_j ∂_k W^i + J^i_k ∂_j W^k`.
pub fn lie_derivative_endo(w: &LatticeField, j: &LatticeField) -> LatticeField {
    let d = w.lattice().dim();
    let dw = lattice::gradient(w);
    let dj = lattice::gradient(j);
    LatticeField::map(&[w, &dw, j, &dj], ENDO, |x, o| {
        let (w, dw, jm, dj) = (x[0], x[1], x[2], x[3]);
        for i in 0..d {
            for jj in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    v += w[k] * dj[(k * d + i) * d + jj] - jm[k * d + jj] * dw[k * d + i]
                        + jm[i * d + k] * dw[jj * d + k];
                }
                o[i * d + jj] = v;
            }
        }
    })
}

/// Velocity of `(g, J)` used by the integrator.
fn stage(g: &LatticeField, j: &LatticeField, p: &FlowParams) -> Result<(LatticeField, LatticeField)> {
    let omega = raw_omega(g, j);
    let (mut omega_dot, mut j_dot, geo) = pure_velocity(g, j, &omega, p)?;
    if p.deturck {
        let w = gauge_from(&geo);
        omega_dot = omega_dot.add(&lie_derivative_form(&w, &omega));
        j_dot = j_dot.add(&lie_derivative_endo(&w, j));
    }
    let d = g.lattice().dim();
    let g_dot = LatticeField::map(&[&omega_dot, j, &omega, &j_dot], FORM, |x, o| {
        let a = tensor::mul(x[0], x[1], d);
        let b = tensor::mul(x[2], x[3], d);
        for r in 0..d {
            for c in 0..d {
                let v = a[r * d + c] + b[r * d + c];
                let vt = a[c * d + r] + b[c * d + r];
                o[r * d + c] = 0.5 * (v + vt);
            }
        }
    });
    if p.dealias {
        Ok((lattice::dealias(&g_dot), lattice::dealias(&j_dot)))
    } else {
        Ok((g_dot, j_dot))
    }
}

fn check_finite_pair(g: &LatticeField, j: &LatticeField, t: f64) -> Result<()> {
    if g.check_finite().is_err() || j.check_finite().is_err() {
        return Err(Error::Singularity {
            t,
            gauge: f64::INFINITY,
            ceiling: f64::NAN,
        });
    }
    Ok(())
}

/// `J ← J(−J²)^{−1/2}` by the Newton iteration `X ← ½(X − X⁻¹)`.
pub(crate) fn project_j(j: &LatticeField) -> Result<LatticeField> {
    let d = j.lattice().dim();
    let mut failed = false;
    let out = j.map1(ENDO, |x, o| {
        let mut m = x.to_vec();
        let mut converged = false;
        for _ in 0..60 {
            let Some(inv) = tensor::inverse(&m, d) else { break };
            let next: Vec<f64> = m.iter().zip(&inv).map(|(a, b)| 0.5 * (a - b)).collect();
            let change = next.iter().zip(&m).fold(0.0_f64, |s, (a, b)| s.max((a - b).abs()));
            m = next;
            if change < 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            let sq = tensor::mul(&m, &m, d);
            let res = (0..d * d).fold(0.0_f64, |s, k| {
                let id = if k % (d + 1) == 0 { 1.0 } else { 0.0 };
                s.max((sq[k] + id).abs())
            });
            converged = res < 1e-13;
        }
        if converged {
            o.copy_from_slice(&m);
        } else {
            o.iter_mut().for_each(|v| *v = f64::NAN);
        }
    });
    if out.check_finite().is_err() {
        failed = true;
    }
    if failed {
        return Err(Error::NonConvergence("projection of J onto J² = −Id".into()));
    }
    Ok(out)
}

/// Projection onto compatible structures: returns `(g, J)` and the size of the change.
fn project(g: &LatticeField, j: &LatticeField) -> Result<(LatticeField, LatticeField, f64)> {
    let d = g.lattice().dim();
    let jn = project_j(j)?;
    let gn = LatticeField::map(&[g, &jn], FORM, |x, o| {
        let pulled = tensor::pullback(x[0], x[1], d);
        for r in 0..d {
            for c in 0..d {
                let a = 0.5 * (x[0][r * d + c] + pulled[r * d + c]);
                let b = 0.5 * (x[0][c * d + r] + pulled[c * d + r]);
                o[r * d + c] = 0.5 * (a + b);
            }
        }
    });
    let change = gn.sub(g).max_abs().max(jn.sub(j).max_abs());
    Ok((gn, jn, change))
}

/// One RK4 step plus projection, normalization and checks, without diagnostics.
fn advance(st: &FlowState, p: &FlowParams, dt: f64) -> Result<(AHStructure, f64)> {
    let (g0, j0) = (st.structure.g(), st.structure.j());
    let (kg1, kj1) = stage(g0, j0, p)?;
    let (kg2, kj2) = stage(&g0.axpy(0.5 * dt, &kg1), &j0.axpy(0.5 * dt, &kj1), p)?;
    let (kg3, kj3) = stage(&g0.axpy(0.5 * dt, &kg2), &j0.axpy(0.5 * dt, &kj2), p)?;
    let (kg4, kj4) = stage(&g0.axpy(dt, &kg3), &j0.axpy(dt, &kj3), p)?;
    let combine = |x0: &LatticeField, k1: &LatticeField, k2: &LatticeField, k3: &LatticeField, k4: &LatticeField| {
        x0.axpy(dt / 6.0, k1)
            .axpy(dt / 3.0, k2)
            .axpy(dt / 3.0, k3)
            .axpy(dt / 6.0, k4)
    };
    let mut g = combine(g0, &kg1, &kg2, &kg3, &kg4);
    let mut j = combine(j0, &kj1, &kj2, &kj3, &kj4);
    let t = st.t + dt;
    check_finite_pair(&g, &j, t)?;
    let mut projection = 0.0;
    if (st.step + 1) % p.project_every == 0 {
        let (gp, jp, change) = project(&g, &j)?;
        g = gp;
        j = jp;
        projection = change;
    }
    structure::check_positive(&g)?;
    let mut s = AHStructure::from_parts(g, j);
    if p.normalize_volume {
        let target = p.target_volume.unwrap_or_else(|| s.lattice().volume());
        let c = (target / s.volume()).powf(1.0 / s.lattice().n() as f64);
        s = s.rescaled(c);
    }
    if (st.step + 1) % p.project_every == 0 {
        let diag = structure::check_structure(&s);
        if !diag.passes(EVOLUTION_TOL) {
            return Err(Error::Residual {
                what: "post-step compatibility",
                residual: diag.max_residual(),
                tolerance: EVOLUTION_TOL,
            });
        }
    }
    Ok((s, projection))
}

/// One RK4 step of size `p.dt` with refreshed diagnostics.
pub fn step(st: &FlowState, p: &FlowParams) -> Result<FlowState> {
    p.validate()?;
    check_hooks(p)?;
    p.check_cfl(st.structure.lattice())?;
    let (s, projection) = advance(st, p, p.dt)?;
    let diagnostics = diagnose(&s, projection)?;
    Ok(FlowState {
        t: st.t + p.dt,
        step: st.step + 1,
        structure: s,
        diagnostics,
    })
}

/// Run to `t_end`, handing every `record_every`-th state (and the first and
/// last) to `observer`. Step failures end the run and are reported in the
/// summary; precondition failures are errors.
pub fn run_with(
    initial: &AHStructure,
    p: &FlowParams,
    t_end: f64,
    record_every: usize,
    mut observer: impl FnMut(&FlowState) -> Result<()>,
) -> Result<RunSummary> {
    p.validate()?;
    check_hooks(p)?;
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::InvalidInput(format!("t_end must be positive, got {t_end}")));
    }
    if record_every == 0 {
        return Err(Error::InvalidInput("record_every must be positive".into()));
    }
    p.check_cfl(initial.lattice())?;
    let mut st = FlowState::new(initial.clone())?;
    let initial_gauge = st.diagnostics.gauge;
    let ceiling = p.singularity_factor * initial_gauge + 1.0;
    observer(&st)?;
    let n_steps = (t_end / p.dt - 1e-9).ceil().max(1.0) as usize;
    let mut failure = None;
    for k in 0..n_steps {
        let dt = if k + 1 == n_steps { t_end - st.t } else { p.dt };
        let last = k + 1 == n_steps;
        let outcome = advance(&st, p, dt).and_then(|(s, projection)| {
            let record = last || (st.step + 1) % record_every == 0;
            let diagnostics = if record {
                let d = diagnose(&s, projection)?;
                if d.gauge > ceiling {
                    return Err(Error::Singularity {
                        t: st.t + dt,
                        gauge: d.gauge,
                        ceiling,
                    });
                }
                d
            } else {
                FlowDiagnostics {
                    volume: s.volume(),
                    projection,
                    ..st.diagnostics
                }
            };
            Ok((s, diagnostics, record))
        });
        match outcome {
            Ok((s, diagnostics, record)) => {
                st = FlowState {
                    // Multiples of dt rather than running sums keep record times exact.
                    t: if last { t_end } else { (k + 1) as f64 * p.dt },
                    step: st.step + 1,
                    structure: s,
                    diagnostics,
                };
                if record {
                    observer(&st)?;
                }
            }
            Err(e) => {
                failure = Some(FlowFailure::new(st.t + dt, st.step + 1, &e));
                break;
            }
        }
    }
    Ok(RunSummary {
        last: st,
        failure,
        initial_gauge,
        ceiling,
    })
}

/// Run to `t_end` keeping every recorded state.
pub fn run(initial: &AHStructure, p: &FlowParams, t_end: f64, record_every: usize) -> Result<Trajectory> {
    let mut frames = Vec::new();
    let summary = run_with(initial, p, t_end, record_every, |s| {
        frames.push(s.clone());
        Ok(())
    })?;
    Ok(Trajectory {
        frames,
        failure: summary.failure,
        initial_gauge: summary.initial_gauge,
        ceiling: summary.ceiling,
    })
}

/// `max(|Rm|, |T|², |∇T|)`; see [`connection::singularity_gauge`].
pub fn singularity_gauge(s: &AHStructure) -> Result<f64> {
    connection::singularity_gauge(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;
    use crate::structure::build_structure;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn conjugated(l: &Arc<Lattice>, eps: f64) -> AHStructure {
        let d = l.dim();
        let j0 = tensor::to_mat(&structure::standard_complex_structure(d), d);
        let j = LatticeField::from_fn(l, ENDO, |x, o| {
            let mut e = DMatrix::<f64>::zeros(d, d);
            for a in 0..d {
                for b in 0..d {
                    e[(a, b)] = eps * ((a + 3 * b) as f64 * 0.41 + x[(a + b) % d]).sin();
                }
            }
            tensor::from_mat(&(e.clone().exp() * &j0 * (-e).exp()), o);
        });
        let g = LatticeField::from_fn(l, FORM, |x, o| {
            for a in 0..d {
                o[a * d + a] = 1.0 + eps * (x[a] + 0.3 * a as f64).cos();
            }
        });
        build_structure(&g, &j).unwrap()
    }

    fn conformal(l: &Arc<Lattice>, eps: f64) -> AHStructure {
        let g = LatticeField::from_fn(l, FORM, |x, o| {
            let u = (2.0 * eps * (x[0].sin() + 0.5 * (x[1] + 0.3).cos())).exp();
            o[0] = u;
            o[3] = u;
        });
        build_structure(&g, AHStructure::standard(l).j()).unwrap()
    }

    #[test]
    fn flat_structure_is_static() {
        let l = Lattice::standard(1, 8).unwrap();
        let s = AHStructure::standard(&l);
        let v = rhs(&s, &FlowParams::default()).unwrap();
        assert!(v.omega_dot.max_abs() < 1e-10 && v.j_dot.max_abs() < 1e-10);
        let p = FlowParams {
            dt: 0.05,
            ..FlowParams::default()
        };
        let mut st = FlowState::new(s.clone()).unwrap();
        for _ in 0..20 {
            st = step(&st, &p).unwrap();
        }
        assert!(st.structure.g().sub(s.g()).max_abs() < 1e-12);
        assert!(st.structure.j().sub(s.j()).max_abs() < 1e-12);
        assert!((st.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cfl_is_enforced() {
        let l = Lattice::standard(1, 16).unwrap();
        let s = AHStructure::standard(&l);
        let p = FlowParams {
            dt: 1.0,
            ..FlowParams::default()
        };
        let st = FlowState::new(s).unwrap();
        assert!(matches!(step(&st, &p), Err(Error::Cfl { .. })));
    }

    #[test]
    fn kahler_rhs_is_ricci_flow() {
        let s = conformal(&Lattice::standard(1, 16).unwrap(), 0.05);
        let v = rhs(&s, &FlowParams::default()).unwrap();
        assert!(v.j_dot.max_abs() < 1e-8);
        let rho = connection::ricci_form(&s).unwrap();
        assert!(v.omega_dot.add(&rho.scale(2.0)).max_abs() < 1e-8);
        assert!(rho.max_abs() > 1e-2);
    }

    /// Spectral solve of `∂ₜu = Δ log u` by naive DFT, independent of the lattice module.
    fn krf_step(u: &[f64], m: usize, dt: f64) -> Vec<f64> {
        let lap = |f: &[f64]| -> Vec<f64> {
            let n2 = m * m;
            let freq = |i: usize| if i <= m / 2 { i as f64 } else { i as f64 - m as f64 };
            let mut re = vec![0.0; n2];
            let mut im = vec![0.0; n2];
            let tau = std::f64::consts::TAU;
            for a in 0..m {
                for b in 0..m {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for x in 0..m {
                        for y in 0..m {
                            let ph = -tau * ((a * x + b * y) as f64) / m as f64;
                            sr += f[x * m + y] * ph.cos();
                            si += f[x * m + y] * ph.sin();
                        }
                    }
                    let k2 = freq(a).powi(2) + freq(b).powi(2);
                    re[a * m + b] = -k2 * sr;
                    im[a * m + b] = -k2 * si;
                }
            }
            let mut out = vec![0.0; n2];
            for x in 0..m {
                for y in 0..m {
                    let mut s = 0.0;
                    for a in 0..m {
                        for b in 0..m {
                            let ph = tau * ((a * x + b * y) as f64) / m as f64;
                            s += re[a * m + b] * ph.cos() - im[a * m + b] * ph.sin();
                        }
                    }
                    out[x * m + y] = s / n2 as f64;
                }
            }
            out
        };
        let f = |v: &[f64]| lap(&v.iter().map(|x| x.ln()).collect::<Vec<_>>());
        let add = |a: &[f64], c: f64, b: &[f64]| a.iter().zip(b).map(|(x, y)| x + c * y).collect::<Vec<_>>();
        let k1 = f(u);
        let k2 = f(&add(u, 0.5 * dt, &k1));
        let k3 = f(&add(u, 0.5 * dt, &k2));
        let k4 = f(&add(u, dt, &k3));
        (0..u.len())
            .map(|i| u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    #[test]
    fn kahler_step_matches_ricci_flow_stepper() {
        let m = 12;
        let l = Lattice::standard(1, m).unwrap();
        let s = conformal(&l, 0.05);
        let p = FlowParams {
            dt: 0.02,
            deturck: false,
            dealias: false,
            normalize_volume: false,
            ..FlowParams::default()
        };
        let next = step(&FlowState::new(s.clone()).unwrap(), &p).unwrap();
        let u0: Vec<f64> = (0..l.num_points()).map(|q| s.g().at(q)[0]).collect();
        let u1 = krf_step(&u0, m, p.dt);
        let err = (0..l.num_points())
            .map(|q| (next.structure.g().at(q)[0] - u1[q]).abs())
            .fold(0.0, f64::max);
        let moved = (0..l.num_points()).map(|q| (u1[q] - u0[q]).abs()).fold(0.0, f64::max);
        assert!(moved > 1e-4);
        assert!(err < 1e-11, "{err}");
        assert!(next.structure.j().sub(s.j()).max_abs() < 1e-12);
    }

    #[test]
    fn rk4_convergence_order() {
        let l = Lattice::standard(1, 12).unwrap();
        let s = conjugated(&l, 0.05);
        let p = FlowParams {
            dt: 0.04,
            project_every: usize::MAX,
            normalize_volume: false,
            dealias: false,
            ..FlowParams::default()
        };
        let one_step_error = |dt: f64| {
            let q = FlowParams { dt, ..p.clone() };
            let coarse = step(&FlowState::new(s.clone()).unwrap(), &q).unwrap();
            let fine_p = FlowParams { dt: dt / 4.0, ..p.clone() };
            let mut fine = FlowState::new(s.clone()).unwrap();
            for _ in 0..4 {
                fine = step(&fine, &fine_p).unwrap();
            }
            coarse.structure.g().sub(fine.structure.g()).max_abs()
        };
        let (e1, e2) = (one_step_error(0.04), one_step_error(0.02));
        assert!(e1 / e2 > 16.0, "{e1} {e2} {}", e1 / e2);
    }

    #[test]
    fn projection_is_second_order_in_amplitude() {
        let l = Lattice::standard(1, 12).unwrap();
        let p = FlowParams::default();
        let proj = |eps| {
            step(&FlowState::new(conjugated(&l, eps)).unwrap(), &p)
                .unwrap()
                .diagnostics
                .projection
        };
        let (a, b, c) = (proj(1e-2), proj(5e-3), proj(2.5e-3));
        assert!(a / b > 3.0 && b / c > 3.0, "{a} {b} {c}");
    }

    #[test]
    fn volume_is_normalized_and_structure_compatible() {
        let l = Lattice::standard(1, 12).unwrap();
        let tr = run(&conjugated(&l, 0.05), &FlowParams::default(), 0.2, 5).unwrap();
        assert!(tr.failure.is_none());
        assert_eq!(tr.frames.len(), 5);
        for f in &tr.frames[1..] {
            assert!((f.diagnostics.volume / l.volume() - 1.0).abs() < 1e-10);
            assert!(f.diagnostics.structure.passes(1e-8));
        }
    }

    #[test]
    fn flow_smooths_a_perturbation() {
        let l = Lattice::standard(1, 12).unwrap();
        let s = conjugated(&l, 0.02);
        let tr = run(&s, &FlowParams::default(), 1.0, 50).unwrap();
        let g0 = tr.frames[0].diagnostics.gauge;
        let g1 = tr.frames.last().unwrap().diagnostics.gauge;
        assert!(g1 < 0.6 * g0, "{g0} {g1}");
    }

    #[test]
    fn large_perturbation_never_yields_invalid_states() {
        let l = Lattice::standard(2, 6).unwrap();
        let p = FlowParams {
            dt: 0.05,
            singularity_factor: 2.0,
            ..FlowParams::default()
        };
        let tr = run(&conjugated(&l, 0.5), &p, 1.0, 1).unwrap();
        for f in &tr.frames {
            assert!(f.diagnostics.structure.passes(EVOLUTION_TOL));
            assert!(f.diagnostics.gauge <= tr.ceiling);
        }
        if let Some(fail) = &tr.failure {
            assert!(
                ["singularity", "residual", "not_positive_definite", "non_convergence"].contains(&fail.kind.as_str()),
                "{fail:?}"
            );
        }
    }

    #[test]
    fn hooks_enter_the_velocity() {
        let l = Lattice::standard(2, 8).unwrap();
        let s = conjugated(&l, 1e-3);
        let base = rhs(&s, &FlowParams::default()).unwrap();
        let p = FlowParams {
            q_hook: Some(QuadraticHook::new(vec![1.0, 0.0, 0.0])),
            h_hook: Some(QuadraticHook::new(vec![0.0, 1.0])),
            ..FlowParams::default()
        };
        let hooked = rhs(&s, &p).unwrap();
        let dw = hooked.omega_dot.sub(&base.omega_dot).max_abs();
        assert!(dw > 0.0 && dw < 1e-3 * base.omega_dot.max_abs().max(1e-12) * 10.0);
        let bad = FlowParams {
            q_hook: Some(QuadraticHook::new(vec![1.0])),
            ..FlowParams::default()
        };
        assert!(rhs(&s, &bad).is_err());
    }
}
