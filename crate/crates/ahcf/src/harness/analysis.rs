//! Decay-rate fits and kernel re-centering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowState;
use crate::lattice::{LatticeField, ENDO, FORM};
use crate::perturb::{self, Perturbation, TangentPerturbation};
use crate::structure::{self, AHStructure};
use crate::tensor;

/// Minimum samples a fit window must hold.
pub const MIN_FIT_SAMPLES: usize = 10;
/// `π₀ψ_I(t₀)` relative size at which re-centering stops refining.
pub const RECENTER_TOL: f64 = 1e-12;
const RECENTER_MAX_ITER: usize = 30;
/// Largest `|π₀ψ_I(t₀)|²/|ψ_I(t₀)|²` accepted once refinement stalls.
pub const RECENTER_ACCEPT: f64 = 1e-16;

/// Least-squares line through `(t, log y)`; the rate is minus the slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub fit_rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: [f64; 2],
    pub samples: usize,
}

pub fn decay_fit(series: &[(f64, f64)], window: [f64; 2]) -> Result<DecayFit> {
    let [a, b] = window;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::DegenerateWindow(format!("[{a}, {b}]")));
    }
    // Recorded times carry accumulated rounding; widen the window by a hair.
    let slack = 1e-9 * a.abs().max(b.abs()).max(1.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= a - slack && *t <= b + slack)
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::DegenerateWindow(format!(
            "{} samples in [{a}, {b}], need {MIN_FIT_SAMPLES}",
            pts.len()
        )));
    }
    if let Some((t, y)) = pts.iter().find(|(_, y)| !(y.is_finite() && *y > 0.0)) {
        return Err(Error::DegenerateWindow(format!("norm {y} at t = {t} is not positive")));
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let lm = pts.iter().map(|p| p.1.ln()).sum::<f64>() / m;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::DegenerateWindow("all samples share one time".into()));
    }
    let stl: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1.ln() - lm)).sum();
    let slope = stl / stt;
    let intercept = lm - slope * tm;
    let sll: f64 = pts.iter().map(|p| (p.1.ln() - lm).powi(2)).sum();
    let sse: f64 = pts
        .iter()
        .map(|p| (p.1.ln() - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if sll == 0.0 { 1.0 } else { (1.0 - sse / sll).clamp(0.0, 1.0) };
    Ok(DecayFit {
        fit_rate: -slope,
        intercept,
        r_squared,
        window,
        samples: pts.len(),
    })
}

/// A fit judged against a multiple of a reference rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub fit: DecayFit,
    pub reference_gap: f64,
    /// Verdict passes when `fit_rate ≥ threshold × reference_gap`.
    pub threshold: f64,
    pub verdict: bool,
}

impl DecayReport {
    pub fn new(fit: DecayFit, reference_gap: f64, threshold: f64) -> DecayReport {
        let verdict = fit.fit_rate >= threshold * reference_gap;
        DecayReport {
            fit,
            reference_gap,
            threshold,
            verdict,
        }
    }
}

/// `π₀` at a constant reference: the kernel of the linearization consists of
/// the constant tangent fields, and the `L²` projection onto constants is the mean.
pub fn pi0(psi: &TangentPerturbation) -> TangentPerturbation {
    psi.mean()
}

/// `|π₀ψ|² / |ψ|²` in `L²`; zero for `ψ = 0`.
pub fn pi0_ratio(psi: &TangentPerturbation) -> f64 {
    let n = psi.l2();
    if n == 0.0 {
        return 0.0;
    }
    (pi0(psi).l2() / n).powi(2)
}

/// Constant reference moved along the kernel direction `(c₁, c₂)`:
/// `J' = exp(E) J exp(−E)` with `[E, J] = c₂`, `ω' = ω + c₁`, then made compatible.
pub fn shift_reference(reference: &AHStructure, kernel: &TangentPerturbation) -> Result<AHStructure> {
    if !reference.is_constant(1e-12) {
        return Err(Error::InvalidInput("re-centering needs a constant reference".into()));
    }
    let lat = reference.lattice();
    let d = lat.dim();
    let j = reference.j().at(0);
    let w = reference.omega().at(0);
    let c1 = kernel.psi1.at(0);
    let c2 = kernel.psi2.at(0);
    let e: Vec<f64> = tensor::mul(c2, j, d).iter().map(|v| -0.5 * v).collect();
    let jn = perturb::conjugate_by_exp(&e, j, d);
    let wn: Vec<f64> = w.iter().zip(c1).map(|(a, b)| a + b).collect();
    let g0 = tensor::mul(&wn, &jn, d);
    let g0t = tensor::transpose(&g0, d);
    let g0: Vec<f64> = g0.iter().zip(&g0t).map(|(a, b)| 0.5 * (a + b)).collect();
    let s = structure::build_structure(
        &LatticeField::constant(lat, FORM, &g0)?,
        &LatticeField::constant(lat, ENDO, &jn)?,
    )?;
    let diag = structure::check_structure(&s);
    if !diag.passes(structure::CONSTRUCTION_TOL) {
        return Err(Error::Residual {
            what: "shifted reference structure",
            residual: diag.max_residual(),
            tolerance: structure::CONSTRUCTION_TOL,
        });
    }
    Ok(s)
}

/// In-memory result of one re-centering.
#[derive(Clone, Debug)]
pub struct RecenterRecord {
    pub t0: f64,
    pub reference: AHStructure,
    /// `(t, |π₀ψ_I|²/|ψ_I|²)` over every frame.
    pub pi0_ratio_series: Vec<(f64, f64)>,
    /// `|(ω_I − ω̃, J_I − J̃)|_{Cᵏ}` against the base structure.
    pub neighborhood_norm: f64,
    pub iterations: usize,
    /// `|ψ(t₀)|` and `|ψ_I(t₀)|` in `L²`.
    pub psi_l2_before: f64,
    pub psi_l2_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecenterSummary {
    pub t0: f64,
    pub reference_g: Vec<f64>,
    pub reference_j: Vec<f64>,
    pub reference_omega: Vec<f64>,
    pub pi0_ratio_series: Vec<(f64, f64)>,
    pub neighborhood_norm: f64,
    pub iterations: usize,
    pub psi_l2_before: f64,
    pub psi_l2_after: f64,
}

impl RecenterRecord {
    pub fn summary(&self) -> RecenterSummary {
        RecenterSummary {
            t0: self.t0,
            reference_g: self.reference.g().at(0).to_vec(),
            reference_j: self.reference.j().at(0).to_vec(),
            reference_omega: self.reference.omega().at(0).to_vec(),
            pi0_ratio_series: self.pi0_ratio_series.clone(),
            neighborhood_norm: self.neighborhood_norm,
            iterations: self.iterations,
            psi_l2_before: self.psi_l2_before,
            psi_l2_after: self.psi_l2_after,
        }
    }

    /// Largest `π₀` ratio over frames with `t ∈ [a, b]`.
    pub fn max_ratio_on(&self, a: f64, b: f64) -> f64 {
        self.pi0_ratio_series
            .iter()
            .filter(|(t, _)| *t >= a - 1e-12 && *t <= b + 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

/// Frame whose time is closest to `t`.
pub fn frame_at(frames: &[FlowState], t: f64) -> Result<usize> {
    let (first, last) = match (frames.first(), frames.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Error::InvalidInput("empty trajectory".into())),
    };
    if !(t >= first - 1e-9 && t <= last + 1e-9) {
        return Err(Error::InvalidInput(format!("t0 = {t} outside [{first}, {last}]")));
    }
    Ok(frames
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.t - t).abs().total_cmp(&(b.1.t - t).abs()))
        .map(|p| p.0)
        .expect("non-empty"))
}

/// Move the reference along the kernel until `π₀ψ_I(t₀) = 0`, then recompute
/// `ψ_I` for every frame. `base` is the structure neighborhood norms refer to.
pub fn recenter(
    frames: &[FlowState],
    t0: f64,
    reference: &AHStructure,
    base: &AHStructure,
    k: usize,
) -> Result<RecenterRecord> {
    let idx = frame_at(frames, t0)?;
    let at_t0 = &frames[idx].structure;
    let psi0 = perturb::psi_of(at_t0, reference)?;
    let before = psi0.l2();
    let mut current = reference.clone();
    let mut psi = psi0;
    let mut iterations = 0;
    // Shift until the kernel component is negligible or stops shrinking (roundoff floor).
    // Negligible is judged against the original ψ too: a purely constant ψ leaves
    // only roundoff, which is itself constant.
    let floor = RECENTER_TOL * before;
    let mut size = pi0(&psi).l2();
    while size > RECENTER_TOL * psi.l2() && size > floor {
        if iterations == RECENTER_MAX_ITER {
            break;
        }
        let next = shift_reference(&current, &pi0(&psi))?;
        let next_psi = perturb::psi_of(at_t0, &next)?;
        let next_size = pi0(&next_psi).l2();
        iterations += 1;
        if next_size >= 0.5 * size {
            if next_size < size {
                current = next;
                psi = next_psi;
            }
            break;
        }
        current = next;
        psi = next_psi;
        size = next_size;
    }
    if pi0_ratio(&psi) > RECENTER_ACCEPT && pi0(&psi).l2() > floor {
        return Err(Error::NonConvergence(format!(
            "re-centering at t0 = {t0}: kernel ratio {:.3e} after {iterations} shifts",
            pi0_ratio(&psi)
        )));
    }
    let pi0_ratio_series = frames
        .iter()
        .map(|f| Ok((f.t, pi0_ratio(&perturb::psi_of(&f.structure, &current)?))))
        .collect::<Result<Vec<_>>>()?;
    let neighborhood_norm = Perturbation::between(&current, base)?.norms(base, k)?.ck(k);
    Ok(RecenterRecord {
        t0: frames[idx].t,
        reference: current,
        pi0_ratio_series,
        neighborhood_norm,
        iterations,
        psi_l2_before: before,
        psi_l2_after: psi.l2(),
    })
}

/// Distance between two constant references: `|(ω − ω', J − J')|_{C⁰}` against `base`.
pub fn reference_distance(a: &AHStructure, b: &AHStructure, base: &AHStructure) -> Result<f64> {
    Ok(Perturbation::between(a, b)?.norms(base, 0)?.ck(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{self, FlowParams};
    use crate::lattice::Lattice;
    use crate::perturb::generate_perturbation;

    #[test]
    fn exact_exponential_is_recovered() {
        let s: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.1, 3.0 * (-1.7 * i as f64 * 0.1).exp())).collect();
        let f = decay_fit(&s, [0.0, 5.0]).unwrap();
        assert!((f.fit_rate - 1.7).abs() < 1e-10);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.samples, 50);
        assert!(DecayReport::new(f.clone(), 2.0, 0.8).verdict);
        assert!(!DecayReport::new(f, 2.2, 0.8).verdict);
    }

    #[test]
    fn degenerate_windows_are_rejected() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 1.0)).collect();
        assert!(decay_fit(&s, [0.0, 5.0]).is_err());
        assert!(decay_fit(&s, [5.0, 5.0]).is_err());
        let mut z = s.clone();
        z[3].1 = 0.0;
        assert!(decay_fit(&z, [0.0, 19.0]).is_err());
        let flat = decay_fit(&s, [0.0, 19.0]).unwrap();
        assert_eq!(flat.fit_rate, 0.0);
        assert_eq!(flat.r_squared, 1.0);
    }

    fn short_run(amplitude: f64) -> (AHStructure, Vec<FlowState>) {
        let lat = Lattice::standard(1, 8).unwrap();
        let r = AHStructure::standard(&lat);
        let s = generate_perturbation(&r, amplitude, (0, 1), 5).unwrap();
        (r, flow::run(&s, &FlowParams::default(), 0.2, 5).unwrap().frames)
    }

    #[test]
    fn recentering_kills_the_kernel_component() {
        let (r, frames) = short_run(0.02);
        let rec = recenter(&frames, 0.1, &r, &r, 2).unwrap();
        let idx = frame_at(&frames, 0.1).unwrap();
        let psi = perturb::psi_of(&frames[idx].structure, &rec.reference).unwrap();
        assert!(pi0_ratio(&psi) < 1e-20);
        assert!(rec.psi_l2_after <= rec.psi_l2_before);
        assert!(rec.iterations > 0);
        assert!(rec.neighborhood_norm > 0.0);
    }

    #[test]
    fn constant_perturbation_recenters_to_zero() {
        let lat = Lattice::standard(1, 8).unwrap();
        let r = AHStructure::standard(&lat);
        let mut c = TangentPerturbation::zeros(&lat);
        let j = r.j().at(0).to_vec();
        let k = tensor::anti_part(&[0.0, 0.01, 0.02, 0.0], &j, 2);
        for p in 0..lat.num_points() {
            c.psi2.at_mut(p).copy_from_slice(&k);
        }
        let shifted = shift_reference(&r, &c).unwrap();
        let frames = vec![FlowState::new(shifted).unwrap()];
        let rec = recenter(&frames, 0.0, &r, &r, 0).unwrap();
        let psi = perturb::psi_of(&frames[0].structure, &rec.reference).unwrap();
        assert!(psi.max_abs() < 1e-8, "{}", psi.max_abs());
    }

    #[test]
    fn mean_zero_psi_leaves_reference_unchanged() {
        let lat = Lattice::standard(1, 8).unwrap();
        let r = AHStructure::standard(&lat);
        let frames = vec![FlowState::new(r.clone()).unwrap()];
        let rec = recenter(&frames, 0.0, &r, &r, 1).unwrap();
        assert_eq!(rec.reference, r);
        assert_eq!(rec.iterations, 0);
        assert_eq!(rec.neighborhood_norm, 0.0);
    }
}
