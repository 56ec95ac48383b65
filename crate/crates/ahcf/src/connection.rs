//! Levi-Civita and canonical connections and the curvature-type tensors of the flow.
//!
//! Coefficients are stored as `Γ^i_{jk}` with `∇_{∂_j} ∂_k = Γ^i_{jk} ∂_i`, so the
//! derivative index is the first lower slot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, LatticeField, Slot, CONNECTION, ENDO, FORM, RIEMANN, SCALAR};
use crate::structure::{standard_complex_structure, AHStructure};
use crate::tensor;

/// Tolerance on the defining residuals of the canonical connection.
pub const CANONICAL_TOL: f64 = 1e-8;

const UP_UP: &[Slot] = &[Slot::Up, Slot::Up];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    LeviCivita,
    Canonical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionField {
    pub coefficients: LatticeField,
    pub kind: ConnectionKind,
}

#[inline]
fn i3(i: usize, j: usize, k: usize, d: usize) -> usize {
    (i * d + j) * d + k
}

#[inline]
fn i4(i: usize, j: usize, k: usize, l: usize, d: usize) -> usize {
    ((i * d + j) * d + k) * d + l
}

/// Pointwise inverse metric `g^{ab}`.
pub fn inverse_metric(g: &LatticeField) -> Result<LatticeField> {
    let d = g.lattice().dim();
    for p in 0..g.lattice().num_points() {
        if tensor::inverse(g.at(p), d).is_none() {
            return Err(Error::NotPositiveDefinite { point: p });
        }
    }
    Ok(g.map1(UP_UP, |x, o| o.copy_from_slice(&tensor::inverse(x, d).expect("checked"))))
}

/// `g^{ka} g^{lb} ω_{ab}`.
fn raised_form(omega: &LatticeField, ginv: &LatticeField) -> LatticeField {
    let d = omega.lattice().dim();
    LatticeField::map(&[omega, ginv], UP_UP, |x, o| {
        o.copy_from_slice(&tensor::mul3(x[1], x[0], x[1], d))
    })
}

pub fn levi_civita(g: &LatticeField) -> Result<ConnectionField> {
    g.expect_valence(FORM, "metric")?;
    let ginv = inverse_metric(g)?;
    Ok(levi_civita_with(&lattice::gradient(g), &ginv))
}

fn levi_civita_with(dg: &LatticeField, ginv: &LatticeField) -> ConnectionField {
    let d = dg.lattice().dim();
    let coefficients = LatticeField::map(&[dg, ginv], CONNECTION, |x, o| {
        let (dg, gi) = (x[0], x[1]);
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    // Christoffel symbol of the first kind Γ_{l,jk}.
                    let c = 0.5 * (dg[i3(j, l, k, d)] + dg[i3(k, j, l, d)] - dg[i3(l, j, k, d)]);
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        o[i3(i, j, k, d)] += gi[i * d + l] * c;
                    }
                }
            }
        }
    });
    ConnectionField {
        coefficients,
        kind: ConnectionKind::LeviCivita,
    }
}

/// `∇T` with the new covariant slot first.
pub fn covariant_derivative(t: &LatticeField, c: &ConnectionField) -> LatticeField {
    covariant_derivative_with(t, &lattice::gradient(t), &c.coefficients)
}

fn covariant_derivative_with(t: &LatticeField, dt: &LatticeField, gamma: &LatticeField) -> LatticeField {
    let d = t.lattice().dim();
    let slots = t.valence().to_vec();
    let r = slots.len();
    let nc = t.components();
    LatticeField::map(&[t, dt, gamma], dt.valence(), |x, o| {
        let (tv, dtv, gm) = (x[0], x[1], x[2]);
        o.copy_from_slice(dtv);
        for k in 0..d {
            let out = &mut o[k * nc..(k + 1) * nc];
            for (s, slot) in slots.iter().enumerate() {
                let stride = d.pow((r - 1 - s) as u32);
                for c in 0..nc {
                    let digit = (c / stride) % d;
                    let base = c - digit * stride;
                    let mut acc = 0.0;
                    match slot {
                        Slot::Up => {
                            for m in 0..d {
                                acc += gm[i3(digit, k, m, d)] * tv[base + m * stride];
                            }
                            out[c] += acc;
                        }
                        Slot::Down => {
                            for m in 0..d {
                                acc += gm[i3(m, k, digit, d)] * tv[base + m * stride];
                            }
                            out[c] -= acc;
                        }
                    }
                }
            }
        }
    })
}

/// `T^i_{jk} = Γ^i_{jk} − Γ^i_{kj}`.
pub fn torsion(c: &ConnectionField) -> LatticeField {
    torsion_of(&c.coefficients)
}

fn torsion_of(gamma: &LatticeField) -> LatticeField {
    let d = gamma.lattice().dim();
    gamma.map1(CONNECTION, |g, o| {
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    o[i3(i, j, k, d)] = g[i3(i, j, k, d)] - g[i3(i, k, j, d)];
                }
            }
        }
    })
}

/// `R^i_{jkl} = ∂_k Γ^i_{lj} − ∂_l Γ^i_{kj} + Γ^i_{km} Γ^m_{lj} − Γ^i_{lm} Γ^m_{kj}`,
/// so that `R(∂_k, ∂_l) ∂_j = R^i_{jkl} ∂_i`.
pub fn curvature(c: &ConnectionField) -> LatticeField {
    let gamma = &c.coefficients;
    let d = gamma.lattice().dim();
    let dgam = lattice::gradient(gamma);
    let d3 = d * d * d;
    LatticeField::map(&[gamma, &dgam], RIEMANN, |x, o| {
        let (g, dg) = (x[0], x[1]);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let mut v = dg[k * d3 + i3(i, l, j, d)] - dg[l * d3 + i3(i, k, j, d)];
                        for m in 0..d {
                            v += g[i3(i, k, m, d)] * g[i3(m, l, j, d)]
                                - g[i3(i, l, m, d)] * g[i3(m, k, j, d)];
                        }
                        o[i4(i, j, k, l, d)] = v;
                    }
                }
            }
        }
    })
}

/// Residuals of the three defining properties of the canonical connection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CanonicalResiduals {
    /// `|∇g|` (equivalently `|∇ω|` once `∇J = 0`).
    pub metric: f64,
    /// `|∇J|`.
    pub complex: f64,
    /// `|T^{1,1}|`.
    pub torsion_11: f64,
}

impl CanonicalResiduals {
    pub fn max(&self) -> f64 {
        self.metric.max(self.complex).max(self.torsion_11)
    }
}

/// Derived quantities shared by the flow right-hand side.
pub(crate) struct Geometry {
    pub ginv: LatticeField,
    pub dj: LatticeField,
    pub levi_civita: ConnectionField,
    pub canonical: ConnectionField,
    pub residuals: CanonicalResiduals,
}

/// Orthonormal basis of skew matrices commuting with the standard `J`.
fn unitary_basis_std(d: usize) -> Vec<Vec<f64>> {
    let j = standard_complex_structure(d);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            let mut e = vec![0.0; d * d];
            e[a * d + b] = 1.0;
            e[b * d + a] = -1.0;
            let mut v = tensor::comm_part(&e, &j, d);
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-10 {
                basis.push(v.iter().map(|x| x / nrm).collect());
            }
        }
    }
    basis
}

/// Columns `e₁, J e₁, e₃, J e₃, …`, orthonormal for `g`.
fn adapted_frame(g: &[f64], j: &[f64], d: usize) -> Vec<f64> {
    let ip = |u: &[f64], v: &[f64]| -> f64 {
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += u[a] * g[a * d + b] * v[b];
            }
        }
        s
    };
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut candidate = 0;
    while cols.len() < d {
        let mut v = vec![0.0; d];
        v[candidate] = 1.0;
        candidate += 1;
        for u in &cols {
            let c = ip(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= c * ui;
            }
        }
        let nrm = ip(&v, &v).sqrt();
        if nrm < 1e-6 {
            continue;
        }
        let e: Vec<f64> = v.iter().map(|x| x / nrm).collect();
        let mut je: Vec<f64> = (0..d).map(|a| (0..d).map(|b| j[a * d + b] * e[b]).sum()).collect();
        // Re-orthonormalize: exact when J is compatible, robust when it nearly is.
        let c = ip(&je, &e);
        for (x, y) in je.iter_mut().zip(&e) {
            *x -= c * y;
        }
        for u in &cols {
            let c = ip(&je, u);
            for (x, y) in je.iter_mut().zip(u) {
                *x -= c * y;
            }
        }
        let nj = ip(&je, &je).sqrt();
        cols.push(e);
        cols.push(je.iter().map(|x| x / nj).collect());
    }
    let mut f = vec![0.0; d * d];
    for (c, col) in cols.iter().enumerate() {
        for a in 0..d {
            f[a * d + c] = col[a];
        }
    }
    f
}

/// `Φ(T)^i_{kj} = T^i_{kj} + J^a_k J^b_j T^i_{ab}`; vanishes iff `T^{1,1} = 0`.
fn torsion_11_map(t: &[f64], j: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for k in 0..d {
            for l in 0..d {
                let mut v = t[i3(i, k, l, d)];
                for a in 0..d {
                    let jak = j[a * d + k];
                    if jak == 0.0 {
                        continue;
                    }
                    for b in 0..d {
                        v += jak * j[b * d + l] * t[i3(i, a, b, d)];
                    }
                }
                out[i3(i, k, l, d)] = v;
            }
        }
    }
}

fn canonical_point(
    lc: &[f64],
    dj: &[f64],
    g: &[f64],
    j: &[f64],
    ustd: &[Vec<f64>],
    d: usize,
) -> Vec<f64> {
    let d3 = d * d * d;
    // ∇^{LC}_k J^p_m
    let mut nj = vec![0.0; d3];
    for k in 0..d {
        for p in 0..d {
            for m in 0..d {
                let mut v = dj[(k * d + p) * d + m];
                for q in 0..d {
                    v += lc[i3(p, k, q, d)] * j[q * d + m] - lc[i3(q, k, m, d)] * j[p * d + q];
                }
                nj[(k * d + p) * d + m] = v;
            }
        }
    }
    // Γ = Γ^{LC} − ½ J ∇^{LC} J
    let mut gam = lc.to_vec();
    for k in 0..d {
        for i in 0..d {
            for m in 0..d {
                let mut v = 0.0;
                for p in 0..d {
                    v += j[i * d + p] * nj[(k * d + p) * d + m];
                }
                gam[i3(i, k, m, d)] -= 0.5 * v;
            }
        }
    }
    // Unitary correction B_k = Σ b_{kα} U_α killing T^{1,1}.
    let frame = adapted_frame(g, j, d);
    let frame_inv = tensor::inverse(&frame, d).expect("frame is invertible");
    let units: Vec<Vec<f64>> = ustd.iter().map(|u| tensor::mul3(&frame, u, &frame_inv, d)).collect();
    let nu = units.len();
    let mut t0 = vec![0.0; d3];
    let t = torsion_point(&gam, d);
    torsion_11_map(&t, j, d, &mut t0);
    if tensor::max_abs(&t0) == 0.0 {
        return gam;
    }
    let mut cols = DMatrix::<f64>::zeros(d3, d * nu);
    let mut bcoef = vec![0.0; d3];
    let mut phi = vec![0.0; d3];
    for k in 0..d {
        for (alpha, u) in units.iter().enumerate() {
            bcoef.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                for m in 0..d {
                    bcoef[i3(i, k, m, d)] = u[i * d + m];
                }
            }
            torsion_11_map(&torsion_point(&bcoef, d), j, d, &mut phi);
            for (r, v) in phi.iter().enumerate() {
                cols[(r, k * nu + alpha)] = *v;
            }
        }
    }
    let rhs = DVector::from_iterator(d3, t0.iter().map(|v| -v));
    let normal = cols.transpose() * &cols;
    let proj = cols.transpose() * rhs;
    let sol = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&proj),
        None => normal
            .svd(true, true)
            .solve(&proj, 1e-13)
            .unwrap_or_else(|_| DVector::zeros(d * nu)),
    };
    for k in 0..d {
        for (alpha, u) in units.iter().enumerate() {
            let b = sol[k * nu + alpha];
            for i in 0..d {
                for m in 0..d {
                    gam[i3(i, k, m, d)] += b * u[i * d + m];
                }
            }
        }
    }
    gam
}

fn torsion_point(g: &[f64], d: usize) -> Vec<f64> {
    let mut t = vec![0.0; d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                t[i3(i, j, k, d)] = g[i3(i, j, k, d)] - g[i3(i, k, j, d)];
            }
        }
    }
    t
}

/// Build Levi-Civita and canonical connections for `(g, J)` without
/// validating the structure, and measure the canonical residuals.
pub(crate) fn geometry(g: &LatticeField, j: &LatticeField) -> Result<Geometry> {
    let d = g.lattice().dim();
    let ginv = inverse_metric(g)?;
    let dg = lattice::gradient(g);
    let dj = lattice::gradient(j);
    let lc = levi_civita_with(&dg, &ginv);
    let ustd = unitary_basis_std(d);
    let gamma = LatticeField::map(&[&lc.coefficients, &dj, g, j], CONNECTION, |x, o| {
        o.copy_from_slice(&canonical_point(x[0], x[1], x[2], x[3], &ustd, d))
    });
    let canonical = ConnectionField {
        coefficients: gamma,
        kind: ConnectionKind::Canonical,
    };
    let ng = covariant_derivative_with(g, &dg, &canonical.coefficients);
    let njf = covariant_derivative_with(j, &dj, &canonical.coefficients);
    let t = torsion_of(&canonical.coefficients);
    let t11 = LatticeField::map(&[&t, j], CONNECTION, |x, o| torsion_11_map(x[0], x[1], d, o));
    let residuals = CanonicalResiduals {
        metric: ng.max_abs(),
        complex: njf.max_abs(),
        torsion_11: 0.5 * t11.max_abs(),
    };
    Ok(Geometry {
        ginv,
        dj,
        levi_civita: lc,
        canonical,
        residuals,
    })
}

/// Canonical connection `∇^{LC} − ½ J ∇^{LC} J + B` with `B` a pointwise
/// unitary correction removing the `(1,1)` torsion, verified a posteriori.
pub fn canonical_connection(s: &AHStructure) -> Result<ConnectionField> {
    let (c, r) = canonical_connection_with_residuals(s)?;
    if r.max() > CANONICAL_TOL {
        return Err(Error::ConnectionConstruction {
            metric: r.metric,
            complex: r.complex,
            torsion: r.torsion_11,
        });
    }
    Ok(c)
}

pub fn canonical_connection_with_residuals(s: &AHStructure) -> Result<(ConnectionField, CanonicalResiduals)> {
    let geo = geometry(s.g(), s.j())?;
    Ok((geo.canonical, geo.residuals))
}

/// Residuals of `∇g`, `∇J`, `T^{1,1}` for an arbitrary connection.
pub fn defining_residuals(s: &AHStructure, c: &ConnectionField) -> CanonicalResiduals {
    let d = s.lattice().dim();
    let t = torsion(c);
    let t11 = LatticeField::map(&[&t, s.j()], CONNECTION, |x, o| torsion_11_map(x[0], x[1], d, o));
    CanonicalResiduals {
        metric: covariant_derivative(s.g(), c).max_abs(),
        complex: covariant_derivative(s.j(), c).max_abs(),
        torsion_11: 0.5 * t11.max_abs(),
    }
}

/// `S_{ij} = ½ (ω⁻¹)^{kl} Ω_{klij}`, computed as `−½ ω^{kl} R^m_{ikl} g_{mj}` with
/// `ω^{kl}` the metric raising of `ω`.
pub fn s_tensor(s: &AHStructure, c: &ConnectionField) -> Result<LatticeField> {
    let ginv = inverse_metric(s.g())?;
    let d = s.lattice().dim();
    for p in 0..s.lattice().num_points() {
        if tensor::to_mat(s.omega().at(p), d).determinant().abs() < 1e-14 {
            return Err(Error::DegenerateForm { point: p });
        }
    }
    Ok(s_from_curvature(&curvature(c), s.g(), &raised_form(s.omega(), &ginv)))
}

fn s_from_curvature(r: &LatticeField, g: &LatticeField, wup: &LatticeField) -> LatticeField {
    let d = g.lattice().dim();
    LatticeField::map(&[r, g, wup], FORM, |x, o| {
        let (r, g, w) = (x[0], x[1], x[2]);
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        let wkl = w[k * d + l];
                        if wkl == 0.0 {
                            continue;
                        }
                        for m in 0..d {
                            v += wkl * r[i4(m, i, k, l, d)] * g[m * d + j];
                        }
                    }
                }
                o[i * d + j] = -0.5 * v;
            }
        }
    })
}

/// Ricci tensor `Ric_{jl} = R^k_{jkl}` of a curvature field.
pub fn ricci(r: &LatticeField) -> LatticeField {
    let d = r.lattice().dim();
    r.map1(FORM, |x, o| {
        for j in 0..d {
            for l in 0..d {
                o[j * d + l] = (0..d).map(|k| x[i4(k, j, k, l, d)]).sum();
            }
        }
    })
}

/// Ricci form `ρ(X, Y) = Ric(JX, Y)` of the Levi-Civita connection.
pub fn ricci_form(s: &AHStructure) -> Result<LatticeField> {
    let d = s.lattice().dim();
    let ric = ricci(&curvature(&levi_civita(s.g())?));
    Ok(LatticeField::map(&[&ric, s.j()], FORM, |x, o| {
        o.copy_from_slice(&tensor::mul(&tensor::transpose(x[1], d), x[0], d))
    }))
}

pub fn scalar_curvature(g: &LatticeField) -> Result<LatticeField> {
    let ginv = inverse_metric(g)?;
    let ric = ricci(&curvature(&levi_civita(g)?));
    Ok(LatticeField::map(&[&ric, &ginv], SCALAR, |x, o| {
        o[0] = x[0].iter().zip(x[1]).map(|(a, b)| a * b).sum();
    }))
}

/// `N^i_{jk} = J^p_j ∂_p J^i_k − J^p_k ∂_p J^i_j − J^i_p ∂_j J^p_k + J^i_p ∂_k J^p_j`.
pub fn nijenhuis(j: &LatticeField) -> Result<LatticeField> {
    j.expect_valence(ENDO, "complex structure")?;
    Ok(nijenhuis_with(j, &lattice::gradient(j)))
}

fn nijenhuis_with(j: &LatticeField, dj: &LatticeField) -> LatticeField {
    let d = j.lattice().dim();
    LatticeField::map(&[j, dj], CONNECTION, |x, o| {
        let (jm, dj) = (x[0], x[1]);
        let dj_at = |p: usize, a: usize, b: usize| dj[(p * d + a) * d + b];
        for i in 0..d {
            for a in 0..d {
                for b in 0..d {
                    let mut v = 0.0;
                    for p in 0..d {
                        v += jm[p * d + a] * dj_at(p, i, b) - jm[p * d + b] * dj_at(p, i, a)
                            - jm[i * d + p] * dj_at(a, p, b)
                            + jm[i * d + p] * dj_at(b, p, a);
                    }
                    o[i3(i, a, b, d)] = v;
                }
            }
        }
    })
}

/// `𝒦^i_j = ω^{kl} ∇_k N^i_{lj}` with the canonical connection.
pub fn k_tensor(s: &AHStructure, c: &ConnectionField) -> Result<LatticeField> {
    let ginv = inverse_metric(s.g())?;
    let n = nijenhuis(s.j())?;
    Ok(k_from(&n, c, &raised_form(s.omega(), &ginv)))
}

fn k_from(n: &LatticeField, c: &ConnectionField, wup: &LatticeField) -> LatticeField {
    let d = n.lattice().dim();
    let dn = covariant_derivative(n, c);
    LatticeField::map(&[&dn, wup], ENDO, |x, o| {
        let (dn, w) = (x[0], x[1]);
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        v += w[k * d + l] * dn[i4(k, i, l, j, d)];
                    }
                }
                o[i * d + j] = v;
            }
        }
    })
}

/// `H(X, Y) = ½[ω(J̇X, JY) + ω(JX, J̇Y)]`.
pub fn h_term(s: &AHStructure, j_dot: &LatticeField) -> Result<LatticeField> {
    j_dot.expect_valence(ENDO, "j_dot")?;
    j_dot.expect_lattice(s.lattice(), "j_dot")?;
    Ok(h_from(s.omega(), s.j(), j_dot))
}

fn h_from(omega: &LatticeField, j: &LatticeField, jd: &LatticeField) -> LatticeField {
    let d = omega.lattice().dim();
    LatticeField::map(&[omega, j, jd], FORM, |x, o| {
        let (w, jm, jd) = (x[0], x[1], x[2]);
        let a = tensor::mul3(&tensor::transpose(jd, d), w, jm, d);
        let b = tensor::mul3(&tensor::transpose(jm, d), w, jd, d);
        for i in 0..d * d {
            o[i] = 0.5 * (a[i] + b[i]);
        }
    })
}

/// Coefficient table for a quadratic hook term.
///
/// For `Q` the coefficients weight `g_{pq} ω^{ab} T^p_{ia} T^q_{jb}`,
/// `ω_{pq} g^{ab} T^p_{ia} T^q_{jb}` and `τ_a T^a_{ij}` (with `τ_p = T^a_{ap}`),
/// and the sum is projected to type `(1,1)`. For `𝓗` they weight
/// `g^{ab} N^i_{ac} N^c_{bj}` and `ω^{ab} N^i_{ac} N^c_{bj}`, projected to the
/// part anti-commuting with `J`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadraticHook {
    pub coefficients: Vec<f64>,
}

pub const Q_TERMS: usize = 3;
pub const NIJENHUIS_TERMS: usize = 2;

impl QuadraticHook {
    pub fn new(coefficients: Vec<f64>) -> QuadraticHook {
        QuadraticHook { coefficients }
    }

    fn check(&self, len: usize, what: &str) -> Result<()> {
        if self.coefficients.len() != len || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{what} hook needs {len} finite coefficients, got {:?}",
                self.coefficients
            )));
        }
        Ok(())
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|c| *c == 0.0)
    }
}

/// Torsion hook `Q`, a `(1,1)` form quadratic in `T`.
pub fn q_term(s: &AHStructure, t: &LatticeField, hook: &QuadraticHook) -> Result<LatticeField> {
    hook.check(Q_TERMS, "Q")?;
    let ginv = inverse_metric(s.g())?;
    Ok(q_from(s, t, &ginv, hook))
}

pub(crate) fn q_from(s: &AHStructure, t: &LatticeField, ginv: &LatticeField, hook: &QuadraticHook) -> LatticeField {
    let d = s.lattice().dim();
    let wup = raised_form(s.omega(), ginv);
    let c = hook.coefficients.clone();
    LatticeField::map(&[t, s.g(), s.omega(), ginv, &wup, s.j()], FORM, move |x, o| {
        let (t, g, w, gi, wu, j) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        let tau: Vec<f64> = (0..d).map(|p| (0..d).map(|a| t[i3(a, a, p, d)]).sum()).collect();
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            for jj in 0..d {
                let mut q1 = 0.0;
                let mut q2 = 0.0;
                for p in 0..d {
                    for qq in 0..d {
                        for a in 0..d {
                            for b in 0..d {
                                let tt = t[i3(p, i, a, d)] * t[i3(qq, jj, b, d)];
                                q1 += g[p * d + qq] * wu[a * d + b] * tt;
                                q2 += w[p * d + qq] * gi[a * d + b] * tt;
                            }
                        }
                    }
                }
                let q3: f64 = (0..d).map(|a| tau[a] * t[i3(a, i, jj, d)]).sum();
                q[i * d + jj] = c[0] * q1 + c[1] * q2 + c[2] * q3;
            }
        }
        let pulled = tensor::pullback(&q, j, d);
        for k in 0..d * d {
            o[k] = 0.5 * (q[k] + pulled[k]);
        }
    })
}

/// Nijenhuis hook `𝓗`, an endomorphism quadratic in `N` anti-commuting with `J`.
pub fn nijenhuis_hook_term(s: &AHStructure, n: &LatticeField, hook: &QuadraticHook) -> Result<LatticeField> {
    hook.check(NIJENHUIS_TERMS, "𝓗")?;
    let ginv = inverse_metric(s.g())?;
    Ok(nh_from(s, n, &ginv, hook))
}

pub(crate) fn nh_from(s: &AHStructure, n: &LatticeField, ginv: &LatticeField, hook: &QuadraticHook) -> LatticeField {
    let d = s.lattice().dim();
    let wup = raised_form(s.omega(), ginv);
    let c = hook.coefficients.clone();
    LatticeField::map(&[n, ginv, &wup, s.j()], ENDO, move |x, o| {
        let (nn, gi, wu, j) = (x[0], x[1], x[2], x[3]);
        let mut e = vec![0.0; d * d];
        for i in 0..d {
            for jj in 0..d {
                let mut e1 = 0.0;
                let mut e2 = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        let mut nn2 = 0.0;
                        for cc in 0..d {
                            nn2 += nn[i3(i, a, cc, d)] * nn[i3(cc, b, jj, d)];
                        }
                        e1 += gi[a * d + b] * nn2;
                        e2 += wu[a * d + b] * nn2;
                    }
                }
                e[i * d + jj] = c[0] * e1 + c[1] * e2;
            }
        }
        o.copy_from_slice(&tensor::anti_part(&e, j, d));
    })
}

/// `(dω)_{abc} = ∂_a ω_{bc} + ∂_b ω_{ca} + ∂_c ω_{ab}`.
pub fn exterior_derivative_2form(omega: &LatticeField) -> LatticeField {
    let d = omega.lattice().dim();
    let dw = lattice::gradient(omega);
    dw.map1(&[Slot::Down, Slot::Down, Slot::Down], |x, o| {
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    o[i3(a, b, c, d)] = x[i3(a, b, c, d)] + x[i3(b, c, a, d)] + x[i3(c, a, b, d)];
                }
            }
        }
    })
}

/// Integrable `J` and closed `ω`, measured spectrally.
pub fn is_kahler(s: &AHStructure, tol: f64) -> Result<bool> {
    Ok(nijenhuis(s.j())?.max_abs() < tol && exterior_derivative_2form(s.omega()).max_abs() < tol)
}

/// Curvature of the canonical connection with its torsion, `S` and the
/// Riemannian scalar curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureBundle {
    pub riemann: LatticeField,
    pub torsion: LatticeField,
    pub s_form: LatticeField,
    pub scalar: LatticeField,
}

pub fn curvature_bundle(s: &AHStructure) -> Result<CurvatureBundle> {
    let c = canonical_connection(s)?;
    let riemann = curvature(&c);
    let ginv = inverse_metric(s.g())?;
    let s_form = s_from_curvature(&riemann, s.g(), &raised_form(s.omega(), &ginv));
    Ok(CurvatureBundle {
        torsion: torsion(&c),
        s_form,
        scalar: scalar_curvature(s.g())?,
        riemann,
    })
}

/// Sup of the pointwise `g`-norm of a tensor field.
pub(crate) fn sup_norm(f: &LatticeField, g: &LatticeField) -> Result<f64> {
    Ok(lattice::norms(f, g, 0)?.sup_by_order[0])
}

/// `max(|Rm|, |T|², |∇T|)` with Levi-Civita curvature and derivative and the
/// canonical torsion.
pub fn singularity_gauge(s: &AHStructure) -> Result<f64> {
    let geo = geometry(s.g(), s.j())?;
    gauge_from(s.g(), &geo)
}

pub(crate) fn gauge_from(g: &LatticeField, geo: &Geometry) -> Result<f64> {
    let rm = sup_norm(&curvature(&geo.levi_civita), g)?;
    let t = torsion(&geo.canonical);
    let tn = sup_norm(&t, g)?;
    let dt = sup_norm(&covariant_derivative(&t, &geo.levi_civita), g)?;
    Ok(rm.max(tn * tn).max(dt))
}

/// Pieces of the flow right-hand side for `(g, J)`.
pub(crate) struct FlowTerms {
    pub s_form: LatticeField,
    pub k: LatticeField,
    pub nijenhuis: LatticeField,
    pub torsion: LatticeField,
    pub geometry: Geometry,
}

pub(crate) fn flow_terms(g: &LatticeField, j: &LatticeField, omega: &LatticeField) -> Result<FlowTerms> {
    let geo = geometry(g, j)?;
    let wup = raised_form(omega, &geo.ginv);
    let r = curvature(&geo.canonical);
    let s_form = s_from_curvature(&r, g, &wup);
    let n = nijenhuis_with(j, &geo.dj);
    let k = k_from(&n, &geo.canonical, &wup);
    Ok(FlowTerms {
        s_form,
        k,
        torsion: torsion(&geo.canonical),
        nijenhuis: n,
        geometry: geo,
    })
}

pub(crate) fn h_of(omega: &LatticeField, j: &LatticeField, jd: &LatticeField) -> LatticeField {
    h_from(omega, j, jd)
}
