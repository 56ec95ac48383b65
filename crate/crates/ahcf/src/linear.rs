//! Linearized operator at a flat Kähler structure: Laplacians, Weitzenböck
//! checks, spectrum, kernel and the kernel projection.
//!
//! The background has constant `g = Id` and a constant orthogonal `J̃`. With
//! `R = −Σ ∂_a²` the coordinate Laplacian, the complex rough Laplacian is
//! `∇*∇ = ½R`, the Hodge Laplacian on 2-forms is `Δ_d = R` and the
//! `∂̄`-Laplacian on anti-commuting endomorphisms is `Δ_∂̄ = ½R`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, Lattice, LatticeField, Slot, ENDO, FORM, VECTOR};
use crate::perturb::{forced_form_point, TangentPerturbation, TANGENT_TOL};
use crate::structure::{self, AHStructure};
use crate::tensor;

/// Eigenvalues below this magnitude count as kernel.
pub const KERNEL_TOL: f64 = 1e-7;
/// Largest dense problem dimension accepted.
pub const DENSE_MAX_DIM: usize = 4096;
const NYQUIST_SHIFT: f64 = 10.0;

/// `R u = −Σ_a ∂_a² u`, componentwise.
pub fn rough_laplacian(u: &LatticeField) -> LatticeField {
    let lat = u.lattice().clone();
    lattice::apply_symbol(u, |m| {
        let k2: f64 = m.iter().map(|v| lat.wavenumber(*v).powi(2)).sum();
        Complex64::new(k2, 0.0)
    })
}

/// Complex rough Laplacian `−Σ_k (∇_{z_k} ∇_{z̄_k} + ∇_{z̄_k} ∇_{z_k})`, with
/// `z_k` the complex coordinates of a frame adapted to `J̃`.
pub fn complex_rough_laplacian(u: &LatticeField, j: &[f64]) -> LatticeField {
    let lat = u.lattice().clone();
    let d = lat.dim();
    let frame = adapted_frame(j, d);
    lattice::apply_symbol(u, |m| {
        let k: Vec<f64> = m.iter().map(|v| lat.wavenumber(*v)).collect();
        let mut acc = Complex64::new(0.0, 0.0);
        for c in 0..d / 2 {
            let dx = Complex64::new(0.0, (0..d).map(|a| k[a] * frame[a * d + 2 * c]).sum());
            let dy = Complex64::new(0.0, (0..d).map(|a| k[a] * frame[a * d + 2 * c + 1]).sum());
            let dz = (dx - Complex64::i() * dy) * 0.5;
            let dzb = (dx + Complex64::i() * dy) * 0.5;
            // g^{k k̄} = 2 for the hermitian form of the Euclidean metric.
            acc -= (dz * dzb + dzb * dz) * 2.0 * 0.5;
        }
        acc
    })
}

/// Orthonormal frame `e₁, J̃e₁, e₃, J̃e₃, …` for constant orthogonal `J̃`.
fn adapted_frame(j: &[f64], d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut cand = 0;
    while cols.len() < d && cand < d {
        let mut v = vec![0.0; d];
        v[cand] = 1.0;
        cand += 1;
        for u in &cols {
            let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nrm < 1e-8 {
            continue;
        }
        let e: Vec<f64> = v.iter().map(|a| a / nrm).collect();
        let je: Vec<f64> = (0..d).map(|a| (0..d).map(|b| j[a * d + b] * e[b]).sum()).collect();
        cols.push(e);
        cols.push(je);
    }
    let mut f = vec![0.0; d * d];
    for (c, col) in cols.iter().enumerate() {
        for a in 0..d {
            f[a * d + c] = col[a];
        }
    }
    f
}

fn derivatives(f: &LatticeField) -> Vec<LatticeField> {
    let d = f.lattice().dim();
    (0..d)
        .map(|a| lattice::spectral_derivative(f, a).expect("axis in range"))
        .collect()
}

fn down(r: usize) -> Vec<Slot> {
    vec![Slot::Down; r]
}

fn antisymmetric_residual(h: &LatticeField) -> f64 {
    let d = h.lattice().dim();
    h.sup(|x| {
        let t = tensor::transpose(x, d);
        t.iter().zip(x).fold(0.0_f64, |m, (a, b)| m.max((a + b).abs()))
    })
}

/// Exterior derivative of a 1-form: `(dα)_{ab} = ∂_a α_b − ∂_b α_a`.
pub fn d1(alpha: &LatticeField) -> LatticeField {
    let d = alpha.lattice().dim();
    let da = derivatives(alpha);
    let refs: Vec<&LatticeField> = da.iter().collect();
    LatticeField::map(&refs, FORM, |x, o| {
        for a in 0..d {
            for b in 0..d {
                o[a * d + b] = x[a][b] - x[b][a];
            }
        }
    })
}

/// `(dβ)_{abc} = ∂_a β_{bc} − ∂_b β_{ac} + ∂_c β_{ab}`.
pub fn d2(beta: &LatticeField) -> LatticeField {
    let d = beta.lattice().dim();
    let db = derivatives(beta);
    let refs: Vec<&LatticeField> = db.iter().collect();
    LatticeField::map(&refs, &down(3), |x, o| {
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    o[(a * d + b) * d + c] = x[a][b * d + c] - x[b][a * d + c] + x[c][a * d + b];
                }
            }
        }
    })
}

/// Codifferential of a `p`-form: `(δβ)_{a…} = −Σ_c ∂_c β_{c a…}`.
pub fn codifferential(beta: &LatticeField) -> LatticeField {
    let d = beta.lattice().dim();
    let r = beta.rank();
    let inner = d.pow(r as u32 - 1);
    let db = derivatives(beta);
    let refs: Vec<&LatticeField> = db.iter().collect();
    LatticeField::map(&refs, &down(r - 1), |x, o| {
        for c in 0..d {
            for i in 0..inner {
                o[i] -= x[c][c * inner + i];
            }
        }
    })
}

/// `Δ_d = dδ + δd` on 2-forms.
pub fn hodge_laplacian(h: &LatticeField) -> Result<LatticeField> {
    h.expect_valence(FORM, "2-form")?;
    let res = antisymmetric_residual(h);
    if res > TANGENT_TOL * h.max_abs().max(1.0) {
        return Err(Error::Residual {
            what: "2-form antisymmetry",
            residual: res,
            tolerance: TANGENT_TOL,
        });
    }
    Ok(hodge_unchecked(h))
}

fn hodge_unchecked(h: &LatticeField) -> LatticeField {
    d1(&codifferential(h)).add(&codifferential(&d2(h)))
}

/// Which first-order operators build the `∂̄` complex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DbarVariant {
    /// Type projectors applied, the genuine `∂̄`.
    Projected,
    /// Full derivatives without projectors, a deliberately wrong operator.
    Full,
}

fn p_anti(m: &LatticeField, j: &[f64]) -> LatticeField {
    let d = m.lattice().dim();
    m.map1(ENDO, |x, o| o.copy_from_slice(&tensor::anti_part(x, j, d)))
}

/// `P₂β(X, Y) = ¼[β(X,Y) + J̃β(J̃X,Y) + J̃β(X,J̃Y) − β(J̃X,J̃Y)]` on vector-valued 2-forms.
fn p2(beta: &LatticeField, j: &[f64]) -> LatticeField {
    let d = beta.lattice().dim();
    beta.map1(&[Slot::Up, Slot::Down, Slot::Down], |x, o| {
        let at = |i: usize, a: usize, b: usize| x[(i * d + a) * d + b];
        for i in 0..d {
            for a in 0..d {
                for b in 0..d {
                    let mut v = at(i, a, b);
                    for c in 0..d {
                        let jca = j[c * d + a];
                        let jcb = j[c * d + b];
                        let jic = j[i * d + c];
                        for e in 0..d {
                            v += jic * (at(c, e, b) * j[e * d + a] + at(c, a, e) * j[e * d + b]);
                        }
                        for e in 0..d {
                            v -= at(i, c, e) * jca * j[e * d + b];
                        }
                        let _ = jcb;
                    }
                    o[(i * d + a) * d + b] = 0.25 * v;
                }
            }
        }
    })
}

/// `(∂V)^i_j = ∂_j V^i`.
fn grad_vector(v: &LatticeField) -> LatticeField {
    let d = v.lattice().dim();
    let dv = derivatives(v);
    let refs: Vec<&LatticeField> = dv.iter().collect();
    LatticeField::map(&refs, ENDO, |x, o| {
        for i in 0..d {
            for jj in 0..d {
                o[i * d + jj] = x[jj][i];
            }
        }
    })
}

/// `(div K)^i = Σ_j ∂_j K^i_j`.
fn divergence(k: &LatticeField) -> LatticeField {
    let d = k.lattice().dim();
    let dk = derivatives(k);
    let refs: Vec<&LatticeField> = dk.iter().collect();
    LatticeField::map(&refs, VECTOR, |x, o| {
        for i in 0..d {
            o[i] = (0..d).map(|jj| x[jj][i * d + jj]).sum();
        }
    })
}

/// `(d^∇K)^i_{ab} = ∂_a K^i_b − ∂_b K^i_a`.
fn d_nabla(k: &LatticeField) -> LatticeField {
    let d = k.lattice().dim();
    let dk = derivatives(k);
    let refs: Vec<&LatticeField> = dk.iter().collect();
    LatticeField::map(&refs, &[Slot::Up, Slot::Down, Slot::Down], |x, o| {
        for i in 0..d {
            for a in 0..d {
                for b in 0..d {
                    o[(i * d + a) * d + b] = x[a][i * d + b] - x[b][i * d + a];
                }
            }
        }
    })
}

/// Adjoint of `d^∇` for the form inner product `½ Σ_{ab}`: `−Σ_a ∂_a β^i_{ab}`.
fn d_nabla_adjoint(beta: &LatticeField) -> LatticeField {
    let d = beta.lattice().dim();
    let db = derivatives(beta);
    let refs: Vec<&LatticeField> = db.iter().collect();
    LatticeField::map(&refs, ENDO, |x, o| {
        for i in 0..d {
            for b in 0..d {
                o[i * d + b] = -(0..d).map(|a| x[a][(i * d + a) * d + b]).sum::<f64>();
            }
        }
    })
}

fn dbar_laplacian_variant(k: &LatticeField, j: &[f64], variant: DbarVariant) -> LatticeField {
    match variant {
        DbarVariant::Projected => {
            let first = p_anti(&grad_vector(&divergence(k).scale(-1.0)), j);
            let second = d_nabla_adjoint(&p2(&d_nabla(k), j));
            first.add(&second)
        }
        DbarVariant::Full => {
            let first = grad_vector(&divergence(k).scale(-1.0));
            let second = d_nabla_adjoint(&d_nabla(k));
            first.add(&second)
        }
    }
}

fn constant_j(background: &AHStructure) -> Vec<f64> {
    background.j().at(0).to_vec()
}

/// `Δ_∂̄ = ∂̄∂̄* + ∂̄*∂̄` on endomorphisms anti-commuting with `J̃`.
pub fn dbar_laplacian(k: &LatticeField, background: &AHStructure) -> Result<LatticeField> {
    k.expect_valence(ENDO, "endomorphism")?;
    check_background(background)?;
    let j = constant_j(background);
    let d = background.lattice().dim();
    let anti = k.sup(|x| {
        let a = tensor::mul(x, &j, d);
        let b = tensor::mul(&j, x, d);
        a.iter().zip(&b).fold(0.0_f64, |m, (p, q)| m.max((p + q).abs()))
    });
    if anti > TANGENT_TOL * k.max_abs().max(1.0) {
        return Err(Error::Residual {
            what: "K J̃ + J̃ K",
            residual: anti,
            tolerance: TANGENT_TOL,
        });
    }
    Ok(dbar_laplacian_variant(k, &j, DbarVariant::Projected))
}

fn check_background(background: &AHStructure) -> Result<()> {
    if !background.is_constant(1e-12) {
        return Err(Error::InvalidInput("linear operator needs a constant background".into()));
    }
    let d = background.lattice().dim();
    let g = background.g().at(0);
    let id = tensor::identity(d);
    if g.iter().zip(&id).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::InvalidInput("linear operator needs the Euclidean background metric".into()));
    }
    if !structure::check_structure(background).passes(structure::CONSTRUCTION_TOL) {
        return Err(Error::InvalidInput("background is not a compatible structure".into()));
    }
    Ok(())
}

/// Worst residuals of the flat Weitzenböck identities over random fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeitzenbockReport {
    /// `Δ_d − 2∇*∇` on `(1,1)` forms.
    pub form_11: f64,
    /// `Δ_d − 2∇*∇` on `(2,0)+(0,2)` forms.
    pub form_20: f64,
    /// `Δ_∂̄ − ∇*∇` on anti-commuting endomorphisms.
    pub endo: f64,
    pub trials: usize,
}

impl WeitzenbockReport {
    pub fn max(&self) -> f64 {
        self.form_11.max(self.form_20).max(self.endo)
    }
}

fn weitzenbock_with(background: &AHStructure, trials: usize, seed: u64, variant: DbarVariant) -> Result<WeitzenbockReport> {
    check_background(background)?;
    let lat = background.lattice();
    let j = constant_j(background);
    let hi = ((lat.points_per_axis() - 1) / 2).clamp(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = WeitzenbockReport {
        form_11: 0.0,
        form_20: 0.0,
        endo: 0.0,
        trials,
    };
    let d = lat.dim();
    for _ in 0..trials {
        let raw = lattice::band_limited_field(lat, FORM, 0, hi, &mut rng)?;
        let h = raw.map1(FORM, |x, o| {
            for a in 0..d {
                for b in 0..d {
                    o[a * d + b] = 0.5 * (x[a * d + b] - x[b * d + a]);
                }
            }
        });
        let h11 = structure::form_part_11(&h, background.j());
        let h20 = h.sub(&h11);
        let raw_k = lattice::band_limited_field(lat, ENDO, 0, hi, &mut rng)?;
        let k = p_anti(&raw_k, &j);
        let w = |f: &LatticeField| hodge_unchecked(f).sub(&complex_rough_laplacian(f, &j).scale(2.0)).max_abs();
        rep.form_11 = rep.form_11.max(w(&h11));
        rep.form_20 = rep.form_20.max(w(&h20));
        let e = dbar_laplacian_variant(&k, &j, variant)
            .sub(&complex_rough_laplacian(&k, &j))
            .max_abs();
        rep.endo = rep.endo.max(e);
    }
    Ok(rep)
}

/// Residuals of `Δ_d = 2∇*∇` and `Δ_∂̄ = ∇*∇` on random band-limited fields.
pub fn weitzenbock_residual(background: &AHStructure, trials: usize, seed: u64) -> Result<WeitzenbockReport> {
    weitzenbock_with(background, trials, seed, DbarVariant::Projected)
}

/// Same check with the `∂̄` projectors removed; the endomorphism residual must be large.
pub fn weitzenbock_negative_control(background: &AHStructure, trials: usize, seed: u64) -> Result<WeitzenbockReport> {
    weitzenbock_with(background, trials, seed, DbarVariant::Full)
}

/// `𝓛(ψ₁, ψ₂) = (−Δ_d ψ₁ + 2(s/n) ψ₁, −2Δ_∂̄ ψ₂ + 2(s/n) ψ₂)` at a flat background.
///
/// The factor 2 on the endomorphism part makes both blocks equal to `−R`, so
/// `𝓛` preserves the tangent space and the gap is the first Laplacian eigenvalue.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    background: AHStructure,
    s: f64,
    j: Vec<f64>,
    fiber: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LinearOperator {
    pub fn new(background: &AHStructure, scalar_curvature: f64) -> Result<LinearOperator> {
        check_background(background)?;
        if !scalar_curvature.is_finite() {
            return Err(Error::InvalidInput("scalar curvature parameter must be finite".into()));
        }
        let j = constant_j(background);
        let w = background.omega().at(0).to_vec();
        let fiber = fiber_basis(&j, &w, background.lattice().dim());
        Ok(LinearOperator {
            background: background.clone(),
            s: scalar_curvature,
            j,
            fiber,
        })
    }

    pub fn background(&self) -> &AHStructure {
        &self.background
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.background.lattice()
    }

    pub fn scalar_curvature(&self) -> f64 {
        self.s
    }

    /// Dimension of the tangent fiber, `3n²`.
    pub fn fiber_dim(&self) -> usize {
        self.fiber.len()
    }

    pub fn dim(&self) -> usize {
        self.fiber.len() * self.lattice().num_points()
    }

    pub fn apply(&self, psi: &TangentPerturbation) -> Result<TangentPerturbation> {
        psi.psi1.expect_lattice(self.lattice(), "ψ₁")?;
        psi.psi1.expect_valence(FORM, "ψ₁")?;
        psi.psi2.expect_valence(ENDO, "ψ₂")?;
        psi.check(&self.background)?;
        Ok(self.apply_unchecked(psi))
    }

    pub(crate) fn apply_unchecked(&self, psi: &TangentPerturbation) -> TangentPerturbation {
        let shift = 2.0 * self.s / self.lattice().n() as f64;
        let psi1 = hodge_unchecked(&psi.psi1).scale(-1.0).axpy(shift, &psi.psi1);
        let psi2 = dbar_laplacian_variant(&psi.psi2, &self.j, DbarVariant::Projected)
            .scale(-2.0)
            .axpy(shift, &psi.psi2);
        TangentPerturbation { psi1, psi2 }
    }

    /// `⟨𝓛u, u⟩` in `L²`.
    pub fn quadratic_form(&self, u: &TangentPerturbation) -> Result<f64> {
        Ok(self.apply(u)?.inner(u))
    }

    /// Coefficients of `ψ` in the orthonormal basis `F_α δ_p / √(cell volume)`.
    pub fn to_coefficients(&self, psi: &TangentPerturbation) -> Vec<f64> {
        let m = self.fiber.len();
        let np = self.lattice().num_points();
        let sq = self.lattice().cell_volume().sqrt();
        let mut c = vec![0.0; m * np];
        for p in 0..np {
            let (a, b) = (psi.psi1.at(p), psi.psi2.at(p));
            for (alpha, (f1, f2)) in self.fiber.iter().enumerate() {
                let v: f64 = a.iter().zip(f1).map(|(x, y)| x * y).sum::<f64>()
                    + b.iter().zip(f2).map(|(x, y)| x * y).sum::<f64>();
                c[p * m + alpha] = v * sq;
            }
        }
        c
    }

    pub fn from_coefficients(&self, c: &[f64]) -> TangentPerturbation {
        let m = self.fiber.len();
        let lat = self.lattice();
        let np = lat.num_points();
        let d = lat.dim();
        let isq = 1.0 / lat.cell_volume().sqrt();
        let mut out = TangentPerturbation::zeros(lat);
        for p in 0..np {
            let (o1, o2) = (&mut vec![0.0; d * d], &mut vec![0.0; d * d]);
            for (alpha, (f1, f2)) in self.fiber.iter().enumerate() {
                let v = c[p * m + alpha] * isq;
                if v == 0.0 {
                    continue;
                }
                for i in 0..d * d {
                    o1[i] += v * f1[i];
                    o2[i] += v * f2[i];
                }
            }
            out.psi1.at_mut(p).copy_from_slice(o1);
            out.psi2.at_mut(p).copy_from_slice(o2);
        }
        out
    }

    /// `−𝓛` on the Nyquist-free subspace, with Nyquist content shifted to
    /// `NYQUIST_SHIFT × λ_max` so it never mixes with the low spectrum.
    fn neg_apply_coeffs(&self, c: &[f64]) -> Vec<f64> {
        let psi = self.from_coefficients(c);
        let resolved = psi.remove_nyquist();
        let r = self.apply_unchecked(&resolved).remove_nyquist();
        let sigma = self.nyquist_shift();
        let out = self.to_coefficients(&r);
        let res = self.to_coefficients(&resolved);
        out.iter()
            .zip(c.iter().zip(&res))
            .map(|(v, (x, y))| -v + sigma * (x - y))
            .collect()
    }

    /// `−𝓛` restricted to the Nyquist-free subspace, which it leaves invariant.
    fn neg_apply_resolved(&self, c: &[f64]) -> Vec<f64> {
        let r = self.apply_unchecked(&self.from_coefficients(c)).remove_nyquist();
        self.to_coefficients(&r).into_iter().map(|v| -v).collect()
    }

    fn resolved_coeffs(&self, c: &[f64]) -> Vec<f64> {
        self.to_coefficients(&self.from_coefficients(c).remove_nyquist())
    }

    fn nyquist_shift(&self) -> f64 {
        let lat = self.lattice();
        NYQUIST_SHIFT * (lat.max_laplacian_eigenvalue(false) + (2.0 * self.s / lat.n() as f64).abs() + 1.0)
    }

    /// Dimension of the Nyquist-free subspace the spectrum is computed on.
    pub fn resolved_dim(&self) -> usize {
        self.fiber.len() * lattice::resolved_modes(self.lattice())
    }

    /// Random tangent field with band-limited coefficients.
    pub fn random_tangent(&self, lo: usize, hi: usize, rng: &mut impl Rng) -> Result<TangentPerturbation> {
        let lat = self.lattice();
        let m = self.fiber.len();
        let coeffs: Vec<LatticeField> = (0..m)
            .map(|_| lattice::band_limited_field(lat, &[], lo, hi, rng))
            .collect::<Result<_>>()?;
        let d = lat.dim();
        let mut out = TangentPerturbation::zeros(lat);
        for p in 0..lat.num_points() {
            let (o1, o2) = (&mut vec![0.0; d * d], &mut vec![0.0; d * d]);
            for (alpha, (f1, f2)) in self.fiber.iter().enumerate() {
                let v = coeffs[alpha].at(p)[0];
                for i in 0..d * d {
                    o1[i] += v * f1[i];
                    o2[i] += v * f2[i];
                }
            }
            out.psi1.at_mut(p).copy_from_slice(o1);
            out.psi2.at_mut(p).copy_from_slice(o2);
        }
        Ok(out)
    }
}

/// Orthonormal basis of the tangent fiber at a constant `(ω̃, J̃)`: the `(1,1)`
/// forms paired with zero, then each anti-commuting `ψ₂` paired with its forced
/// form, Gram–Schmidt in lexicographic component order.
fn fiber_basis(j: &[f64], w: &[f64], d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut cands: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for a in 0..d {
        for b in 0..d {
            let mut e = vec![0.0; d * d];
            e[a * d + b] += 0.5;
            e[b * d + a] -= 0.5;
            let pulled = tensor::pullback(&e, j, d);
            let f11: Vec<f64> = e.iter().zip(&pulled).map(|(x, y)| 0.5 * (x + y)).collect();
            cands.push((f11, vec![0.0; d * d]));
        }
    }
    for a in 0..d {
        for b in 0..d {
            let mut e = vec![0.0; d * d];
            e[a * d + b] = 1.0;
            let p2 = tensor::anti_part(&e, j, d);
            let p1 = forced_form_point(&p2, j, w, d);
            cands.push((p1, p2));
        }
    }
    let ip = |x: &(Vec<f64>, Vec<f64>), y: &(Vec<f64>, Vec<f64>)| -> f64 {
        x.0.iter().zip(&y.0).map(|(a, b)| a * b).sum::<f64>() + x.1.iter().zip(&y.1).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut basis: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for mut v in cands {
        for _ in 0..2 {
            for u in &basis {
                let c = ip(&v, u);
                v.0.iter_mut().zip(&u.0).for_each(|(a, b)| *a -= c * b);
                v.1.iter_mut().zip(&u.1).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nrm = ip(&v, &v).sqrt();
        if nrm > 1e-8 {
            v.0.iter_mut().for_each(|a| *a /= nrm);
            v.1.iter_mut().for_each(|a| *a /= nrm);
            basis.push(v);
        }
    }
    basis
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumMethod {
    Dense,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub method: SpectrumMethod,
    /// Eigenvalues wanted from the iterative path.
    pub count: usize,
    pub krylov_blocks: usize,
    pub max_restarts: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            method: SpectrumMethod::Dense,
            count: 8,
            krylov_blocks: 20,
            max_restarts: 200,
            tol: 1e-9,
            seed: 0,
        }
    }
}

/// Ascending eigenvalues of `−𝓛` with the kernel basis.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub kernel_dimension: usize,
    /// Smallest nonzero `|λ|`; absent when every computed eigenvalue is kernel.
    pub gap_lambda: Option<f64>,
    /// `L²`-orthonormal kernel fields `B_i`.
    pub kernel_basis: Vec<TangentPerturbation>,
    pub method: SpectrumMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub method: SpectrumMethod,
    pub eigenvalues: Vec<f64>,
    pub kernel_dimension: usize,
    pub gap_lambda: Option<f64>,
}

impl SpectrumReport {
    pub fn summary(&self) -> SpectrumSummary {
        SpectrumSummary {
            method: self.method,
            eigenvalues: self.eigenvalues.clone(),
            kernel_dimension: self.kernel_dimension,
            gap_lambda: self.gap_lambda,
        }
    }
}

pub fn spectrum(op: &LinearOperator, opts: &SpectrumOptions) -> Result<SpectrumReport> {
    let (vals, vecs) = match opts.method {
        SpectrumMethod::Dense => dense_eigen(op)?,
        SpectrumMethod::Iterative => iterative_eigen(op, opts)?,
    };
    let kernel: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].abs() < KERNEL_TOL).collect();
    let gap_lambda = vals
        .iter()
        .filter(|v| v.abs() >= KERNEL_TOL)
        .map(|v| v.abs())
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |x| x.min(v))));
    let kernel_basis = kernel_basis(op, &vecs, &kernel);
    Ok(SpectrumReport {
        kernel_dimension: kernel.len(),
        eigenvalues: vals,
        gap_lambda,
        kernel_basis,
        method: opts.method,
    })
}

fn dense_eigen(op: &LinearOperator) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = op.dim();
    if n > DENSE_MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "dense assembly of dimension {n} exceeds {DENSE_MAX_DIM}; use the iterative path"
        )));
    }
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            op.neg_apply_coeffs(&e)
        })
        .collect();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(sorted(eig.eigenvalues.as_slice(), &eig.eigenvectors, op.resolved_dim()))
}

fn sorted(vals: &[f64], vecs: &DMatrix<f64>, keep: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
    idx.truncate(keep);
    let v = idx.iter().map(|i| vals[*i]).collect();
    let cols: Vec<_> = idx.iter().map(|i| vecs.column(*i).into_owned()).collect();
    (v, DMatrix::from_columns(&cols))
}

/// Orthonormalize the columns of `q` in place (modified Gram–Schmidt, twice)
/// against `against` and each other; returns the columns that survive.
fn orthonormalize(block: Vec<Vec<f64>>, against: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for mut v in block {
        let n0 = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for u in against.iter().chain(out.iter()) {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-8 * n0 && nrm > 0.0 {
            v.iter_mut().for_each(|a| *a /= nrm);
            out.push(v);
        }
    }
    out
}

/// Restarted block Krylov with full reorthogonalization and Rayleigh–Ritz.
fn iterative_eigen(op: &LinearOperator, opts: &SpectrumOptions) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = op.dim();
    if opts.count == 0 {
        return Err(Error::InvalidInput("count must be positive".into()));
    }
    let count = opts.count.min(op.resolved_dim());
    let b = (count + 4).min(op.resolved_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            op.resolved_coeffs(&raw)
        })
        .collect();
    let apply_block = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> { vs.par_iter().map(|v| op.neg_apply_resolved(v)).collect() };
    let mut last_res = f64::INFINITY;
    for _ in 0..opts.max_restarts.max(1) {
        let mut q: Vec<Vec<f64>> = orthonormalize(start.clone(), &[]);
        let mut aq: Vec<Vec<f64>> = apply_block(&q);
        let mut block_start = 0;
        for _ in 0..opts.krylov_blocks {
            if q.len() >= op.resolved_dim() {
                break;
            }
            let filtered: Vec<Vec<f64>> = aq[block_start..].iter().map(|v| op.resolved_coeffs(v)).collect();
            let mut next = orthonormalize(filtered, &q);
            next.truncate(op.resolved_dim() - q.len());
            if next.is_empty() {
                break;
            }
            block_start = q.len();
            let anext = apply_block(&next);
            q.extend(next);
            aq.extend(anext);
        }
        let k = q.len();
        let mut h = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            for jj in 0..k {
                h[(i, jj)] = q[i].iter().zip(&aq[jj]).map(|(x, y)| x * y).sum();
            }
        }
        let hs = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(hs);
        let (vals, y) = sorted(eig.eigenvalues.as_slice(), &eig.eigenvectors, b.min(k));
        let ritz: Vec<Vec<f64>> = (0..vals.len())
            .map(|c| {
                let mut x = vec![0.0; n];
                for i in 0..k {
                    let yi = y[(i, c)];
                    x.iter_mut().zip(&q[i]).for_each(|(a, v)| *a += yi * v);
                }
                x
            })
            .collect();
        let aritz: Vec<Vec<f64>> = (0..vals.len())
            .map(|c| {
                let mut x = vec![0.0; n];
                for i in 0..k {
                    let yi = y[(i, c)];
                    x.iter_mut().zip(&aq[i]).for_each(|(a, v)| *a += yi * v);
                }
                x
            })
            .collect();
        let res = (0..count.min(vals.len()))
            .map(|c| {
                aritz[c]
                    .iter()
                    .zip(&ritz[c])
                    .map(|(a, x)| (a - vals[c] * x).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0_f64, f64::max);
        last_res = res;
        if res < opts.tol || k >= op.resolved_dim() {
            let mut m = DMatrix::<f64>::zeros(n, count);
            for c in 0..count {
                for r in 0..n {
                    m[(r, c)] = ritz[c][r];
                }
            }
            return Ok((vals[..count].to_vec(), m));
        }
        start = ritz;
    }
    Err(Error::NonConvergence(format!(
        "block Krylov eigensolver: residual {last_res:.3e} after {} restarts",
        opts.max_restarts
    )))
}

/// Project unit coordinate vectors in lexicographic order onto the kernel
/// eigenspace and orthonormalize, so degenerate kernels get a deterministic basis.
fn kernel_basis(op: &LinearOperator, vecs: &DMatrix<f64>, kernel: &[usize]) -> Vec<TangentPerturbation> {
    let kd = kernel.len();
    if kd == 0 {
        return Vec::new();
    }
    let n = vecs.nrows();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        if out.len() == kd {
            break;
        }
        let mut v = vec![0.0; n];
        for &c in kernel {
            let w = vecs[(i, c)];
            for r in 0..n {
                v[r] += w * vecs[(r, c)];
            }
        }
        for _ in 0..2 {
            for u in &out {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= nrm);
            out.push(v);
        }
    }
    out.iter().map(|v| op.from_coefficients(v)).collect()
}

/// `π₀ψ = Σ ⟨ψ, B_i⟩ B_i`.
pub fn kernel_projection(psi: &TangentPerturbation, report: &SpectrumReport) -> TangentPerturbation {
    let mut out = TangentPerturbation::zeros(psi.lattice());
    for b in &report.kernel_basis {
        out = out.axpy(psi.inner(b), b);
    }
    out
}

/// `|π₀ψ|² / |ψ|²` in `L²`.
pub fn pi0_ratio(psi: &TangentPerturbation, report: &SpectrumReport) -> f64 {
    let n = psi.l2();
    if n == 0.0 {
        return 0.0;
    }
    (kernel_projection(psi, report).l2() / n).powi(2)
}

/// RK4 for `∂ₜψ = 𝓛ψ`; returns `(t, ψ)` every `record_every` steps and at the end.
pub fn evolve_linear(
    psi0: &TangentPerturbation,
    op: &LinearOperator,
    dt: f64,
    steps: usize,
    record_every: usize,
) -> Result<Vec<(f64, TangentPerturbation)>> {
    if !(dt.is_finite() && dt > 0.0) || record_every == 0 {
        return Err(Error::InvalidInput("dt and record_every must be positive".into()));
    }
    let shift = (2.0 * op.scalar_curvature() / op.lattice().n() as f64).abs();
    let lmax = 4.0 * op.lattice().max_laplacian_eigenvalue(false) / 2.0 + shift;
    let bound = crate::flow::CFL_BOUND / lmax.max(1e-300) * 2.0;
    if dt > bound {
        return Err(Error::Cfl { dt, bound });
    }
    psi0.check(op.background())?;
    let mut psi = psi0.clone();
    let mut out = vec![(0.0, psi.clone())];
    for k in 1..=steps {
        let k1 = op.apply_unchecked(&psi);
        let k2 = op.apply_unchecked(&psi.axpy(0.5 * dt, &k1));
        let k3 = op.apply_unchecked(&psi.axpy(0.5 * dt, &k2));
        let k4 = op.apply_unchecked(&psi.axpy(dt, &k3));
        psi = psi
            .axpy(dt / 6.0, &k1)
            .axpy(dt / 3.0, &k2)
            .axpy(dt / 3.0, &k3)
            .axpy(dt / 6.0, &k4);
        if k % record_every == 0 || k == steps {
            out.push((k as f64 * dt, psi.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n: usize, m: usize) -> AHStructure {
        AHStructure::standard(&Lattice::standard(n, m).unwrap())
    }

    fn fd_laplacian(u: &LatticeField) -> LatticeField {
        let lat = u.lattice().clone();
        let d = lat.dim();
        let n = lat.points_per_axis();
        let h = lat.spacing();
        let nc = u.components();
        let mut out = LatticeField::zeros(&lat, u.valence());
        for p in 0..lat.num_points() {
            let idx = lat.multi_index(p);
            for a in 0..d {
                let stride = n.pow((d - 1 - a) as u32);
                let at = |s: i64| {
                    let k = (idx[a] as i64 + s).rem_euclid(n as i64) as usize;
                    p + k * stride - idx[a] * stride
                };
                for c in 0..nc {
                    let v = -u.at(at(2))[c] + 16.0 * u.at(at(1))[c] - 30.0 * u.at(p)[c] + 16.0 * u.at(at(-1))[c]
                        - u.at(at(-2))[c];
                    out.at_mut(p)[c] -= v / (12.0 * h * h);
                }
            }
        }
        out
    }

    #[test]
    fn rough_laplacian_eigen_and_fd_oracle() {
        let lat = Lattice::standard(1, 16).unwrap();
        let u = LatticeField::from_fn(&lat, &[], |x, o| o[0] = (2.0 * x[0] - x[1]).cos());
        assert!(rough_laplacian(&u).sub(&u.scale(5.0)).max_abs() < 1e-11);
        let c = LatticeField::constant(&lat, FORM, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(rough_laplacian(&c).max_abs() < 1e-12);
        let err = |m| {
            let l = Lattice::standard(1, m).unwrap();
            let f = lattice::band_limited_field(&l, &[], 1, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            rough_laplacian(&f).sub(&fd_laplacian(&f)).max_abs()
        };
        let order = (err(16) / err(32)).log2();
        assert!(order > 3.7, "{order}");
    }

    #[test]
    fn complex_laplacian_is_half_the_real_one() {
        let s = flat(2, 6);
        let j = constant_j(&s);
        let f = lattice::band_limited_field(s.lattice(), ENDO, 0, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(complex_rough_laplacian(&f, &j).sub(&rough_laplacian(&f).scale(0.5)).max_abs() < 1e-10);
    }

    #[test]
    fn weitzenbock_identities_hold_and_control_fails() {
        for (n, m) in [(1, 16), (2, 6)] {
            let s = flat(n, m);
            let r = weitzenbock_residual(&s, 3, 11).unwrap();
            assert!(r.max() < 1e-8, "{r:?}");
            let bad = weitzenbock_negative_control(&s, 3, 11).unwrap();
            assert!(bad.endo > 1e-2, "{bad:?}");
        }
    }

    #[test]
    fn constant_fields_are_harmonic() {
        let s = flat(2, 4);
        let c = LatticeField::constant(s.lattice(), FORM, &{
            let mut v = vec![0.0; 16];
            v[1] = 1.0;
            v[4] = -1.0;
            v
        })
        .unwrap();
        assert_eq!(hodge_laplacian(&c).unwrap().max_abs(), 0.0);
        let sym = LatticeField::constant(s.lattice(), FORM, &tensor::identity(4)).unwrap();
        assert!(hodge_laplacian(&sym).is_err());
        assert!(dbar_laplacian(s.j(), &s).is_err());
    }

    #[test]
    fn fiber_has_dimension_three_n_squared() {
        assert_eq!(LinearOperator::new(&flat(1, 4), 0.0).unwrap().fiber_dim(), 3);
        assert_eq!(LinearOperator::new(&flat(2, 4), 0.0).unwrap().fiber_dim(), 12);
    }

    #[test]
    fn operator_is_self_adjoint_and_non_positive() {
        let op = LinearOperator::new(&flat(1, 8), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u = op.random_tangent(0, 3, &mut rng).unwrap();
            let v = op.random_tangent(0, 3, &mut rng).unwrap();
            let a = op.apply(&u).unwrap().inner(&v);
            let b = u.inner(&op.apply(&v).unwrap());
            assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1.0));
            assert!(op.quadratic_form(&u).unwrap() <= 1e-10);
            assert!(op.apply(&u).unwrap().constraint_residuals(op.background()).1 < 1e-9);
        }
    }

    #[test]
    fn zeroth_order_shift() {
        let op = LinearOperator::new(&flat(1, 8), -1.0).unwrap();
        let c = op.from_coefficients(&{
            let mut v = vec![0.0; op.dim()];
            for p in 0..64 {
                v[p * 3] = 1.0;
                v[p * 3 + 2] = 0.5;
            }
            v
        });
        let l = op.apply(&c).unwrap();
        assert!(l.sub(&c.scale(-2.0)).max_abs() < 1e-12);
    }

    #[test]
    fn dense_spectrum_has_unit_gap_and_constant_kernel() {
        let op = LinearOperator::new(&flat(1, 8), 0.0).unwrap();
        let rep = spectrum(&op, &SpectrumOptions::default()).unwrap();
        assert_eq!(rep.kernel_dimension, 3);
        assert!((rep.gap_lambda.unwrap() - 1.0).abs() < 1e-6);
        assert!(rep.eigenvalues[0] > -1e-8);
        for b in &rep.kernel_basis {
            assert!(b.sub(&b.mean()).max_abs() < 1e-10);
        }
        let shifted = spectrum(&LinearOperator::new(&flat(1, 8), -1.0).unwrap(), &SpectrumOptions::default()).unwrap();
        assert_eq!(shifted.kernel_dimension, 0);
        assert!((shifted.gap_lambda.unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn iterative_matches_dense() {
        let op = LinearOperator::new(&flat(1, 8), 0.0).unwrap();
        let dense = spectrum(&op, &SpectrumOptions::default()).unwrap();
        let it = spectrum(
            &op,
            &SpectrumOptions {
                method: SpectrumMethod::Iterative,
                count: 5,
                krylov_blocks: 6,
                ..SpectrumOptions::default()
            },
        )
        .unwrap();
        for i in 0..5 {
            assert!((dense.eigenvalues[i] - it.eigenvalues[i]).abs() < 1e-6, "{:?} {:?}", &dense.eigenvalues[..6], it.eigenvalues);
        }
    }

    #[test]
    fn iterative_spectrum_in_four_dimensions() {
        let op = LinearOperator::new(&flat(2, 4), 0.0).unwrap();
        let rep = spectrum(
            &op,
            &SpectrumOptions {
                method: SpectrumMethod::Iterative,
                count: 16,
                ..SpectrumOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rep.kernel_dimension, 12);
        assert!((rep.gap_lambda.unwrap() - 1.0).abs() < 1e-6, "{:?}", rep.eigenvalues);
        for b in &rep.kernel_basis {
            assert!(b.sub(&b.mean()).max_abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_projection_extracts_the_mean() {
        let op = LinearOperator::new(&flat(1, 8), 0.0).unwrap();
        let rep = spectrum(&op, &SpectrumOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = op.random_tangent(0, 3, &mut rng).unwrap();
        let p = kernel_projection(&u, &rep);
        assert!(p.sub(&u.mean()).max_abs() < 1e-10);
        assert!(kernel_projection(&p, &rep).sub(&p).max_abs() < 1e-10);
        let w = op.random_tangent(1, 3, &mut rng).unwrap();
        assert!(kernel_projection(&w, &rep).max_abs() < 1e-10);
    }

    #[test]
    fn linear_evolution_matches_heat_semigroup() {
        let op = LinearOperator::new(&flat(1, 8), 0.0).unwrap();
        let u = op.random_tangent(1, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let series = evolve_linear(&u, &op, 0.0025, 400, 80).unwrap();
        let lat = op.lattice().clone();
        let exact = |t: f64, f: &LatticeField| {
            lattice::apply_symbol(f, |m| {
                let k2: f64 = m.iter().map(|v| lat.wavenumber(*v).powi(2)).sum();
                Complex64::new((-k2 * t).exp(), 0.0)
            })
        };
        for (t, psi) in &series {
            let e = psi.psi1.sub(&exact(*t, &u.psi1)).max_abs() + psi.psi2.sub(&exact(*t, &u.psi2)).max_abs();
            assert!(e < 1e-8, "t={t} err={e}");
        }

    }
}
