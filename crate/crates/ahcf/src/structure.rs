//! Compatible almost hermitian structures `(g, J, ω)` and `J`-type splittings.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, Lattice, LatticeField, ENDO, FORM, SCALAR};
use crate::tensor;

/// Tolerance for constructed structures.
pub const CONSTRUCTION_TOL: f64 = 1e-10;
/// Tolerance after time evolution.
pub const EVOLUTION_TOL: f64 = 1e-8;
/// Accepted `J² + Id` residual on input complex structures.
pub const INPUT_TOL: f64 = 1e-9;

/// `J[i][j] = J^i_j` with `J ∂_{2k} = ∂_{2k+1}`.
pub fn standard_complex_structure(d: usize) -> Vec<f64> {
    let mut j = vec![0.0; d * d];
    for k in 0..d / 2 {
        j[(2 * k + 1) * d + 2 * k] = 1.0;
        j[2 * k * d + 2 * k + 1] = -1.0;
    }
    j
}

/// `ω_{ab} = J^c_a g_{cb}`, i.e. `ω(X, Y) = g(JX, Y)`.
pub(crate) fn omega_point(g: &[f64], j: &[f64], d: usize) -> Vec<f64> {
    tensor::mul(&tensor::transpose(j, d), g, d)
}

/// Compatible triple on the lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct AHStructure {
    g: LatticeField,
    j: LatticeField,
    omega: LatticeField,
    volume: f64,
}

impl AHStructure {
    /// Flat metric and the standard constant complex structure.
    pub fn standard(lattice: &Arc<Lattice>) -> AHStructure {
        let d = lattice.dim();
        let g = LatticeField::constant(lattice, FORM, &tensor::identity(d)).expect("shape");
        let j = LatticeField::constant(lattice, ENDO, &standard_complex_structure(d)).expect("shape");
        AHStructure::from_parts(g, j)
    }

    /// Derive `ω` and the volume from `(g, J)` without validation.
    pub(crate) fn from_parts(g: LatticeField, j: LatticeField) -> AHStructure {
        let d = g.lattice().dim();
        let omega = LatticeField::map(&[&g, &j], FORM, |x, o| {
            o.copy_from_slice(&omega_point(x[0], x[1], d))
        });
        let volume = volume_of(&g);
        AHStructure { g, j, omega, volume }
    }

    /// Assemble from precomputed parts, for intermediate evaluation states.
    pub(crate) fn from_parts_unchecked(g: LatticeField, j: LatticeField, omega: LatticeField) -> AHStructure {
        let volume = volume_of(&g);
        AHStructure { g, j, omega, volume }
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.g.lattice()
    }

    pub fn g(&self) -> &LatticeField {
        &self.g
    }

    pub fn j(&self) -> &LatticeField {
        &self.j
    }

    pub fn omega(&self) -> &LatticeField {
        &self.omega
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Homothety `g ↦ c·g`.
    pub fn rescaled(&self, c: f64) -> AHStructure {
        AHStructure::from_parts(self.g.scale(c), self.j.clone())
    }

    /// True when `g` and `J` are the same at every grid point.
    pub fn is_constant(&self, tol: f64) -> bool {
        let g0 = self.g.at(0).to_vec();
        let j0 = self.j.at(0).to_vec();
        (0..self.lattice().num_points()).all(|p| {
            self.g.at(p).iter().zip(&g0).all(|(a, b)| (a - b).abs() <= tol)
                && self.j.at(p).iter().zip(&j0).all(|(a, b)| (a - b).abs() <= tol)
        })
    }
}

/// `∫ √det g`.
pub fn volume_of(g: &LatticeField) -> f64 {
    let d = g.lattice().dim();
    let sd = g.map1(SCALAR, |x, o| o[0] = tensor::to_mat(x, d).determinant().max(0.0).sqrt());
    lattice::integrate(&sd).unwrap_or(f64::NAN)
}

/// Sup over the grid of the largest entry of `J² + Id`.
pub fn almost_complex_residual(j: &LatticeField) -> f64 {
    let d = j.lattice().dim();
    j.sup(|x| {
        let mut sq = tensor::mul(x, x, d);
        for i in 0..d {
            sq[i * d + i] += 1.0;
        }
        tensor::max_abs(&sq)
    })
}

/// Build the compatible structure `g = ½(g0 + g0(J·, J·))`.
pub fn build_structure(g0: &LatticeField, j: &LatticeField) -> Result<AHStructure> {
    g0.expect_valence(FORM, "metric")?;
    j.expect_valence(ENDO, "complex structure")?;
    j.expect_lattice(g0.lattice(), "complex structure")?;
    g0.check_finite()?;
    j.check_finite()?;
    let residual = almost_complex_residual(j);
    if residual > INPUT_TOL {
        return Err(Error::Residual {
            what: "J² + Id",
            residual,
            tolerance: INPUT_TOL,
        });
    }
    let d = g0.lattice().dim();
    check_positive(g0)?;
    let g = LatticeField::map(&[g0, j], FORM, |x, o| {
        let pulled = tensor::pullback(x[0], x[1], d);
        let sym: Vec<f64> = x[0].iter().zip(&pulled).map(|(a, b)| 0.5 * (a + b)).collect();
        // Exact symmetry, so the derived metric is symmetric to the last bit.
        for a in 0..d {
            for b in 0..d {
                o[a * d + b] = 0.5 * (sym[a * d + b] + sym[b * d + a]);
            }
        }
    });
    check_positive(&g)?;
    Ok(AHStructure::from_parts(g, j.clone()))
}

pub(crate) fn check_positive(g: &LatticeField) -> Result<()> {
    let d = g.lattice().dim();
    for p in 0..g.lattice().num_points() {
        let m = tensor::min_sym_eig(g.at(p), d);
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::NotPositiveDefinite { point: p });
        }
    }
    Ok(())
}

/// Sup-norm residuals of the defining identities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureDiagnostics {
    /// `|J² + Id|`.
    pub almost_complex: f64,
    /// `|g(J·, J·) − g|`.
    pub compatibility: f64,
    /// `|ω − g(J·, ·)|`.
    pub omega: f64,
    /// `|g − gᵀ|`.
    pub symmetry: f64,
    pub min_metric_eigenvalue: f64,
}

impl StructureDiagnostics {
    pub fn max_residual(&self) -> f64 {
        self.almost_complex
            .max(self.compatibility)
            .max(self.omega)
            .max(self.symmetry)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual() <= tol && self.min_metric_eigenvalue > 0.0
    }
}

pub fn check_structure(s: &AHStructure) -> StructureDiagnostics {
    let d = s.lattice().dim();
    let compatibility = LatticeField::map(&[&s.g, &s.j], SCALAR, |x, o| {
        let pulled = tensor::pullback(x[0], x[1], d);
        o[0] = pulled.iter().zip(x[0]).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    })
    .max_abs();
    let omega = LatticeField::map(&[&s.g, &s.j, &s.omega], SCALAR, |x, o| {
        let w = omega_point(x[0], x[1], d);
        o[0] = w.iter().zip(x[2]).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    })
    .max_abs();
    let symmetry = s.g.sup(|x| {
        let t = tensor::transpose(x, d);
        t.iter().zip(x).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    });
    let min_metric_eigenvalue = (0..s.lattice().num_points())
        .map(|p| tensor::min_sym_eig(s.g.at(p), d))
        .fold(f64::INFINITY, f64::min);
    StructureDiagnostics {
        almost_complex: almost_complex_residual(&s.j),
        compatibility,
        omega,
        symmetry,
        min_metric_eigenvalue,
    }
}

/// Real representatives of the four `J̃`-type blocks of an endomorphism.
///
/// Each complex block is represented by its real part; the two conjugate
/// blocks of a real endomorphism share it, so `k_10_01 = k_01_10` and
/// `k_10_10 = k_01_01`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndoTypeBlocks {
    pub k_10_01: LatticeField,
    pub k_01_10: LatticeField,
    pub k_10_10: LatticeField,
    pub k_01_01: LatticeField,
}

impl EndoTypeBlocks {
    /// `½(K + J̃KJ̃)`.
    pub fn anti_commuting(&self) -> LatticeField {
        self.k_10_01.add(&self.k_01_10)
    }

    /// `½(K − J̃KJ̃)`.
    pub fn commuting(&self) -> LatticeField {
        self.k_10_10.add(&self.k_01_01)
    }

    pub fn reconstruct(&self) -> LatticeField {
        self.anti_commuting().add(&self.commuting())
    }
}

/// Anti-commuting part of `k` with respect to the endomorphism field `j`.
pub fn anti_commuting_part(k: &LatticeField, j: &LatticeField) -> LatticeField {
    let d = k.lattice().dim();
    LatticeField::map(&[k, j], ENDO, |x, o| o.copy_from_slice(&tensor::anti_part(x[0], x[1], d)))
}

pub fn commuting_part(k: &LatticeField, j: &LatticeField) -> LatticeField {
    let d = k.lattice().dim();
    LatticeField::map(&[k, j], ENDO, |x, o| o.copy_from_slice(&tensor::comm_part(x[0], x[1], d)))
}

pub fn decompose_endo(k: &LatticeField, reference: &AHStructure) -> Result<EndoTypeBlocks> {
    k.expect_valence(ENDO, "endomorphism")?;
    k.expect_lattice(reference.lattice(), "endomorphism")?;
    let half_a = anti_commuting_part(k, &reference.j).scale(0.5);
    let half_c = commuting_part(k, &reference.j).scale(0.5);
    Ok(EndoTypeBlocks {
        k_10_01: half_a.clone(),
        k_01_10: half_a,
        k_10_10: half_c.clone(),
        k_01_01: half_c,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FormTypeBlocks {
    pub part_11: LatticeField,
    pub part_20_02: LatticeField,
}

/// `(1,1)` part `½(h + h(J·, J·))` with respect to `j`.
pub fn form_part_11(h: &LatticeField, j: &LatticeField) -> LatticeField {
    let d = h.lattice().dim();
    LatticeField::map(&[h, j], FORM, |x, o| {
        let p = tensor::pullback(x[0], x[1], d);
        for (i, v) in o.iter_mut().enumerate() {
            *v = 0.5 * (x[0][i] + p[i]);
        }
    })
}

pub fn decompose_form(h: &LatticeField, reference: &AHStructure) -> Result<FormTypeBlocks> {
    h.expect_valence(FORM, "2-form")?;
    h.expect_lattice(reference.lattice(), "2-form")?;
    let d = h.lattice().dim();
    let skew = h.sup(|x| {
        let t = tensor::transpose(x, d);
        t.iter().zip(x).fold(0.0_f64, |m, (a, b)| m.max((a + b).abs()))
    });
    if skew > 1e-12 * h.max_abs().max(1.0) {
        return Err(Error::InvalidInput(format!("2-form is not antisymmetric ({skew:.2e})")));
    }
    let part_11 = form_part_11(h, &reference.j);
    let part_20_02 = h.sub(&part_11);
    Ok(FormTypeBlocks { part_11, part_20_02 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Slot;
    use nalgebra::{Complex, DMatrix};

    fn lat(n: usize, m: usize) -> Arc<Lattice> {
        Lattice::standard(n, m).unwrap()
    }

    fn flat(l: &Arc<Lattice>) -> LatticeField {
        LatticeField::constant(l, FORM, &tensor::identity(l.dim())).unwrap()
    }

    fn pseudo_random(seed: u64, len: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 10_000) as f64 / 5_000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn standard_structure() {
        let l = lat(2, 4);
        let s = build_structure(&flat(&l), &AHStructure::standard(&l).j).unwrap();
        let diag = check_structure(&s);
        assert!(diag.max_residual() < 1e-12);
        // ω(∂₀, ∂₁) = g(J∂₀, ∂₁) = 1.
        let w = s.omega().at(0);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[4], -1.0);
        assert!((s.volume() - l.volume()).abs() < 1e-9);
    }

    #[test]
    fn conjugated_structure_is_exact() {
        let l = lat(2, 4);
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.2, 0.0, 0.1, 0.0, 1.1, 0.3, 0.0, 0.2, 0.0, 0.9, 0.0, 0.0, 0.1, 0.0, 1.0,
        ]);
        let j0 = tensor::to_mat(&standard_complex_structure(4), 4);
        let jm = &a * j0 * a.clone().try_inverse().unwrap();
        let mut comps = vec![0.0; 16];
        tensor::from_mat(&jm, &mut comps);
        let j = LatticeField::constant(&l, ENDO, &comps).unwrap();
        let s = build_structure(&flat(&l), &j).unwrap();
        let diag = check_structure(&s);
        assert!(diag.passes(1e-12), "{diag:?}");
    }

    #[test]
    fn metric_bump_is_symmetrized() {
        let l = lat(1, 8);
        let g0 = LatticeField::from_fn(&l, FORM, |x, o| {
            o[0] = 1.0 + 0.1 * x[0].sin();
            o[1] = 0.05 * x[1].cos();
            o[2] = o[1];
            o[3] = 1.0;
        });
        let j = AHStructure::standard(&l).j().clone();
        let s = build_structure(&g0, &j).unwrap();
        // Oracle: generic 2x2 arithmetic on (g0 + Jᵀ g0 J)/2.
        for p in 0..l.num_points() {
            let gm = DMatrix::from_row_slice(2, 2, g0.at(p));
            let jm = DMatrix::from_row_slice(2, 2, j.at(p));
            let want = (&gm + jm.transpose() * &gm * &jm) * 0.5;
            for a in 0..2 {
                for b in 0..2 {
                    assert!((s.g().at(p)[a * 2 + b] - want[(a, b)]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let l = lat(1, 4);
        let j = LatticeField::constant(&l, ENDO, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(build_structure(&flat(&l), &j), Err(Error::Residual { .. })));
        let g0 = LatticeField::constant(&l, FORM, &[1.0, 0.0, 0.0, -2.0]).unwrap();
        let js = AHStructure::standard(&l).j().clone();
        assert!(matches!(build_structure(&g0, &js), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn corrupted_point_is_reported() {
        let l = lat(1, 4);
        let s = AHStructure::standard(&l);
        let mut j = s.j().clone();
        for v in j.at_mut(5) {
            *v *= 1.1;
        }
        let bad = AHStructure::from_parts(s.g().clone(), j);
        let diag = check_structure(&bad);
        assert!((diag.almost_complex - 0.21).abs() < 1e-12);
    }

    #[test]
    fn endo_blocks() {
        let l = lat(2, 4);
        let s = AHStructure::standard(&l);
        let b = decompose_endo(s.j(), &s).unwrap();
        assert!(b.anti_commuting().max_abs() < 1e-15);
        assert!(b.commuting().sub(s.j()).max_abs() < 1e-15);
        let k = LatticeField::from_data(&l, ENDO, pseudo_random(3, 16 * l.num_points())).unwrap();
        let a = anti_commuting_part(&k, s.j());
        let ba = decompose_endo(&a, &s).unwrap();
        assert!(ba.commuting().max_abs() < 1e-15);
        let blocks = decompose_endo(&k, &s).unwrap();
        assert!(blocks.reconstruct().sub(&k).max_abs() < 1e-14);
        // Idempotence of the anti-commuting projector.
        assert!(anti_commuting_part(&a, s.j()).sub(&a).max_abs() < 1e-15);
    }

    /// Read the blocks off in an eigenbasis of J̃ and return their real parts.
    fn complex_basis_blocks(k: &[f64], j: &[f64], d: usize) -> [Vec<f64>; 2] {
        let n = d / 2;
        let jm = tensor::to_mat(j, d).map(|v| Complex::new(v, 0.0));
        let i = Complex::new(0.0, 1.0);
        // (e − iJe) spans the +i eigenspace; pick independent ones.
        let mut v = DMatrix::<Complex<f64>>::zeros(d, d);
        let mut col = 0;
        for e in 0..d {
            if col == n {
                break;
            }
            let mut unit = DMatrix::<Complex<f64>>::zeros(d, 1);
            unit[(e, 0)] = Complex::new(1.0, 0.0);
            let w = &unit - &jm * &unit * i;
            let mut trial = v.columns(0, col).clone_owned();
            trial = trial.insert_column(col, Complex::new(0.0, 0.0));
            trial.set_column(col, &w.column(0));
            if trial.clone().svd(false, false).singular_values.min() > 1e-8 {
                v.set_column(col, &w.column(0));
                col += 1;
            }
        }
        for c in 0..n {
            let conj = v.column(c).map(|z| z.conj());
            v.set_column(n + c, &conj);
        }
        let vinv = v.clone().try_inverse().unwrap();
        let km = tensor::to_mat(k, d).map(|x| Complex::new(x, 0.0));
        let b = &vinv * km * &v;
        let mut off = DMatrix::<Complex<f64>>::zeros(d, d);
        let mut diag = DMatrix::<Complex<f64>>::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                if (r < n) == (c < n) {
                    diag[(r, c)] = b[(r, c)];
                } else {
                    off[(r, c)] = b[(r, c)];
                }
            }
        }
        // Blocks mapping (0,1) into (1,0): upper-right quadrant only.
        let mut upper_right = DMatrix::<Complex<f64>>::zeros(d, d);
        let mut upper_left = DMatrix::<Complex<f64>>::zeros(d, d);
        for r in 0..n {
            for c in 0..n {
                upper_right[(r, n + c)] = off[(r, n + c)];
                upper_left[(r, c)] = diag[(r, c)];
            }
        }
        let back = |m: DMatrix<Complex<f64>>| {
            let x = &v * m * &vinv;
            let mut out = vec![0.0; d * d];
            for r in 0..d {
                for c in 0..d {
                    out[r * d + c] = x[(r, c)].re;
                }
            }
            out
        };
        [back(upper_right), back(upper_left)]
    }

    #[test]
    fn endo_blocks_match_complex_basis_oracle() {
        for n in [1, 2] {
            let l = lat(n, 4);
            let d = l.dim();
            let s = AHStructure::standard(&l);
            let k = LatticeField::from_data(&l, ENDO, pseudo_random(11 + n as u64, d * d * l.num_points()))
                .unwrap();
            let blocks = decompose_endo(&k, &s).unwrap();
            for p in 0..l.num_points() {
                let [k1001, k1010] = complex_basis_blocks(k.at(p), s.j().at(p), d);
                for c in 0..d * d {
                    assert!((blocks.k_10_01.at(p)[c] - k1001[c]).abs() < 1e-12);
                    assert!((blocks.k_10_10.at(p)[c] - k1010[c]).abs() < 1e-12);
                }
            }
        }
    }

    fn random_form(l: &Arc<Lattice>, seed: u64) -> LatticeField {
        let d = l.dim();
        let raw = LatticeField::from_data(l, FORM, pseudo_random(seed, d * d * l.num_points())).unwrap();
        raw.map1(FORM, |x, o| {
            for a in 0..d {
                for b in 0..d {
                    o[a * d + b] = x[a * d + b] - x[b * d + a];
                }
            }
        })
    }

    #[test]
    fn form_blocks() {
        let l = lat(2, 4);
        let s = AHStructure::standard(&l);
        let b = decompose_form(s.omega(), &s).unwrap();
        assert!(b.part_20_02.max_abs() < 1e-15);
        assert!(b.part_11.sub(s.omega()).max_abs() < 1e-15);

        // ω̃(ψ₂X, J̃Y) + ω̃(J̃X, ψ₂Y) is J̃-anti-invariant.
        let d = 4;
        let k = LatticeField::from_data(&l, ENDO, pseudo_random(5, 16 * l.num_points())).unwrap();
        let psi2 = anti_commuting_part(&k, s.j());
        let anti = LatticeField::map(&[&psi2, s.j(), s.omega()], FORM, |x, o| {
            let a = tensor::mul3(&tensor::transpose(x[0], d), x[2], x[1], d);
            let b = tensor::mul3(&tensor::transpose(x[1], d), x[2], x[0], d);
            for i in 0..d * d {
                o[i] = a[i] + b[i];
            }
        });
        assert!(decompose_form(&anti, &s).unwrap().part_11.max_abs() < 1e-14);

        let h = random_form(&l, 9);
        let b = decompose_form(&h, &s).unwrap();
        assert!(b.part_11.add(&b.part_20_02).sub(&h).max_abs() < 1e-14);
        assert!(b.part_11.flat_inner(&b.part_20_02).abs() < 1e-10);
        let sym = LatticeField::constant(&l, FORM, &tensor::identity(4)).unwrap();
        assert!(decompose_form(&sym, &s).is_err());
    }

    #[test]
    fn form_blocks_match_complex_coordinates() {
        // In z = x⁰ + i x¹, w = x² + i x³ the (1,1) part of a real 2-form keeps
        // only the dz∧dw̄-type coefficients. h(e_a, e_b) over complex vectors:
        // h^{2,0} lives on pairs of (1,0) vectors, where J̃ acts by i.
        let l = lat(2, 4);
        let s = AHStructure::standard(&l);
        let h = random_form(&l, 21);
        let b = decompose_form(&h, &s).unwrap();
        let d = 4;
        let i = Complex::new(0.0, 1.0);
        let j = tensor::to_mat(s.j().at(0), d).map(|v| Complex::new(v, 0.0));
        let v10: Vec<DMatrix<Complex<f64>>> = (0..2)
            .map(|k| {
                let mut e = DMatrix::<Complex<f64>>::zeros(d, 1);
                e[(2 * k, 0)] = Complex::new(1.0, 0.0);
                &e - &j * &e * i
            })
            .collect();
        for p in 0..l.num_points() {
            let eval = |f: &[f64], x: &DMatrix<Complex<f64>>, y: &DMatrix<Complex<f64>>| {
                let m = tensor::to_mat(f, d).map(|v| Complex::new(v, 0.0));
                (x.transpose() * m * y)[(0, 0)]
            };
            // (1,1) part vanishes on two (1,0) vectors; the rest vanishes on (1,0)×(0,1).
            let x = &v10[0];
            let y = &v10[1];
            let ybar = y.map(|z| z.conj());
            assert!(eval(b.part_11.at(p), x, y).norm() < 1e-13);
            assert!(eval(b.part_20_02.at(p), x, &ybar).norm() < 1e-13);
            assert!((eval(h.at(p), x, y) - eval(b.part_20_02.at(p), x, y)).norm() < 1e-13);
        }
        let _ = Slot::Up;
    }
}
