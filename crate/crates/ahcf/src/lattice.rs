//! Periodic lattice on the flat torus `T^{2n}` with Fourier-collocation calculus.
//!
//! Fields are stored point-major: the components of the tensor at grid point
//! `p` occupy `data[p * c .. (p + 1) * c]`, in row-major index order.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor;

/// Index slot of a tensor field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Up,
    Down,
}

pub const SCALAR: &[Slot] = &[];
pub const VECTOR: &[Slot] = &[Slot::Up];
pub const FORM: &[Slot] = &[Slot::Down, Slot::Down];
pub const ENDO: &[Slot] = &[Slot::Up, Slot::Down];
pub const CONNECTION: &[Slot] = &[Slot::Up, Slot::Down, Slot::Down];
pub const RIEMANN: &[Slot] = &[Slot::Up, Slot::Down, Slot::Down, Slot::Down];

/// Serializable description of a lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// Complex dimension; the torus has real dimension `2n`.
    pub n: usize,
    pub points_per_axis: usize,
    pub side_length: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            n: 1,
            points_per_axis: 16,
            side_length: 2.0 * std::f64::consts::PI,
        }
    }
}

pub struct Lattice {
    spec: LatticeSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lattice").field("spec", &self.spec).finish()
    }
}

impl PartialEq for Lattice {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl Lattice {
    pub fn new(spec: LatticeSpec) -> Result<Arc<Lattice>> {
        if !(spec.n == 1 || spec.n == 2) {
            return Err(Error::InvalidLattice(format!(
                "complex dimension {} unsupported (1 or 2)",
                spec.n
            )));
        }
        if spec.points_per_axis < 4 || spec.points_per_axis % 2 != 0 {
            return Err(Error::InvalidLattice(format!(
                "points_per_axis = {} must be even and at least 4",
                spec.points_per_axis
            )));
        }
        if !(spec.side_length.is_finite() && spec.side_length > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "side_length = {} must be positive",
                spec.side_length
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Lattice {
            spec,
            forward: planner.plan_fft_forward(spec.points_per_axis),
            inverse: planner.plan_fft_inverse(spec.points_per_axis),
        }))
    }

    /// Side 2π torus of complex dimension `n`.
    pub fn standard(n: usize, points_per_axis: usize) -> Result<Arc<Lattice>> {
        Lattice::new(LatticeSpec {
            n,
            points_per_axis,
            side_length: 2.0 * std::f64::consts::PI,
        })
    }

    pub fn spec(&self) -> LatticeSpec {
        self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    /// Real dimension `2n`.
    pub fn dim(&self) -> usize {
        2 * self.spec.n
    }

    pub fn points_per_axis(&self) -> usize {
        self.spec.points_per_axis
    }

    pub fn side_length(&self) -> f64 {
        self.spec.side_length
    }

    pub fn num_points(&self) -> usize {
        self.spec.points_per_axis.pow(self.dim() as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.spec.side_length / self.spec.points_per_axis as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim() as i32)
    }

    /// Euclidean volume of the torus.
    pub fn volume(&self) -> f64 {
        self.spec.side_length.powi(self.dim() as i32)
    }

    pub fn multi_index(&self, p: usize) -> Vec<usize> {
        let n = self.spec.points_per_axis;
        let d = self.dim();
        let mut idx = vec![0; d];
        let mut rest = p;
        for a in (0..d).rev() {
            idx[a] = rest % n;
            rest /= n;
        }
        idx
    }

    pub fn coordinates(&self, p: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi_index(p).into_iter().map(|i| i as f64 * h).collect()
    }

    /// Signed integer frequency of FFT bin `i`.
    pub fn mode(&self, i: usize) -> i64 {
        let n = self.spec.points_per_axis;
        if i <= n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    pub fn modes(&self, q: usize) -> Vec<i64> {
        self.multi_index(q).into_iter().map(|i| self.mode(i)).collect()
    }

    pub fn wavenumber(&self, m: i64) -> f64 {
        2.0 * std::f64::consts::PI * m as f64 / self.spec.side_length
    }

    fn is_nyquist(&self, m: i64) -> bool {
        m.unsigned_abs() as usize * 2 == self.spec.points_per_axis
    }

    /// Largest retained integer frequency under the 2/3 rule.
    pub fn dealias_cutoff(&self) -> usize {
        self.spec.points_per_axis / 3
    }

    /// Largest eigenvalue of `−Σ∂²` over the modes the stepper can carry.
    pub fn max_laplacian_eigenvalue(&self, dealiased: bool) -> f64 {
        let m = if dealiased {
            self.dealias_cutoff()
        } else {
            self.spec.points_per_axis / 2 - 1
        };
        let k = self.wavenumber(m as i64);
        self.dim() as f64 * k * k
    }

    pub(crate) fn same(a: &Arc<Lattice>, b: &Arc<Lattice>) -> bool {
        Arc::ptr_eq(a, b) || a.spec == b.spec
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.spec.points_per_axis;
        let d = self.dim();
        let fft = if inverse { &self.inverse } else { &self.forward };
        let mut line = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let total = buf.len();
        for a in 0..d {
            let stride = n.pow((d - 1 - a) as u32);
            let block = stride * n;
            for start in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = start + inner;
                    for t in 0..n {
                        line[t] = buf[base + t * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for t in 0..n {
                        buf[base + t * stride] = line[t];
                    }
                }
            }
        }
        if inverse {
            let s = 1.0 / total as f64;
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Forward transform of every component (component-major output).
    fn analyze(&self, f: &LatticeField) -> Vec<Vec<Complex64>> {
        let nc = f.components();
        let np = self.num_points();
        (0..nc)
            .into_par_iter()
            .map(|c| {
                let mut buf: Vec<Complex64> = (0..np)
                    .map(|p| Complex64::new(f.data[p * nc + c], 0.0))
                    .collect();
                self.transform(&mut buf, false);
                buf
            })
            .collect()
    }

    /// Multiply each component spectrum by `symbol` and return the real part of
    /// the inverse transform, component-major.
    fn synthesize(&self, spectra: &[Vec<Complex64>], symbol: &[Complex64]) -> Vec<Vec<f64>> {
        spectra
            .par_iter()
            .map(|s| {
                let mut buf: Vec<Complex64> =
                    s.iter().zip(symbol).map(|(a, b)| a * b).collect();
                self.transform(&mut buf, true);
                buf.into_iter().map(|z| z.re).collect()
            })
            .collect()
    }

    fn symbol_table(&self, symbol: impl Fn(&[i64]) -> Complex64 + Sync) -> Vec<Complex64> {
        (0..self.num_points())
            .into_par_iter()
            .map(|q| symbol(&self.modes(q)))
            .collect()
    }

    fn derivative_symbol(&self, axis: usize) -> Vec<Complex64> {
        self.symbol_table(|m| {
            if self.is_nyquist(m[axis]) {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, self.wavenumber(m[axis]))
            }
        })
    }
}

/// Periodic sampled tensor field with index valence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    lattice: Arc<Lattice>,
    valence: Vec<Slot>,
    data: Vec<f64>,
}

impl LatticeField {
    pub fn zeros(lattice: &Arc<Lattice>, valence: &[Slot]) -> LatticeField {
        let c = lattice.dim().pow(valence.len() as u32);
        LatticeField {
            lattice: lattice.clone(),
            valence: valence.to_vec(),
            data: vec![0.0; c * lattice.num_points()],
        }
    }

    pub fn from_data(lattice: &Arc<Lattice>, valence: &[Slot], data: Vec<f64>) -> Result<LatticeField> {
        let c = lattice.dim().pow(valence.len() as u32);
        if data.len() != c * lattice.num_points() {
            return Err(Error::InvalidInput(format!(
                "field data has {} values, expected {}",
                data.len(),
                c * lattice.num_points()
            )));
        }
        let f = LatticeField {
            lattice: lattice.clone(),
            valence: valence.to_vec(),
            data,
        };
        f.check_finite()?;
        Ok(f)
    }

    /// Sample `f(x, out)` at every grid point `x`.
    pub fn from_fn(
        lattice: &Arc<Lattice>,
        valence: &[Slot],
        f: impl Fn(&[f64], &mut [f64]) + Sync,
    ) -> LatticeField {
        let mut out = LatticeField::zeros(lattice, valence);
        let c = out.components();
        out.data
            .par_chunks_mut(c.max(1))
            .enumerate()
            .for_each(|(p, o)| f(&lattice.coordinates(p), o));
        out
    }

    /// Same components at every grid point.
    pub fn constant(lattice: &Arc<Lattice>, valence: &[Slot], comps: &[f64]) -> Result<LatticeField> {
        let c = lattice.dim().pow(valence.len() as u32);
        if comps.len() != c {
            return Err(Error::InvalidInput(format!(
                "constant field needs {c} components, got {}",
                comps.len()
            )));
        }
        let data = comps.repeat(lattice.num_points());
        LatticeField::from_data(lattice, valence, data)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn valence(&self) -> &[Slot] {
        &self.valence
    }

    pub fn rank(&self) -> usize {
        self.valence.len()
    }

    /// Number of components per grid point.
    pub fn components(&self) -> usize {
        self.lattice.dim().pow(self.valence.len() as u32)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, p: usize) -> &[f64] {
        let c = self.components();
        &self.data[p * c..(p + 1) * c]
    }

    pub fn at_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.components();
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(format!(
                "non-finite value at grid point {}",
                i / self.components()
            ))),
        }
    }

    pub fn same_shape(&self, other: &LatticeField) -> bool {
        Lattice::same(&self.lattice, &other.lattice) && self.valence == other.valence
    }

    pub(crate) fn expect_valence(&self, valence: &[Slot], what: &str) -> Result<()> {
        if self.valence != valence {
            return Err(Error::InvalidInput(format!(
                "{what} has valence {:?}, expected {:?}",
                self.valence, valence
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_lattice(&self, lattice: &Arc<Lattice>, what: &str) -> Result<()> {
        if !Lattice::same(&self.lattice, lattice) {
            return Err(Error::InvalidInput(format!("{what} lives on a different lattice")));
        }
        Ok(())
    }

    fn zip_with(&self, other: &LatticeField, f: impl Fn(f64, f64) -> f64) -> LatticeField {
        assert!(self.same_shape(other), "field shape mismatch");
        LatticeField {
            lattice: self.lattice.clone(),
            valence: self.valence.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// # Panics
    /// If the shapes differ.
    pub fn add(&self, other: &LatticeField) -> LatticeField {
        self.zip_with(other, |a, b| a + b)
    }

    /// # Panics
    /// If the shapes differ.
    pub fn sub(&self, other: &LatticeField) -> LatticeField {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + a · other`.
    ///
    /// # Panics
    /// If the shapes differ.
    pub fn axpy(&self, a: f64, other: &LatticeField) -> LatticeField {
        self.zip_with(other, |x, y| x + a * y)
    }

    pub fn scale(&self, a: f64) -> LatticeField {
        LatticeField {
            lattice: self.lattice.clone(),
            valence: self.valence.clone(),
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        tensor::max_abs(&self.data)
    }

    /// Supremum over grid points of a pointwise quantity.
    pub fn sup(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        let c = self.components().max(1);
        self.data
            .par_chunks(c)
            .map(&f)
            .reduce(|| 0.0, f64::max)
    }

    /// Euclidean inner product of the raw data times the cell volume.
    pub fn flat_inner(&self, other: &LatticeField) -> f64 {
        assert!(self.same_shape(other), "field shape mismatch");
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum();
        s * self.lattice.cell_volume()
    }

    /// Pointwise map over any number of fields on the same lattice.
    pub(crate) fn map(
        inputs: &[&LatticeField],
        valence: &[Slot],
        f: impl Fn(&[&[f64]], &mut [f64]) + Sync,
    ) -> LatticeField {
        let lattice = inputs[0].lattice.clone();
        debug_assert!(inputs.iter().all(|x| Lattice::same(&x.lattice, &lattice)));
        let mut out = LatticeField::zeros(&lattice, valence);
        let c = out.components().max(1);
        out.data
            .par_chunks_mut(c)
            .enumerate()
            .with_min_len(64)
            .for_each(|(p, o)| {
                let ins: Vec<&[f64]> = inputs.iter().map(|x| x.at(p)).collect();
                f(&ins, o);
            });
        out
    }

    pub(crate) fn map1(&self, valence: &[Slot], f: impl Fn(&[f64], &mut [f64]) + Sync) -> LatticeField {
        LatticeField::map(&[self], valence, |x, o| f(x[0], o))
    }
}

fn assemble(lattice: &Arc<Lattice>, valence: &[Slot], comps: &[Vec<f64>]) -> LatticeField {
    let mut out = LatticeField::zeros(lattice, valence);
    let nc = comps.len();
    for (c, col) in comps.iter().enumerate() {
        for (p, v) in col.iter().enumerate() {
            out.data[p * nc + c] = *v;
        }
    }
    out
}

/// Fourier-collocation derivative along `axis`; the Nyquist mode is dropped.
pub fn spectral_derivative(f: &LatticeField, axis: usize) -> Result<LatticeField> {
    let lat = f.lattice.clone();
    if axis >= lat.dim() {
        return Err(Error::InvalidInput(format!("axis {axis} out of range")));
    }
    f.check_finite()?;
    let spectra = lat.analyze(f);
    let comps = lat.synthesize(&spectra, &lat.derivative_symbol(axis));
    Ok(assemble(&lat, &f.valence, &comps))
}

/// All first derivatives; the new covariant slot is placed first.
pub fn gradient(f: &LatticeField) -> LatticeField {
    let lat = f.lattice.clone();
    let d = lat.dim();
    let nc = f.components();
    let spectra = lat.analyze(f);
    let mut valence = vec![Slot::Down];
    valence.extend_from_slice(&f.valence);
    let mut out = LatticeField::zeros(&lat, &valence);
    for a in 0..d {
        let comps = lat.synthesize(&spectra, &lat.derivative_symbol(a));
        for (c, col) in comps.iter().enumerate() {
            for (p, v) in col.iter().enumerate() {
                out.data[p * d * nc + a * nc + c] = *v;
            }
        }
    }
    out
}

/// Apply a Fourier multiplier given as a function of the integer mode vector.
pub fn apply_symbol(f: &LatticeField, symbol: impl Fn(&[i64]) -> Complex64 + Sync) -> LatticeField {
    let lat = f.lattice.clone();
    let spectra = lat.analyze(f);
    let comps = lat.synthesize(&spectra, &lat.symbol_table(symbol));
    assemble(&lat, &f.valence, &comps)
}

/// Zero every mode that sits at the Nyquist frequency on some axis. First
/// derivatives drop these modes, so they are invisible to derivative operators.
pub fn remove_nyquist(f: &LatticeField) -> LatticeField {
    let lat = f.lattice.clone();
    apply_symbol(f, |m| {
        if m.iter().any(|v| lat.is_nyquist(*v)) {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(1.0, 0.0)
        }
    })
}

/// Number of mode vectors free of Nyquist frequencies.
pub fn resolved_modes(lattice: &Lattice) -> usize {
    let n = lattice.points_per_axis();
    let per_axis = if n % 2 == 0 { n - 1 } else { n };
    per_axis.pow(lattice.dim() as u32)
}

/// 2/3-rule truncation: zero every mode with `|m_a| > N/3` on some axis.
pub fn dealias(f: &LatticeField) -> LatticeField {
    let cut = f.lattice.dealias_cutoff() as u64;
    apply_symbol(f, |m| {
        if m.iter().all(|v| v.unsigned_abs() <= cut) {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Wavevectors with `lo ≤ |m|_∞ ≤ hi`, one of each `±m` pair (first nonzero
/// entry positive), in lexicographic order.
pub fn band_wavevectors(d: usize, lo: usize, hi: usize) -> Vec<Vec<i64>> {
    let h = hi as i64;
    let side = (2 * h + 1) as usize;
    let mut out = Vec::new();
    for code in 0..side.pow(d as u32) {
        let mut m = vec![0_i64; d];
        let mut c = code;
        for a in (0..d).rev() {
            m[a] = (c % side) as i64 - h;
            c /= side;
        }
        let linf = m.iter().map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
        let positive = m.iter().find(|v| **v != 0).is_some_and(|v| *v > 0);
        if linf >= lo.max(1) && linf <= hi && positive {
            out.push(m);
        }
    }
    out
}

/// Random real field `Σ_m a_m cos(k_m·x) + b_m sin(k_m·x)` over the band, with
/// every coefficient uniform in `[−1, 1]`, drawn in wavevector-then-component order.
pub fn band_limited_field(
    lattice: &Arc<Lattice>,
    valence: &[Slot],
    lo: usize,
    hi: usize,
    rng: &mut impl Rng,
) -> Result<LatticeField> {
    if hi == 0 || lo > hi || 2 * hi >= lattice.points_per_axis() {
        return Err(Error::InvalidInput(format!(
            "mode band [{lo}, {hi}] is empty or unresolved on {} points per axis",
            lattice.points_per_axis()
        )));
    }
    let d = lattice.dim();
    let nc = d.pow(valence.len() as u32);
    let modes = band_wavevectors(d, lo, hi);
    let coeffs: Vec<(Vec<f64>, Vec<f64>)> = modes
        .iter()
        .map(|_| {
            let a = (0..nc).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let b = (0..nc).map(|_| rng.random_range(-1.0..=1.0)).collect();
            (a, b)
        })
        .collect();
    let k: Vec<Vec<f64>> = modes
        .iter()
        .map(|m| m.iter().map(|v| lattice.wavenumber(*v)).collect())
        .collect();
    Ok(LatticeField::from_fn(lattice, valence, |x, o| {
        for (km, (a, b)) in k.iter().zip(&coeffs) {
            let phase: f64 = km.iter().zip(x).map(|(u, v)| u * v).sum();
            let (s, c) = phase.sin_cos();
            for i in 0..nc {
                o[i] += a[i] * c + b[i] * s;
            }
        }
    }))
}

/// Grid average of each component.
pub fn mean(f: &LatticeField) -> Vec<f64> {
    let nc = f.components();
    let np = f.lattice.num_points();
    let mut m = vec![0.0; nc];
    for p in 0..np {
        for (c, v) in f.at(p).iter().enumerate() {
            m[c] += v;
        }
    }
    m.iter().map(|v| v / np as f64).collect()
}

/// Field with every component replaced by its grid average.
pub fn mean_field(f: &LatticeField) -> LatticeField {
    let m = mean(f);
    LatticeField {
        lattice: f.lattice.clone(),
        valence: f.valence.clone(),
        data: m.repeat(f.lattice.num_points()),
    }
}

/// Rectangle-rule integral of a scalar field.
pub fn integrate(f: &LatticeField) -> Result<f64> {
    if f.rank() != 0 {
        return Err(Error::InvalidInput("integrate expects a scalar field".into()));
    }
    f.check_finite()?;
    let s: f64 = f.data.iter().sum();
    Ok(s * f.lattice.cell_volume())
}

/// Discrete `Cᵏ` and Sobolev norms of a tensor field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub l2: f64,
    /// Sup over the grid of the pointwise norm of the `j`-th derivative.
    pub sup_by_order: Vec<f64>,
    pub sobolev_l2_by_order: Vec<f64>,
}

impl NormReport {
    pub fn zero(k: usize) -> NormReport {
        NormReport {
            l2: 0.0,
            sup_by_order: vec![0.0; k + 1],
            sobolev_l2_by_order: vec![0.0; k + 1],
        }
    }

    pub fn order(&self) -> usize {
        self.sup_by_order.len() - 1
    }

    /// `|·|_{Cᵏ} = Σ_{j ≤ k} sup_j`.
    pub fn ck(&self, k: usize) -> f64 {
        self.sup_by_order[..=k.min(self.order())].iter().sum()
    }

    /// Norm of a pair: L² parts add in quadrature, sup parts take the max.
    pub fn pair(a: &NormReport, b: &NormReport) -> NormReport {
        NormReport {
            l2: a.l2.hypot(b.l2),
            sup_by_order: a
                .sup_by_order
                .iter()
                .zip(&b.sup_by_order)
                .map(|(x, y)| x.max(*y))
                .collect(),
            sobolev_l2_by_order: a
                .sobolev_l2_by_order
                .iter()
                .zip(&b.sobolev_l2_by_order)
                .map(|(x, y)| x.hypot(*y))
                .collect(),
        }
    }
}

/// Re-express every slot of a point tensor in an orthonormal frame.
fn to_frame(t: &[f64], slots: &[Slot], frame: &[f64], frame_inv: &[f64], d: usize) -> Vec<f64> {
    let r = slots.len();
    let mut cur = t.to_vec();
    let mut next = vec![0.0; cur.len()];
    for (s, slot) in slots.iter().enumerate() {
        let stride = d.pow((r - 1 - s) as u32);
        let block = stride * d;
        for start in (0..cur.len()).step_by(block) {
            for inner in 0..stride {
                for alpha in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        let m = match slot {
                            Slot::Down => frame[a * d + alpha],
                            Slot::Up => frame_inv[alpha * d + a],
                        };
                        acc += m * cur[start + inner + a * stride];
                    }
                    next[start + inner + alpha * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

fn pointwise_norm(t: &[f64], rank: usize, d: usize) -> f64 {
    match rank {
        2 => tensor::op_norm(t, d),
        _ => t.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// `L²`, `Cʲ` and `L^{j,2}` norms of `f` measured with the metric `g`.
///
/// Rank-2 tensors use the pointwise operator norm in a `g`-orthonormal frame;
/// other ranks use the Frobenius norm. The `j`-th order entry combines all
/// `d^j` derivative directions in quadrature.
pub fn norms(f: &LatticeField, g: &LatticeField, k: usize) -> Result<NormReport> {
    g.expect_valence(FORM, "metric")?;
    g.expect_lattice(&f.lattice, "metric")?;
    f.check_finite()?;
    let lat = f.lattice.clone();
    let d = lat.dim();
    let np = lat.num_points();
    let mut frames = Vec::with_capacity(np);
    for p in 0..np {
        let gp = g.at(p);
        let fr = tensor::orthonormal_frame(gp, d).ok_or(Error::NotPositiveDefinite { point: p })?;
        let inv = tensor::inverse(&fr, d).ok_or(Error::NotPositiveDefinite { point: p })?;
        let det = tensor::to_mat(gp, d).determinant();
        frames.push((fr, inv, det.sqrt()));
    }
    let r = f.rank();
    let inner = d.pow(r as u32);
    let mut report = NormReport::zero(k);
    let mut deriv = f.clone();
    for j in 0..=k {
        if j > 0 {
            deriv = gradient(&deriv);
        }
        let per_point: Vec<(f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let (fr, inv, _) = &frames[p];
                let t = to_frame(deriv.at(p), &deriv.valence, fr, inv, d);
                let mut sup_sq = 0.0;
                let mut frob_sq = 0.0;
                for chunk in t.chunks(inner) {
                    let v = pointwise_norm(chunk, r, d);
                    sup_sq += v * v;
                    frob_sq += chunk.iter().map(|x| x * x).sum::<f64>();
                }
                (sup_sq.sqrt(), frob_sq)
            })
            .collect();
        let mut sup = 0.0_f64;
        let mut l2 = 0.0;
        for (p, (s, q)) in per_point.iter().enumerate() {
            sup = sup.max(*s);
            l2 += q * frames[p].2;
        }
        report.sup_by_order[j] = sup;
        report.sobolev_l2_by_order[j] = (l2 * lat.cell_volume()).sqrt();
    }
    report.l2 = report.sobolev_l2_by_order[0];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn lat(n: usize, m: usize) -> Arc<Lattice> {
        Lattice::standard(n, m).unwrap()
    }

    fn flat_metric(l: &Arc<Lattice>) -> LatticeField {
        LatticeField::constant(l, FORM, &tensor::identity(l.dim())).unwrap()
    }

    /// Fourth-order centered difference along `axis`, periodic.
    fn fd4(f: &LatticeField, axis: usize) -> Vec<f64> {
        let l = f.lattice();
        let n = l.points_per_axis();
        let h = l.spacing();
        let stride = n.pow((l.dim() - 1 - axis) as u32);
        let shift = |p: usize, s: i64| {
            let i = l.multi_index(p)[axis] as i64;
            let j = (i + s).rem_euclid(n as i64) as usize;
            p + j * stride - (i as usize) * stride
        };
        (0..l.num_points())
            .map(|p| {
                let v = |s| f.at(shift(p, s))[0];
                (-v(2) + 8.0 * v(1) - 8.0 * v(-1) + v(-2)) / (12.0 * h)
            })
            .collect()
    }

    #[test]
    fn rejects_bad_lattices() {
        assert!(Lattice::standard(3, 8).is_err());
        assert!(Lattice::standard(1, 6).is_ok());
        assert!(Lattice::standard(1, 7).is_err());
        assert!(Lattice::standard(1, 2).is_err());
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let l = lat(1, 8);
        let f = LatticeField::constant(&l, SCALAR, &[3.5]).unwrap();
        assert!(spectral_derivative(&f, 0).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn derivative_of_sine() {
        let l = lat(1, 16);
        let f = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = x[0].sin());
        let df = spectral_derivative(&f, 0).unwrap();
        let exact = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = x[0].cos());
        assert!(df.sub(&exact).max_abs() < 1e-10);
        assert!(spectral_derivative(&f, 1).unwrap().max_abs() < 1e-12);
        assert!(spectral_derivative(&f, 2).is_err());
    }

    #[test]
    fn derivative_matches_fourth_order_differences() {
        // Band-limited field; the FD error must fall by about 2⁴ per refinement.
        let field = |m| {
            LatticeField::from_fn(&lat(1, m), SCALAR, |x, o| {
                o[0] = (x[0] + 0.3).sin() * (2.0 * x[1]).cos() + 0.5 * (3.0 * x[0] - x[1]).sin()
            })
        };
        let err = |m| {
            let f = field(m);
            let s = spectral_derivative(&f, 0).unwrap();
            s.data()
                .iter()
                .zip(fd4(&f, 0))
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
        };
        let (e1, e2) = (err(32), err(64));
        let order = (e1 / e2).log2();
        assert!(order > 3.7 && order < 4.5, "observed order {order}");
    }

    #[test]
    fn derivatives_commute() {
        let l = lat(1, 16);
        let f = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = (x[0] + 2.0 * x[1]).sin() * x[1].cos());
        let a = spectral_derivative(&spectral_derivative(&f, 0).unwrap(), 1).unwrap();
        let b = spectral_derivative(&spectral_derivative(&f, 1).unwrap(), 0).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-10 * a.max_abs().max(1.0));
    }

    #[test]
    fn gradient_agrees_with_axis_derivatives() {
        let l = lat(2, 6);
        let f = LatticeField::from_fn(&l, VECTOR, |x, o| {
            for (i, v) in o.iter_mut().enumerate() {
                *v = (x[i] + x[(i + 1) % 4]).sin();
            }
        });
        let g = gradient(&f);
        for a in 0..4 {
            let da = spectral_derivative(&f, a).unwrap();
            for p in 0..l.num_points() {
                for c in 0..4 {
                    assert!((g.at(p)[a * 4 + c] - da.at(p)[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn integrals() {
        let l = lat(1, 8);
        let one = LatticeField::constant(&l, SCALAR, &[1.0]).unwrap();
        assert!((integrate(&one).unwrap() - 4.0 * PI * PI).abs() < 1e-12);
        let s = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = x[0].sin());
        assert!(integrate(&s).unwrap().abs() < 1e-12);
        // sin² = (1 − cos 2x)/2 integrates to half the area.
        let s2 = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = x[0].sin().powi(2));
        assert!((integrate(&s2).unwrap() - 2.0 * PI * PI).abs() < 1e-12);
        assert!(integrate(&LatticeField::zeros(&l, VECTOR)).is_err());
    }

    #[test]
    fn integration_by_parts() {
        let l = lat(1, 16);
        let f = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = (x[0] - x[1]).cos() + x[1].sin());
        let g = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = (2.0 * x[0]).sin() * x[1].cos());
        let prod = |a: &LatticeField, b: &LatticeField| {
            LatticeField::map(&[a, b], SCALAR, |x, o| o[0] = x[0][0] * x[1][0])
        };
        let lhs = integrate(&prod(&f, &spectral_derivative(&g, 0).unwrap())).unwrap()
            + integrate(&prod(&spectral_derivative(&f, 0).unwrap(), &g)).unwrap();
        assert!(lhs.abs() < 1e-10);
    }

    #[test]
    fn norms_of_simple_fields() {
        let l = lat(1, 8);
        let g = flat_metric(&l);
        let z = norms(&LatticeField::zeros(&l, ENDO), &g, 3).unwrap();
        assert!(z.sup_by_order.iter().chain(&z.sobolev_l2_by_order).all(|v| *v == 0.0));
        let id = LatticeField::constant(&l, ENDO, &tensor::identity(2)).unwrap();
        let r = norms(&id, &g, 2).unwrap();
        assert!((r.sup_by_order[0] - 1.0).abs() < 1e-14);
        assert!(r.sup_by_order[1..].iter().all(|v| *v < 1e-12));
        assert_eq!(r.l2, r.sobolev_l2_by_order[0]);
        // Single mode a·sin(x₀): every derivative order has sup |a|.
        let a = 0.7;
        let m = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = a * x[0].sin());
        let r = norms(&m, &g, 3).unwrap();
        for s in &r.sup_by_order {
            assert!((s - a).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn norms_are_monotone_in_k() {
        let l = lat(1, 8);
        let g = flat_metric(&l);
        let f = LatticeField::from_fn(&l, FORM, |x, o| {
            o[1] = (x[0] + x[1]).sin();
            o[2] = -o[1];
        });
        let r2 = norms(&f, &g, 2).unwrap();
        let r3 = norms(&f, &g, 3).unwrap();
        assert_eq!(r2.sup_by_order[..], r3.sup_by_order[..3]);
        assert_eq!(r2.sobolev_l2_by_order[..], r3.sobolev_l2_by_order[..3]);
    }

    #[test]
    fn resolution_doubling_preserves_l2() {
        let f = |m| {
            let l = lat(1, m);
            let g = flat_metric(&l);
            let f = LatticeField::from_fn(&l, ENDO, |x, o| {
                o[0] = (x[0] - 2.0 * x[1]).sin();
                o[3] = x[1].cos() * 0.2;
            });
            norms(&f, &g, 1).unwrap()
        };
        let (a, b) = (f(8), f(16));
        assert!((a.l2 - b.l2).abs() < 1e-10);
        assert!((a.sobolev_l2_by_order[1] - b.sobolev_l2_by_order[1]).abs() < 1e-10);
    }

    #[test]
    fn norms_reject_indefinite_metric() {
        let l = lat(1, 4);
        let g = LatticeField::constant(&l, FORM, &[1.0, 0.0, 0.0, -1.0]).unwrap();
        let f = LatticeField::zeros(&l, SCALAR);
        assert!(matches!(norms(&f, &g, 0), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn metric_enters_norms() {
        // |dx|_g for g = 4·δ is 1/2.
        let l = lat(1, 4);
        let g = LatticeField::constant(&l, FORM, &[4.0, 0.0, 0.0, 4.0]).unwrap();
        let f = LatticeField::constant(&l, &[Slot::Down], &[1.0, 0.0]).unwrap();
        assert!((norms(&f, &g, 0).unwrap().sup_by_order[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn dealias_keeps_resolved_modes() {
        let l = lat(1, 12);
        let low = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = (4.0 * x[0]).sin() + x[1].cos());
        assert!(dealias(&low).sub(&low).max_abs() < 1e-12);
        let high = LatticeField::from_fn(&l, SCALAR, |x, o| o[0] = (5.0 * x[1]).cos());
        assert!(dealias(&high).max_abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let l = lat(1, 4);
        let mut data = vec![0.0; 16];
        data[3] = f64::NAN;
        assert!(LatticeField::from_data(&l, SCALAR, data).is_err());
    }
}
