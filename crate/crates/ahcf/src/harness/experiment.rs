//! Experiment pipeline: generate, evolve, fit, re-center, sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analysis::{self, DecayReport, RecenterRecord, RecenterSummary};
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::flow::{self, FlowFailure, Trajectory};
use crate::lattice::Lattice;
use crate::linear::{self, LinearOperator, SpectrumMethod, SpectrumOptions, SpectrumReport, SpectrumSummary};
use crate::perturb::{self, Perturbation};
use crate::structure::AHStructure;

/// One CSV row of the recorded time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub rho_l2: f64,
    pub psi_l2: f64,
    /// `|ψ|_{Cʲ}` for `j = 0..=k`.
    pub psi_ck: Vec<f64>,
    pub gauge: f64,
    pub pi0_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    /// Zero amplitude: the flat structure does not move.
    Static,
    Completed,
    /// Some stage failed; the report holds everything computed before it.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

impl StageError {
    fn new(stage: &str, e: &Error) -> StageError {
        StageError {
            stage: stage.to_string(),
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub status: ExperimentStatus,
    pub spectrum: Option<SpectrumSummary>,
    /// Gap used for fits: the spectrum's, else the analytic value 1 for side 2π.
    pub gap_lambda: f64,
    pub series: Vec<SeriesRow>,
    /// Fit of `|ψ|_{L²}` against `e^{−λt}`.
    pub decay_psi: Option<DecayReport>,
    /// Fit of `|ψ|²_{L²}` against `e^{−λt}`.
    pub decay_psi_squared: Option<DecayReport>,
    /// Fit of the mean-free part `|ψ − π₀ψ|_{L²}`.
    pub decay_psi_mean_free: Option<DecayReport>,
    pub recenter_interval: f64,
    pub recenter: Vec<RecenterSummary>,
    /// `|ref_{j+1} − ref_j|_{C⁰}`, starting from the base structure.
    pub reference_steps: Vec<f64>,
    /// `C_j = |ref_j − base|_{Cᵏ} / sup_{t ≤ t_j} |ψ|_{Cᵏ}`.
    pub neighborhood_constants: Vec<f64>,
    /// Fits of `|ρ_j|²_{L²}` over each re-centering interval, judged against `λ`.
    pub rho_j_decay: Vec<DecayReport>,
    /// `(t, |ρ|_{L²})` against the last reference.
    pub limit_distance: Vec<(f64, f64)>,
    /// Mean-mode drift `|π₀ψ(t)|_{L²}` against the base structure.
    pub mean_mode_drift: Vec<(f64, f64)>,
    /// `|π₀ψ(0)|` via the spectrum's kernel basis minus via mean extraction.
    pub kernel_projection_check: Option<f64>,
    pub failure: Option<FlowFailure>,
    pub errors: Vec<StageError>,
}

/// Everything a run produced, including the in-memory trajectory.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub trajectory: Trajectory,
    pub records: Vec<RecenterRecord>,
}

pub fn base_structure(cfg: &ExperimentConfig) -> Result<AHStructure> {
    Ok(AHStructure::standard(&Lattice::new(cfg.lattice_spec())?))
}

pub fn initial_structure(cfg: &ExperimentConfig) -> Result<AHStructure> {
    let base = base_structure(cfg)?;
    perturb::generate_perturbation(&base, cfg.amplitude, (cfg.mode_band[0], cfg.mode_band[1]), cfg.seed)
}

/// Spectrum of the linearization at the base structure, dense when small.
pub fn base_spectrum(cfg: &ExperimentConfig) -> Result<SpectrumReport> {
    let base = base_structure(cfg)?;
    let op = LinearOperator::new(&base, cfg.s_param)?;
    let method = if op.dim() <= linear::DENSE_MAX_DIM {
        SpectrumMethod::Dense
    } else {
        SpectrumMethod::Iterative
    };
    linear::spectrum(
        &op,
        &SpectrumOptions {
            method,
            count: op.fiber_dim() + 4,
            seed: cfg.seed,
            ..SpectrumOptions::default()
        },
    )
}

pub fn series_rows(traj: &Trajectory, reference: &AHStructure, k: usize) -> Result<Vec<SeriesRow>> {
    traj.frames
        .par_iter()
        .map(|f| {
            let rho = Perturbation::between(&f.structure, reference)?;
            let psi = perturb::psi_from_rho(&rho, reference)?;
            let pn = psi.norms(reference, k)?;
            Ok(SeriesRow {
                t: f.t,
                rho_l2: rho.norms(reference, 0)?.l2,
                psi_l2: pn.l2,
                psi_ck: (0..=k).map(|j| pn.ck(j)).collect(),
                gauge: f.diagnostics.gauge,
                pi0_ratio: analysis::pi0_ratio(&psi),
            })
        })
        .collect()
}

fn fit_window(cfg: &ExperimentConfig, t_end: f64) -> [f64; 2] {
    [cfg.fit_window_fraction * t_end, t_end]
}

/// Full pipeline. Stage failures are embedded in the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let base = base_structure(cfg)?;
    let initial = initial_structure(cfg)?;
    let mut errors = Vec::new();
    let spectrum = match base_spectrum(cfg) {
        Ok(s) => Some(s),
        Err(e) => {
            errors.push(StageError::new("spectrum", &e));
            None
        }
    };
    let gap = spectrum.as_ref().and_then(|s| s.gap_lambda).unwrap_or_else(|| {
        let k = base.lattice().wavenumber(1);
        k * k
    });
    let traj = flow::run(&initial, &cfg.flow_params(), cfg.t_end, cfg.record_every)?;
    let t_last = traj.frames.last().map_or(0.0, |f| f.t);
    let k = cfg.norm_order;
    let series = series_rows(&traj, &base, k)?;
    let kernel_projection_check = match (&spectrum, traj.frames.first()) {
        (Some(rep), Some(f0)) if rep.kernel_dimension > 0 => {
            let psi = perturb::psi_of(&f0.structure, &base)?;
            Some(linear::kernel_projection(&psi, rep).sub(&analysis::pi0(&psi)).max_abs())
        }
        _ => None,
    };
    let mean_mode_drift = traj
        .frames
        .iter()
        .map(|f| Ok((f.t, analysis::pi0(&perturb::psi_of(&f.structure, &base)?).l2())))
        .collect::<Result<Vec<_>>>()?;
    let recenter_interval = cfg.recenter_t.unwrap_or(3.0 / gap);
    let mut report = ExperimentReport {
        config: cfg.clone(),
        status: ExperimentStatus::Completed,
        spectrum: spectrum.as_ref().map(|s| s.summary()),
        gap_lambda: gap,
        series,
        decay_psi: None,
        decay_psi_squared: None,
        decay_psi_mean_free: None,
        recenter_interval,
        recenter: Vec::new(),
        reference_steps: Vec::new(),
        neighborhood_constants: Vec::new(),
        rho_j_decay: Vec::new(),
        limit_distance: Vec::new(),
        mean_mode_drift,
        kernel_projection_check,
        failure: traj.failure.clone(),
        errors,
    };
    let mut records = Vec::new();
    if cfg.amplitude == 0.0 {
        report.status = ExperimentStatus::Static;
        return Ok(ExperimentOutput {
            report,
            trajectory: traj,
            records,
        });
    }

    let window = fit_window(cfg, t_last);
    let psi_series: Vec<(f64, f64)> = report.series.iter().map(|r| (r.t, r.psi_l2)).collect();
    let squared: Vec<(f64, f64)> = psi_series.iter().map(|(t, v)| (*t, v * v)).collect();
    let stage = |name: &str, r: Result<DecayReport>, errors: &mut Vec<StageError>| match r {
        Ok(d) => Some(d),
        Err(e) => {
            errors.push(StageError::new(name, &e));
            None
        }
    };
    report.decay_psi = stage(
        "decay_psi",
        analysis::decay_fit(&psi_series, window).map(|f| DecayReport::new(f, gap, cfg.decay_threshold)),
        &mut report.errors,
    );
    report.decay_psi_squared = stage(
        "decay_psi_squared",
        analysis::decay_fit(&squared, window).map(|f| DecayReport::new(f, gap, cfg.decay_threshold)),
        &mut report.errors,
    );
    let mean_free = traj
        .frames
        .iter()
        .map(|f| {
            let psi = perturb::psi_of(&f.structure, &base)?;
            Ok((f.t, psi.sub(&analysis::pi0(&psi)).l2()))
        })
        .collect::<Result<Vec<_>>>()?;
    report.decay_psi_mean_free = stage(
        "decay_psi_mean_free",
        analysis::decay_fit(&mean_free, window).map(|f| DecayReport::new(f, gap, cfg.decay_threshold)),
        &mut report.errors,
    );

    // Iterated re-centering at t0 + jT.
    let mut reference = base.clone();
    let mut j = 0;
    loop {
        let tj = cfg.recenter_t0 + j as f64 * recenter_interval;
        if j >= cfg.recenter_intervals || tj > t_last + 1e-9 {
            break;
        }
        let rec = match analysis::recenter(&traj.frames, tj, &reference, &base, k) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(StageError::new("recenter", &e));
                break;
            }
        };
        report.reference_steps.push(analysis::reference_distance(&rec.reference, &reference, &base)?);
        let sup_psi = report
            .series
            .iter()
            .filter(|r| r.t <= rec.t0 + 1e-12)
            .map(|r| r.psi_ck[k])
            .fold(0.0, f64::max);
        report
            .neighborhood_constants
            .push(if sup_psi > 0.0 { rec.neighborhood_norm / sup_psi } else { 0.0 });
        let end = (tj + recenter_interval).min(t_last);
        let rho_sq = traj
            .frames
            .iter()
            .filter(|f| f.t >= rec.t0 - 1e-12 && f.t <= end + 1e-12)
            .map(|f| Ok((f.t, Perturbation::between(&f.structure, &rec.reference)?.norms(&base, 0)?.l2.powi(2))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = stage(
            "rho_j_decay",
            analysis::decay_fit(&rho_sq, [rec.t0, end]).map(|f| DecayReport::new(f, gap, 0.4)),
            &mut report.errors,
        ) {
            report.rho_j_decay.push(d);
        }
        reference = rec.reference.clone();
        report.recenter.push(rec.summary());
        records.push(rec);
        j += 1;
    }
    report.limit_distance = traj
        .frames
        .iter()
        .map(|f| Ok((f.t, Perturbation::between(&f.structure, &reference)?.norms(&base, 0)?.l2)))
        .collect::<Result<Vec<_>>>()?;
    if report.failure.is_some() || !report.errors.is_empty() {
        report.status = ExperimentStatus::Partial;
    }
    Ok(ExperimentOutput {
        report,
        trajectory: traj,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub amplitude: f64,
    pub initial_norm: f64,
    /// `sup_{[0,T]} |ρ|_{Cᵏ}`.
    pub sup_norm: f64,
    pub sup_over_initial: f64,
    pub failure: Option<FlowFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub t_end: f64,
    pub order: usize,
    pub entries: Vec<SweepEntry>,
    /// `sup(ε_i) / sup(ε_{i+1})` for consecutive entries.
    pub ratios: Vec<f64>,
    /// Sup norms shrink with the amplitude.
    pub monotone: bool,
}

/// Largest amplitude accepted by the sweep.
pub const SWEEP_MAX_AMPLITUDE: f64 = 0.05;

/// Run the base config at each amplitude up to `t_end` and record `sup |ρ|_{Cᵏ}`.
pub fn start_close_stay_close(base: &ExperimentConfig, amplitudes: &[f64], t_end: f64, k: usize) -> Result<SweepReport> {
    if amplitudes.is_empty() {
        return Err(Error::InvalidInput("no amplitudes".into()));
    }
    if let Some(a) = amplitudes.iter().find(|a| !(**a >= 0.0 && **a <= SWEEP_MAX_AMPLITUDE)) {
        return Err(Error::InvalidInput(format!(
            "sweep amplitude {a} outside [0, {SWEEP_MAX_AMPLITUDE}]"
        )));
    }
    let entries = amplitudes
        .par_iter()
        .map(|&amplitude| {
            let cfg = ExperimentConfig {
                amplitude,
                t_end,
                ..base.clone()
            };
            cfg.validate()?;
            let reference = base_structure(&cfg)?;
            let init = initial_structure(&cfg)?;
            let initial_norm = Perturbation::between(&init, &reference)?.norms(&reference, k)?.ck(k);
            let mut sup = initial_norm;
            let summary = flow::run_with(&init, &cfg.flow_params(), t_end, cfg.record_every, |st| {
                let n = Perturbation::between(&st.structure, &reference)?.norms(&reference, k)?.ck(k);
                sup = sup.max(n);
                Ok(())
            })?;
            Ok(SweepEntry {
                amplitude,
                initial_norm,
                sup_norm: sup,
                sup_over_initial: if initial_norm > 0.0 { sup / initial_norm } else { 0.0 },
                failure: summary.failure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios = entries
        .windows(2)
        .map(|w| if w[1].sup_norm > 0.0 { w[0].sup_norm / w[1].sup_norm } else { f64::INFINITY })
        .map(|r| if r.is_finite() { r } else { 0.0 })
        .collect();
    let mut sorted: Vec<&SweepEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude));
    let monotone = sorted.windows(2).all(|w| w[0].sup_norm <= w[1].sup_norm);
    Ok(SweepReport {
        t_end,
        order: k,
        entries,
        ratios,
        monotone,
    })
}
