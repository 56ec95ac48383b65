//! `ahcf` command-line front end.
//!
//! Every verb resolves one configuration, runs, writes its artifacts into
//! `--out`, and finishes with `manifest.json` listing the resolved config and
//! the sha256 of each artifact.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahcf::connection;
use ahcf::flow;
use ahcf::harness::analysis::{decay_fit, DecayReport};
use ahcf::harness::experiment::{base_spectrum, base_structure, initial_structure, SweepReport};
use ahcf::harness::output::{parse_series_csv, series_csv, to_json};
use ahcf::harness::{checkpoint, config, run_experiment, start_close_stay_close, ExperimentConfig};
use ahcf::linear;
use ahcf::structure;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

/// Environment variable selecting the worker thread count.
const THREADS_ENV: &str = "AHCF_THREADS";

/// Tolerance applied by `verify-identities`.
const IDENTITY_TOL: f64 = 1e-8;

#[derive(Parser, Debug)]
#[command(
    name = "ahcf",
    version,
    about = "Numerical laboratory for the almost Hermitian curvature flow on flat tori",
    after_help = "Configuration precedence, lowest to highest: built-in defaults, --config file, \
--overrides, --seed.\n\nEnvironment:\n  AHCF_THREADS  worker threads (default: available cores)\n\n\
Exit status: 0 success, 1 failure (error JSON on stderr), 2 usage error."
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "ahcf-out")]
    out: PathBuf,
    /// Comma-separated key=value pairs applied over the config file.
    #[arg(long, global = true, value_name = "K=V[,K=V...]")]
    overrides: Option<String>,
    /// Random seed, applied last.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress the stdout summary.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Evolve a perturbation of the flat structure; write the series, report and trajectory.
    Simulate,
    /// Spectrum of the linearized operator at the flat structure.
    Spectrum,
    /// Check fixed point, Weitzenböck and compatibility residuals; nonzero exit on failure.
    VerifyIdentities,
    /// Fit exponential decay to a series CSV, or to a fresh run when none is given.
    DecayFit {
        /// Series CSV written by `simulate`.
        #[arg(long, value_name = "PATH")]
        series: Option<PathBuf>,
    },
    /// Run with iterated re-centering and report the reference sequence.
    Recenter,
    /// Start-close/stay-close sweep over amplitudes.
    Sweep {
        /// Amplitudes; defaults to the config amplitude and its two halvings.
        #[arg(long, value_delimiter = ',')]
        amplitudes: Option<Vec<f64>>,
        /// Derivative order of the sup norm.
        #[arg(long, default_value_t = 2)]
        order: usize,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Simulate => "simulate",
            Verb::Spectrum => "spectrum",
            Verb::VerifyIdentities => "verify-identities",
            Verb::DecayFit { .. } => "decay-fit",
            Verb::Recenter => "recenter",
            Verb::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Debug)]
enum Failure {
    Lib(ahcf::Error),
    /// `verify-identities` found residuals above tolerance.
    Identities(Vec<String>),
}

impl From<ahcf::Error> for Failure {
    fn from(e: ahcf::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Lib(e) => json!({ "error": e.kind(), "message": e.to_string() }),
            Failure::Identities(names) => json!({
                "error": "identity_check",
                "message": format!("residuals above {IDENTITY_TOL:e}: {}", names.join(", ")),
                "failed": names,
            }),
        }
    }
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    verb: &'a str,
    config: &'a ExperimentConfig,
    config_toml: String,
    config_file: Option<String>,
    overrides: Vec<(String, String)>,
    artifacts: &'a [Artifact],
}

/// Collects artifacts written during one run.
struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Writer, Failure> {
        std::fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(Artifact {
            file: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let text = to_json(value)?;
        self.put(name, text.as_bytes())
    }
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, Vec<(String, String)>), Failure> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            ahcf::Error::Config(format!("cannot read {}: {e}", p.display()))
        })?,
        None => String::new(),
    };
    let overrides = match &cli.overrides {
        Some(s) => config::parse_overrides(s)?,
        None => Vec::new(),
    };
    let mut cfg = config::resolve(&text, &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, overrides))
}

#[derive(Serialize)]
struct IdentityRow {
    name: &'static str,
    residual: f64,
    tolerance: f64,
    pass: bool,
}

fn verify_identities(cfg: &ExperimentConfig) -> ahcf::Result<Vec<IdentityRow>> {
    let base = base_structure(cfg)?;
    let params = cfg.flow_params();
    let mut rows = Vec::new();
    let mut push = |name, residual: f64| {
        rows.push(IdentityRow {
            name,
            residual,
            tolerance: IDENTITY_TOL,
            pass: residual < IDENTITY_TOL,
        })
    };
    let v = flow::rhs(&base, &params)?;
    push("fixed_point_rhs", v.omega_dot.max_abs().max(v.j_dot.max_abs()));
    let mut st = flow::FlowState::new(base.clone())?;
    for _ in 0..100 {
        st = flow::step(&st, &params)?;
    }
    push(
        "fixed_point_drift_100_steps",
        st.structure.g().sub(base.g()).max_abs().max(st.structure.j().sub(base.j()).max_abs()),
    );
    let w = linear::weitzenbock_residual(&base, 10, cfg.seed)?;
    push("weitzenbock_form_11", w.form_11);
    push("weitzenbock_form_20", w.form_20);
    push("weitzenbock_endo", w.endo);
    let init = initial_structure(cfg)?;
    let diag = structure::check_structure(&init);
    push("compatibility", diag.max_residual());
    let (_, r) = connection::canonical_connection_with_residuals(&init)?;
    push("canonical_metric", r.metric);
    push("canonical_complex", r.complex);
    push("canonical_torsion_11", r.torsion_11);
    Ok(rows)
}

fn fit_series(rows: &[ahcf::harness::SeriesRow], cfg: &ExperimentConfig, gap: f64) -> ahcf::Result<serde_json::Value> {
    let t_max = rows.last().map_or(0.0, |r| r.t);
    let window = [cfg.fit_window_fraction * t_max, t_max];
    let psi: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.psi_l2)).collect();
    let psi2: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.psi_l2 * r.psi_l2)).collect();
    let a = DecayReport::new(decay_fit(&psi, window)?, gap, cfg.decay_threshold);
    let b = DecayReport::new(decay_fit(&psi2, window)?, gap, cfg.decay_threshold);
    Ok(json!({ "gap_lambda": gap, "window": window, "psi_l2": a, "psi_l2_squared": b }))
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let (cfg, overrides) = resolve_config(cli)?;
    let mut out = Writer::new(&cli.out)?;
    let mut failure = None;
    let summary = match &cli.verb {
        Verb::Simulate => {
            let res = run_experiment(&cfg)?;
            let csv = series_csv(&res.report.series)?;
            out.put("series.csv", csv.as_bytes())?;
            out.put_json("report.json", &res.report)?;
            out.put("trajectory.ckpt", &checkpoint::encode(&res.trajectory)?)?;
            format!(
                "status {:?}, {} frames, final |psi| {:.3e}",
                res.report.status,
                res.report.series.len(),
                res.report.series.last().map_or(0.0, |r| r.psi_l2)
            )
        }
        Verb::Spectrum => {
            let s = base_spectrum(&cfg)?.summary();
            out.put_json("spectrum.json", &s)?;
            to_json(&s)?
        }
        Verb::VerifyIdentities => {
            let rows = verify_identities(&cfg)?;
            out.put_json("identities.json", &rows)?;
            let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| r.name.to_string()).collect();
            if !failed.is_empty() {
                failure = Some(Failure::Identities(failed));
            }
            rows.iter()
                .map(|r| format!("{:<30} {:.3e} {}", r.name, r.residual, if r.pass { "ok" } else { "FAIL" }))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Verb::DecayFit { series } => {
            let rows = match series {
                Some(p) => parse_series_csv(&std::fs::read_to_string(p)?)?,
                None => run_experiment(&cfg)?.report.series,
            };
            let gap = base_spectrum(&cfg)?.gap_lambda.unwrap_or(1.0);
            let fits = fit_series(&rows, &cfg, gap)?;
            out.put_json("decay_fit.json", &fits)?;
            to_json(&fits)?
        }
        Verb::Recenter => {
            let res = run_experiment(&cfg)?;
            let r = &res.report;
            let body = json!({
                "gap_lambda": r.gap_lambda,
                "interval": r.recenter_interval,
                "records": r.recenter,
                "reference_steps": r.reference_steps,
                "neighborhood_constants": r.neighborhood_constants,
                "rho_j_decay": r.rho_j_decay,
                "limit_distance": r.limit_distance,
                "mean_mode_drift": r.mean_mode_drift,
                "errors": r.errors,
            });
            out.put("series.csv", series_csv(&r.series)?.as_bytes())?;
            out.put_json("recenter.json", &body)?;
            format!("{} re-centerings, reference steps {:?}", r.recenter.len(), r.reference_steps)
        }
        Verb::Sweep { amplitudes, order } => {
            let amps = amplitudes
                .clone()
                .unwrap_or_else(|| vec![cfg.amplitude, cfg.amplitude / 2.0, cfg.amplitude / 4.0]);
            let rep: SweepReport = start_close_stay_close(&cfg, &amps, cfg.t_end, *order)?;
            out.put_json("sweep.json", &rep)?;
            format!("sup/initial {:.3?}, halving ratios {:.3?}", rep.entries.iter().map(|e| e.sup_over_initial).collect::<Vec<_>>(), rep.ratios)
        }
    };
    let manifest = Manifest {
        tool: "ahcf",
        version: env!("CARGO_PKG_VERSION"),
        verb: cli.verb.name(),
        config: &cfg,
        config_toml: cfg.to_toml(),
        config_file: cli.config.as_ref().map(|p| p.display().to_string()),
        overrides,
        artifacts: &out.artifacts,
    };
    std::fs::write(out.dir.join("manifest.json"), to_json(&manifest)?)?;
    match failure {
        Some(f) => {
            if !cli.quiet {
                println!("{summary}");
            }
            Err(f)
        }
        None => Ok(summary),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| ahcf::Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ahcf::Error::Config(format!("thread pool: {e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(summary) => {
            if !cli.quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(1)
        }
    }
}
