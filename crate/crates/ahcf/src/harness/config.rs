//! Experiment configuration: a TOML key-value file plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::lattice::{Lattice, LatticeSpec};
use crate::perturb::MAX_AMPLITUDE;

/// Keys accepted in config files and overrides.
pub const DOCUMENTED_KEYS: &[&str] = &[
    "n",
    "points_per_axis",
    "side_length",
    "amplitude",
    "mode_band",
    "seed",
    "dt",
    "t_end",
    "record_every",
    "s_param",
    "recenter_T",
    "fit_window_fraction",
    "norm_order",
    "recenter_t0",
    "recenter_intervals",
    "decay_threshold",
    "deturck",
    "dealias",
];

/// Largest config file accepted, in bytes.
pub const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub points_per_axis: usize,
    pub side_length: f64,
    pub amplitude: f64,
    /// Inclusive range of `|m|_∞` for the random perturbation modes.
    pub mode_band: [usize; 2],
    pub seed: u64,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub s_param: f64,
    /// Re-centering interval; defaults to `3 / gap`.
    #[serde(rename = "recenter_T", skip_serializing_if = "Option::is_none")]
    pub recenter_t: Option<f64>,
    /// Fraction of the run excluded from decay fits as transient.
    pub fit_window_fraction: f64,
    /// Highest derivative order in `Cᵏ` reports.
    pub norm_order: usize,
    /// First re-centering time.
    pub recenter_t0: f64,
    pub recenter_intervals: usize,
    /// Fit verdict passes when `rate ≥ decay_threshold × gap`.
    pub decay_threshold: f64,
    pub deturck: bool,
    pub dealias: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 1,
            points_per_axis: 16,
            side_length: 2.0 * std::f64::consts::PI,
            amplitude: 1e-2,
            mode_band: [1, 2],
            seed: 0,
            dt: 0.01,
            t_end: 5.0,
            record_every: 10,
            s_param: 0.0,
            recenter_t: None,
            fit_window_fraction: 0.2,
            norm_order: 2,
            recenter_t0: 1.0,
            recenter_intervals: 4,
            decay_threshold: 0.8,
            deturck: true,
            dealias: true,
        }
    }
}

impl ExperimentConfig {
    pub fn lattice_spec(&self) -> LatticeSpec {
        LatticeSpec {
            n: self.n,
            points_per_axis: self.points_per_axis,
            side_length: self.side_length,
        }
    }

    pub fn flow_params(&self) -> FlowParams {
        FlowParams {
            dt: self.dt,
            deturck: self.deturck,
            dealias: self.dealias,
            ..FlowParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lat = Lattice::new(self.lattice_spec())?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.amplitude.is_finite() && (0.0..MAX_AMPLITUDE).contains(&self.amplitude)) {
            return bad(format!("amplitude {} must lie in [0, {MAX_AMPLITUDE})", self.amplitude));
        }
        let [lo, hi] = self.mode_band;
        if hi == 0 || lo > hi || 2 * hi >= self.points_per_axis {
            return bad(format!("mode_band [{lo}, {hi}] must satisfy lo ≤ hi, 1 ≤ hi < N/2"));
        }
        // TOML integers are signed, so larger seeds could not be written back.
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return bad(format!("t_end {} must be positive", self.t_end));
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        if !self.s_param.is_finite() {
            return bad("s_param must be finite".into());
        }
        if let Some(t) = self.recenter_t {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("recenter_T {t} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.fit_window_fraction) {
            return bad(format!("fit_window_fraction {} must lie in [0, 1)", self.fit_window_fraction));
        }
        if !(self.recenter_t0.is_finite() && self.recenter_t0 >= 0.0) {
            return bad(format!("recenter_t0 {} must be non-negative", self.recenter_t0));
        }
        if !(self.decay_threshold.is_finite() && self.decay_threshold > 0.0) {
            return bad("decay_threshold must be positive".into());
        }
        if self.norm_order > 4 {
            return bad(format!("norm_order {} exceeds 4", self.norm_order));
        }
        let p = self.flow_params();
        p.validate()?;
        p.check_cfl(&lat)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parse config text; unknown keys and malformed values are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table = parse_table(text)?;
    from_table(table)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    if text.len() > MAX_CONFIG_BYTES {
        return Err(Error::Config(format!("config exceeds {MAX_CONFIG_BYTES} bytes")));
    }
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    for k in table.keys() {
        if !DOCUMENTED_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
    }
    Ok(table)
}

fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Split `k=v[,k=v…]`; commas inside `[...]` belong to the value.
pub fn parse_overrides(spec: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut depth = 0_i32;
    let mut cur = String::new();
    let mut flush = |cur: &mut String| -> Result<()> {
        let item = cur.trim();
        if !item.is_empty() {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let k = k.trim();
            if !DOCUMENTED_KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown override key `{k}`")));
            }
            out.push((k.to_string(), v.trim().to_string()));
        }
        cur.clear();
        Ok(())
    };
    for ch in spec.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(Error::Config("unbalanced `]` in overrides".into()));
        }
        if ch == ',' && depth == 0 {
            flush(&mut cur)?;
        } else {
            cur.push(ch);
        }
    }
    if depth != 0 {
        return Err(Error::Config("unbalanced `[` in overrides".into()));
    }
    flush(&mut cur)?;
    Ok(out)
}

/// Config text with overrides applied on top; overrides win.
pub fn resolve(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table = parse_table(text)?;
    for (k, v) in overrides {
        if !DOCUMENTED_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown override key `{k}`")));
        }
        let snippet: toml::Table = format!("{k} = {v}")
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{k}={v}`: {}", e.message())))?;
        let value = snippet
            .get(k.as_str())
            .cloned()
            .ok_or_else(|| Error::Config(format!("override `{k}={v}` has no value")))?;
        table.insert(k.clone(), value);
    }
    from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
        assert_eq!(parse_config("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config(_))));
        assert!(parse_overrides("bogus=1").is_err());
        assert!(parse_config("n = \"one\"").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let o = parse_overrides("points_per_axis=8, mode_band=[1,3],seed=7").unwrap();
        assert_eq!(o.len(), 3);
        let c = resolve("points_per_axis = 12\nmode_band = [1, 1]", &o).unwrap();
        assert_eq!(c.points_per_axis, 8);
        assert_eq!(c.mode_band, [1, 3]);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "amplitude = 0.5",
            "points_per_axis = 7",
            "mode_band = [3, 1]",
            "mode_band = [1, 8]",
            "dt = 1.0",
            "t_end = -1.0",
            "record_every = 0",
            "fit_window_fraction = 1.5",
            "recenter_T = 0.0",
        ] {
            assert!(parse_config(bad).is_err(), "{bad}");
        }
        assert!(parse_overrides("seed=[1").is_err());
        assert!(parse_overrides("seed").is_err());
    }
}
