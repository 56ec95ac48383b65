//! CSV and JSON artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::experiment::SeriesRow;
use crate::error::Result;

/// Time series as CSV: `t, rho_l2, psi_l2, psi_c0..psi_ck, gauge, pi0_ratio`.
pub fn series_csv(rows: &[SeriesRow]) -> Result<String> {
    let k = rows.first().map_or(0, |r| r.psi_ck.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "rho_l2".into(), "psi_l2".into()];
    header.extend((0..k).map(|j| format!("psi_c{j}")));
    header.extend(["gauge".to_string(), "pi0_ratio".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t, r.rho_l2, r.psi_l2];
        rec.extend(&r.psi_ck);
        rec.extend([r.gauge, r.pi0_ratio]);
        w.write_record(rec.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Parse the output of [`series_csv`].
pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let cols = r.headers()?.len();
    let k = cols.saturating_sub(5);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| crate::Error::InvalidInput(format!("csv value: {e}")))?;
        if v.len() != cols || cols < 5 {
            return Err(crate::Error::InvalidInput("csv row width mismatch".into()));
        }
        out.push(SeriesRow {
            t: v[0],
            rho_l2: v[1],
            psi_l2: v[2],
            psi_ck: v[3..3 + k].to_vec(),
            gauge: v[3 + k],
            pi0_ratio: v[4 + k],
        });
    }
    Ok(out)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let rows = vec![
            SeriesRow {
                t: 0.1,
                rho_l2: 1.0 / 3.0,
                psi_l2: 2e-300,
                psi_ck: vec![0.5, 1.25e-7],
                gauge: 7.0,
                pi0_ratio: 0.0,
            },
            SeriesRow {
                t: 0.2,
                rho_l2: std::f64::consts::PI,
                psi_l2: 1.0,
                psi_ck: vec![0.1, 0.2],
                gauge: 0.0,
                pi0_ratio: 1e-9,
            },
        ];
        let text = series_csv(&rows).unwrap();
        assert!(text.starts_with("t,rho_l2,psi_l2,psi_c0,psi_c1,gauge,pi0_ratio\n"));
        assert_eq!(parse_series_csv(&text).unwrap(), rows);
    }
}
