//! Per-epoch metrics rows and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use salguide_core::EvalResult;

use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: &str = "run_id,epoch,domain,accuracy,pointing_hits,pointing_total,mean_loss";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub domain: String,
    pub accuracy: f64,
    pub pointing_hits: usize,
    pub pointing_total: usize,
    pub mean_loss: f64,
}

impl MetricsRow {
    pub fn from_eval(run_id: &str, epoch: usize, domain: &str, r: &EvalResult) -> Self {
        Self {
            run_id: run_id.into(),
            epoch,
            domain: domain.into(),
            accuracy: r.accuracy(),
            pointing_hits: r.pointing_hits,
            pointing_total: r.pointing_total,
            mean_loss: r.mean_loss,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        if self.pointing_total == 0 {
            0.0
        } else {
            self.pointing_hits as f64 / self.pointing_total as f64
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{},{:.6}",
            self.run_id, self.epoch, self.domain, self.accuracy, self.pointing_hits, self.pointing_total, self.mean_loss
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(HarnessError::malformed(path, "unexpected metrics header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || HarnessError::malformed(path, format!("malformed metrics row {line:?}"));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(MetricsRow {
                run_id: f[0].into(),
                epoch: f[1].parse().map_err(|_| bad())?,
                domain: f[2].into(),
                accuracy: f[3].parse().map_err(|_| bad())?,
                pointing_hits: f[4].parse().map_err(|_| bad())?,
                pointing_total: f[5].parse().map_err(|_| bad())?,
                mean_loss: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricsRow {
                run_id: "r".into(),
                epoch: 3,
                domain: "source".into(),
                accuracy: 0.5,
                pointing_hits: 2,
                pointing_total: 4,
                mean_loss: 0.6931471805599453,
            },
            MetricsRow {
                run_id: "r".into(),
                epoch: 3,
                domain: "sketch".into(),
                accuracy: 1.0 / 3.0,
                pointing_hits: 0,
                pointing_total: 0,
                mean_loss: 1.0,
            },
        ];
        let text = to_csv(&rows);
        assert!(text.starts_with("run_id,epoch,domain,accuracy,pointing_hits,pointing_total,mean_loss\n"));
        assert!(text.contains("r,3,source,0.500000,2,4,0.693147\n"));
        let back = parse_csv(&text, Path::new("m.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].accuracy, 0.333333);
        assert_eq!(to_csv(&back), text);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_csv("a,b\n", Path::new("m.csv")).is_err());
    }
}
