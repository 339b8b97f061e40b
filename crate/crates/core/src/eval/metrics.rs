//! Append-only metric records persisted as `run_id,stage,epoch,metric,value` CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run_id,stage,epoch,metric,value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// Records of one run. Stages appear in contiguous blocks and epochs never
/// decrease within a stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub run_id: String,
    records: Vec<MetricsRecord>,
}

fn check_field(name: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.contains([',', '\n', '\r']) {
        return Err(Error::invalid(format!("metrics {name} {v:?} must be non-empty without commas")));
    }
    Ok(())
}

impl MetricsLog {
    pub fn new(run_id: impl Into<String>) -> Result<Self> {
        let run_id = run_id.into();
        check_field("run id", &run_id)?;
        Ok(Self {
            run_id,
            records: Vec::new(),
        })
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn push(&mut self, stage: &str, epoch: usize, metric: &str, value: f64) -> Result<()> {
        check_field("stage", stage)?;
        check_field("metric", metric)?;
        if let Some(last) = self.records.last() {
            if last.stage == stage {
                if epoch < last.epoch {
                    return Err(Error::invalid(format!(
                        "metrics for stage {stage} went back from epoch {} to {epoch}",
                        last.epoch
                    )));
                }
            } else if self.records.iter().any(|r| r.stage == stage) {
                return Err(Error::invalid(format!("metrics stage {stage} reopened after {}", last.stage)));
            }
        }
        self.records.push(MetricsRecord {
            run_id: self.run_id.clone(),
            stage: stage.to_string(),
            epoch,
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    /// Values of one metric in a stage, in epoch order.
    pub fn series(&self, stage: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.run_id, r.stage, r.epoch, r.metric, r.value);
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::format(path, "missing metrics header"));
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::format(path, format!("line {}: malformed record {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [run, stage, epoch, metric, value] = f[..] else {
                return Err(bad());
            };
            if log.run_id.is_empty() {
                log.run_id = run.to_string();
            }
            if run != log.run_id {
                return Err(bad());
            }
            log.push(
                stage,
                epoch.parse().map_err(|_| bad())?,
                metric,
                value.parse().map_err(|_| bad())?,
            )?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::new("run").unwrap();
        log.push("pretrain", 0, "loss", 0.1 + 0.2).unwrap();
        log.push("pretrain", 1, "loss", f64::NAN).unwrap();
        log.push("search", 0, "loss", -1.5e-7).unwrap();
        let back = MetricsLog::from_csv(&log.to_csv(), Path::new("m.csv")).unwrap();
        assert_eq!(back.records()[0], log.records()[0]);
        assert!(back.records()[1].value.is_nan());
        assert_eq!(back.series("search", "loss"), vec![-1.5e-7]);
    }

    #[test]
    fn ordering_is_enforced() {
        let mut log = MetricsLog::new("run").unwrap();
        log.push("pretrain", 2, "loss", 1.0).unwrap();
        assert!(log.push("pretrain", 1, "loss", 1.0).is_err());
        log.push("search", 0, "loss", 1.0).unwrap();
        assert!(log.push("pretrain", 3, "loss", 1.0).is_err());
        assert!(log.push("a,b", 0, "loss", 1.0).is_err());
    }
}
