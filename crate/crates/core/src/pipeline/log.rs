//! Line-delimited JSON training log, one record per epoch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::error::{Error, Result};
use crate::losses::StageLossReport;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Gumbel temperature, pretraining only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Code perplexity over the epoch, pretraining only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    /// Mean over the epoch's batches.
    pub report: StageLossReport,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: EpochRecord = serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("metrics log line {}: {e}", i + 1)))?;
            Ok(r)
        })
        .collect()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text)
}

/// Appends records to a log file, creating it if needed.
pub fn append_log(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let r = EpochRecord {
            stage: Stage::Pretrain,
            epoch: 3,
            steps: 20,
            lr: 1e-3 * 0.97f64.powi(3),
            temperature: Some(1.2),
            perplexity: Some(17.25),
            report: StageLossReport {
                rec: 0.1 + 0.2,
                cb: 1.0 / 3.0,
                w_cb: 0.1,
                total: 0.5,
                ..Default::default()
            },
        };
        let text = format!("{}\n\n{}\n", r.to_line(), r.to_line());
        let back = parse_log(&text).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
        assert!(parse_log("{\"stage\":\"pretrain\"}").is_err());
    }
}
