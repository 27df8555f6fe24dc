use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Model-lifetime token counter after this step.
    pub tokens_seen: u64,
    pub lr: f64,
    pub lm_loss: f64,
    /// Mean over all routers.
    pub mi_loss: f64,
    pub concentration_loss: f64,
    pub routing_reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Selection entropy of each feed-forward layer over this step's batch.
    pub usage_entropy: Vec<f64>,
    pub expert_evals: Vec<usize>,
    pub head_evals: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Appends `r`, which must advance both counters.
    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(prev) = self.records.last() {
            if r.step <= prev.step || r.tokens_seen <= prev.tokens_seen {
                return Err(contract_err!(
                    "step {} / tokens {} do not advance past {} / {}",
                    r.step,
                    r.tokens_seen,
                    prev.step,
                    prev.tokens_seen
                ));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("plain record"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line).map_err(|e| contract_err!("bad metrics line: {e}"))?;
            log.push(r)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> StepRecord {
        StepRecord {
            step,
            tokens_seen: 64 * step,
            lr: 1e-3,
            lm_loss: 2.5,
            mi_loss: -0.1,
            concentration_loss: 1.9,
            routing_reg: 0.0,
            total: 2.499,
            grad_norm: 0.7,
            usage_entropy: vec![1.8, 2.0],
            expert_evals: vec![128, 128],
            head_evals: vec![128, 128],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = MetricsLog::default();
        log.push(record(1)).unwrap();
        log.push(record(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(log.to_jsonl().lines().count(), 2);
        assert_eq!(MetricsLog::read_jsonl(&p).unwrap(), log);
    }

    #[test]
    fn counters_must_advance() {
        let mut log = MetricsLog::default();
        log.push(record(2)).unwrap();
        assert!(log.push(record(2)).is_err());
        assert!(log.push(record(1)).is_err());
    }
}
