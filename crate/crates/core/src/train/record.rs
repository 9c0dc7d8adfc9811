//! Run records, serialized as line-delimited JSON: a header line, one line
//! per epoch, and a closing line with the final metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, RunSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Scratch,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub pck_whole: f64,
    /// Mean per-row KL from the trained head to the fresh head (stage 2).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Distillation weight applied during this epoch.
    pub r_t: f64,
    /// Mean batch loss per enabled component, plus `total`.
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EpochEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub name: String,
    pub kind: RunKind,
    pub seed: u64,
    /// Echo of every config that shaped the run.
    pub config: serde_json::Value,
    /// `<split>@<dataset fingerprint>`.
    pub eval_split: String,
    pub epochs: Vec<EpochLog>,
    pub final_metrics: Option<EvalReport>,
    pub status: RunStatus,
    /// Not serialized, so records stay byte-identical across reruns.
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "line", rename_all = "snake_case")]
enum Line {
    Header {
        name: String,
        kind: RunKind,
        seed: u64,
        eval_split: String,
        config: serde_json::Value,
    },
    Epoch(EpochLog),
    Final {
        status: RunStatus,
        metrics: Option<EvalReport>,
    },
}

impl RunRecord {
    pub fn new(name: &str, kind: RunKind, seed: u64, config: serde_json::Value, eval_split: String) -> Self {
        Self {
            name: name.to_string(),
            kind,
            seed,
            config,
            eval_split,
            epochs: Vec::new(),
            final_metrics: None,
            status: RunStatus::Completed,
            wall_clock_secs: 0.0,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![serde_json::to_string(&Line::Header {
            name: self.name.clone(),
            kind: self.kind,
            seed: self.seed,
            eval_split: self.eval_split.clone(),
            config: self.config.clone(),
        })];
        lines.extend(
            self.epochs
                .iter()
                .map(|e| serde_json::to_string(&Line::Epoch(e.clone()))),
        );
        lines.push(serde_json::to_string(&Line::Final {
            status: self.status.clone(),
            metrics: self.final_metrics.clone(),
        }));
        let mut out = String::new();
        for l in lines {
            out.push_str(&l.expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        let mut record: Option<RunRecord> = None;
        let mut closed = false;
        for (i, raw) in text.lines().enumerate() {
            let line: Line = serde_json::from_str(raw).map_err(|e| format!("line {}: {e}", i + 1))?;
            match (line, record.as_mut()) {
                (
                    Line::Header {
                        name,
                        kind,
                        seed,
                        eval_split,
                        config,
                    },
                    None,
                ) => record = Some(RunRecord::new(&name, kind, seed, config, eval_split)),
                (Line::Epoch(e), Some(r)) if !closed => r.epochs.push(e),
                (Line::Final { status, metrics }, Some(r)) if !closed => {
                    r.status = status;
                    r.final_metrics = metrics;
                    closed = true;
                }
                _ => return Err(format!("line {}: out of order", i + 1)),
            }
        }
        match record {
            Some(r) if closed => Ok(r),
            _ => Err("record is missing its header or final line".into()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Headline score of the run, if it finished.
    pub fn final_pck(&self) -> Option<f64> {
        self.final_metrics.as_ref().map(EvalReport::headline)
    }

    pub fn summary(&self) -> Option<RunSummary> {
        let m = self.final_metrics.as_ref()?;
        Some(RunSummary {
            name: self.name.clone(),
            eval_split: self.eval_split.clone(),
            pck: *m.pck_at(0.1)?,
            ap: m.ap,
        })
    }

    /// Loss curve of one component.
    pub fn curve(&self, key: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.losses.get(key).copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_ordering_errors() {
        let mut r = RunRecord::new("a", RunKind::Stage1, 3, serde_json::json!({"x": 1}), "val@abc".into());
        r.epochs.push(EpochLog {
            epoch: 1,
            r_t: 1.0,
            losses: [("ori".to_string(), 0.25), ("total".to_string(), 0.3)].into(),
            eval: Some(EpochEval {
                pck_whole: 0.5,
                kl: None,
            }),
        });
        r.wall_clock_secs = 12.0;
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        let back = RunRecord::from_jsonl(&text).unwrap();
        assert_eq!(back.epochs, r.epochs);
        assert_eq!(back.to_jsonl(), text);
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(RunRecord::from_jsonl(&truncated).is_err());
    }
}
