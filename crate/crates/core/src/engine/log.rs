//! Training log: one `key=value` line per epoch and, separately, one per
//! optimizer step.
//!
//! ```text
//! epoch=3 loss=1.2345 lr=0.0005 wall_ms=812 reassigned=0.125
//! step=17 epoch=3 loss=1.2 sup=0.9 ssl=1.45
//! ```
//!
//! Floats are written in shortest round-trip form, so parsing a rendered
//! log gives back the same values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch id.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
    /// Method-specific values, e.g. `reassigned` for clustering runs or
    /// `val_accuracy` during finetuning.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 0-based global optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Loss components, e.g. `sup` and `ssl` for the mixed objective.
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn push_fields(out: &mut String, fields: &BTreeMap<String, f64>) {
    for (k, v) in fields {
        let _ = write!(out, " {k}={v}");
    }
}

impl TrainingLog {
    pub fn push_epoch(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if record.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "epoch {} logged after epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.epochs.push(record);
        Ok(())
    }

    pub fn push_step(&mut self, record: StepRecord) {
        self.steps.push(record);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn render_epochs(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = write!(out, "epoch={} loss={} lr={} wall_ms={}", e.epoch, e.loss, e.lr, e.wall_ms);
            push_fields(&mut out, &e.metrics);
            out.push('\n');
        }
        out
    }

    pub fn render_steps(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = write!(out, "step={} epoch={} loss={}", s.step, s.epoch, s.loss);
            push_fields(&mut out, &s.components);
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`render_epochs`](Self::render_epochs) and
    /// [`render_steps`](Self::render_steps), in any interleaving.
    pub fn parse(text: &str) -> Result<Self> {
        let mut log = TrainingLog::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: "<log>".into(),
                line: n + 1,
                msg,
            };
            let mut fields = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got {tok:?}")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            let mut take = |k: &str| -> Result<String> {
                fields.remove(k).ok_or_else(|| err(format!("missing field {k}")))
            };
            let num = |s: String| -> Result<f64> { s.parse().map_err(|_| err(format!("bad number {s:?}"))) };
            let int = |s: String| -> Result<usize> { s.parse().map_err(|_| err(format!("bad integer {s:?}"))) };
            if line.starts_with("epoch=") {
                let epoch = int(take("epoch")?)?;
                let loss = num(take("loss")?)?;
                let lr = num(take("lr")?)?;
                let wall_ms = int(take("wall_ms")?)? as u64;
                let metrics = fields
                    .into_iter()
                    .map(|(k, v)| Ok((k, num(v)?)))
                    .collect::<Result<_>>()?;
                log.push_epoch(EpochRecord {
                    epoch,
                    loss,
                    lr,
                    wall_ms,
                    metrics,
                })
                .map_err(|e| err(e.to_string()))?;
            } else if line.starts_with("step=") {
                let step = int(take("step")?)?;
                let epoch = int(take("epoch")?)?;
                let loss = num(take("loss")?)?;
                let components = fields
                    .into_iter()
                    .map(|(k, v)| Ok((k, num(v)?)))
                    .collect::<Result<_>>()?;
                log.push_step(StepRecord {
                    step,
                    epoch,
                    loss,
                    components,
                });
            } else {
                return Err(err("record must start with epoch= or step=".into()));
            }
        }
        Ok(log)
    }

    /// Appends epoch lines to `path` and step lines to `steps_path`.
    pub fn append_to(&self, path: &Path, steps_path: &Path) -> Result<()> {
        use std::io::Write;
        for (p, text) in [(path, self.render_epochs()), (steps_path, self.render_steps())] {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            f.write_all(text.as_bytes()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut log = TrainingLog::default();
        for e in 1..=3 {
            log.push_epoch(EpochRecord {
                epoch: e,
                loss: 1.0 / e as f64 + 1e-17,
                lr: 3e-4 * e as f64,
                wall_ms: 10 * e as u64,
                metrics: [("reassigned".to_string(), 0.1 * e as f64)].into(),
            })
            .unwrap();
            log.push_step(StepRecord {
                step: e - 1,
                epoch: e,
                loss: std::f64::consts::PI * e as f64,
                components: [("sup".to_string(), 0.3), ("ssl".to_string(), 1.0 / 3.0)].into(),
            });
        }
        let text = log.render_epochs() + &log.render_steps();
        assert_eq!(TrainingLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn epochs_must_increase() {
        let mut log = TrainingLog::default();
        let rec = |epoch| EpochRecord {
            epoch,
            loss: 0.0,
            lr: 0.0,
            wall_ms: 0,
            metrics: BTreeMap::new(),
        };
        log.push_epoch(rec(2)).unwrap();
        assert!(log.push_epoch(rec(2)).is_err());
        assert!(TrainingLog::parse("epoch=2 loss=1 lr=1 wall_ms=0\nepoch=1 loss=1 lr=1 wall_ms=0\n").is_err());
    }

    #[test]
    fn parse_reports_line() {
        match TrainingLog::parse("epoch=1 loss=1 lr=1 wall_ms=0\nbogus\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
