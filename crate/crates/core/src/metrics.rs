//! Versioned metrics CSV: one row per optimizer step.
//!
//! The schema is part of the tool contract — downstream analysis scripts
//! key off the header line and the fixed column order, and the determinism
//! guarantee ("same config + seed => byte-identical CSV") is checked at
//! this layer, so formatting must be stable too. Floats are written with
//! `{}` (shortest round-trip form), which is exact and reproducible.

use crate::error::{Error, Result};

/// First line of every metrics file.
pub const METRICS_VERSION: &str = "# metrics-v1";

/// Second line: the column names, in order.
pub const METRICS_COLUMNS: &str =
    "step,phase,lm_loss,kl_loss,vbar,mean_k,first_token_attn,mean_gate,max_activation,spike_flag";

/// Everything recorded about one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    /// `dense`, `warmup`, or `sparse`.
    pub phase: String,
    /// Mean cross-entropy over the batch; NaN only if the run aborted here.
    pub lm_loss: f64,
    /// Mean distillation loss; 0 when the phase/mode has none.
    pub kl_loss: f64,
    /// Running score-variance average, averaged over layers (0 without an
    /// indexer).
    pub vbar: f64,
    /// Mean selected-set size per query (equals the full prefix mean when
    /// dense).
    pub mean_k: f64,
    /// Mean attention mass on position 0 (queries t >= 1).
    pub first_token_attn: f64,
    /// Mean of all gate activations this step (0.5-centered at init; 0 for
    /// ungated modes).
    pub mean_gate: f64,
    /// Largest |attention output| seen this step, pre-residual.
    pub max_activation: f64,
    /// Whether the spike detector fired on lm_loss at this step.
    pub spike: bool,
}

impl StepRecord {
    /// One CSV line, no trailing newline.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.lm_loss,
            self.kl_loss,
            self.vbar,
            self.mean_k,
            self.first_token_attn,
            self.mean_gate,
            self.max_activation,
            u8::from(self.spike)
        )
    }
}

/// Render a full metrics file (version line, column line, one line per row).
pub fn render_csv(rows: &[StepRecord]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_VERSION);
    out.push('\n');
    out.push_str(METRICS_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Parse a metrics file produced by [`render_csv`]. Rejects unknown
/// versions and malformed rows.
pub fn parse_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(v) if v == METRICS_VERSION => {}
        Some(v) => {
            return Err(Error::Parse(format!(
                "unsupported metrics version line: {v:?}"
            )))
        }
        None => return Err(Error::Parse("empty metrics file".to_string())),
    }
    match lines.next() {
        Some(c) if c == METRICS_COLUMNS => {}
        other => {
            return Err(Error::Parse(format!(
                "bad metrics column line: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse(format!(
                "row {}: {} fields, expected 10",
                i + 3,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: bad number {s:?}", i + 3)))
        };
        rows.push(StepRecord {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad step {:?}", i + 3, fields[0])))?,
            phase: fields[1].to_string(),
            lm_loss: num(fields[2])?,
            kl_loss: num(fields[3])?,
            vbar: num(fields[4])?,
            mean_k: num(fields[5])?,
            first_token_attn: num(fields[6])?,
            mean_gate: num(fields[7])?,
            max_activation: num(fields[8])?,
            spike: match fields[9] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse(format!(
                        "row {}: bad spike flag {other:?}",
                        i + 3
                    )))
                }
            },
        });
    }
    Ok(rows)
}
