//! Per-epoch metric rows and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Eval,
}

/// One CSV row: `epoch,split,loss,acc,firing_rate,wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: SplitKind,
    pub loss: f64,
    pub acc: f64,
    /// Mean input firing rate over spike-fed layers; empty when no layer ran.
    pub firing_rate: Option<f64>,
    /// Zero in deterministic runs.
    pub wall_ms: u64,
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    if rows.is_empty() {
        wr.write_record(["epoch", "split", "loss", "acc", "firing_rate", "wall_ms"])?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![EpochMetrics {
            epoch: 1,
            split: SplitKind::Eval,
            loss: 0.5,
            acc: 0.75,
            firing_rate: Some(0.125),
            wall_ms: 0,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,split,loss,acc,firing_rate,wall_ms\n1,eval,0.5,0.75,0.125,0\n"
        );
    }
}
