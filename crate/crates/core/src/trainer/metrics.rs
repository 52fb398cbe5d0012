//! Per-update training metrics and their CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 7] = [
    "update",
    "mean_reward",
    "std_reward",
    "loss",
    "clip_frac",
    "degenerate_groups",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub loss: f64,
    pub clip_frac: f64,
    pub degenerate_groups: usize,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Everything except the wall-clock column.
    pub fn deterministic_fields(&self) -> (usize, f64, f64, f64, f64, usize) {
        (
            self.update,
            self.mean_reward,
            self.std_reward,
            self.loss,
            self.clip_frac,
            self.degenerate_groups,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Append a row; update indices must strictly increase.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.update <= last.update {
                return Err(Error::InvalidArgument(format!(
                    "metrics row {} after {}",
                    row.update, last.update
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_reward).collect()
    }

    /// Mean reward over the last `window` updates.
    pub fn trailing_mean_reward(&self, window: usize) -> Option<f64> {
        let n = self.rows.len().min(window.max(1));
        if n == 0 {
            return None;
        }
        Some(
            self.rows[self.rows.len() - n..]
                .iter()
                .map(|r| r.mean_reward)
                .sum::<f64>()
                / n as f64,
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(&[
                r.update.to_string(),
                r.mean_reward.to_string(),
                r.std_reward.to_string(),
                r.loss.to_string(),
                r.clip_frac.to_string(),
                r.degenerate_groups.to_string(),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().ne(METRICS_COLUMNS) {
            return Err(Error::Config(format!("unexpected metrics header {header:?}")));
        }
        let mut log = MetricsLog::default();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let f = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad metrics value {:?}", &rec[i])))
            };
            let u = |i: usize| -> Result<usize> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad metrics value {:?}", &rec[i])))
            };
            log.push(MetricsRow {
                update: u(0)?,
                mean_reward: f(1)?,
                std_reward: f(2)?,
                loss: f(3)?,
                clip_frac: f(4)?,
                degenerate_groups: u(5)?,
                wall_ms: f(6)?,
            })?;
        }
        Ok(log)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("metrics csv: {e}"))
}
