//! Per-round monitor trace (CSV) and its replayable audit.
//!
//! Columns: `round, residual_1..K, rank_1..K, z_1..K, s_1..K, max_s, alarmed, flagged`.
//! Floats are written in shortest round-trip form so a replay sees the
//! exact values the monitor used.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normal_quantile, Allowance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub residuals: Vec<f64>,
    pub ranks: Vec<usize>,
    pub scores: Vec<f64>,
    pub stats: Vec<f64>,
    pub max_stat: f64,
    pub alarmed: bool,
    pub flagged: Option<usize>,
}

fn header(k: usize) -> Vec<String> {
    let mut h = vec!["round".to_string()];
    for prefix in ["residual", "rank", "z", "s"] {
        h.extend((1..=k).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(["max_s", "alarmed", "flagged"].map(String::from));
    h
}

pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
    clients: usize,
}

impl TraceWriter<File> {
    pub fn create(path: impl AsRef<Path>, clients: usize) -> Result<Self> {
        Self::new(File::create(path)?, clients)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W, clients: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(header(clients))?;
        Ok(Self { inner, clients })
    }

    pub fn write(&mut self, row: &TraceRow) -> Result<()> {
        let k = self.clients;
        if [row.residuals.len(), row.ranks.len(), row.scores.len(), row.stats.len()] != [k; 4] {
            return Err(Error::DimensionMismatch { expected: k, got: row.residuals.len() });
        }
        let mut rec = Vec::with_capacity(4 * k + 4);
        rec.push(row.round.to_string());
        rec.extend(row.residuals.iter().map(f64::to_string));
        rec.extend(row.ranks.iter().map(usize::to_string));
        rec.extend(row.scores.iter().map(f64::to_string));
        rec.extend(row.stats.iter().map(f64::to_string));
        rec.push(row.max_stat.to_string());
        rec.push(row.alarmed.to_string());
        rec.push(row.flagged.map(|f| f.to_string()).unwrap_or_default());
        self.inner.write_record(rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn parse<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::config(format!("trace line {line}: cannot parse {field:?}")))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = rdr.headers()?.len();
    if cols < 8 || (cols - 4) % 4 != 0 {
        return Err(Error::config(format!("trace has {cols} columns; expected 4K + 4")));
    }
    let k = (cols - 4) / 4;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let floats = |start: usize| (start..start + k).map(|j| parse::<f64>(f(j), line)).collect::<Result<Vec<_>>>();
        rows.push(TraceRow {
            round: parse(f(0), line)?,
            residuals: floats(1)?,
            ranks: (1 + k..1 + 2 * k).map(|j| parse(f(j), line)).collect::<Result<Vec<_>>>()?,
            scores: floats(1 + 2 * k)?,
            stats: floats(1 + 3 * k)?,
            max_stat: parse(f(1 + 4 * k), line)?,
            alarmed: parse(f(2 + 4 * k), line)?,
            flagged: match f(3 + 4 * k) {
                "" => None,
                s => Some(parse(s, line)?),
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rows: usize,
    pub alarms: usize,
    /// Largest deviation between a recorded statistic and its recomputation.
    pub max_abs_error: f64,
    /// First inconsistency found, as `(round, description)`.
    pub violation: Option<(usize, String)>,
}

impl ReplayReport {
    pub fn is_consistent(&self) -> bool {
        self.violation.is_none()
    }
}

/// Recomputes every row of a trace from the recorded ranks and scores.
/// With `reset_flagged`, a flagged client's chart restarts at zero after an alarm.
pub fn replay_trace(
    rows: &[TraceRow],
    reference: f64,
    limit: f64,
    allowance: Allowance,
    reset_flagged: bool,
) -> ReplayReport {
    const TOL: f64 = 1e-12;
    let allow = allowance.of(reference);
    let mut report = ReplayReport { rows: rows.len(), alarms: 0, max_abs_error: 0.0, violation: None };
    let Some(first) = rows.first() else {
        return report;
    };
    let k = first.stats.len();
    let mut prev = vec![0.0; k];

    for row in rows {
        let mut found: Option<String> = None;
        let mut fail = |msg: String| {
            found.get_or_insert(msg);
        };
        if row.ranks.len() != k || row.scores.len() != k || row.residuals.len() != k || row.stats.len() != k {
            report.violation.get_or_insert((row.round, "row width changes".into()));
            break;
        }
        let mut sorted = row.ranks.clone();
        sorted.sort_unstable();
        if sorted != (1..=k).collect::<Vec<_>>() {
            fail(format!("ranks {:?} are not a permutation", row.ranks));
        }
        for a in 0..k {
            for b in 0..k {
                if row.residuals[a] < row.residuals[b] && row.ranks[a] > row.ranks[b] {
                    fail(format!("rank order contradicts residuals for clients {} and {}", a + 1, b + 1));
                }
            }
            let r = row.ranks[a].clamp(1, k);
            let (lo, hi) = (normal_quantile((r - 1) as f64 / k as f64), normal_quantile(r as f64 / k as f64));
            if !(row.scores[a] > lo && row.scores[a] < hi) {
                fail(format!("score of client {} outside its rank interval", a + 1));
            }
        }
        let mut best = (0, f64::NEG_INFINITY);
        #[allow(clippy::needless_range_loop)]
        for i in 0..k {
            let s = (prev[i] + row.scores[i] - allow).max(0.0);
            let err = (s - row.stats[i]).abs();
            report.max_abs_error = report.max_abs_error.max(err);
            if err > TOL {
                fail(format!("S of client {} is {} but recursion gives {s}", i + 1, row.stats[i]));
            }
            if s > best.1 {
                best = (i, s);
            }
        }
        if (best.1 - row.max_stat).abs() > TOL {
            fail(format!("max S is {} but charts give {}", row.max_stat, best.1));
        }
        let alarmed = best.1 > limit;
        if alarmed != row.alarmed {
            fail(format!("alarm flag {} but max S {} vs H {limit}", row.alarmed, best.1));
        }
        let flagged = alarmed.then_some(best.0 + 1);
        if flagged != row.flagged {
            fail(format!("flagged {:?} but argmax gives {flagged:?}", row.flagged));
        }
        if let Some(msg) = found {
            report.violation.get_or_insert((row.round, msg));
        }
        prev.clone_from(&row.stats);
        if row.alarmed {
            report.alarms += 1;
            if reset_flagged {
                if let Some(f) = row.flagged.filter(|f| (1..=k).contains(f)) {
                    prev[f - 1] = 0.0;
                }
            }
        }
    }
    report
}
