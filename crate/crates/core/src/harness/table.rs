use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::HardPrompt;
use crate::tuners::TraceRow;

pub const TRACE_COLUMNS: [&str; 6] = [
    "step",
    "task_loss",
    "task_accuracy",
    "judge_nll",
    "delta_distance",
    "prompt_ids",
];

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "method",
    "lambda",
    "alpha",
    "prompt_len",
    "seed",
    "accuracy",
    "task_loss",
    "judge_perplexity",
    "delta_distance",
    "delta_output",
    "delta_performance",
    "steps",
    "wall_clock_s",
];

const SIG_DIGITS: usize = 9;

/// Nine significant digits, positional when that stays short, otherwise in
/// exponent form. Both forms parse back with `str::parse::<f64>`.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.*e}", SIG_DIGITS - 1)
    }
}

fn parse_f64(field: &str, column: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("column {column}: {field:?} is not a number")))
}

/// Column index of each of `wanted` in `headers`.
pub fn column_indices(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h == *w)
                .ok_or_else(|| Error::Schema(format!("missing column {w}")))
        })
        .collect()
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_COLUMNS)?;
    for row in trace {
        w.write_record([
            row.step.to_string(),
            format_sig(row.task_loss),
            format_sig(row.task_accuracy),
            row.judge_nll.map(format_sig).unwrap_or_default(),
            format_sig(row.delta_distance),
            row.prompt_snapshot.joined(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trace rows as written; the `objective` column is not stored and reads back as NaN.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = column_indices(r.headers()?, &TRACE_COLUMNS)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let step = get(0)
            .parse()
            .map_err(|_| Error::Format(format!("bad step {:?}", get(0))))?;
        let judge_nll = match get(3) {
            "" => None,
            s => Some(parse_f64(s, "judge_nll")?),
        };
        let ids = match get(5) {
            "" => Vec::new(),
            s => s
                .split(';')
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Format(format!("bad prompt id {t:?}")))
                })
                .collect::<Result<_>>()?,
        };
        rows.push(TraceRow {
            step,
            task_loss: parse_f64(get(1), "task_loss")?,
            task_accuracy: parse_f64(get(2), "task_accuracy")?,
            judge_nll,
            delta_distance: parse_f64(get(4), "delta_distance")?,
            prompt_snapshot: HardPrompt::new(ids),
            objective: f64::NAN,
        });
    }
    Ok(rows)
}

/// One line of a sweep summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub lambda: f64,
    pub alpha: f64,
    pub prompt_len: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub task_loss: f64,
    pub judge_perplexity: f64,
    pub delta_distance: f64,
    pub delta_output: f64,
    pub delta_performance: f64,
    pub steps: usize,
    pub wall_clock_s: f64,
}

impl SummaryRow {
    fn fields(&self) -> [String; 13] {
        [
            self.method.clone(),
            format_sig(self.lambda),
            format_sig(self.alpha),
            self.prompt_len.to_string(),
            self.seed.to_string(),
            format_sig(self.accuracy),
            format_sig(self.task_loss),
            format_sig(self.judge_perplexity),
            format_sig(self.delta_distance),
            format_sig(self.delta_output),
            format_sig(self.delta_performance),
            self.steps.to_string(),
            format_sig(self.wall_clock_s),
        ]
    }
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    column_indices(r.headers()?, &SUMMARY_COLUMNS)?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}
