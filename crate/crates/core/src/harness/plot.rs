use std::fmt::Write as _;
use std::path::Path;

use super::table::{column_indices, format_sig};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Accuracy against judge perplexity, one point per sweep row.
    Tradeoff,
    /// Per-step curves of a trace CSV.
    Trace,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tradeoff" => Ok(Self::Tradeoff),
            "trace" => Ok(Self::Trace),
            other => Err(Error::Config(format!("unknown plot kind {other:?}"))),
        }
    }
}

impl PlotKind {
    fn x_column(self) -> &'static str {
        match self {
            Self::Tradeoff => "judge_perplexity",
            Self::Trace => "step",
        }
    }

    fn y_columns(self) -> &'static [&'static str] {
        match self {
            Self::Tradeoff => &["accuracy"],
            Self::Trace => &["task_loss", "task_accuracy", "judge_nll"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads the plotted columns; empty cells are skipped.
pub fn read_series(csv_path: impl AsRef<Path>, kind: PlotKind) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_path(csv_path)?;
    let mut wanted = vec![kind.x_column()];
    wanted.extend_from_slice(kind.y_columns());
    let idx = column_indices(r.headers()?, &wanted)?;
    let mut series: Vec<Series> = kind
        .y_columns()
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            match rec.get(idx[i]).unwrap_or("").trim() {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| {
                    Error::Format(format!("column {}: {s:?} is not a number", wanted[i]))
                }),
            }
        };
        let Some(x) = num(0)? else { continue };
        for (k, s) in series.iter_mut().enumerate() {
            if let Some(y) = num(k + 1)? {
                s.points.push((x, y));
            }
        }
    }
    Ok(series)
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// SVG text; every point is a `<circle>` carrying its CSV values in
/// `data-x` / `data-y`.
pub fn render_svg(kind: PlotKind, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    );
    for (v, x) in [(x0, l), (x1, r)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            b + 16.0,
            format_sig(v)
        );
    }
    for (v, y) in [(y0, b), (y1, t)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y}" font-size="11" text-anchor="end">{}</text>"#,
            l - 6.0,
            format_sig(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        kind.x_column()
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(svg, r#"<g class="series" data-series="{}">"#, s.name);
        if kind == PlotKind::Trace && s.points.len() > 1 {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" stroke="{color}" fill="none"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-x="{}" data-y="{}"/>"#,
                px(x),
                py(y),
                format_sig(x),
                format_sig(y)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            r - 110.0,
            t + 14.0 * k as f64,
            s.name
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn plot(csv_path: impl AsRef<Path>, kind: PlotKind, out: impl AsRef<Path>) -> Result<usize> {
    let series = read_series(csv_path, kind)?;
    let out = out.as_ref();
    std::fs::write(out, render_svg(kind, &series)).map_err(|e| Error::io(out, e))?;
    Ok(series.iter().map(|s| s.points.len()).sum())
}
