//! Line charts of a metric against the round index.
//!
//! The layout is fixed so that the same CSV always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use sthfl_core::{Error, Result};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const MARGIN_LEFT: f64 = 60.0;
pub const MARGIN_RIGHT: f64 = 150.0;
pub const MARGIN_TOP: f64 = 20.0;
pub const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Series keyed by algorithm label, each a list of `(round, value)` points.
pub type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// Reads ALL-scope rows of `metric` from a per-run metrics CSV or from the
/// aggregate CSV (which has a `mean` column instead of `value`). When a
/// round has several stages, the last stage is kept.
pub fn series_from_csv(csv: &str, metric: &str) -> Result<Series> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(Series::new());
    };
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let missing = || {
        Error::Data(format!(
            "metrics CSV header `{header}` lacks required columns"
        ))
    };
    let round_col = col("round").ok_or_else(missing)?;
    let stage_col = col("stage").ok_or_else(missing)?;
    let algo_col = col("algorithm").ok_or_else(missing)?;
    let metric_col = col("metric").ok_or_else(missing)?;
    let scope_col = col("scope").ok_or_else(missing)?;
    let value_col = col("value").or_else(|| col("mean")).ok_or_else(missing)?;

    let mut last: BTreeMap<(String, usize), (usize, f64)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Data(format!(
                "metrics CSV row {} has {} fields",
                i + 2,
                fields.len()
            )));
        }
        if fields[metric_col] != metric || fields[scope_col] != "ALL" {
            continue;
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("metrics CSV row {}: bad integer `{s}`", i + 2)))
        };
        let round = parse_usize(fields[round_col])?;
        let stage = parse_usize(fields[stage_col])?;
        let value: f64 = fields[value_col]
            .parse()
            .map_err(|_| Error::Data(format!("metrics CSV row {}: bad value", i + 2)))?;
        let slot = last
            .entry((fields[algo_col].to_string(), round))
            .or_insert((stage, value));
        if stage >= slot.0 {
            *slot = (stage, value);
        }
    }
    let mut series = Series::new();
    for ((algo, round), (_, value)) in last {
        series.entry(algo).or_default().push((round as f64, value));
    }
    Ok(series)
}

/// Horizontal extent of the data; a single round is widened to one unit.
pub fn x_range(series: &Series) -> (f64, f64) {
    let xs = series.values().flatten().map(|p| p.0);
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Pixel position of a data point; `y` is an accuracy in `[0, 1]`.
pub fn to_pixel(x: f64, y: f64, x_range: (f64, f64)) -> (f64, f64) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = MARGIN_LEFT + (x - x_range.0) / (x_range.1 - x_range.0) * plot_w;
    let py = MARGIN_TOP + (1.0 - y) * plot_h;
    (px, py)
}

pub fn render(series: &Series, metric: &str) -> String {
    let range = x_range(series);
    let (x0, y_bottom) = to_pixel(range.0, 0.0, range);
    let (x1, y_top) = to_pixel(range.1, 1.0, range);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.2},{y_top:.2} L{x0:.2},{y_bottom:.2} L{x1:.2},{y_bottom:.2}" fill="none" stroke="black"/>"#
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let (_, y) = to_pixel(range.0, v, range);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    for x in [range.0, range.1] {
        let (px, _) = to_pixel(x, 0.0, range);
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            y_bottom + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{metric}</text>"#,
        (y_top + y_bottom) / 2.0,
        (y_top + y_bottom) / 2.0
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_pixel(x, y, range);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(name),
            coords.join(" ")
        );
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            x1 + 12.0,
            x1 + 32.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            x1 + 38.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_svg(csv: &str, metric: &str) -> Result<String> {
    Ok(render(&series_from_csv(csv, metric)?, metric))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
