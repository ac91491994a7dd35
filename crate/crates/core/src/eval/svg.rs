//! Small hand-rolled SVG plots: line charts for ROC staircases and learning
//! curves, grouped bars for the bins-per-kHz comparison.

use std::io::{self, Write};
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

fn open_svg(out: &mut impl Write, title: &str) -> io::Result<()> {
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(
    out: &mut impl Write,
    x_label: &str,
    y_label: &str,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
) -> io::Result<()> {
    let bottom = HEIGHT - BOTTOM;
    let right = WIDTH - RIGHT;
    writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>"
    )?;
    writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{bottom}\" stroke=\"black\"/>"
    )?;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let x = LEFT + f * (right - LEFT);
        let y = bottom - f * (bottom - TOP);
        writeln!(
            out,
            "<line x1=\"{x}\" y1=\"{bottom}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>",
            bottom + 4.0
        )?;
        writeln!(
            out,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{xv:.2}</text>",
            bottom + 18.0
        )?;
        writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{LEFT}\" y2=\"{y}\" stroke=\"black\"/>",
            LEFT - 4.0
        )?;
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.2}</text>",
            LEFT - 8.0,
            y + 4.0
        )?;
    }
    writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (LEFT + right) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    )?;
    writeln!(
        out,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (TOP + bottom) / 2.0,
        (TOP + bottom) / 2.0,
        escape(y_label)
    )
}

/// Multi-series line chart. Axis ranges come from the data, padded to
/// sensible round numbers only in the sense of starting at the data floor.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> io::Result<()> {
    let all = series.iter().flat_map(|s| s.points.iter());
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }

    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    open_svg(&mut out, title)?;
    axes(&mut out, x_label, y_label, (x0, x1), (y0, y1))?;
    let bottom = HEIGHT - BOTTOM;
    let right = WIDTH - RIGHT;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let px = LEFT + (x - x0) / (x1 - x0) * (right - LEFT);
                let py = bottom - (y - y0) / (y1 - y0) * (bottom - TOP);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        )?;
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            right - 150.0,
            TOP + 16.0 * (i + 1) as f64,
            escape(s.label)
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()
}

/// Grouped bar chart; one group per category, one bar per series.
pub fn bar_chart(
    path: &Path,
    title: &str,
    categories: &[String],
    series: &[(&str, &[usize])],
) -> io::Result<()> {
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let bottom = HEIGHT - BOTTOM;
    let right = WIDTH - RIGHT;
    let group_w = (right - LEFT) / categories.len() as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;

    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    open_svg(&mut out, title)?;
    writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>"
    )?;
    writeln!(
        out,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{bottom}\" stroke=\"black\"/>"
    )?;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = bottom - f * (bottom - TOP);
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.0}</text>",
            LEFT - 8.0,
            y + 4.0,
            f * max
        )?;
    }
    for (g, cat) in categories.iter().enumerate() {
        let gx = LEFT + g as f64 * group_w;
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + group_w / 2.0,
            bottom + 18.0,
            escape(cat)
        )?;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0) as f64;
            let h = v / max * (bottom - TOP);
            let x = gx + group_w * 0.1 + s as f64 * bar_w;
            writeln!(
                out,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" \
                 fill=\"{}\"/>",
                bottom - h,
                COLORS[s % COLORS.len()]
            )?;
        }
    }
    for (s, (label, _)) in series.iter().enumerate() {
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>",
            right - 120.0,
            TOP + 16.0 * (s + 1) as f64,
            COLORS[s % COLORS.len()],
            escape(label)
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()
}
