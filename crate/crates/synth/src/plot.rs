//! Minimal static SVG plots for the evaluation reports: box plots of
//! per-subject image-quality scores by method and bar charts of per-region
//! agreement. Output is a deterministic string — same data, same bytes —
//! so plots can be regression-tested and diffed.

use crate::error::{Result, SynthError};

/// One labeled group of observations.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

/// Linearly interpolated quantile (the common "type 7" definition:
/// `h = (n−1)·p`, interpolate between the bracketing order statistics).
/// `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary (min, q1, median, q3, max).
pub fn five_numbers(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() {
        return Err(SynthError::Data("cannot summarize an empty series".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::Data(
            "series contains non-finite values; filter sentinels before plotting".into(),
        ));
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok([
        s[0],
        quantile(&s, 0.25),
        quantile(&s, 0.5),
        quantile(&s, 0.75),
        s[s.len() - 1],
    ])
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Shared frame: background, title, y-axis with five ticks, axis label.
/// Returns (header SVG, y→pixel mapping).
fn frame(title: &str, y_label: &str, y_min: f64, y_max: f64) -> (String, impl Fn(f64) -> f64) {
    let span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let (lo, hi) = (y_min - 0.05 * span, y_max + 0.05 * span);
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let to_px = move |v: f64| MARGIN_T + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));
    // y axis with ticks and grid lines.
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = to_px(v);
        s.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            fmt(y),
            WIDTH - MARGIN_R,
            fmt(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_L - 6.0,
            fmt(y + 4.0),
            fmt(v)
        ));
    }
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 14 {})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    ));
    (s, to_px)
}

/// Box plot: one box-and-whiskers per series, labels on the x axis.
pub fn box_plot(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(SynthError::Data("box plot needs at least one series".into()));
    }
    let summaries: Vec<[f64; 5]> = series
        .iter()
        .map(|s| five_numbers(&s.values))
        .collect::<Result<_>>()?;
    let y_min = summaries.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
    let y_max = summaries.iter().map(|s| s[4]).fold(f64::NEG_INFINITY, f64::max);
    let (mut svg, to_px) = frame(title, y_label, y_min, y_max);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = plot_w / series.len() as f64;
    let box_w = (slot * 0.5).min(80.0);
    for (i, (s, q)) in series.iter().zip(&summaries).enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let (x0, x1) = (cx - box_w / 2.0, cx + box_w / 2.0);
        let [min, q1, med, q3, max] = *q;
        // Whiskers with caps.
        for (a, b) in [(min, q1), (q3, max)] {
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                fmt(cx),
                fmt(to_px(a)),
                fmt(cx),
                fmt(to_px(b))
            ));
        }
        for v in [min, max] {
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                fmt(cx - box_w / 4.0),
                fmt(to_px(v)),
                fmt(cx + box_w / 4.0),
                fmt(to_px(v))
            ));
        }
        // Interquartile box and the median line.
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#9ecae1\" stroke=\"black\"/>\n",
            fmt(x0),
            fmt(to_px(q3)),
            fmt(box_w),
            fmt(to_px(q1) - to_px(q3))
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" stroke-width=\"2\"/>\n",
            fmt(x0),
            fmt(to_px(med)),
            fmt(x1),
            fmt(to_px(med))
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            fmt(cx),
            HEIGHT - MARGIN_B + 18.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart of labeled values (e.g. per-region Dice means).
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<String> {
    if bars.is_empty() {
        return Err(SynthError::Data("bar chart needs at least one bar".into()));
    }
    if bars.iter().any(|(_, v)| !v.is_finite()) {
        return Err(SynthError::Data(
            "bar chart values must be finite; filter sentinels first".into(),
        ));
    }
    let y_min = bars.iter().map(|&(_, v)| v).fold(0.0f64, f64::min);
    let y_max = bars.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
    let (mut svg, to_px) = frame(title, y_label, y_min, y_max);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = plot_w / bars.len() as f64;
    let bar_w = (slot * 0.6).min(64.0);
    let zero = to_px(0.0);
    for (i, (label, v)) in bars.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let top = to_px(*v).min(zero);
        let h = (to_px(*v) - zero).abs();
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#a1d99b\" stroke=\"black\"/>\n",
            fmt(cx - bar_w / 2.0),
            fmt(top),
            fmt(bar_w),
            fmt(h)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            fmt(cx),
            HEIGHT - MARGIN_B + 18.0,
            escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
