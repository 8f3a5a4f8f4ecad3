//! Standalone SVG log-log plots of per-n mean losses with error bars and the
//! fitted regression line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::RateFit;
use crate::model::GateKind;

pub const SIGMOID_BLUE: &str = "#1f77b4";
pub const SOFTMAX_RED: &str = "#d62728";
pub const FIT_ORANGE: &str = "#ff7f0e";

/// Series color for a gate: red for the softmax baseline, blue otherwise.
pub fn gate_color(gate: GateKind) -> &'static str {
    match gate {
        GateKind::SoftmaxBaseline => SOFTMAX_RED,
        _ => SIGMOID_BLUE,
    }
}

#[derive(Debug, Clone)]
pub struct PlotSeries<'a> {
    pub label: String,
    pub color: String,
    pub fit: &'a RateFit,
}

impl<'a> PlotSeries<'a> {
    pub fn for_fit(fit: &'a RateFit) -> Self {
        PlotSeries {
            label: format!("{} k={}", fit.gate, fit.k_fit),
            color: gate_color(fit.gate).to_string(),
            fit,
        }
    }
}

/// Canvas size and plot-area margins, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            width: 720.0,
            height: 480.0,
            left: 80.0,
            right: 24.0,
            top: 40.0,
            bottom: 56.0,
        }
    }
}

/// Maps `(n, loss)` to pixels with log10 scaling on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFrame {
    pub canvas: Canvas,
    /// `log10` ranges of the axes.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl LogLogFrame {
    pub fn x_px(&self, n: f64) -> f64 {
        let c = &self.canvas;
        let (lo, hi) = self.x_range;
        c.left + (n.log10() - lo) / (hi - lo) * (c.width - c.left - c.right)
    }

    pub fn y_px(&self, v: f64) -> f64 {
        let c = &self.canvas;
        let (lo, hi) = self.y_range;
        c.height - c.bottom - (v.log10() - lo) / (hi - lo) * (c.height - c.top - c.bottom)
    }

    fn y_bottom(&self) -> f64 {
        self.canvas.height - self.canvas.bottom
    }

    /// Frame covering every marker, error bar and fitted line, padded by 5%
    /// of each log range.
    pub fn fitting(series: &[PlotSeries<'_>], canvas: Canvas) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::InvalidArgument("nothing to plot".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in series {
            let f = s.fit;
            if f.n_values.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "series `{}` has fewer than two sample sizes",
                    s.label
                )));
            }
            for (i, &n) in f.n_values.iter().enumerate() {
                let m = f.per_n_mean[i];
                if !(m > 0.0 && m.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "series `{}` has a non-positive mean at n = {n}",
                        s.label
                    )));
                }
                xs.push((n as f64).log10());
                ys.push(m.log10());
                ys.push((m + f.per_n_two_std[i]).log10());
                let low = m - f.per_n_two_std[i];
                if low > 0.0 {
                    ys.push(low.log10());
                }
                ys.push(f.predict(n as f64).log10());
            }
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidArgument("plot data is not finite".into()));
        }
        let ranges: Vec<(usize, usize)> = series
            .iter()
            .map(|s| (s.fit.n_values[0], *s.fit.n_values.last().unwrap()))
            .collect();
        let lo = ranges.iter().map(|r| r.0).max().unwrap();
        let hi = ranges.iter().map(|r| r.1).min().unwrap();
        if lo > hi {
            return Err(Error::InvalidArgument(
                "overlaid series share no range of sample sizes".into(),
            ));
        }
        let pad = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * w, hi + 0.05 * w)
        };
        Ok(LogLogFrame {
            canvas,
            x_range: pad(&xs),
            y_range: pad(&ys),
        })
    }
}

/// Tick positions (as values, not logs) inside a log10 range, with labels.
fn ticks(range: (f64, f64)) -> Vec<(f64, Option<String>)> {
    let (lo, hi) = range;
    let mut out = Vec::new();
    for e in lo.floor() as i32..=hi.ceil() as i32 {
        for m in 1..10 {
            let v = m as f64 * 10f64.powi(e);
            let l = v.log10();
            if l >= lo && l <= hi {
                out.push((v, m == 1, e));
            }
        }
    }
    let decades = out.iter().filter(|t| t.1).count();
    out.into_iter()
        .map(|(v, major, e)| {
            let label = if major {
                Some(format!("10<tspan dy=\"-6\" font-size=\"10\">{e}</tspan>"))
            } else if decades < 2
                && [2.0, 5.0]
                    .iter()
                    .any(|m| (v / 10f64.powi(e) - m).abs() < 1e-9)
            {
                Some(format!("{}", v))
            } else {
                None
            };
            (v, label)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG text of a log-log rate plot.
pub fn render_loglog_svg(series: &[PlotSeries<'_>], title: &str, canvas: Canvas) -> Result<String> {
    let frame = LogLogFrame::fitting(series, canvas)?;
    let c = canvas;
    let (x0, x1) = (c.left, c.width - c.right);
    let (y0, y1) = (c.top, c.height - c.bottom);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = c.width,
        h = c.height
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{}" height="{}" fill="white"/>"#,
        c.width, c.height
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="14">{}</text>"#,
        (x0 + x1) / 2.0,
        y0 - 14.0,
        escape(title)
    );

    let _ = writeln!(svg, r#"<g class="axes" stroke="dimgray" fill="none">"#);
    for (v, label) in ticks(frame.x_range) {
        let x = frame.x_px(v);
        let len = if label.is_some() { 6.0 } else { 3.0 };
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.3}" y1="{y1:.3}" x2="{x:.3}" y2="{:.3}"/>"#,
            y1 + len
        );
        if let Some(l) = label {
            let _ = writeln!(
                svg,
                r#"<text x="{x:.3}" y="{:.3}" text-anchor="middle" stroke="none" fill="black">{l}</text>"#,
                y1 + 22.0
            );
        }
    }
    for (v, label) in ticks(frame.y_range) {
        let y = frame.y_px(v);
        let len = if label.is_some() { 6.0 } else { 3.0 };
        let _ = writeln!(
            svg,
            r#"<line x1="{:.3}" y1="{y:.3}" x2="{x0:.3}" y2="{y:.3}"/>"#,
            x0 - len
        );
        if let Some(l) = label {
            let _ = writeln!(
                svg,
                r#"<text x="{:.3}" y="{:.3}" text-anchor="end" stroke="none" fill="black">{l}</text>"#,
                x0 - 9.0,
                y + 4.0
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect class="frame" x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}"/>"#,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">sample size n</text>"#,
        (x0 + x1) / 2.0,
        c.height - 12.0
    );
    let loss = series.first().map_or("", |s| s.fit.loss_name.as_str());
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.3}) rotate(-90)" text-anchor="middle">loss {}</text>"#,
        (y0 + y1) / 2.0,
        escape(loss)
    );

    let _ = writeln!(
        svg,
        r#"<defs><clipPath id="plot-area"><rect x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}"/></clipPath></defs>"#,
        x1 - x0,
        y1 - y0
    );
    for (idx, s) in series.iter().enumerate() {
        let f = s.fit;
        let _ = writeln!(
            svg,
            r#"<g class="series" data-label="{}" clip-path="url(#plot-area)">"#,
            escape(&s.label)
        );
        for (i, &n) in f.n_values.iter().enumerate() {
            let x = frame.x_px(n as f64);
            let m = f.per_n_mean[i];
            let sd2 = f.per_n_two_std[i];
            let top = frame.y_px(m + sd2);
            let bottom = if m - sd2 > 0.0 {
                frame.y_px(m - sd2)
            } else {
                frame.y_bottom()
            };
            let _ = writeln!(
                svg,
                r#"<line class="errorbar" x1="{x:.3}" y1="{top:.3}" x2="{x:.3}" y2="{bottom:.3}" stroke="{}" stroke-width="1"/>"#,
                s.color
            );
            for y in [top, bottom] {
                let _ = writeln!(
                    svg,
                    r#"<line class="errorcap" x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="{}" stroke-width="1"/>"#,
                    x - 3.0,
                    x + 3.0,
                    s.color
                );
            }
            let _ = writeln!(
                svg,
                r#"<circle class="marker" cx="{x:.3}" cy="{:.3}" r="3.5" fill="{}"/>"#,
                frame.y_px(m),
                s.color
            );
        }
        let na = f.n_values[f.trim_leading] as f64;
        let nb = *f.n_values.last().unwrap() as f64;
        let _ = writeln!(
            svg,
            r#"<line class="fit" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{FIT_ORANGE}" stroke-width="2" stroke-dasharray="8 3 2 3"/>"#,
            frame.x_px(na),
            frame.y_px(f.predict(na)),
            frame.x_px(nb),
            frame.y_px(f.predict(nb))
        );
        let _ = writeln!(svg, "</g>");
        let ly = y0 + 18.0 + 18.0 * idx as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3.5" fill="{}"/>"#,
            x1 - 230.0,
            ly - 4.0,
            s.color
        );
        let _ = writeln!(
            svg,
            r#"<text class="slope" x="{:.3}" y="{ly:.3}">{}: slope {:.2}</text>"#,
            x1 - 220.0,
            escape(&s.label),
            f.slope
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders first and only then creates `path`, so invalid input leaves no file.
pub fn write_loglog_svg(series: &[PlotSeries<'_>], title: &str, path: &Path) -> Result<()> {
    let svg = render_loglog_svg(series, title, Canvas::default())?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
