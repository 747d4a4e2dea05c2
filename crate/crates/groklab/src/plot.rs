//! Self-contained SVG line charts built from run logs: multi-series,
//! dual y-axes (accuracy on the left in [0,1], other metrics on the
//! right, autoscaled), legend, optional log-scale step axis.

use crate::error::{GrokError, Result};
use crate::runlog::{read_runlog, MetricRecord};
use std::path::PathBuf;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 540.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 80.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 55.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// What to draw: one or more run logs, the metric names to overlay, the
/// x-axis scale, and where the SVG goes. Accuracy-like series (names
/// containing "acc") use the left axis; everything else the right.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub logs: Vec<PathBuf>,
    pub series: Vec<String>,
    pub log_x: bool,
    pub title: String,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Accuracy,
    Metric,
}

fn axis_for(name: &str) -> Axis {
    if name.contains("acc") {
        Axis::Accuracy
    } else {
        Axis::Metric
    }
}

struct Series {
    label: String,
    axis: Axis,
    points: Vec<(f64, f64)>, // (step, value)
}

fn collect_series(spec: &PlotSpec) -> Result<Vec<Series>> {
    if spec.series.is_empty() {
        return Err(GrokError::InvalidArgument(
            "plot requires at least one series".to_string(),
        ));
    }
    if spec.logs.is_empty() {
        return Err(GrokError::InvalidArgument(
            "plot requires at least one log file".to_string(),
        ));
    }
    let mut out = Vec::new();
    for path in &spec.logs {
        let records = read_runlog(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for name in &spec.series {
            let points: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r: &MetricRecord| r.get(name).map(|v| (r.step as f64, v)))
                .collect();
            if points.is_empty() {
                return Err(GrokError::InvalidArgument(format!(
                    "metric {name:?} not present in log {}",
                    path.display()
                )));
            }
            let label = if spec.logs.len() > 1 {
                format!("{stem}:{name}")
            } else {
                name.clone()
            };
            out.push(Series {
                label,
                axis: axis_for(name),
                points,
            });
        }
    }
    Ok(out)
}

fn x_coord(step: f64, log_x: bool) -> f64 {
    if log_x {
        step.max(1.0).log10()
    } else {
        step
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Render the chart to an SVG document string. All validation happens
/// here; callers that write files do so only after this succeeds.
pub fn render_svg(spec: &PlotSpec) -> Result<String> {
    let series = collect_series(spec)?;

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut m_min, mut m_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut have_metric = false;
    for s in &series {
        for &(step, v) in &s.points {
            let x = x_coord(step, spec.log_x);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            if s.axis == Axis::Metric {
                have_metric = true;
                m_min = m_min.min(v);
                m_max = m_max.max(v);
            }
        }
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if !have_metric {
        m_min = 0.0;
        m_max = 1.0;
    } else if m_max - m_min < 1e-12 {
        let pad = m_max.abs().max(1.0) * 0.1;
        m_min -= pad;
        m_max += pad;
    }

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy_acc = |v: f64| MARGIN_TOP + (1.0 - v.clamp(0.0, 1.0)) * plot_h;
    let sy_met = |v: f64| MARGIN_TOP + (1.0 - (v - m_min) / (m_max - m_min)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(&spec.title)
    ));

    // Frame.
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));

    // Left axis: accuracy ticks at 0, 0.25, …, 1.
    for i in 0..=4 {
        let v = f64::from(i) * 0.25;
        let y = sy_acc(v);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{MARGIN_LEFT}\" y2=\"{y:.1}\" stroke=\"#333\"/>\n",
            MARGIN_LEFT - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 9.0,
            y + 4.0,
            fmt_num(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">accuracy</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    // Right axis: metric ticks.
    if have_metric {
        let right = MARGIN_LEFT + plot_w;
        for i in 0..=4 {
            let v = m_min + f64::from(i) / 4.0 * (m_max - m_min);
            let y = sy_met(v);
            svg.push_str(&format!(
                "<line x1=\"{right}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#333\"/>\n",
                right + 5.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"start\">{}</text>\n",
                right + 9.0,
                y + 4.0,
                fmt_num(v)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(90 {:.1} {:.1})\">metric</text>\n",
            WIDTH - 14.0,
            MARGIN_TOP + plot_h / 2.0,
            WIDTH - 14.0,
            MARGIN_TOP + plot_h / 2.0
        ));
    }

    // X axis ticks: decades when log-x, five even ticks otherwise.
    let x_label_y = MARGIN_TOP + plot_h + 20.0;
    if spec.log_x {
        let lo = x_min.floor() as i64;
        let hi = x_max.ceil() as i64;
        for e in lo..=hi {
            let x = e as f64;
            if x < x_min - 1e-9 || x > x_max + 1e-9 {
                continue;
            }
            let px = sx(x);
            svg.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                MARGIN_TOP + plot_h,
                MARGIN_TOP + plot_h + 5.0
            ));
            svg.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{x_label_y:.1}\" text-anchor=\"middle\">1e{e}</text>\n"
            ));
        }
    } else {
        for i in 0..=4 {
            let x = x_min + f64::from(i) / 4.0 * (x_max - x_min);
            let px = sx(x);
            svg.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                MARGIN_TOP + plot_h,
                MARGIN_TOP + plot_h + 5.0
            ));
            svg.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{x_label_y:.1}\" text-anchor=\"middle\">{}</text>\n",
                fmt_num(x)
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">step</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    ));

    // Series polylines.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        for &(step, v) in &s.points {
            let px = sx(x_coord(step, spec.log_x));
            let py = match s.axis {
                Axis::Accuracy => sy_acc(v),
                Axis::Metric => sy_met(v),
            };
            pts.push_str(&format!("{px:.2},{py:.2} "));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.trim_end()
        ));
    }

    // Legend, top-left inside the frame.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let y = MARGIN_TOP + 16.0 + 16.0 * k as f64;
        let x = MARGIN_LEFT + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            x + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x + 28.0,
            y + 4.0,
            escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Validate, render, and write the SVG. On any error nothing is written.
pub fn render_plot(spec: &PlotSpec) -> Result<()> {
    let svg = render_svg(spec)?;
    std::fs::write(&spec.output, svg)?;
    Ok(())
}
