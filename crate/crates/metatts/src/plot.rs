//! Minimal SVG rendering of adaptation curves: similarity-vs-step and
//! MCD-vs-step with the meta and baseline arms overlaid. Individual
//! (speaker, seed) cells draw as faint lines, the per-mode mean as a bold
//! one. Steps plot on a log axis since snapshots are log-spaced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{AdaptMode, AdaptationCurve};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;

const META_COLOR: &str = "#d62728";
const BASELINE_COLOR: &str = "#1f77b4";

/// Which measurement a plot shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Similarity,
    Mcd,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Similarity => "speaker similarity (cosine)",
            Metric::Mcd => "mel-cepstral distortion (dB)",
        }
    }

    fn value(self, p: &crate::eval::CurvePoint) -> f64 {
        match self {
            Metric::Similarity => p.similarity,
            Metric::Mcd => p.mcd,
        }
    }
}

fn mode_color(mode: AdaptMode) -> &'static str {
    match mode {
        AdaptMode::Meta => META_COLOR,
        AdaptMode::Baseline => BASELINE_COLOR,
    }
}

/// Round tick spacing to the nearest 1/2/5 decade step.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.abs().log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn x(&self, step: usize) -> f64 {
        let t = ((step as f64).log10() - self.x_min) / (self.x_max - self.x_min);
        MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let t = (self.y_max - v) / (self.y_max - self.y_min);
        MARGIN_T + t * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Renders one metric across all curves as a standalone SVG document.
pub fn render_svg(curves: &[AdaptationCurve], metric: Metric) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Data("no curves to plot".into()));
    }
    for c in curves {
        c.validate()?;
    }
    let mut steps: Vec<usize> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let values: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| metric.value(p)))
        .collect();
    let (vmin, vmax) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let pad = ((vmax - vmin) * 0.08).max(1e-6);
    let mut x_min = (steps[0] as f64).log10();
    let mut x_max = (*steps.last().unwrap() as f64).log10();
    if (x_max - x_min).abs() < 1e-9 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let ax = Axes {
        x_min,
        x_max,
        y_min: vmin - pad,
        y_max: vmax + pad,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{} vs adaptation step</text>"#,
        WIDTH / 2.0,
        metric.label()
    );

    // Axes frame.
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );

    // X ticks at the observed snapshot steps.
    for &s in &steps {
        let x = ax.x(s);
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{s}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">adaptation step</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0
    );

    // Y ticks on a nice grid.
    let step = nice_step((ax.y_max - ax.y_min) / 4.0);
    let mut tick = (ax.y_min / step).ceil() * step;
    while tick <= ax.y_max + 1e-12 {
        let y = ax.y(tick);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{tick:.3}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
        tick += step;
    }

    // Faint per-cell lines.
    for c in curves {
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", ax.x(p.step), ax.y(metric.value(p))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1" opacity="0.3"/>"#,
            pts.join(" "),
            mode_color(c.mode)
        );
    }

    // Bold per-mode means over whatever cells report each step.
    for mode in [AdaptMode::Meta, AdaptMode::Baseline] {
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for c in curves.iter().filter(|c| c.mode == mode) {
            for p in &c.points {
                by_step.entry(p.step).or_default().push(metric.value(p));
            }
        }
        if by_step.is_empty() {
            continue;
        }
        let pts: Vec<String> = by_step
            .iter()
            .map(|(&s, vs)| {
                let mean = vs.iter().sum::<f64>() / vs.len() as f64;
                format!("{:.2},{:.2}", ax.x(s), ax.y(mean))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2.5"/>"#,
            pts.join(" "),
            mode_color(mode)
        );
        for (&s, vs) in &by_step {
            let mean = vs.iter().sum::<f64>() / vs.len() as f64;
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                ax.x(s),
                ax.y(mean),
                mode_color(mode)
            );
        }
    }

    // Legend.
    for (i, (mode, label)) in [(AdaptMode::Meta, "meta"), (AdaptMode::Baseline, "baseline")]
        .into_iter()
        .enumerate()
    {
        let y = MARGIN_T + 14.0 + i as f64 * 18.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2.5"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{label}</text>"#,
            x0 + 10.0,
            x0 + 34.0,
            mode_color(mode),
            x0 + 40.0,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `similarity.svg` and `mcd.svg` under `dir`, returning their paths.
pub fn write_plots(curves: &[AdaptationCurve], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let sim_path = dir.join("similarity.svg");
    let mcd_path = dir.join("mcd.svg");
    std::fs::write(&sim_path, render_svg(curves, Metric::Similarity)?)?;
    std::fs::write(&mcd_path, render_svg(curves, Metric::Mcd)?)?;
    Ok((sim_path, mcd_path))
}
