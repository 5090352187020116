//! Minimal standalone SVG line charts.

use std::fmt::Write;

use crate::calibrate::CalibrationDiagnostics;
use crate::compare::FeatureComparison;
use crate::data::{BinLayout, FeatureBins};

pub const MIMIC_COLOR: &str = "#d62728";
pub const OUTCOME_COLOR: &str = "#2ca02c";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Dotted,
    Markers,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub style: Style,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Tick labels for categorical x axes, placed at 0, 1, 2, ...
    pub x_categories: Option<Vec<String>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let (x0, x1) = match &self.x_categories {
            Some(c) => (-0.5, c.len() as f64 - 0.5),
            None => extent(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        };
        let (y0, y1) = extent(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        if y0 < 0.0 && y1 > 0.0 {
            let _ = writeln!(
                svg,
                r##"<line x1="{MARGIN_LEFT}" x2="{0}" y1="{1:.2}" y2="{1:.2}" stroke="#bbb"/>"##,
                MARGIN_LEFT + pw,
                sy(0.0)
            );
        }
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                sy(v) + 4.0,
                tick_label(v)
            );
        }
        match &self.x_categories {
            Some(cats) => {
                for (i, c) in cats.iter().enumerate() {
                    let _ = writeln!(
                        svg,
                        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                        sx(i as f64),
                        MARGIN_TOP + ph + 16.0,
                        escape(c)
                    );
                }
            }
            None => {
                for i in 0..=4 {
                    let v = x0 + (x1 - x0) * i as f64 / 4.0;
                    let _ = writeln!(
                        svg,
                        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                        sx(v),
                        MARGIN_TOP + ph + 16.0,
                        tick_label(v)
                    );
                }
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for s in &self.series {
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            match s.style {
                Style::Line | Style::Dotted => {
                    let dash = if s.style == Style::Dotted { r#" stroke-dasharray="2,3""# } else { "" };
                    let _ = writeln!(
                        svg,
                        r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
                        s.color,
                        pts.join(" ")
                    );
                }
                Style::Markers => {
                    for p in &pts {
                        let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
                        let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{}"/>"#, s.color);
                    }
                }
            }
        }
        let mut ly = MARGIN_TOP + 14.0;
        for s in self.series.iter().filter(|s| !s.name.is_empty()) {
            let lx = MARGIN_LEFT + 10.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx}" x2="{}" y1="{1}" y2="{1}" stroke="{2}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
                lx + 18.0,
                ly - 4.0,
                s.color,
                lx + 24.0,
                ly,
                escape(&s.name)
            );
            ly += 14.0;
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Mimic (red) and outcome (green) curves of one feature with dotted 95%
/// bands. The missing bin is left out of numeric plots.
pub fn feature_chart(cmp: &FeatureComparison, bins: &FeatureBins) -> Chart {
    let categorical = matches!(bins.layout, BinLayout::Categorical { .. });
    let shown: Vec<usize> = if categorical {
        (0..bins.n_bins()).collect()
    } else {
        (0..bins.n_value_bins()).collect()
    };
    let x = |i: usize, b: usize| if categorical { i as f64 } else { bins.bin_position(b) };
    let series = |name: &str, color: &str, style: Style, v: &[f64]| Series {
        name: name.into(),
        color: color.into(),
        style,
        points: shown.iter().enumerate().map(|(i, &b)| (x(i, b), v[b])).collect(),
    };
    Chart {
        title: cmp.name.clone(),
        x_label: cmp.name.clone(),
        y_label: "contribution".into(),
        x_categories: categorical.then(|| shown.iter().map(|&b| bins.bin_label(b)).collect()),
        series: vec![
            series("mimic", MIMIC_COLOR, Style::Line, &cmp.mimic.mean),
            series("", MIMIC_COLOR, Style::Dotted, &cmp.mimic.lower),
            series("", MIMIC_COLOR, Style::Dotted, &cmp.mimic.upper),
            series("outcome", OUTCOME_COLOR, Style::Line, &cmp.outcome.mean),
            series("", OUTCOME_COLOR, Style::Dotted, &cmp.outcome.lower),
            series("", OUTCOME_COLOR, Style::Dotted, &cmp.outcome.upper),
        ],
    }
}

/// Empirical logit per score level against the score, with the fitted line.
pub fn calibration_chart(title: &str, diag: &CalibrationDiagnostics) -> Chart {
    let xs: Vec<f64> = diag.levels.iter().map(|l| l.score).collect();
    let (lo, hi) = extent(xs.iter().copied());
    Chart {
        title: title.into(),
        x_label: if diag.transformed { "calibrated score".into() } else { "score".into() },
        y_label: "logit of empirical probability".into(),
        x_categories: None,
        series: vec![
            Series {
                name: "levels".into(),
                color: "#1f77b4".into(),
                style: Style::Markers,
                points: diag.levels.iter().map(|l| (l.score, l.logit_p)).collect(),
            },
            Series {
                name: format!("line (residual {:.3})", diag.linearity_residual),
                color: "#555".into(),
                style: Style::Line,
                points: vec![(lo, diag.logit_line.at(lo)), (hi, diag.logit_line.at(hi))],
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let chart = Chart {
            title: "a<b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "s".into(),
                color: MIMIC_COLOR.into(),
                style: Style::Line,
                points: vec![(0.0, 1.0), (1.0, -1.0), (2.0, f64::NAN)],
            }],
            x_categories: None,
        };
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
        assert!(svg.contains(MIMIC_COLOR));
    }
}
