//! Training-curve emission: every curve is written twice, once as CSV (the
//! data of record) and once as a static SVG rendered here, so plots can be
//! rebuilt or restyled without rerunning the experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsiam_core::fed::RoundMetrics;

use crate::CliError;

pub struct Curve<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

pub fn write_csv(path: &Path, header: &str, points: &[(f64, f64)]) -> Result<(), CliError> {
    let mut out = String::from(header);
    out.push('\n');
    for (x, y) in points {
        writeln!(out, "{x},{y}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Render line curves onto a fixed 640×400 canvas with linear axes, five
/// ticks per axis, and a legend in the top-right corner.
pub fn render_svg(title: &str, xlabel: &str, ylabel: &str, curves: &[Curve<'_>]) -> String {
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    let (x0, x1) = span(pts.iter().map(|p| p.0));
    let (y0, y1) = span(pts.iter().map(|p| p.1));
    let to_x = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let to_y = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    write!(
        svg,
        r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/><text x="{:.1}" y="20" text-anchor="middle" font-size="15">{}</text>"##,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title)
    )
    .unwrap();

    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xp = to_x(xv);
        let yp = to_y(yv);
        write!(
            svg,
            r##"<line x1="{xp:.1}" y1="{:.1}" x2="{xp:.1}" y2="{:.1}" stroke="#ddd"/><text x="{xp:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            MARGIN_T,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 18.0,
            tick(xv)
        )
        .unwrap();
        write!(
            svg,
            r##"<line x1="{:.1}" y1="{yp:.1}" x2="{:.1}" y2="{yp:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            MARGIN_L,
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            yp + 4.0,
            tick(yv)
        )
        .unwrap();
    }
    write!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##,
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    )
    .unwrap();
    write!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"##,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0,
        escape(xlabel),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    )
    .unwrap();

    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: String = curve
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", to_x(x), to_y(y)))
            .collect::<Vec<_>>()
            .join(" ");
        write!(
            svg,
            r#"<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        )
        .unwrap();
        let ly = MARGIN_T + 16.0 + i as f64 * 16.0;
        write!(
            svg,
            r##"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"##,
            WIDTH - MARGIN_R - 120.0,
            WIDTH - MARGIN_R - 96.0,
            WIDTH - MARGIN_R - 90.0,
            ly + 4.0,
            escape(curve.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>");
    svg
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // A flat curve still needs a nonzero span to land mid-plot.
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write the loss (and, where measured, KNN accuracy) curves for a run.
/// Returns the files created.
pub fn emit_plots(dir: &Path, history: &[RoundMetrics]) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let loss: Vec<(f64, f64)> = history
        .iter()
        .map(|m| (m.round as f64, m.mean_train_loss))
        .collect();
    let loss_csv = dir.join("loss.csv");
    write_csv(&loss_csv, "round,mean_train_loss", &loss)?;
    let loss_svg = dir.join("loss.svg");
    let svg = render_svg(
        "Training loss",
        "round",
        "mean train loss",
        &[Curve { label: "train", points: loss }],
    );
    std::fs::write(&loss_svg, svg)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", loss_svg.display())))?;
    written.push(loss_csv);
    written.push(loss_svg);

    let knn: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|m| m.knn_accuracy.map(|a| (m.round as f64, a)))
        .collect();
    if !knn.is_empty() {
        let knn_csv = dir.join("knn.csv");
        write_csv(&knn_csv, "round,knn_accuracy", &knn)?;
        let knn_svg = dir.join("knn.svg");
        let svg = render_svg(
            "KNN accuracy",
            "round",
            "accuracy",
            &[Curve { label: "knn", points: knn }],
        );
        std::fs::write(&knn_svg, svg)
            .map_err(|e| CliError::Runtime(format!("write {}: {e}", knn_svg.display())))?;
        written.push(knn_csv);
        written.push(knn_svg);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(round: u32, loss: f64, knn: Option<f64>) -> RoundMetrics {
        RoundMetrics {
            round,
            participants: vec![0],
            mean_train_loss: loss,
            knn_accuracy: knn,
            wall_time_s: 1.0,
        }
    }

    #[test]
    fn plots_come_in_data_and_image_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let history = vec![
            metrics(0, -0.2, None),
            metrics(1, -0.5, Some(0.4)),
            metrics(2, -0.7, Some(0.55)),
        ];
        let files = emit_plots(dir.path(), &history).unwrap();
        assert_eq!(files.len(), 4);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("round,mean_train_loss"));
        let svg = std::fs::read_to_string(dir.path().join("knn.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn svg_handles_flat_and_single_point_curves() {
        let one = render_svg(
            "t",
            "x",
            "y",
            &[Curve { label: "c", points: vec![(0.0, 1.0)] }],
        );
        assert!(one.contains("polyline"));
        let flat = render_svg(
            "t",
            "x",
            "y",
            &[Curve {
                label: "c",
                points: vec![(0.0, 2.0), (1.0, 2.0)],
            }],
        );
        assert!(!flat.contains("NaN"));
    }
}
