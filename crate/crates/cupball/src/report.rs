//! Sweep report charts rendered as standalone SVG documents.
//!
//! The three charts mirror the headline experiment: catch rate, center-hit
//! rate and impact-velocity statistics, each against the calibration sample
//! count. The XML is assembled by hand so reporting adds no plotting
//! dependency, and every number is formatted with a fixed precision so the
//! same summary always produces byte-identical files.

use std::io;
use std::path::{Path, PathBuf};

use crate::sim::SweepSummary;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const SERIES_COLOR: &str = "#1f6fb4";

/// File names of the three charts, in render order.
pub const CHART_FILES: [&str; 3] = [
    "catch_rate.svg",
    "hit_center_rate.svg",
    "impact_velocity.svg",
];

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{:.0}", v.round())
    } else {
        format!("{v:.2}")
    }
}

/// Affine map from data range to pixel range (pixel y grows downward, so
/// callers pass a flipped output range for the vertical axis).
fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi <= lo {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    xs: Vec<f64>,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    body: String,
}

impl Chart {
    fn new(title: &str, x_label: &str, y_label: &str, xs: &[f64], y_lo: f64, y_hi: f64) -> Self {
        let (x_lo, x_hi) = match xs {
            [] => (0.0, 1.0),
            [only] => (only - 1.0, only + 1.0),
            _ => (xs[0], xs[xs.len() - 1]),
        };
        Chart {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            xs: xs.to_vec(),
            x_lo,
            x_hi,
            y_lo,
            y_hi,
            body: String::new(),
        }
    }

    fn x_px(&self, x: f64) -> f64 {
        scale(x, self.x_lo, self.x_hi, MARGIN_LEFT, WIDTH - MARGIN_RIGHT)
    }

    fn y_px(&self, y: f64) -> f64 {
        scale(y, self.y_lo, self.y_hi, HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)
    }

    /// Shaded min/max band, drawn before the series line.
    fn push_band(&mut self, points: &[(f64, f64, f64)]) {
        if points.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (i, (x, _, hi)) in points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            d.push_str(&format!("{cmd}{},{} ", px(self.x_px(*x)), px(self.y_px(*hi))));
        }
        for (x, lo, _) in points.iter().rev() {
            d.push_str(&format!("L{},{} ", px(self.x_px(*x)), px(self.y_px(*lo))));
        }
        d.push('Z');
        self.body.push_str(&format!(
            "  <path class=\"band\" fill=\"{SERIES_COLOR}\" fill-opacity=\"0.15\" stroke=\"none\" d=\"{d}\"/>\n",
        ));
    }

    /// Polyline through the data points plus a marker dot per point, so a
    /// single-point series still shows up.
    fn push_series(&mut self, points: &[(f64, f64)]) {
        let mut d = String::new();
        for (i, (x, y)) in points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            d.push_str(&format!("{cmd}{},{}", px(self.x_px(*x)), px(self.y_px(*y))));
            if i + 1 < points.len() {
                d.push(' ');
            }
        }
        self.body.push_str(&format!(
            "  <path class=\"series\" fill=\"none\" stroke=\"{SERIES_COLOR}\" stroke-width=\"2\" d=\"{d}\"/>\n",
        ));
        for (x, y) in points {
            self.body.push_str(&format!(
                "  <circle class=\"marker\" cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{SERIES_COLOR}\"/>\n",
                px(self.x_px(*x)),
                px(self.y_px(*y)),
            ));
        }
    }

    fn render(&self) -> String {
        let plot_left = px(MARGIN_LEFT);
        let plot_right = px(WIDTH - MARGIN_RIGHT);
        let plot_top = px(MARGIN_TOP);
        let plot_bottom = px(HEIGHT - MARGIN_BOTTOM);
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        svg.push_str(&format!(
            "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text class=\"title\" x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            px(WIDTH / 2.0),
            self.title
        ));

        // Axes.
        svg.push_str(&format!(
            "  <line x1=\"{plot_left}\" y1=\"{plot_bottom}\" x2=\"{plot_right}\" y2=\"{plot_bottom}\" stroke=\"black\"/>\n"
        ));
        svg.push_str(&format!(
            "  <line x1=\"{plot_left}\" y1=\"{plot_top}\" x2=\"{plot_left}\" y2=\"{plot_bottom}\" stroke=\"black\"/>\n"
        ));

        // One x tick per data point; the schedules are short enough to label
        // each sample count directly.
        for x in &self.xs {
            let xp = px(self.x_px(*x));
            let yb = HEIGHT - MARGIN_BOTTOM;
            svg.push_str(&format!(
                "  <line x1=\"{xp}\" y1=\"{}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>\n",
                px(yb),
                px(yb + 5.0)
            ));
            svg.push_str(&format!(
                "  <text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                px(yb + 20.0),
                tick_label(*x)
            ));
        }

        // Five evenly spaced y ticks.
        for i in 0..=4 {
            let v = self.y_lo + (self.y_hi - self.y_lo) * f64::from(i) / 4.0;
            let yp = px(self.y_px(v));
            svg.push_str(&format!(
                "  <line x1=\"{}\" y1=\"{yp}\" x2=\"{plot_left}\" y2=\"{yp}\" stroke=\"black\"/>\n",
                px(MARGIN_LEFT - 5.0)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                px(MARGIN_LEFT - 9.0),
                px(self.y_px(v) + 4.0),
                tick_label(v)
            ));
        }

        // Axis labels.
        svg.push_str(&format!(
            "  <text class=\"x-label\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px((MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0),
            px(HEIGHT - 12.0),
            self.x_label
        ));
        svg.push_str(&format!(
            "  <text class=\"y-label\" x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
            px(HEIGHT / 2.0),
            px(HEIGHT / 2.0),
            self.y_label
        ));

        svg.push_str(&self.body);
        svg.push_str("</svg>\n");
        svg
    }
}

fn schedule(summary: &SweepSummary) -> Vec<f64> {
    summary.per_n.iter().map(|s| s.n as f64).collect()
}

/// Catch rate against the calibration sample count.
pub fn catch_rate_chart(summary: &SweepSummary) -> String {
    let xs = schedule(summary);
    let mut chart = Chart::new(
        "Catch rate vs calibration samples",
        "calibration samples n",
        "catch rate [%]",
        &xs,
        0.0,
        100.0,
    );
    let pts: Vec<(f64, f64)> = summary.per_n.iter().map(|s| (s.n as f64, s.catch_pct)).collect();
    chart.push_series(&pts);
    chart.render()
}

/// Center-hit rate against the calibration sample count.
pub fn hit_center_rate_chart(summary: &SweepSummary) -> String {
    let xs = schedule(summary);
    let mut chart = Chart::new(
        "Center-hit rate vs calibration samples",
        "calibration samples n",
        "center-hit rate [%]",
        &xs,
        0.0,
        100.0,
    );
    let pts: Vec<(f64, f64)> =
        summary.per_n.iter().map(|s| (s.n as f64, s.hit_center_pct)).collect();
    chart.push_series(&pts);
    chart.render()
}

/// Mean commanded vertical rate at impact with a one-standard-deviation
/// band. Sample counts whose batch produced no impacts are skipped.
pub fn impact_velocity_chart(summary: &SweepSummary) -> String {
    let xs = schedule(summary);
    let stats: Vec<(f64, f64, f64)> = summary
        .per_n
        .iter()
        .filter_map(|s| {
            s.mean_impact_vz
                .map(|m| (s.n as f64, m, s.std_impact_vz.unwrap_or(0.0)))
        })
        .collect();
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, m, sd) in &stats {
        y_lo = y_lo.min(m - sd);
        y_hi = y_hi.max(m + sd);
    }
    if !y_lo.is_finite() || !y_hi.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.05;
        y_hi += 0.05;
    }
    let pad = 0.1 * (y_hi - y_lo);
    let mut chart = Chart::new(
        "Impact vertical rate vs calibration samples",
        "calibration samples n",
        "commanded vertical rate at impact [m/s]",
        &xs,
        y_lo - pad,
        y_hi + pad,
    );
    let band: Vec<(f64, f64, f64)> =
        stats.iter().map(|(x, m, sd)| (*x, m - sd, m + sd)).collect();
    chart.push_band(&band);
    let pts: Vec<(f64, f64)> = stats.iter().map(|(x, m, _)| (*x, *m)).collect();
    chart.push_series(&pts);
    chart.render()
}

/// Render all three charts into `dir` and return the written paths in
/// [`CHART_FILES`] order.
pub fn write_charts(dir: &Path, summary: &SweepSummary) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let docs = [
        catch_rate_chart(summary),
        hit_center_rate_chart(summary),
        impact_velocity_chart(summary),
    ];
    let mut paths = Vec::with_capacity(3);
    for (name, doc) in CHART_FILES.iter().zip(docs) {
        let path = dir.join(name);
        std::fs::write(&path, doc)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sets::Box2;
    use crate::sim::NSummary;
    use nalgebra::Vector2;

    fn summary_row(n: usize, catch_pct: f64, hit_pct: f64, vz: Option<f64>) -> NSummary {
        NSummary {
            n,
            epsilon_used: 0.1,
            vhat: Box2::symmetric(Vector2::new(0.01, 0.01)),
            rollouts: 100,
            catches: (catch_pct as usize).min(100),
            misses: 0,
            p1_failures: 0,
            p2_failures: 0,
            constraint_violations: 0,
            hit_centers: 0,
            impacts: if vz.is_some() { 90 } else { 0 },
            catch_pct,
            hit_center_pct: hit_pct,
            trial_failure_pct: 0.0,
            mean_impact_vz: vz,
            std_impact_vz: vz.map(|_| 0.02),
        }
    }

    fn sample_summary() -> SweepSummary {
        SweepSummary {
            per_n: vec![
                summary_row(50, 40.0, 10.0, Some(0.30)),
                summary_row(200, 55.0, 20.0, Some(0.22)),
                summary_row(800, 70.0, 35.0, Some(0.15)),
            ],
            spearman_rho: 1.0,
            spearman_p: 0.04,
        }
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn each_chart_has_one_series_path_and_labeled_axes() {
        let summary = sample_summary();
        for doc in [
            catch_rate_chart(&summary),
            hit_center_rate_chart(&summary),
            impact_velocity_chart(&summary),
        ] {
            assert_eq!(count(&doc, "class=\"series\""), 1);
            assert_eq!(count(&doc, "class=\"x-label\""), 1);
            assert_eq!(count(&doc, "class=\"y-label\""), 1);
            assert!(doc.contains("calibration samples n"));
            assert!(doc.starts_with("<svg ") && doc.trim_end().ends_with("</svg>"));
            // Every schedule entry appears as a tick label.
            for n in ["50", "200", "800"] {
                assert!(doc.contains(&format!(">{n}</text>")));
            }
        }
    }

    #[test]
    fn series_path_is_one_polyline_through_all_points() {
        let doc = catch_rate_chart(&sample_summary());
        let d = doc
            .split("class=\"series\"")
            .nth(1)
            .and_then(|s| s.split("d=\"").nth(1))
            .and_then(|s| s.split('"').next())
            .unwrap();
        assert_eq!(d.matches('M').count(), 1);
        assert_eq!(d.matches('L').count(), 2);
        assert_eq!(count(&doc, "class=\"marker\""), 3);
    }

    #[test]
    fn monotone_series_renders_with_decreasing_pixel_y() {
        let doc = catch_rate_chart(&sample_summary());
        let d = doc
            .split("class=\"series\"")
            .nth(1)
            .and_then(|s| s.split("d=\"").nth(1))
            .and_then(|s| s.split('"').next())
            .unwrap();
        let ys: Vec<f64> = d
            .split(' ')
            .map(|p| p.trim_start_matches(['M', 'L']).split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        // Rising catch rate means the polyline climbs, i.e. pixel y falls.
        assert!(ys.windows(2).all(|w| w[1] < w[0]), "pixel ys {ys:?}");
    }

    #[test]
    fn single_point_summary_still_renders_marker_and_band_is_skipped() {
        let summary = SweepSummary {
            per_n: vec![summary_row(100, 50.0, 25.0, Some(0.2))],
            spearman_rho: 0.0,
            spearman_p: 1.0,
        };
        for doc in [catch_rate_chart(&summary), impact_velocity_chart(&summary)] {
            assert_eq!(count(&doc, "class=\"series\""), 1);
            assert_eq!(count(&doc, "class=\"marker\""), 1);
        }
        assert_eq!(count(&impact_velocity_chart(&summary), "class=\"band\""), 0);
    }

    #[test]
    fn impact_chart_skips_sample_counts_without_impacts() {
        let mut summary = sample_summary();
        summary.per_n[1].mean_impact_vz = None;
        summary.per_n[1].std_impact_vz = None;
        let doc = impact_velocity_chart(&summary);
        assert_eq!(count(&doc, "class=\"marker\""), 2);
        // The tick for the skipped n is still drawn on the axis.
        assert!(doc.contains(">200</text>"));
    }

    #[test]
    fn write_charts_produces_three_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let summary = sample_summary();
        let paths = write_charts(dir.path(), &summary).unwrap();
        assert_eq!(paths.len(), 3);
        let first: Vec<String> =
            paths.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect();
        let again = write_charts(dir.path(), &summary).unwrap();
        for (p, want) in again.iter().zip(&first) {
            assert_eq!(&std::fs::read_to_string(p).unwrap(), want);
        }
        for (p, name) in paths.iter().zip(CHART_FILES) {
            assert_eq!(p.file_name().unwrap().to_str().unwrap(), name);
        }
    }
}
