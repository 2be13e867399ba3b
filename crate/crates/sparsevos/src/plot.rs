//! Minimal SVG charts for benchmark reports and sweeps.

use std::fmt::Write as _;

use crate::bench::{BenchReport, SparsityRow, TauRow};

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Connect the points with a polyline.
    pub line: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5f64.max(lo.abs() * 0.1) };
    (lo - pad, hi + pad)
}

pub fn chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<path d=\"M{M} {} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        M,
        H - M,
        W - M
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{xv:.3}</text>", sx(xv), H - M + 14.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.3}</text>", M - 4.0, sy(yv) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).copied().collect();
        if ser.line && pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"{c}\" fill=\"none\"/>", path.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{c}\"/>", sx(x), sy(y));
        }
        let ly = 36.0 + 14.0 * i as f64;
        let _ = writeln!(s, "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{c}\"/>", W - M - 90.0, ly - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\">{}</text>", W - M - 82.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// End-to-end MAC speedup against mean IoU, one marker per mode.
pub fn accuracy_vs_speedup(reports: &[BenchReport]) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            name: r.mode.name().into(),
            points: vec![(r.summary.speedup_end_to_end, r.summary.mean_iou_gt)],
            line: false,
        })
        .collect();
    chart("accuracy vs speedup", "end-to-end MAC speedup", "mean IoU vs ground truth", &series)
}

pub fn tau_plot(rows: &[TauRow]) -> String {
    let series = [Series {
        name: "window sparsity".into(),
        points: rows.iter().map(|r| (r.tau, r.mean_window_sparsity)).collect(),
        line: true,
    }];
    chart("tau sweep", "tau", "mean window sparsity", &series)
}

pub fn s_plot(rows: &[SparsityRow]) -> String {
    let series = [
        Series { name: "measured".into(), points: rows.iter().map(|r| (r.s, r.measured_savings)).collect(), line: true },
        Series { name: "(m-1)s/(m+1)".into(), points: rows.iter().map(|r| (r.s, r.analytic_savings)).collect(), line: true },
    ];
    chart("memory sparsity sweep", "s", "memory tokens excluded", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_chart_has_one_marker() {
        let svg = chart("t<1>", "x", "y", &[Series { name: "a&b".into(), points: vec![(1.0, 0.5)], line: true }]);
        assert!(svg.starts_with("<?xml"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // one data marker plus one legend marker
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("t&lt;1&gt;") && svg.contains("a&amp;b"));
        assert!(!svg.contains("<polyline"));
    }
}
