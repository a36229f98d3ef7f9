//! Standalone SVG line chart of one metric against the round index.

use std::fmt::Write;

use bayes_admm::trace::RoundRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Preferred metric present in the records: oracle distance, then NLL, then the residuals.
pub fn pick_metric(records: &[RoundRecord]) -> &'static str {
    ["dist_oracle", "nll"]
        .into_iter()
        .find(|m| records.iter().any(|r| r.metrics.contains_key(*m)))
        .unwrap_or("residual_max")
}

fn value(r: &RoundRecord, metric: &str) -> Option<f64> {
    if metric == "residual_max" {
        return Some(r.residuals.max());
    }
    r.metrics.get(metric).copied()
}

/// Values spanning more than two decades, all positive, are drawn on a log axis.
pub fn line_chart(records: &[RoundRecord], metric: &str, title: &str) -> String {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| value(r, metric).map(|v| (r.round as f64, v)))
        .filter(|(_, v)| v.is_finite())
        .collect();
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let log = lo > 0.0 && hi / lo > 100.0;
    let tf = |v: f64| if log { v.log10() } else { v };
    let (ylo, yhi) = if pts.is_empty() {
        (0.0, 1.0)
    } else if tf(hi) > tf(lo) {
        (tf(lo), tf(hi))
    } else {
        (tf(lo) - 0.5, tf(lo) + 0.5)
    };
    let xmax = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let px = |x: f64| MARGIN + (x - 1.0).max(0.0) / (xmax - 1.0).max(1.0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (tf(y) - ylo) / (yhi - ylo) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{} ({})</text>"#,
        WIDTH / 2.0,
        escape(title),
        escape(metric)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
    let axis_label = |v: f64| if log { format!("1e{v:.1}") } else { format!("{v:.3e}") };
    for (v, y) in [(yhi, y1), (ylo, y0)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            x0 - 4.0,
            y + 4.0,
            axis_label(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">round (1 to {xmax})</text>"#,
        WIDTH / 2.0,
        HEIGHT - MARGIN / 3.0
    );
    if !pts.is_empty() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"/>"#,
                px(x),
                py(y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
