//! Minimal polyline charts for sweep results.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One series drawn over evenly spaced categories labelled `x_labels`.
/// Non-finite values break the line.
pub fn line_chart(title: &str, x_name: &str, y_name: &str, x_labels: &[String], ys: &[f64]) -> String {
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = x_labels.len().max(1);
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    )
    .unwrap();
    for (v, label) in [(lo, lo), (hi, hi)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label:.3}</text>"#, MARGIN - 4.0, py(v) + 4.0).unwrap();
    }
    for (i, label) in x_labels.iter().enumerate() {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(i), H - MARGIN + 14.0, escape(label)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(x_name)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_name)
    )
    .unwrap();

    let mut segment: Vec<String> = Vec::new();
    let flush = |seg: &mut Vec<String>, s: &mut String| {
        if !seg.is_empty() {
            writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, seg.join(" ")).unwrap();
            seg.clear();
        }
    };
    for (i, &v) in ys.iter().enumerate() {
        if v.is_finite() {
            segment.push(format!("{:.1},{:.1}", px(i), py(v)));
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, px(i), py(v)).unwrap();
        } else {
            flush(&mut segment, &mut s);
        }
    }
    flush(&mut segment, &mut s);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_per_finite_run() {
        let labels: Vec<String> = ["0", "1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let svg = line_chart("t", "x", "y", &labels, &[0.1, 0.2, f64::NAN, 0.3]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
