//! Minimal hand-written SVG for uniform Q-Q plots.

use std::fmt::Write;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 40.0;

/// Scatter of `(expected, observed)` on the unit square with the diagonal.
pub fn qq_plot(points: &[(f64, f64)], title: &str) -> String {
    let span = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + v.clamp(0.0, 1.0) * span;
    let py = |v: f64| SIZE - MARGIN - v.clamp(0.0, 1.0) * span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="grey" stroke-dasharray="4 3"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for &(e, o) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue"/>"#, px(e), py(o));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">expected</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">observed</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="13" text-anchor="middle">{}</text>"#, SIZE / 2.0, escape(title));
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point() {
        let svg = qq_plot(&[(0.25, 0.2), (0.75, 0.9)], "a < b");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a &lt; b"));
    }
}
