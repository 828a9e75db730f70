//! Minimal deterministic SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(out, r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                b + 15.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 5.0,
                self.py(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Grid of numbers shaded from white (grid minimum) to blue (grid
/// maximum).
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>], decimals: usize) -> String {
    let cell = 56.0;
    let left = 110.0;
    let top = 70.0;
    let width = left + cell * cols.len() as f64 + 20.0;
    let height = top + cell * rows.len() as f64 + 20.0;
    let mut out = String::new();
    open(&mut out, width.max(200.0), height, title);
    let (lo, hi) = range(values.iter().flatten().copied());
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + cell * (j as f64 + 0.5),
            top - 8.0,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell / 2.0 + 4.0,
            escape(r)
        );
        for (j, v) in values[i].iter().enumerate() {
            let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let shade = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(255.0, 31.0), shade(255.0, 119.0), shade(255.0, 180.0));
            let x = left + cell * j as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="{fill}" stroke="white"/>"#
            );
            let ink = if f > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{:.*}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                decimals,
                v
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot of `(x, y)` points.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let frame = Frame {
        x: range(points.iter().map(|p| p.0)),
        y: range(points.iter().map(|p| p.1)),
    };
    frame.axes(&mut out, x_label, y_label);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{}" fill-opacity="0.8"/>"#,
            frame.px(x),
            frame.py(y),
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One line per series; `marks` are drawn as hollow circles on top.
pub fn lines(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    marks: &[(f64, f64)],
) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let all = || series.iter().flat_map(|s| s.1.iter());
    let frame = Frame {
        x: range(all().map(|p| p.0)),
        y: range(all().map(|p| p.1)),
    };
    frame.axes(&mut out, x_label, y_label);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.1},{:.1} ", if i == 0 { 'M' } else { 'L' }, frame.px(x), frame.py(y));
        }
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - MARGIN + 4.0,
            MARGIN + 14.0 * k as f64,
            escape(name)
        );
    }
    for &(x, y) in marks {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="none" stroke="black"/>"#,
            frame.px(x),
            frame.py(y)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic_and_closed() {
        let a = scatter("t", "x", "y", &[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(a, scatter("t", "x", "y", &[(0.0, 1.0), (2.0, 3.0)]));
        assert!(a.trim_end().ends_with("</svg>"));
        let h = heatmap("<w>", &["a".into()], &["b".into(), "c".into()], &[vec![1.0, 2.0]], 0);
        assert!(h.contains("&lt;w&gt;"));
        assert_eq!(h.matches("<rect").count(), 3);
        let l = lines("l", "x", "y", &[("s".into(), vec![(0.0, 0.0), (1.0, 1.0)])], &[(1.0, 1.0)]);
        assert!(l.contains("<path d=\"M"));
    }
}
