//! Minimal static SVG charts for sweep curves and per-category AP bars.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let v = y_max * f64::from(i) / 5.0;
        let y = y0 - (y0 - y1) * f64::from(i) / 5.0;
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m <= 0.0 {
        1.0
    } else if m <= 1.0 {
        1.0
    } else {
        m * 1.1
    }
}

/// Line chart over categorical x positions (e.g. augmentation ratios), one
/// polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x_ticks: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut s = header(title);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    axes(&mut s, x_label, y_label, y_max);
    let n = x_ticks.len().max(1);
    let x_at = |i: usize| LEFT + (W - LEFT - RIGHT) * (i as f64 + 0.5) / n as f64;
    let y_at = |v: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (v / y_max);
    for (i, t) in x_ticks.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x_at(i),
            H - BOTTOM + 18.0,
            escape(t)
        );
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), y_at(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted above");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 150.0,
            ly - 9.0,
            W - RIGHT - 135.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart with one bar per label.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let y_max = nice_max(bars.iter().map(|b| b.1));
    axes(&mut s, "category", y_label, y_max);
    let n = bars.len().max(1);
    let slot = (W - LEFT - RIGHT) / n as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (H - BOTTOM - TOP) * (v.max(0.0) / y_max);
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - BOTTOM - h,
            slot * 0.7,
            COLORS[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            x + slot * 0.35,
            H - BOTTOM - h - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 18.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let l = line_chart(
            "t",
            "ratio",
            "mse",
            &["0".into(), "1".into()],
            &[("a<b".into(), vec![0.5, f64::NAN])],
        );
        assert!(l.starts_with("<svg") && l.trim_end().ends_with("</svg>"));
        assert!(l.contains("a&lt;b"));
        let b = bar_chart("AP", "AP@0.5", &[("cup".into(), 1.0), ("bowl".into(), 0.25)]);
        assert_eq!(b.matches("<rect").count(), 3);
    }
}
