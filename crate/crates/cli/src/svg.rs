//! Plain SVG plots. Output depends only on the data, never on time or
//! environment, so re-running a stage reproduces files byte for byte.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// One polyline per series on shared axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT, title);
    let _ = writeln!(out, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (v, x, anchor) in [(x0, sx(x0), "start"), (x1, sx(x1), "end")] {
        let _ =
            writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#, HEIGHT - MARGIN + 14.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&s.label)
        );
    }
    if series.len() <= 12 {
        for (i, s) in series.iter().enumerate() {
            let y = MARGIN + 14.0 * i as f64 + 10.0;
            let x = WIDTH - MARGIN - 90.0;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#,
                x + 16.0
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 20.0, y + 4.0, escape(&s.label));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Blue-to-yellow ramp over `t` in `[0, 1]`.
fn color(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 4] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (253.0, 231.0, 37.0)];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let f = t * (STOPS.len() - 1) as f64;
    let i = (f.floor() as usize).min(STOPS.len() - 2);
    let u = f - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Square heatmap of a row-major `grid_n × grid_n` field, row 0 drawn at the
/// bottom so the picture matches workspace coordinates.
pub fn heatmap(title: &str, grid_n: usize, values: &[f64]) -> String {
    assert_eq!(values.len(), grid_n * grid_n, "heatmap needs grid_n² values");
    let side = 384.0;
    let cell = side / grid_n as f64;
    let (w, h) = (side + 2.0 * MARGIN + 60.0, side + 2.0 * MARGIN);
    let (lo, hi) = bounds(values.iter().copied());

    let mut out = String::new();
    header(&mut out, w, h, title);
    for row in 0..grid_n {
        let y = MARGIN + side - (row + 1) as f64 * cell;
        for col in 0..grid_n {
            let v = values[row * grid_n + col];
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + col as f64 * cell,
                cell + 0.05,
                cell + 0.05,
                color((v - lo) / (hi - lo))
            );
        }
    }
    let bar_x = MARGIN + side + 16.0;
    for k in 0..32 {
        let t = k as f64 / 31.0;
        let y = MARGIN + side - (k + 1) as f64 * side / 32.0;
        let _ = writeln!(
            out,
            r#"<rect x="{bar_x:.1}" y="{y:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            side / 32.0 + 0.05,
            color(t)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{hi:.3}</text>"#, bar_x + 18.0, MARGIN + 10.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{lo:.3}</text>"#, bar_x + 18.0, MARGIN + side);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">x</text>"#, MARGIN + side / 2.0, h - 12.0);
    let _ = writeln!(out, r#"<text x="14" y="{:.1}" text-anchor="middle">y</text>"#, MARGIN + side / 2.0);
    out.push_str("</svg>\n");
    out
}
