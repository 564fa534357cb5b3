//! Minimal line-chart writer for learning curves. Output depends only on
//! the input series, so repeated runs give identical files.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    /// (epoch, value)
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(series: &[Series], fixed_unit: bool) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if fixed_unit {
        return (1.0, x1.max(2.0), 0.0, 1.0);
    }
    if !y0.is_finite() {
        return (1.0, 2.0, 0.0, 1.0);
    }
    let y0 = y0.min(0.0);
    let y1 = if y1 > y0 { y1 * 1.05 } else { y0 + 1.0 };
    (1.0, x1.max(2.0), y0, y1)
}

/// Render a chart. `unit_range` pins the y axis to [0, 1].
pub fn line_chart(title: &str, y_label: &str, series: &[Series], unit_range: bool) -> String {
    let (x0, x1, y0, y1) = bounds(series, unit_range);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT:.1} {TOP:.1} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=TICKS {
        let y = y0 + (y1 - y0) * i as f64 / TICKS as f64;
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"##,
            LEFT,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let span = (x1 - x0).round() as usize;
    let step = span.div_ceil(10).max(1);
    let mut e = 1;
    while e as f64 <= x1 {
        let px = sx(e as f64);
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{e}</text>"#,
            TOP + ph + 16.0
        );
        e += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (k, ser) in series.iter().enumerate() {
        if !ser.points.is_empty() {
            let mut d = String::new();
            for (i, &(x, y)) in ser.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, sx(x), sy(y));
            }
            let _ = writeln!(
                s,
                r#"<path d="{d}" stroke="{}" stroke-width="2" fill="none"/>"#,
                ser.color
            );
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let lx = LEFT + pw - 140.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0,
            ser.color,
            lx + 26.0,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
