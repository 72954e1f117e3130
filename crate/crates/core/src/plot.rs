//! Minimal self-contained SVG charts: line plots with an optional shaded
//! band, and diverging raster heat maps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 64.0;
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    /// Lower and upper envelope drawn as a translucent band.
    pub band: Option<(&'a [f64], &'a [f64])>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.x.iter()).filter(finite);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let ys = series.iter().flat_map(|s| {
        let band = s.band.map(|(l, u)| l.iter().chain(u.iter()));
        s.y.iter().chain(band.into_iter().flatten())
    });
    let (y0, y1) = ys
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (x0, x1) = if x0 < x1 { (x0, x1) } else { nice_range(x0, x1) };
    let (y0, y1) = nice_range(y0, y1);
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        svg,
        r##"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - ML - MR,
        H - MT - MB
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(fx), H - MB + 16.0, fmt_tick(fx));
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ML - 6.0, py(fy) + 4.0, fmt_tick(fy));
        let _ = writeln!(
            svg,
            r##"<line x1="{ML}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            W - MR,
            py(fy),
            py(fy)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, esc(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some((lo, hi)) = s.band {
            let mut pts = String::new();
            for (x, y) in s.x.iter().zip(hi) {
                let _ = write!(pts, "{:.2},{:.2} ", px(*x), py(*y));
            }
            for (x, y) in s.x.iter().zip(lo).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", px(*x), py(*y));
            }
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.trim_end());
        }
        let mut pts = String::new();
        for (x, y) in s.x.iter().zip(s.y) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", px(*x), py(*y));
            }
        }
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.trim_end());
        let ly = MT + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            ML + 10.0,
            ML + 30.0,
            ML + 36.0,
            ly + 4.0,
            esc(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Blue-white-red map for `t` in `[-1, 1]`.
fn diverging(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(-1.0, 1.0);
    let mix = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.0 {
        let s = -t;
        (mix(255.0, 33.0, s), mix(255.0, 102.0, s), mix(255.0, 172.0, s))
    } else {
        (mix(255.0, 178.0, t), mix(255.0, 24.0, t), mix(255.0, 43.0, t))
    }
}

/// Heat map of a `(ny, nx)` raster with row 0 at the bottom, symmetric color
/// scale around zero, and optional polylines (cell coordinates) on top.
pub fn heatmap(title: &str, values: &[f64], ny: usize, nx: usize, overlays: &[(&str, Vec<(f64, f64)>)]) -> String {
    let size = 480.0;
    let cell = size / nx.max(ny) as f64;
    let (wd, ht) = (cell * nx as f64, cell * ny as f64);
    let top = 32.0;
    let scale = values.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m });
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        wd + 20.0,
        ht + top + 28.0
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="15">{}</text>"#, (wd + 20.0) / 2.0, esc(title));
    let _ = writeln!(svg, r#"<g transform="translate(10 {top})" shape-rendering="crispEdges">"#);
    for r in 0..ny {
        for c in 0..nx {
            let v = values[r * nx + c];
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            let (cr, cg, cb) = diverging(t);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({cr},{cg},{cb})"/>"#,
                c as f64 * cell,
                (ny - 1 - r) as f64 * cell,
                cell + 0.05,
                cell + 0.05
            );
        }
    }
    for (i, (label, pts)) in overlays.iter().enumerate() {
        let color = ["#000000", "#2ca02c", "#ff7f0e", "#9467bd"][i % 4];
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{:.2},{:.2} ", x * cell, ht - y * cell);
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></polyline>"#,
            s.trim_end(),
            esc(label)
        );
    }
    svg.push_str("</g>\n");
    let _ = writeln!(
        svg,
        r#"<text x="10" y="{}">color scale: +/-{}</text>"#,
        ht + top + 20.0,
        fmt_tick(scale)
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_wellformed_and_deterministic() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 2.0];
        let s = [Series {
            label: "a<b",
            x: &x,
            y: &y,
            band: Some((&y, &y)),
        }];
        let a = line_chart("t", "x", "y", &s);
        assert_eq!(a, line_chart("t", "x", "y", &s));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        let h = heatmap("z", &[0.0, 1.0, -1.0, 0.5], 2, 2, &[("path", vec![(0.5, 0.5), (1.5, 1.5)])]);
        assert_eq!(h.matches("<rect").count(), 5);
        assert_eq!(diverging(0.0), (255, 255, 255));
    }
}
