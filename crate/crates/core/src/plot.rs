//! Static SVG rendering of error curves on log-log axes.

use std::fmt::Write as _;

use crate::experiments::{ErrorCurve, SummaryRow};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && *v > 0.0) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        let (mut lo, mut hi) = (lo.log10().floor(), hi.log10().ceil());
        if hi <= lo {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v.log10() - self.lo) / (self.hi - self.lo)
    }
}

fn ticks(axis: &Axis) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = axis.lo.ceil();
    while e <= axis.hi + 1e-9 {
        out.push(10f64.powf(e));
        e += 1.0;
    }
    out
}

fn label(v: f64) -> String {
    if (1e-3..1e5).contains(&v) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Mean curve per particle count with a shaded 95% band.
pub fn render_svg(curve: &ErrorCurve, title: &str) -> String {
    let valid: Vec<&SummaryRow> = curve.summary.iter().filter(|s| s.mean > 0.0).collect();
    let xa = Axis::new(valid.iter().map(|s| s.tau as f64));
    let ya = Axis::new(valid.iter().flat_map(|s| [s.mean, s.ci_low, s.ci_high]));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |t: f64| LEFT + xa.frac(t) * pw;
    // CI bounds below the axis are clamped to its bottom
    let py = |e: f64| {
        let f = if e > 0.0 {
            ya.frac(e).clamp(0.0, 1.0)
        } else {
            0.0
        };
        TOP + (1.0 - f) * ph
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    for t in ticks(&xa) {
        let x = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            TOP + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            label(t)
        );
    }
    for e in ticks(&ya) {
        let y = py(e);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            label(e)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">number of snapshot pairs</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">Frobenius error</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let groups: Vec<Vec<&SummaryRow>> = valid
        .chunk_by(|a, b| a.n_particles == b.n_particles)
        .map(|g| g.to_vec())
        .collect();
    for (k, group) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = group
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.tau as f64), py(r.ci_high)))
            .collect();
        let lower: Vec<String> = group
            .iter()
            .rev()
            .map(|r| format!("{:.2},{:.2}", px(r.tau as f64), py(r.ci_low)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = group
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.tau as f64), py(r.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for r in group {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(r.tau as f64),
                py(r.mean)
            );
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">N = {}</text>"#,
            lx + 26.0,
            ly + 4.0,
            group[0].n_particles
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{summarize, ErrorRow};
    use crate::sim::Particles;

    #[test]
    fn one_series_per_particle_count() {
        let mut rows = Vec::new();
        for (np, scale) in [(Particles::Finite(10), 1.0), (Particles::Infinite, 0.1)] {
            for (k, tau) in [8usize, 16, 32].into_iter().enumerate() {
                for repeat in 0..2 {
                    rows.push(ErrorRow {
                        n_particles: np,
                        tau,
                        repeat,
                        error: scale / (k + repeat + 1) as f64,
                    });
                }
            }
        }
        let summary = summarize(&rows);
        let curve = ErrorCurve {
            rows,
            summary,
            slopes: vec![],
        };
        let svg = render_svg(&curve, "a < b");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(svg.contains("N = inf"));
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn empty_curve_still_renders() {
        let curve = ErrorCurve {
            rows: vec![],
            summary: vec![],
            slopes: vec![],
        };
        let svg = render_svg(&curve, "");
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
