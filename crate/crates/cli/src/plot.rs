//! Standalone SVG figures.

use std::fmt::Write as _;

const W: f64 = 900.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 40.0;

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn polyline(svg: &mut String, v: &[f64], top: f64, color: &str) {
    let (lo, hi) = bounds(v);
    let n = v.len().max(2) - 1;
    let mut pts = String::with_capacity(v.len() * 14);
    for (i, y) in v.iter().enumerate() {
        let px = MARGIN + (W - 2.0 * MARGIN) * i as f64 / n as f64;
        let py = top + PANEL_H - (PANEL_H * (y - lo) / (hi - lo));
        let _ = write!(pts, "{px:.1},{py:.1} ");
    }
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
        pts.trim_end()
    );
}

fn shade_mask(svg: &mut String, mask: &[u8], top: f64, height: f64) {
    let n = mask.len().max(1) as f64;
    let mut i = 0;
    while i < mask.len() {
        if mask[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < mask.len() && mask[i] != 0 {
            i += 1;
        }
        let x0 = MARGIN + (W - 2.0 * MARGIN) * start as f64 / n;
        let x1 = MARGIN + (W - 2.0 * MARGIN) * i as f64 / n;
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{top:.1}" width="{:.1}" height="{height:.1}" fill="#f4a582" fill-opacity="0.35"/>"##,
            (x1 - x0).max(0.5)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Signal over its score map, with ground-truth spans shaded and the
/// localisation threshold drawn when known.
pub fn score_map_svg(title: &str, signal: &[f64], scores: &[f64], mask: Option<&[u8]>, threshold: Option<f64>) -> String {
    let h = 2.0 * PANEL_H + 3.0 * MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="20">{}</text>"#, escape(title));
    let top1 = MARGIN;
    let top2 = 2.0 * MARGIN + PANEL_H;
    if let Some(m) = mask {
        shade_mask(&mut svg, m, top1, PANEL_H);
        shade_mask(&mut svg, m, top2, PANEL_H);
    }
    polyline(&mut svg, signal, top1, "#2166ac");
    polyline(&mut svg, scores, top2, "#b2182b");
    if let Some(t) = threshold {
        let (lo, hi) = bounds(scores);
        if t >= lo && t <= hi {
            let y = top2 + PANEL_H - PANEL_H * (t - lo) / (hi - lo);
            let _ = writeln!(
                svg,
                r##"<line x1="{MARGIN}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#444" stroke-dasharray="4 3"/>"##,
                W - MARGIN
            );
        }
    }
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.1}">signal (mV)</text>"#, top1 - 4.0);
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.1}">anomaly score</text>"#, top2 - 4.0);
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart: one group per entry, one bar per (label, value) in
/// [0, 1].
pub fn grouped_bars_svg(title: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
    let n_bars: usize = groups.iter().map(|g| g.1.len()).sum::<usize>() + groups.len();
    let plot_h = 240.0;
    let h = plot_h + 3.0 * MARGIN + 20.0;
    let bar_w = (W - 2.0 * MARGIN) / n_bars.max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="20">{}</text>"#, escape(title));
    let base = MARGIN + plot_h;
    for tick in [0.0, 0.5, 1.0] {
        let y = base - plot_h * tick;
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="4" y="{:.1}">{tick:.1}</text>"##,
            W - MARGIN,
            y + 4.0
        );
    }
    let mut slot = 0usize;
    for (gi, (group, bars)) in groups.iter().enumerate() {
        let start = slot;
        for (bi, (label, v)) in bars.iter().enumerate() {
            let x = MARGIN + bar_w * slot as f64;
            let bh = plot_h * v.clamp(0.0, 1.0);
            let color = palette[(gi * 3 + bi) % palette.len()];
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{color}"><title>{}: {v:.3}</title></rect>"#,
                base - bh,
                bar_w * 0.9,
                escape(label)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="9" transform="rotate(45 {:.1} {:.1})">{}</text>"#,
                x + 2.0,
                base + 12.0,
                x + 2.0,
                base + 12.0,
                escape(label)
            );
            slot += 1;
        }
        let mid = MARGIN + bar_w * (start as f64 + bars.len() as f64 / 2.0);
        let _ = writeln!(svg, r#"<text x="{mid:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, h - 8.0, escape(group));
        slot += 1;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_plot_is_well_formed() {
        let s = score_map_svg("a<b", &[0.0, 1.0, 0.0], &[1.0, 2.0, 3.0], Some(&[0, 1, 1]), Some(2.0));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
        assert!(s.contains("stroke-dasharray"));
    }

    #[test]
    fn bars_one_rect_per_value() {
        let g = vec![
            ("sex".to_string(), vec![("female".to_string(), 0.9), ("male".to_string(), 0.8)]),
            ("age".to_string(), vec![("40-49".to_string(), 0.7)]),
        ];
        let s = grouped_bars_svg("t", &g);
        assert_eq!(s.matches("<title>").count(), 3);
    }
}
