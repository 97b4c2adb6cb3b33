//! Standalone SVG output: metric bar charts and skeleton frame strips.

use std::fmt::Write;

use crate::motion_repr::{Motion, Skeleton};
use crate::{Error, Result};

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One bar: label, value and optional error half-width.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub ci: Option<f64>,
}

pub fn bar_chart(title: &str, bars: &[Bar]) -> Result<String> {
    if bars.is_empty() {
        return Err(Error::invalid("a bar chart needs at least one bar"));
    }
    if bars.iter().any(|b| !b.value.is_finite()) {
        return Err(Error::invalid("bar values must be finite"));
    }
    let (w, h, left, top, bottom) = (120.0 * bars.len() as f64 + 80.0, 320.0, 60.0, 40.0, 60.0);
    let hi = bars.iter().map(|b| b.value + b.ci.unwrap_or(0.0)).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.value - b.ci.unwrap_or(0.0)).fold(0.0f64, f64::min);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_h = h - top - bottom;
    let y = |v: f64| top + (hi - v) / span * plot_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, y(0.0), w - 20.0, y(0.0));
    for (i, b) in bars.iter().enumerate() {
        let x = left + 20.0 + 120.0 * i as f64;
        let (y0, y1) = (y(0.0), y(b.value));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="80" height="{:.2}" fill="{}"/>"#,
            y0.min(y1),
            (y0 - y1).abs(),
            PALETTE[i % PALETTE.len()]
        );
        if let Some(ci) = b.ci {
            let cx = x + 40.0;
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#, y(b.value - ci), y(b.value + ci));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{:.4}</text>"#,
            x + 40.0,
            y1.min(y0) - 4.0,
            b.value
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            x + 40.0,
            h - bottom + 20.0,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Side view (forward, up) of `panels` evenly spaced frames, each centered on
/// its root joint.
pub fn frame_strip(motion: &Motion, skeleton: &Skeleton, panels: usize) -> Result<String> {
    if motion.joints() != skeleton.joints() {
        return Err(Error::invalid(format!(
            "motion has {} joints, skeleton {}",
            motion.joints(),
            skeleton.joints()
        )));
    }
    if panels == 0 || motion.frames() == 0 {
        return Err(Error::invalid("a frame strip needs frames and at least one panel"));
    }
    let root = skeleton.root().unwrap_or(0);
    let panels = panels.min(motion.frames());
    let frames: Vec<usize> = (0..panels)
        .map(|i| if panels == 1 { 0 } else { i * (motion.frames() - 1) / (panels - 1) })
        .collect();
    let (mut ymin, mut ymax, mut reach) = (f32::INFINITY, f32::NEG_INFINITY, 0.1f32);
    for &f in &frames {
        let r = motion.joint(f, root);
        for j in 0..motion.joints() {
            let p = motion.joint(f, j);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
            reach = reach.max((p[0] - r[0]).abs());
        }
    }
    let scale = 200.0 / (ymax - ymin).max(2.0 * reach).max(1e-3);
    let cell = 2.0 * reach * scale + 40.0;
    let (w, h) = (cell * panels as f32, 260.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, &f) in frames.iter().enumerate() {
        let r = motion.joint(f, root);
        let cx = cell * (i as f32 + 0.5);
        let pt = |p: [f32; 3]| (cx + (p[0] - r[0]) * scale, 230.0 - (p[1] - ymin) * scale);
        for (j, &parent) in skeleton.parents.iter().enumerate() {
            if parent == j || parent >= motion.joints() {
                continue;
            }
            let (a, b) = (pt(motion.joint(f, j)), pt(motion.joint(f, parent)));
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="3" stroke-linecap="round"/>"#,
                a.0, a.1, b.0, b.1, PALETTE[0]
            );
        }
        for j in 0..motion.joints() {
            let p = pt(motion.joint(f, j));
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, p.0, p.1, PALETTE[3]);
        }
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="252" font-family="sans-serif" font-size="11" text-anchor="middle">frame {f}</text>"#);
    }
    s.push_str("</svg>\n");
    Ok(s)
}
