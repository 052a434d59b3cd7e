//! Minimal SVG line charts for training curves.

use std::fmt::Write;

use swintext::train::EpochRecord;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;

/// Loss per epoch, one polyline per split.
pub fn loss_curve_svg(records: &[EpochRecord], title: &str) -> String {
    let splits = [("train", "#1f77b4"), ("val", "#d62728")];
    let max_epoch = records.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let finite = records.iter().map(|r| r.loss).filter(|l| l.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        (0.0, 1.0)
    };
    let sx = |e: usize| PAD + (W - 2.0 * PAD) * e as f64 / max_epoch;
    let sy = |l: f64| H - PAD - (H - 2.0 * PAD) * (l - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{y} {x},{y}" fill="none" stroke="black"/>"#,
        y = H - PAD,
        x = W - PAD
    );
    for (v, y) in [(hi, PAD), (lo, H - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.4}</text>"#,
            PAD - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">epoch</text>"#,
        W / 2.0,
        H - 12.0
    );
    for (k, (split, color)) in splits.iter().enumerate() {
        let pts: Vec<String> = records
            .iter()
            .filter(|r| r.split == *split && r.loss.is_finite())
            .map(|r| format!("{:.2},{:.2}", sx(r.epoch), sy(r.loss)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{split} loss</text>"#,
            W - PAD - 70.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
