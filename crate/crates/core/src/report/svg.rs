//! Minimal deterministic SVG renderings of the report tables.

use std::fmt::Write;

use super::{BeeswarmRow, DependenceFitRow, DependenceTableRow, InteractionRow};

const W: f64 = 640.0;
const MARGIN_L: f64 = 130.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 40.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, h: f64, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{h}\" viewBox=\"0 0 {W} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    );
}

/// Blue (0) to red (1).
fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let r = (40.0 + 200.0 * t).round() as u8;
    let b = (240.0 - 200.0 * t).round() as u8;
    format!("#{r:02x}50{b:02x}")
}

/// Diverging: blue for negative, red for positive, white at zero.
fn diverging(v: f64, max_abs: f64) -> String {
    let t = if max_abs > 0.0 { (v / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t < 0.0 {
        format!("#{fade:02x}{fade:02x}ff")
    } else {
        format!("#ff{fade:02x}{fade:02x}")
    }
}

fn range(values: impl Iterator<Item = f64>, pinned: Option<(f64, f64)>) -> (f64, f64) {
    if let Some(p) = pinned {
        return p;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn x_axis(out: &mut String, y: f64, lo: f64, hi: f64, label: &str) {
    let _ = write!(
        out,
        "<line x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
         <text x=\"{MARGIN_L}\" y=\"{:.2}\">{lo:.4}</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{hi:.4}</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
        W - MARGIN_R,
        y + 14.0,
        W - MARGIN_R,
        y + 14.0,
        (MARGIN_L + W - MARGIN_R) / 2.0,
        y + 28.0,
        esc(label)
    );
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// One lane per feature, one circle per row; colour encodes the feature value.
pub fn beeswarm(rows: &[BeeswarmRow], title: &str, pinned: Option<(f64, f64)>) -> String {
    let mut features: Vec<&str> = Vec::new();
    for r in rows {
        if !features.contains(&r.feature.as_str()) {
            features.push(&r.feature);
        }
    }
    let lane = 48.0;
    let h = MARGIN_T + MARGIN_B + lane * features.len().max(1) as f64;
    let (lo, hi) = range(rows.iter().map(|r| r.shap_value), pinned);
    let mut out = String::new();
    header(&mut out, h, title);
    let zero = scale(0.0, lo, hi, MARGIN_L, W - MARGIN_R);
    if (MARGIN_L..=W - MARGIN_R).contains(&zero) {
        let _ = writeln!(
            out,
            "<line x1=\"{zero:.2}\" y1=\"{MARGIN_T}\" x2=\"{zero:.2}\" y2=\"{:.2}\" stroke=\"#999\"/>",
            h - MARGIN_B
        );
    }
    for (f, name) in features.iter().enumerate() {
        let cy = MARGIN_T + lane * (f as f64 + 0.5);
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", MARGIN_L - 6.0, cy + 4.0, esc(name));
        for (i, r) in rows.iter().filter(|r| r.feature == *name).enumerate() {
            // golden-ratio jitter keeps lanes readable and output reproducible
            let jitter = ((i as f64 * 0.618_033_988_75).fract() - 0.5) * lane * 0.8;
            let x = scale(r.shap_value, lo, hi, MARGIN_L, W - MARGIN_R);
            let _ =
                writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>", cy + jitter, ramp(r.feature_value));
        }
    }
    x_axis(&mut out, h - MARGIN_B, lo, hi, "shap value");
    out.push_str("</svg>\n");
    out
}

/// Heatmap of mean signed interactions for one scope.
pub fn interaction_heatmap(rows: &[InteractionRow], scope: &str) -> String {
    let rows: Vec<&InteractionRow> = rows.iter().filter(|r| r.scope == scope).collect();
    let mut names: Vec<&str> = Vec::new();
    for r in &rows {
        for n in [r.feature_i.as_str(), r.feature_j.as_str()] {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    let m = names.len();
    let cell = if m == 0 { 0.0 } else { ((W - MARGIN_L - MARGIN_R) / m as f64).min(80.0) };
    let h = MARGIN_T + MARGIN_B + cell * m as f64 + 20.0;
    let max_abs = rows.iter().map(|r| r.mean_signed_interaction.abs()).fold(0.0, f64::max);
    let mut out = String::new();
    header(&mut out, h, &format!("mean interaction: {scope}"));
    let at = |n: &str| names.iter().position(|x| *x == n).unwrap_or(0) as f64;
    for (k, n) in names.iter().enumerate() {
        let y = MARGIN_T + cell * (k as f64 + 0.5);
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", MARGIN_L - 6.0, y + 4.0, esc(n));
    }
    for r in &rows {
        let (i, j) = (at(&r.feature_i), at(&r.feature_j));
        let color = diverging(r.mean_signed_interaction, max_abs);
        for (a, b) in if i == j { vec![(i, j)] } else { vec![(i, j), (j, i)] } {
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"{color}\" stroke=\"#ccc\"><title>{:.6}</title></rect>",
                MARGIN_L + cell * b,
                MARGIN_T + cell * a,
                r.mean_signed_interaction
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of shap value against normalized feature value with the fitted trend.
pub fn dependence(points: &[DependenceTableRow], fit: Option<&DependenceFitRow>, title: &str) -> String {
    let h = 360.0;
    let (ylo, yhi) = range(points.iter().map(|p| p.shap_value), None);
    let mut out = String::new();
    header(&mut out, h, title);
    for p in points {
        let x = scale(p.normalized_value, 0.0, 1.0, MARGIN_L, W - MARGIN_R);
        let y = scale(p.shap_value, ylo, yhi, h - MARGIN_B, MARGIN_T);
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"#3060c0\"/>");
    }
    if let Some(fit) = fit {
        let coeffs: Vec<f64> = fit.coefficients.split_whitespace().filter_map(|c| c.parse().ok()).collect();
        let mut path = String::new();
        for k in 0..=50 {
            let z = k as f64 / 50.0;
            let v = coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c);
            let y = scale(v, ylo, yhi, h - MARGIN_B, MARGIN_T).clamp(MARGIN_T, h - MARGIN_B);
            let _ = write!(path, "{}{:.2},{:.2}", if k == 0 { "" } else { " " }, scale(z, 0.0, 1.0, MARGIN_L, W - MARGIN_R), y);
        }
        let _ = writeln!(out, "<polyline points=\"{path}\" fill=\"none\" stroke=\"#c03030\" stroke-width=\"1.5\"/>");
    }
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{yhi:.4}</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{ylo:.4}</text>",
        h - MARGIN_B,
        MARGIN_L - 4.0,
        MARGIN_T + 4.0,
        MARGIN_L - 4.0,
        h - MARGIN_B
    );
    x_axis(&mut out, h - MARGIN_B, 0.0, 1.0, "normalized value");
    out.push_str("</svg>\n");
    out
}

/// Paired bars: actual gap of each best-match and worst-match row.
pub fn validation_bars(labels: &[String], best: &[f64], worst: &[f64]) -> String {
    let n = labels.len();
    let row_h = 28.0;
    let h = MARGIN_T + MARGIN_B + row_h * n.max(1) as f64;
    let (lo, hi) = range(best.iter().chain(worst).copied().chain([0.0]), None);
    let mut out = String::new();
    header(&mut out, h, "actual gap of nearest matches (blue: best, red: worst)");
    let zero = scale(0.0, lo, hi, MARGIN_L, W - MARGIN_R);
    for (k, label) in labels.iter().enumerate() {
        let y = MARGIN_T + row_h * k as f64;
        let _ =
            writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", MARGIN_L - 6.0, y + 16.0, esc(label));
        for (v, dy, color) in [(best.get(k), 3.0, "#3060c0"), (worst.get(k), 14.0, "#c03030")] {
            if let Some(&v) = v {
                let x = scale(v, lo, hi, MARGIN_L, W - MARGIN_R);
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"10\" fill=\"{color}\"/>",
                    x.min(zero),
                    y + dy,
                    (x - zero).abs()
                );
            }
        }
    }
    x_axis(&mut out, h - MARGIN_B, lo, hi, "actual gap");
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_draws_axes_only() {
        let s = beeswarm(&[], "empty", None);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<circle").count(), 0);
        assert_eq!(dependence(&[], None, "d").matches("<circle").count(), 0);
        assert!(interaction_heatmap(&[], "x").contains("</svg>"));
    }

    #[test]
    fn one_circle_per_row_and_deterministic() {
        let rows: Vec<BeeswarmRow> = (0..7)
            .map(|i| BeeswarmRow {
                record_id: format!("r{i}"),
                feature: ["a", "b"][i % 2].into(),
                feature_value: 0.1 * i as f64,
                shap_value: i as f64 - 3.0,
            })
            .collect();
        let a = beeswarm(&rows, "t", None);
        assert_eq!(a.matches("<circle").count(), 7);
        assert_eq!(a, beeswarm(&rows, "t", None));
    }
}
