//! Deterministic SVG figures: forest plots, CEAC/EIB curves and simulation panels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decision::CeaResult;
use crate::simharness::SimMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub treatment: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Round outward to a tidy axis range containing `lo..hi`.
fn nice_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if (hi - lo).abs() < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn ticks(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

fn fmt_tick(v: f64, step: f64) -> String {
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    let dec = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    format!("{v:.dec$}")
}

/// Forest plot of effects against the reference. With a second row set the
/// two models are offset: rectangles with solid whiskers for the first,
/// circles with dashed whiskers for the second.
pub fn forest_svg(primary: &[ForestRow], secondary: Option<&[ForestRow]>, labels: (&str, &str), title: &str) -> String {
    let mut names: Vec<&str> = primary.iter().map(|r| r.treatment.as_str()).collect();
    if let Some(s) = secondary {
        for r in s {
            if !names.contains(&r.treatment.as_str()) {
                names.push(&r.treatment);
            }
        }
    }
    let all = primary.iter().chain(secondary.unwrap_or(&[]));
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for r in all {
        lo = lo.min(r.lo).min(r.mean);
        hi = hi.max(r.hi).max(r.mean);
    }
    let (lo, hi, step) = nice_range(lo, hi);
    let (left, right, top, row_h) = (150.0, 40.0, 50.0, 36.0);
    let plot_w = 420.0;
    let height = top + row_h * names.len().max(1) as f64 + 70.0;
    let width = left + plot_w + right;
    let x = |v: f64| left + (v - lo) / (hi - lo) * plot_w;
    let bottom = top + row_h * names.len().max(1) as f64;

    let mut s = header(width, height);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", width / 2.0, esc(title));
    for t in ticks(lo, hi, step) {
        let _ = writeln!(
            s,
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"#e0e0e0\"/>\n<text x=\"{0:.1}\" y=\"{3:.1}\" text-anchor=\"middle\">{4}</text>",
            x(t),
            top,
            bottom,
            bottom + 16.0,
            fmt_tick(t, step)
        );
    }
    let _ = writeln!(
        s,
        "<line class=\"zero\" x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>",
        x(0.0),
        top,
        bottom
    );
    let offset = if secondary.is_some() { 7.0 } else { 0.0 };
    for (i, name) in names.iter().enumerate() {
        let yc = top + row_h * (i as f64 + 0.5);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", left - 10.0, yc + 4.0, esc(name));
        if let Some(r) = primary.iter().find(|r| r.treatment == *name) {
            let y = yc - offset;
            let _ = writeln!(
                s,
                "<g class=\"primary\"><line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{c}\" stroke-width=\"2\"/><rect x=\"{:.1}\" y=\"{:.1}\" width=\"8\" height=\"8\" fill=\"{c}\"/></g>",
                x(r.lo),
                x(r.hi),
                x(r.mean) - 4.0,
                y - 4.0,
                c = PALETTE[0]
            );
        }
        if let Some(r) = secondary.and_then(|sec| sec.iter().find(|r| r.treatment == *name)) {
            let y = yc + offset;
            let _ = writeln!(
                s,
                "<g class=\"secondary\"><line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{c}\" stroke-width=\"2\" stroke-dasharray=\"5,3\"/><circle cx=\"{:.1}\" cy=\"{y:.1}\" r=\"4.5\" fill=\"{c}\"/></g>",
                x(r.lo),
                x(r.hi),
                x(r.mean),
                c = PALETTE[1]
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Difference in mean survival (years)</text>",
        left + plot_w / 2.0,
        bottom + 36.0
    );
    let ly = bottom + 56.0;
    let _ = writeln!(
        s,
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"8\" height=\"8\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
        left,
        ly - 8.0,
        PALETTE[0],
        left + 14.0,
        ly,
        esc(labels.0)
    );
    if secondary.is_some() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4.5\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            left + 220.0,
            ly - 4.0,
            PALETTE[1],
            left + 230.0,
            ly,
            esc(labels.1)
        );
    }
    s.push_str("</svg>\n");
    s
}

struct Panel<'a> {
    title: &'a str,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

fn line_panel(s: &mut String, p: &Panel, xs: &[f64], series: &[(String, Vec<f64>)], fixed_y: Option<(f64, f64)>) {
    let (ylo, yhi, ystep) = match fixed_y {
        Some((a, b)) => (a, b, (b - a) / 5.0),
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (_, v) in series {
                for y in v.iter().filter(|y| y.is_finite()) {
                    lo = lo.min(*y);
                    hi = hi.max(*y);
                }
            }
            if !lo.is_finite() {
                (lo, hi) = (0.0, 1.0);
            }
            nice_range(lo, hi)
        }
    };
    let (xlo, xhi, xstep) = nice_range(xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let px = |v: f64| p.x0 + (v - xlo) / (xhi - xlo) * p.w;
    let py = |v: f64| p.y0 + p.h - (v - ylo) / (yhi - ylo) * p.h;
    let _ = writeln!(
        s,
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        p.x0,
        p.y0,
        p.w,
        p.h,
        p.x0 + p.w / 2.0,
        p.y0 - 8.0,
        esc(p.title)
    );
    for t in ticks(ylo, yhi, ystep) {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", p.x0 - 5.0, py(t) + 4.0, fmt_tick(t, ystep));
    }
    for t in ticks(xlo, xhi, xstep) {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", px(t), p.y0 + p.h + 15.0, fmt_tick(t, xstep));
    }
    if ylo < 0.0 && yhi > 0.0 {
        let _ = writeln!(s, "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{2:.1}\" y2=\"{1:.1}\" stroke=\"#999\"/>", p.x0, py(0.0), p.x0 + p.w);
    }
    for (i, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y)))
            .collect();
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.8\" points=\"{}\"/>", pts.join(" "));
        let ly = p.y0 + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{c}\" stroke-width=\"2\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            p.x0 + p.w - 90.0,
            p.x0 + p.w - 72.0,
            p.x0 + p.w - 68.0,
            ly + 4.0,
            esc(name)
        );
    }
}

/// CEAC (left) and expected incremental benefit (right) against λ.
pub fn ceac_svg(cea: &CeaResult) -> String {
    let mut s = header(960.0, 400.0);
    let ceac: Vec<(String, Vec<f64>)> = cea
        .treatments
        .iter()
        .enumerate()
        .map(|(k, t)| (t.clone(), cea.ceac.iter().map(|r| r[k]).collect()))
        .collect();
    let eib: Vec<(String, Vec<f64>)> = cea
        .treatments
        .iter()
        .enumerate()
        .map(|(k, t)| (t.clone(), cea.eib.iter().map(|r| r[k]).collect()))
        .collect();
    line_panel(
        &mut s,
        &Panel { title: "Cost-effectiveness acceptability", x0: 70.0, y0: 40.0, w: 360.0, h: 300.0 },
        &cea.lambdas,
        &ceac,
        Some((0.0, 1.0)),
    );
    line_panel(
        &mut s,
        &Panel { title: "Expected incremental benefit", x0: 560.0, y0: 40.0, w: 360.0, h: 300.0 },
        &cea.lambdas,
        &eib,
        None,
    );
    let _ = writeln!(s, "<text x=\"480\" y=\"390\" text-anchor=\"middle\">Willingness to pay per life-year</text>");
    s.push_str("</svg>\n");
    s
}

fn bar_panel(s: &mut String, p: &Panel, groups: &[(String, Vec<SimMetrics>)], value: fn(&SimMetrics) -> f64, arms: &[String]) {
    let vals: Vec<f64> = groups.iter().flat_map(|(_, ms)| ms.iter().map(value)).filter(|v| v.is_finite()).collect();
    let lo = vals.iter().copied().fold(0.0, f64::min);
    let hi = vals.iter().copied().fold(0.0, f64::max);
    let (ylo, yhi, ystep) = nice_range(lo, hi);
    let py = |v: f64| p.y0 + p.h - (v - ylo) / (yhi - ylo) * p.h;
    let _ = writeln!(
        s,
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        p.x0,
        p.y0,
        p.w,
        p.h,
        p.x0 + p.w / 2.0,
        p.y0 - 8.0,
        esc(p.title)
    );
    for t in ticks(ylo, yhi, ystep) {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", p.x0 - 5.0, py(t) + 4.0, fmt_tick(t, ystep));
    }
    let _ = writeln!(s, "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{2:.1}\" y2=\"{1:.1}\" stroke=\"#999\"/>", p.x0, py(0.0), p.x0 + p.w);
    let gw = p.w / groups.len().max(1) as f64;
    let bw = gw * 0.8 / arms.len().max(1) as f64;
    for (g, (label, ms)) in groups.iter().enumerate() {
        let gx = p.x0 + gw * g as f64 + gw * 0.1;
        for m in ms {
            let Some(a) = arms.iter().position(|x| *x == m.arm) else { continue };
            let v = value(m);
            if !v.is_finite() {
                continue;
            }
            let (y1, y2) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                gx + bw * a as f64,
                y1,
                bw,
                (y2 - y1).max(0.5),
                PALETTE[a % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            gx + gw * 0.4,
            p.y0 + p.h + 14.0,
            esc(label)
        );
    }
}

/// Four panels (bias, RMSE, CrI width, posterior variance); one group of
/// bars per scenario and one bar per arm.
pub fn simulation_svg(groups: &[(String, Vec<SimMetrics>)]) -> String {
    let mut arms: Vec<String> = Vec::new();
    for (_, ms) in groups {
        for m in ms {
            if !arms.contains(&m.arm) {
                arms.push(m.arm.clone());
            }
        }
    }
    let panels: [(&str, fn(&SimMetrics) -> f64); 4] = [
        ("Mean bias", |m| m.mean_bias),
        ("RMSE", |m| m.rmse),
        ("95% CrI width", |m| m.cri_width),
        ("Posterior variance", |m| m.posterior_variance),
    ];
    let mut s = header(960.0, 700.0);
    for (i, (title, f)) in panels.iter().enumerate() {
        let p = Panel {
            title,
            x0: 70.0 + 480.0 * (i % 2) as f64,
            y0: 50.0 + 310.0 * (i / 2) as f64,
            w: 380.0,
            h: 230.0,
        };
        bar_panel(&mut s, &p, groups, *f, &arms);
    }
    for (a, name) in arms.iter().enumerate() {
        let x = 70.0 + 140.0 * a as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"672\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"681\">{}</text>",
            PALETTE[a % PALETTE.len()],
            x + 14.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: &str, m: f64, lo: f64, hi: f64) -> ForestRow {
        ForestRow { treatment: t.into(), mean: m, lo, hi }
    }

    #[test]
    fn single_row_forest() {
        let s = forest_svg(&[row("B", 0.4, -0.2, 1.0)], None, ("model", ""), "B vs A");
        assert_eq!(s.matches("class=\"primary\"").count(), 1);
        assert!(!s.contains("class=\"secondary\""));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn whisker_spans_zero_line() {
        let s = forest_svg(&[row("B", 0.4, -0.2, 1.0)], None, ("m", ""), "t");
        let zero_x: f64 = s.split("class=\"zero\" x1=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap();
        let g = s.split("class=\"primary\"><line x1=\"").nth(1).unwrap();
        let x1: f64 = g.split('"').next().unwrap().parse().unwrap();
        let x2: f64 = g.split("x2=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap();
        assert!(x1 < zero_x && zero_x < x2);
    }

    #[test]
    fn dual_overlay_and_determinism() {
        let a = [row("B", 0.4, 0.1, 0.8), row("C", 1.2, 0.5, 2.0)];
        let b = [row("B", 0.5, 0.2, 0.9), row("C", 1.0, 0.3, 1.9)];
        let s1 = forest_svg(&a, Some(&b), ("tri-loglogistic", "mspline"), "t");
        let s2 = forest_svg(&a, Some(&b), ("tri-loglogistic", "mspline"), "t");
        assert_eq!(s1, s2);
        assert_eq!(s1.matches("<circle").count(), 3);
        assert_eq!(s1.matches("stroke-dasharray").count(), 2);
    }

    #[test]
    fn labels_are_escaped() {
        let s = forest_svg(&[row("A&B", 0.0, -1.0, 1.0)], None, ("<m>", ""), "t");
        assert!(s.contains("A&amp;B") && s.contains("&lt;m&gt;"));
    }
}
