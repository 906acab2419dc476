use std::fmt::Write as _;

use super::matrix::ResultRow;
use super::report::{drift_tables, DriftTable};
use crate::drift::DriftKind;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn mean(values: &[f64]) -> Option<f64> {
    let v: Vec<f64> = values.iter().copied().filter(|a| a.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn render(t: &DriftTable) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_of = |acc: f64| TOP + plot_h * (1.0 - acc.clamp(0.0, 100.0) / 100.0);
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n");
    s.push_str("<!DOCTYPE svg PUBLIC \"-//W3C//DTD SVG 1.1//EN\" \"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd\">\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{} drift: test accuracy by training size</text>",
        LEFT + plot_w / 2.0,
        esc(t.drift.as_str())
    );

    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>",
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{tick}</text>",
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">accuracy (%)</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    let groups = t.fracs.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / t.blocks.len().max(1) as f64;
    for (g, &frac) in t.fracs.iter().enumerate() {
        let x0 = LEFT + g as f64 * group_w + group_w * 0.1;
        for (k, b) in t.blocks.iter().enumerate() {
            let Some(r) = t.get(frac, b) else { continue };
            if !r.accuracy_pct.is_finite() {
                continue;
            }
            let y = y_of(r.accuracy_pct);
            let _ = writeln!(
                s,
                "<rect class=\"bar\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{} @ {frac}: {:.2}%</title></rect>",
                x0 + k as f64 * bar_w,
                bar_w * 0.9,
                TOP + plot_h - y,
                PALETTE[k % PALETTE.len()],
                esc(b),
                r.accuracy_pct
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{frac}</text>",
            LEFT + (g as f64 + 0.5) * group_w,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">train_frac</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#333333\"/>"
    );

    // reference levels are averaged over training sizes
    let avg = mean(
        &t.fracs
            .iter()
            .filter_map(|&f| t.block_avg(f))
            .collect::<Vec<_>>(),
    );
    let full = mean(
        &t.fracs
            .iter()
            .filter_map(|&f| t.get(f, "full").map(|r| r.accuracy_pct))
            .collect::<Vec<_>>(),
    );
    let refs = [
        ("block-avg", "Block Avg", avg, ""),
        ("full", "Full", full, " stroke-dasharray=\"6 4\""),
    ];
    for (class, _, level, dash) in &refs {
        let y = level.map_or(TOP + plot_h, y_of);
        let _ = writeln!(
            s,
            "<line class=\"ref-line {class}\" x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#222222\" stroke-width=\"1.5\"{dash}/>",
            LEFT + plot_w
        );
    }

    let lx = WIDTH - RIGHT + 12.0;
    for (k, b) in t.blocks.iter().enumerate() {
        let y = TOP + 10.0 + k as f64 * 18.0;
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{}\" y=\"{:.2}\">{}</text>",
            y - 10.0,
            PALETTE[k % PALETTE.len()],
            lx + 18.0,
            y,
            esc(b)
        );
    }
    for (k, (_, label, level, dash)) in refs.iter().enumerate() {
        let y = TOP + 10.0 + (t.blocks.len() + k) as f64 * 18.0;
        let value = level.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#222222\"{dash}/><text x=\"{}\" y=\"{y:.2}\">{label} {value}</text>",
            y - 4.0,
            lx + 12.0,
            y - 4.0,
            lx + 18.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Chart for one drift kind, or `None` if the rows hold none of it.
pub fn plot_drift(rows: &[ResultRow], drift: DriftKind) -> Option<String> {
    drift_tables(rows)
        .iter()
        .find(|t| t.drift == drift)
        .map(render)
}

/// One chart per drift kind present in `rows`.
pub fn plot_svgs(rows: &[ResultRow]) -> Result<Vec<(DriftKind, String)>> {
    let tables = drift_tables(rows);
    if tables.is_empty() {
        return Err(Error::Usage("results contain no rows to plot".into()));
    }
    Ok(tables.iter().map(|t| (t.drift, render(t))).collect())
}
