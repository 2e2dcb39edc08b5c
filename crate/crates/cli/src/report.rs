use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use leanet::harness::{fold_csv, metadata_json, summarize, summary_csv, ExperimentConfig, MetricsRow, Summary, SweepGroup, Variant};
use leanet::{Error, Result};

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// One line per variant: pooled F1 of a plain variant, or of the best point
/// of a point-swept one.
fn headline(rows: &[MetricsRow]) -> Vec<Summary> {
    let all = summarize(rows);
    all.iter()
        .filter(|s| s.best || !s.variant.is_point_swept())
        .cloned()
        .collect()
}

/// Plain-text table of `mean ± std`, with the best attention point in
/// parentheses for point-swept variants.
pub fn text_table(rows: &[MetricsRow]) -> String {
    let lines = headline(rows);
    let width = lines.iter().map(|s| s.variant.to_string().len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  F1\n{}\n", "variant", "-".repeat(width + 24));
    for s in lines {
        let best = match (s.best, s.point) {
            (true, Some(p)) => format!(" ({p})"),
            _ => String::new(),
        };
        let _ = writeln!(out, "{:<width$}  {:.3} ± {:.3}{best}", s.variant.to_string(), s.mean, s.std);
    }
    out
}

/// Writes `folds.csv`, `summary.csv`, `report.txt` and `metadata.json`
/// under `out`. Returns the written paths.
pub fn emit_report(rows: &[MetricsRow], cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Harness("no results to report".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    write(out.join("folds.csv"), &fold_csv(rows), &mut written)?;
    write(out.join("summary.csv"), &summary_csv(rows), &mut written)?;
    write(out.join("report.txt"), &text_table(rows), &mut written)?;
    write(
        out.join("metadata.json"),
        &metadata_json(cfg, serde_json::Value::Null)?,
        &mut written,
    )?;
    Ok(written)
}

fn series(groups: &[SweepGroup]) -> Vec<(Variant, Vec<f64>)> {
    let mut variants: Vec<Variant> = groups.iter().flat_map(|g| g.rows.iter().map(|r| r.variant)).collect();
    variants.sort();
    variants.dedup();
    variants
        .into_iter()
        .map(|v| {
            let ys = groups
                .iter()
                .map(|g| {
                    headline(&g.rows)
                        .iter()
                        .find(|s| s.variant == v)
                        .map_or(f64::NAN, |s| s.mean)
                })
                .collect();
            (v, ys)
        })
        .collect()
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Line chart of mean F1 against positive ratio, one series per variant and
/// one x tick per ratio, in sweep order.
pub fn sweep_svg(groups: &[SweepGroup]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let n = groups.len().max(1);
    let x = |i: usize| left + if n == 1 { pw / 2.0 } else { pw * i as f64 / (n - 1) as f64 };
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/><text x=\"{2}\" y=\"{3:.1}\" text-anchor=\"end\">{v:.1}</text>",
            y(v),
            left + pw,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let _ = writeln!(
            s,
            "<g class=\"xtick\"><line x1=\"{0:.1}\" y1=\"{1}\" x2=\"{0:.1}\" y2=\"{2}\" stroke=\"#333\"/><text x=\"{0:.1}\" y=\"{3}\" text-anchor=\"middle\">{4}</text></g>",
            x(i),
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0,
            g.ratio
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">positive ratio</text>",
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">mean F1</text>",
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (v, ys)) in series(groups).iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            "<g class=\"series\" data-variant=\"{v}\"><polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = top + 16.0 * k as f64 + 10.0;
        let _ = writeln!(
            s,
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{2}\" y=\"{3}\">{v}</text></g>",
            w - right + 12.0,
            w - right + 32.0,
            w - right + 38.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-ratio reports under `ratio_<r>/`, plus `sweep.csv`, `report.txt`,
/// `sweep.svg` and `metadata.json` at the top level.
pub fn emit_sweep_report(groups: &[SweepGroup], cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if groups.is_empty() || groups.iter().any(|g| g.rows.is_empty()) {
        return Err(Error::Harness("no results to report".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut csv = String::from("ratio,positives,negatives,variant,point,mean_f1,std_f1\n");
    let mut text = String::new();
    for g in groups {
        let dir = out.join(format!("ratio_{}", g.ratio));
        written.extend(emit_report(&g.rows, cfg, &dir)?);
        for s in headline(&g.rows) {
            let p = s.point.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{},{},{p},{},{}", g.ratio, g.positives, g.negatives, s.variant, s.mean, s.std);
        }
        let _ = writeln!(text, "ratio {} ({} positive, {} negative)", g.ratio, g.positives, g.negatives);
        text.push_str(&text_table(&g.rows));
        text.push('\n');
    }
    write(out.join("sweep.csv"), &csv, &mut written)?;
    write(out.join("report.txt"), &text, &mut written)?;
    write(out.join("sweep.svg"), &sweep_svg(groups), &mut written)?;
    let extra = serde_json::json!({
        "ratios": groups.iter().map(|g| g.ratio).collect::<Vec<_>>(),
        "positives": groups.iter().map(|g| g.positives).collect::<Vec<_>>(),
    });
    write(out.join("metadata.json"), &metadata_json(cfg, extra)?, &mut written)?;
    Ok(written)
}
