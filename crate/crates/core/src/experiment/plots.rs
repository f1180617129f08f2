//! CSV tables and minimal SVG line charts from metrics streams.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics, MetricsRecord, Phase};
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotSummary {
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
    pub records: usize,
    /// Malformed lines skipped across all inputs.
    pub skipped: usize,
}

/// One named series of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Renders a line chart; `None` when no series has a point.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> Option<String> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for &(x, y) in pts {
        any = true;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !any {
        return None;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (w, h, l, r, t, b) = (640.0, 400.0, 60.0, 20.0, 40.0, 50.0);
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let sy = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - b, w - r, h - b);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#, h - b);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), h - b + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, escape(x_label));
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = se
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if path.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, w - r - 150.0, escape(&se.name));
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Long-format CSV: `series,x,y`.
pub fn series_csv(series: &[Series]) -> String {
    let mut s = String::from("series,x,y\n");
    for se in series {
        for (x, y) in &se.points {
            let _ = writeln!(s, "{},{x},{y}", se.name.replace(',', ";"));
        }
    }
    s
}

const RECORD_HEADER: &str = "source,step,phase,event,interval_index,epoch,loss,mean_reward,mean_acc,buffer_size,frozen_count,mean_response_length,eval_pass_at_1,eval_avg_at_k,tag,probe";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_row(source: &str, r: &MetricsRecord) -> String {
    let eval = r.eval_scores.as_ref().and_then(|m| m.values().next());
    [
        source.replace(',', ";"),
        r.step.to_string(),
        r.phase.map(|p| variant_name(&p)).unwrap_or_default(),
        r.event.map(|e| variant_name(&e)).unwrap_or_default(),
        r.interval_index.to_string(),
        opt(r.epoch),
        opt(r.loss),
        opt(r.mean_reward),
        opt(r.mean_acc),
        opt(r.buffer_size),
        opt(r.frozen_count),
        opt(r.mean_response_length),
        opt(eval.map(|e| e.pass_at_1)),
        opt(eval.and_then(|e| e.avg_at_k)),
        opt(r.tag.clone()),
        opt(r.probe.clone()),
    ]
    .join(",")
}

/// Serialized name of a unit enum variant.
fn variant_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into())
}

fn training_series(label: &str, recs: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> Option<f64>) -> Series {
    Series {
        name: label.to_string(),
        points: recs.iter().filter_map(|r| f(r).map(|y| (r.step as f64, y))).collect(),
    }
}

fn probe_series<'a>(recs: &'a [MetricsRecord], probe: &str) -> Option<&'a serde_json::Value> {
    recs.iter().rev().find(|r| r.probe.as_deref() == Some(probe)).and_then(|r| r.report.as_ref())
}

/// Writes `records.csv` plus one CSV and (when non-empty) one SVG per chart.
pub fn emit_plots(files: &[PathBuf], out: &Path) -> Result<PlotSummary> {
    std::fs::create_dir_all(out)?;
    let mut summary = PlotSummary::default();
    let mut table = format!("{RECORD_HEADER}\n");
    let mut runs = Vec::new();
    for f in files {
        let (recs, bad) = read_metrics(f)?;
        summary.skipped += bad;
        summary.records += recs.len();
        let name = stem(f);
        let name = if files.len() > 1 && runs.iter().any(|(n, _): &(String, _)| *n == name) {
            f.display().to_string()
        } else {
            name
        };
        for r in &recs {
            table.push_str(&record_row(&name, r));
            table.push('\n');
        }
        runs.push((name, recs));
    }
    let p = out.join("records.csv");
    std::fs::write(&p, table)?;
    summary.csv.push(p);

    type Getter = fn(&MetricsRecord) -> Option<f64>;
    let charts: [(&str, &str, Getter); 5] = [
        ("reward", "mean rollout reward", |r| r.mean_reward),
        ("accuracy", "mean rollout accuracy", |r| r.mean_acc),
        ("length", "mean response length", |r| r.mean_response_length),
        ("loss", "training loss", |r| r.loss),
        ("eval", "eval accuracy", |r| {
            (r.phase == Some(Phase::Eval))
                .then(|| r.eval_scores.as_ref().and_then(|m| m.values().next()).map(|e| e.avg_at_k.unwrap_or(e.pass_at_1)))
                .flatten()
        }),
    ];
    for (file, title, get) in charts {
        let series: Vec<Series> = runs
            .iter()
            .map(|(n, recs)| training_series(n, recs, get))
            .filter(|s| !s.points.is_empty())
            .collect();
        write_chart(out, file, title, "step", &series, &mut summary)?;
    }

    // probe reports
    let mut prune = Vec::new();
    let mut mag = Vec::new();
    for (n, recs) in &runs {
        if let Some(rep) = probe_series(recs, "prune") {
            for key in ["sft", "rl", "single"] {
                if let Some(arr) = rep.get(key).and_then(|v| v.as_array()) {
                    let points = arr
                        .iter()
                        .filter_map(|p| {
                            let x = p.get("p_post")?.as_f64()?;
                            let s = p.get("scores")?;
                            let y = s.get("avg_at_k").and_then(|v| v.as_f64()).or(s.get("pass_at_1")?.as_f64())?;
                            Some((x, y))
                        })
                        .collect();
                    prune.push(Series { name: format!("{n} {key}"), points });
                }
            }
        }
        if let Some(rep) = probe_series(recs, "magnitude") {
            for key in ["sft", "rl", "single"] {
                if let Some(arr) = rep.get(key).and_then(|v| v.get("layers")).and_then(|v| v.as_array()) {
                    let points = arr
                        .iter()
                        .enumerate()
                        .filter_map(|(i, p)| Some((i as f64, p.get(1)?.as_f64()?)))
                        .collect();
                    mag.push(Series { name: format!("{n} {key}"), points });
                }
            }
        }
    }
    if !prune.is_empty() {
        write_chart(out, "prune", "eval accuracy vs p_post", "p_post", &prune, &mut summary)?;
    }
    if !mag.is_empty() {
        write_chart(out, "magnitude", "per-layer update magnitude", "layer index", &mag, &mut summary)?;
    }
    Ok(summary)
}

fn write_chart(
    out: &Path,
    file: &str,
    title: &str,
    x_label: &str,
    series: &[Series],
    summary: &mut PlotSummary,
) -> Result<()> {
    let csv = out.join(format!("{file}.csv"));
    std::fs::write(&csv, series_csv(series))?;
    summary.csv.push(csv);
    if let Some(svg) = line_chart(title, x_label, series) {
        let p = out.join(format!("{file}.svg"));
        std::fs::write(&p, svg)?;
        summary.svg.push(p);
    }
    Ok(())
}
