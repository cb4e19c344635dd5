//! Per-epoch metrics tables and the accuracy-vs-epoch chart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "run,epoch,accuracy,loss,lr,forwards_collection,forwards_generation,forwards_training";

/// One row of `metrics.csv`. Forward counts are per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub epoch: usize,
    pub accuracy: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub forwards_collection: u64,
    pub forwards_generation: u64,
    pub forwards_training: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run,
            self.epoch,
            self.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            self.loss,
            self.lr,
            self.forwards_collection,
            self.forwards_generation,
            self.forwards_training
        )
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let bad = |what: &str| Error::MalformedLine {
            line: line_no,
            message: format!("bad {what} in metrics row"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("expected 8 metrics columns, found {}", f.len()),
            });
        }
        Ok(MetricsRow {
            run: f[0].to_string(),
            epoch: f[1].parse().map_err(|_| bad("epoch"))?,
            accuracy: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad("accuracy"))?)
            },
            loss: f[3].parse().map_err(|_| bad("loss"))?,
            lr: f[4].parse().map_err(|_| bad("lr"))?,
            forwards_collection: f[5].parse().map_err(|_| bad("forwards_collection"))?,
            forwards_generation: f[6].parse().map_err(|_| bad("forwards_generation"))?,
            forwards_training: f[7].parse().map_err(|_| bad("forwards_training"))?,
        })
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Report("metrics table lacks the expected header".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse(l, i + 1))
        .collect()
}

/// Metrics of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    pub eval_split: Option<String>,
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    /// Reads `metrics.csv` and the evaluation split from `manifest.json`.
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = run_dir.as_ref();
        let metrics_path = dir.join("metrics.csv");
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let rows = rows_from_csv(&text)?;
        let manifest_path = dir.join("manifest.json");
        let manifest: serde_json::Value = match fs::read_to_string(&manifest_path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Report(format!("bad manifest: {e}")))?,
            Err(e) => return Err(Error::io(&manifest_path, e)),
        };
        let name = manifest
            .get("run_name")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .or_else(|| rows.first().map(|r| r.run.clone()))
            .unwrap_or_else(|| dir.display().to_string());
        Ok(RunMetrics {
            name,
            eval_split: manifest.get("eval_split").and_then(|v| v.as_str()).map(str::to_string),
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub csv: String,
    pub svg: String,
}

/// Aligns runs by epoch into one table and charts accuracy per epoch.
pub fn compare_runs(runs: &[RunMetrics]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::Report("nothing to compare".into()));
    }
    let split = &runs[0].eval_split;
    for r in &runs[1..] {
        if &r.eval_split != split {
            return Err(Error::Report(format!(
                "runs were evaluated on different splits: {} uses {:?}, {} uses {:?}",
                runs[0].name, split, r.name, r.eval_split
            )));
        }
    }
    let max_epoch = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|m| m.epoch))
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for epoch in 0..=max_epoch {
        for r in runs {
            for m in r.rows.iter().filter(|m| m.epoch == epoch) {
                rows.push(MetricsRow {
                    run: r.name.clone(),
                    ..m.clone()
                });
            }
        }
    }
    let csv = rows_to_csv(&rows);
    let svg = chart_from_csv(&csv)?;
    Ok(Comparison { csv, svg })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG line chart of accuracy against epoch, one series per run.
/// A pure function of the CSV text.
pub fn chart_from_csv(csv: &str) -> Result<String> {
    let rows = rows_from_csv(csv)?;
    let mut names: Vec<&str> = Vec::new();
    for r in &rows {
        if !names.contains(&r.run.as_str()) {
            names.push(&r.run);
        }
    }
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1);
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 160.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |e: usize| left + pw * e as f64 / max_epoch as f64;
    let y = |a: f64| top + ph * (1.0 - a.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.2}</text><line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left - 6.0,
            y(a) + 4.0,
            y(a),
            left + pw,
            y(a)
        );
    }
    for e in 0..=max_epoch {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{e}</text>"#,
            x(e),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, name) in names.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = rows
            .iter()
            .filter(|r| r.run == *name)
            .filter_map(|r| r.accuracy.map(|a| format!("{:.1},{:.1}", x(r.epoch), y(a))))
            .collect();
        if !points.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                points.join(" ")
            );
        }
        let ly = top + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, epochs: usize, split: Option<&str>) -> RunMetrics {
        RunMetrics {
            name: name.into(),
            eval_split: split.map(str::to_string),
            rows: (1..=epochs)
                .map(|e| MetricsRow {
                    run: name.into(),
                    epoch: e,
                    accuracy: Some(e as f64 / 10.0),
                    loss: 1.0 / e as f64,
                    lr: 1e-3,
                    forwards_collection: 10,
                    forwards_generation: 0,
                    forwards_training: 5,
                })
                .collect(),
        }
    }

    #[test]
    fn row_round_trip() {
        let r = run("a", 3, None);
        let csv = rows_to_csv(&r.rows);
        assert_eq!(rows_from_csv(&csv).unwrap(), r.rows);
    }

    #[test]
    fn comparison_rows_and_chart() {
        let c = compare_runs(&[run("nlft", 3, Some("s")), run("sft", 2, Some("s"))]).unwrap();
        assert_eq!(c.csv.lines().count() - 1, 5);
        assert_eq!(c.svg.matches("<polyline").count(), 2);
        assert_eq!(chart_from_csv(&c.csv).unwrap(), c.svg);
        let single = compare_runs(&[run("only", 2, None)]).unwrap();
        assert_eq!(single.svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn mismatched_splits_are_rejected() {
        assert!(compare_runs(&[run("a", 1, Some("x")), run("b", 1, Some("y"))]).is_err());
    }
}
