//! Run artifacts: metric JSON-lines, loss curves, run manifests and static
//! SVG summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::objectives::LossRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "run.json";

/// Build identifier in `git describe` style, fixed at compile time.
pub fn build_id() -> String {
    let version = env!("CARGO_PKG_VERSION");
    match option_env!("VIDPROMPT_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{version}-{d}"),
        _ => format!("v{version}"),
    }
}

/// One metric value; `trial` and `seed` allow exact replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    pub trial: usize,
    pub seed: u64,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, split: impl Into<String>, trial: usize, seed: u64, value: f64) -> Self {
        Self { metric: metric.into(), split: split.into(), trial, seed, value }
    }
}

pub fn metrics_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metric records serialise") + "\n")
        .collect()
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Parse a `step,loss,lr` CSV back into records.
pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format!("line {}: expected step,loss,lr", i + 1);
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(LossRecord {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Mean value per `(metric, split)` over trials.
pub fn summarize(records: &[MetricRecord]) -> BTreeMap<(String, String), (f64, usize)> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.metric.clone(), r.split.clone())).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
}

/// Writes run artifacts into one directory.
pub struct RunWriter<'a> {
    dir: &'a Path,
    artifacts: Vec<String>,
}

impl<'a> RunWriter<'a> {
    pub fn new(dir: &'a Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, artifacts: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    pub fn metrics(&mut self, records: &[MetricRecord]) -> std::io::Result<()> {
        self.write(METRICS_FILE, metrics_jsonl(records))
    }

    pub fn losses(&mut self, records: &[LossRecord]) -> std::io::Result<()> {
        self.write(LOSS_FILE, crate::objectives::loss_curve_csv(records))
    }

    /// Write the manifest last so it lists every artifact.
    pub fn finish(mut self, command: &str, config: &ExperimentConfig) -> std::io::Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            build_id: build_id(),
            seed: config.seed,
            config_hash: crate::checkpoint::hex(&config.hash()),
            config: config.clone(),
            artifacts: self.artifacts.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        self.write(MANIFEST_FILE, json + "\n")?;
        Ok(manifest)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of mean metric values.
pub fn metrics_svg(records: &[MetricRecord]) -> String {
    let summary = summarize(records);
    let row_h = 22.0;
    let (label_w, bar_w) = (260.0, 360.0);
    let height = 40.0 + row_h * summary.len().max(1) as f64;
    let max = summary.values().map(|(v, _)| v.abs()).fold(1e-12, f64::max).max(1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" font-family="monospace" font-size="12">"#,
        w = label_w + bar_w + 90.0
    );
    let _ = writeln!(s, r#"<text x="8" y="18" font-weight="bold">metrics (mean over trials)</text>"#);
    for (i, ((metric, split), (mean, n))) in summary.iter().enumerate() {
        let y = 30.0 + row_h * i as f64;
        let w = bar_w * mean.abs() / max;
        let _ = writeln!(s, r#"<text x="8" y="{}">{}</text>"#, y + 14.0, escape(&format!("{metric} [{split}] n={n}")));
        let _ = writeln!(s, r##"<rect x="{label_w}" y="{}" width="{w:.2}" height="{}" fill="#4a78b5"/>"##, y + 3.0, row_h - 6.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{mean:.4}</text>"#, label_w + w + 6.0, y + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of a loss curve.
pub fn loss_svg(records: &[LossRecord]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="8" y="18" font-weight="bold">training loss</text>"#);
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        let lo = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.loss).fold(f64::NEG_INFINITY, f64::max);
        let span_y = (hi - lo).max(1e-12);
        let span_x = ((last.step - first.step) as f64).max(1.0);
        let points: Vec<String> = records
            .iter()
            .map(|r| {
                let x = pad + (w - 2.0 * pad) * (r.step - first.step) as f64 / span_x;
                let y = h - pad - (h - 2.0 * pad) * (r.loss - lo) / span_y;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#b5494a" stroke-width="1.5" points="{}"/>"##, points.join(" "));
        let _ = writeln!(s, r#"<text x="{pad}" y="{}">{hi:.4}</text>"#, pad - 4.0);
        let _ = writeln!(s, r#"<text x="{pad}" y="{}">{lo:.4}</text>"#, h - pad + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">step {}</text>"#, w - pad - 60.0, h - 8.0, last.step);
    }
    s.push_str("</svg>\n");
    s
}
