//! Dataset serialization: CSV curve files, histogram files, and the JSON
//! metadata that makes every output pair self-describing and replayable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use g2sim_core::event::CoincidenceHistogram;
use g2sim_core::{AxisKind, CoherenceCurve, CurveMeta, CurvePoint, Error, Result};

use crate::config::RunConfig;

/// Shortest round-tripping decimal for a float; the default formatter already
/// does that, and using one code path everywhere keeps reruns byte-identical.
fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_curve_csv(path: &Path, curve: &CoherenceCurve) -> Result<()> {
    let mut out = String::from("coordinate,g2,stderr,flagged\n");
    for p in &curve.points {
        out.push_str(&fmt(p.coordinate));
        out.push(',');
        out.push_str(&fmt(p.g2));
        out.push(',');
        out.push_str(&fmt(p.stderr));
        out.push(',');
        out.push_str(if p.flagged { "1" } else { "0" });
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a curve CSV. The axis and provenance are supplied by the caller
/// (the file format itself is axis-agnostic).
pub fn read_curve_csv(path: &Path, axis: AxisKind, meta: CurveMeta) -> Result<CoherenceCurve> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.starts_with("coordinate") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 2 {
            return Err(Error::Parse(format!(
                "{} line {}: expected coordinate,g2[,stderr[,flagged]]",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{} line {}: bad number {s:?}", path.display(), lineno + 1)))
        };
        points.push(CurvePoint {
            coordinate: parse(cols[0])?,
            g2: parse(cols[1])?,
            stderr: if cols.len() > 2 { parse(cols[2])? } else { 0.0 },
            flagged: cols.len() > 3 && cols[3].trim() == "1",
        });
    }
    CoherenceCurve::new(axis, points, meta)
}

pub fn write_histogram_csv(path: &Path, h: &CoincidenceHistogram) -> Result<()> {
    let mut out = String::from("lag_s,count\n");
    for b in &h.bins {
        out.push_str(&fmt(b.center));
        out.push(',');
        out.push_str(&b.count.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// The self-describing metadata written next to every dataset: the fully
/// resolved configuration - seed included - sufficient to reproduce the data
/// files byte-identically via `g2sim rerun`, plus tool version, the list of
/// produced files, and wall-clock timing. Timing is the one field that varies
/// between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub generator: String,
    #[serde(flatten)]
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub timing_ms: f64,
}

impl Metadata {
    pub fn new(config: RunConfig, generator: &str) -> Metadata {
        Metadata {
            tool: "g2sim".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            generator: generator.to_string(),
            config,
            outputs: Vec::new(),
            timing_ms: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("metadata serialization: {e}")))?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Metadata> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read metadata {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("metadata {}: {e}", path.display())))
    }
}

/// Ensures the parent directory of an output prefix exists.
pub fn ensure_parent(prefix: &str) -> Result<()> {
    if let Some(parent) = Path::new(prefix).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

pub fn prefixed(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}{suffix}"))
}
