//! File formats: dataset and prediction JSON lines, CSV tables, JSON
//! documents. Every write goes to a temporary file in the destination
//! directory and is renamed into place.

use anyhow::{bail, Context, Result};
use dhq::scenes::{Scene, CHANNELS};
use dhq::{BBox, Detection};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `rows` under `header`, which must list the row fields in order;
/// the header is written even when there are no rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner()?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Parses each non-blank line; errors name the file and 1-based line.
fn read_jsonl<T>(path: &Path, mut check: impl FnMut(&T) -> Result<()>) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
{
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}: line {}", path.display(), k + 1);
        let rec: T = serde_json::from_str(line).with_context(at)?;
        check(&rec).with_context(at)?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Serialize)]
struct SceneOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    scene: &'a Scene,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneIn {
    schema_version: u32,
    image_id: String,
    gt_boxes: Vec<BBox>,
    grid: usize,
    features: Vec<f64>,
    density: usize,
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_jsonl(
        path,
        scenes.iter().map(|scene| SceneOut {
            schema_version: DATASET_SCHEMA_VERSION,
            scene,
        }),
    )
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let recs: Vec<SceneIn> = read_jsonl(path, |r: &SceneIn| {
        if r.schema_version != DATASET_SCHEMA_VERSION {
            bail!("unsupported schema_version {}", r.schema_version);
        }
        if r.grid == 0 || r.features.len() != r.grid * r.grid * CHANNELS {
            bail!(
                "features hold {} values, expected {} for grid {}",
                r.features.len(),
                r.grid * r.grid * CHANNELS,
                r.grid
            );
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            bail!("non-finite feature value");
        }
        Ok(())
    })?;
    Ok(recs
        .into_iter()
        .map(|r| Scene {
            image_id: r.image_id,
            gt_boxes: r.gt_boxes,
            grid: r.grid,
            features: r.features,
            density: r.density,
        })
        .collect())
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    /// Crowd density estimate used by adaptive suppression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
}

impl PredictionRecord {
    pub fn detection(&self) -> Detection {
        Detection {
            image_id: self.image_id.clone(),
            bbox: self.bbox,
            score: self.score,
            stage: self.stage,
        }
    }
}

impl From<&Detection> for PredictionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            image_id: d.image_id.clone(),
            bbox: d.bbox,
            score: d.score,
            stage: d.stage,
            density: None,
        }
    }
}

pub fn write_predictions(path: &Path, recs: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, recs)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path, |r: &PredictionRecord| {
        if !(0.0..=1.0).contains(&r.score) {
            bail!("score {} outside [0, 1]", r.score);
        }
        if let Some(d) = r.density {
            if !(0.0..=1.0).contains(&d) {
                bail!("density {d} outside [0, 1]");
            }
        }
        Ok(())
    })
}
