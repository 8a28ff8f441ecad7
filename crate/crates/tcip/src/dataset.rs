//! Dataset directories: one sub-directory per pair plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcip_core::synth::{self, SynthSpec};
use tcip_core::{DeformationField, LabelVolume, Volume};

use crate::io::{self, IoError, IoResult};

pub const MANIFEST: &str = "manifest.json";

/// File stems of one pair, relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub seed: u64,
    pub fixed: String,
    pub moving: String,
    pub fixed_labels: String,
    pub moving_labels: String,
    pub gt_field: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Generation spec; pair `i` uses seed `spec.seed + i`.
    pub spec: SynthSpec,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    pub gt_field: DeformationField,
}

impl From<(String, synth::SynthPair)> for Pair {
    fn from((id, p): (String, synth::SynthPair)) -> Self {
        Pair {
            id,
            fixed: p.fixed,
            moving: p.moving,
            fixed_labels: p.fixed_labels,
            moving_labels: p.moving_labels,
            gt_field: p.gt_field,
        }
    }
}

pub fn pair_id(i: usize) -> String {
    format!("pair_{i:03}")
}

/// Generates `count` pairs in memory, seeds `spec.seed .. spec.seed + count`.
pub fn generate(spec: &SynthSpec, count: usize) -> tcip_core::Result<Vec<Pair>> {
    (0..count)
        .map(|i| {
            let s = SynthSpec {
                seed: spec.seed + i as u64,
                ..*spec
            };
            synth::make_pair(&s).map(|p| Pair::from((pair_id(i), p)))
        })
        .collect()
}

/// Generates and writes `count` pairs under `dir` with a manifest.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec, count: usize) -> anyhow::Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(count);
    for (i, pair) in generate(spec, count)?.into_iter().enumerate() {
        let entry = PairEntry {
            seed: spec.seed + i as u64,
            fixed: format!("{}/fixed", pair.id),
            moving: format!("{}/moving", pair.id),
            fixed_labels: format!("{}/fixed_labels", pair.id),
            moving_labels: format!("{}/moving_labels", pair.id),
            gt_field: format!("{}/gt_field", pair.id),
            id: pair.id.clone(),
        };
        io::save_volume(&dir.join(&entry.fixed), &pair.fixed)?;
        io::save_volume(&dir.join(&entry.moving), &pair.moving)?;
        io::save_labels(&dir.join(&entry.fixed_labels), &pair.fixed_labels)?;
        io::save_labels(&dir.join(&entry.moving_labels), &pair.moving_labels)?;
        io::save_field(&dir.join(&entry.gt_field), &pair.gt_field, pair.fixed.spacing())?;
        entries.push(entry);
    }
    let manifest = Manifest {
        spec: *spec,
        pairs: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|source| IoError::Io { path, source })?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> IoResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| IoError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| IoError::MalformedHeader {
        path,
        reason: e.to_string(),
    })
}

pub fn load_pair(dir: &Path, e: &PairEntry) -> IoResult<Pair> {
    let p = |s: &str| -> PathBuf { dir.join(s) };
    Ok(Pair {
        id: e.id.clone(),
        fixed: io::load_volume(&p(&e.fixed))?,
        moving: io::load_volume(&p(&e.moving))?,
        fixed_labels: io::load_labels(&p(&e.fixed_labels))?,
        moving_labels: io::load_labels(&p(&e.moving_labels))?,
        gt_field: io::load_field(&p(&e.gt_field))?,
    })
}

/// Every pair listed in the manifest, sorted by id.
pub fn load_dataset(dir: &Path) -> IoResult<Vec<Pair>> {
    let m = read_manifest(dir)?;
    let mut pairs = m.pairs.iter().map(|e| load_pair(dir, e)).collect::<IoResult<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}
