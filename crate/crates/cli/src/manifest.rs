//! Dataset directory layout: one SequenceFile per item plus a JSON
//! manifest carrying the spec and the ground truth, and a CSV mirror of
//! the conditions for eyeballing.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dvq_core::format;
use dvq_core::synth::{SyntheticDataset, SyntheticSpec};
use dvq_core::Tensor32;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONDITIONS_FILE: &str = "conditions.csv";

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub items: Vec<ManifestItem>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub tokens: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub segment_lengths: Vec<usize>,
}

pub fn write_dataset(dir: &Path, dataset: &SyntheticDataset<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(dataset.items.len());
    let mut csv = String::from("id,tokens,boundaries\n");
    for (i, item) in dataset.items.iter().enumerate() {
        let file = format!("seq_{i:05}.bin");
        let bytes = format::encode_sequence(&item.frames)?;
        fs::write(dir.join(&file), bytes)?;
        csv.push_str(&format!(
            "{i},{},{}\n",
            join(&item.tokens),
            join(&item.boundaries)
        ));
        items.push(ManifestItem {
            file,
            tokens: item.tokens.clone(),
            boundaries: item.boundaries.clone(),
            segment_lengths: item.segment_lengths.clone(),
        });
    }
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        items,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    fs::write(dir.join(CONDITIONS_FILE), csv)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))
        .with_context(|| format!("no {} in {}", MANIFEST_FILE, dir.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_sequence(dir: &Path, item: &ManifestItem) -> Result<Tensor32> {
    let bytes = fs::read(dir.join(&item.file))
        .with_context(|| format!("missing sequence file {}", item.file))?;
    Ok(format::decode_sequence::<f32>(&bytes)?)
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
