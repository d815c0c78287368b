//! On-disk dataset directory:
//!
//! - `manifest.json`: version, sizes, seed, scene size and per-file SHA-256
//! - `features.bin`: `N x d` little-endian f64, row-major
//! - `labels.bin`: `N x C` bytes in `{0, 1}`, row-major
//! - `scenes.json`: `[{"scene_id", "instance_indices"}]`
//! - `prototypes.bin`: optional `C x d` little-endian f64

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

const FEATURES: &str = "features.bin";
const LABELS: &str = "labels.bin";
const SCENES: &str = "scenes.json";
const PROTOTYPES: &str = "prototypes.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub seed: u64,
    pub scene_size: usize,
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneEntry {
    scene_id: usize,
    instance_indices: Vec<usize>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f64_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    files.push((FEATURES, f64_bytes(&ds.features)));
    files.push((
        LABELS,
        ds.labels.data().iter().map(|&v| (v > 0.5) as u8).collect(),
    ));
    let scenes: Vec<SceneEntry> = ds
        .scenes()
        .into_iter()
        .map(|(scene_id, instance_indices)| SceneEntry {
            scene_id,
            instance_indices,
        })
        .collect();
    files.push((SCENES, serde_json::to_vec(&scenes)?));
    if let Some(p) = &ds.class_prototypes {
        files.push((PROTOTYPES, f64_bytes(p)));
    }

    let mut sha256 = BTreeMap::new();
    for (name, bytes) in &files {
        write(&dir.join(name), bytes)?;
        sha256.insert(name.to_string(), digest(bytes));
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        n: ds.len(),
        d: ds.dim(),
        c: ds.num_classes(),
        seed: ds.seed,
        scene_size: ds.scene_size,
        sha256,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write(&dir.join("manifest.json"), text.as_bytes())
}

fn read_checked(dir: &Path, name: &str, manifest: &DatasetManifest, expected_len: Option<usize>) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(len) = expected_len {
        if bytes.len() != len {
            return Err(Error::format(
                &path,
                format!("{} bytes, expected {len}", bytes.len()),
            ));
        }
    }
    let want = manifest
        .sha256
        .get(name)
        .ok_or_else(|| Error::format(dir.join("manifest.json"), format!("no digest for {name}")))?;
    if &digest(&bytes) != want {
        return Err(Error::Checksum { path });
    }
    Ok(bytes)
}

fn f64_matrix(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let (n, d, c) = (manifest.n, manifest.d, manifest.c);

    let features = f64_matrix(&read_checked(dir, FEATURES, &manifest, Some(n * d * 8))?, n, d)?;
    if !features.is_finite() {
        return Err(Error::format(dir.join(FEATURES), "non-finite feature value"));
    }
    let label_bytes = read_checked(dir, LABELS, &manifest, Some(n * c))?;
    if label_bytes.iter().any(|&b| b > 1) {
        return Err(Error::format(dir.join(LABELS), "label bytes must be 0 or 1"));
    }
    let labels = Matrix::new(n, c, label_bytes.iter().map(|&b| b as f64).collect())?;

    let scene_bytes = read_checked(dir, SCENES, &manifest, None)?;
    let scenes: Vec<SceneEntry> = serde_json::from_slice(&scene_bytes)
        .map_err(|e| Error::format(dir.join(SCENES), e.to_string()))?;
    let mut scene_of = vec![usize::MAX; n];
    for s in &scenes {
        for &i in &s.instance_indices {
            if i >= n || scene_of[i] != usize::MAX {
                return Err(Error::format(
                    dir.join(SCENES),
                    format!("instance {i} out of range or listed twice"),
                ));
            }
            scene_of[i] = s.scene_id;
        }
    }
    if scene_of.contains(&usize::MAX) {
        return Err(Error::format(dir.join(SCENES), "instance without a scene"));
    }

    let class_prototypes = if manifest.sha256.contains_key(PROTOTYPES) {
        let bytes = read_checked(dir, PROTOTYPES, &manifest, Some(c * d * 8))?;
        Some(f64_matrix(&bytes, c, d)?)
    } else {
        None
    };

    Ok(Dataset {
        features,
        labels,
        scene_of,
        class_prototypes,
        seed: manifest.seed,
        scene_size: manifest.scene_size,
    })
}
