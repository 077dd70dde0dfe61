//! Run manifest: binds NCAD containers to a hyperparameter grid.
//!
//! Container paths are resolved relative to the manifest's directory.
//! Every `(grid point, layer, domain)` triple must resolve to exactly one
//! tensor named `ckpt{index}/{layer_id}/{domain}`; [`ResolvedRun::load`]
//! checks this before any moment is computed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::ncad::{NcadContainer, NcadTensor};
use crate::moments::{ActivationMatrix, Domain, FlattenMode};
use crate::trajectory::{build_trajectory, HyperparameterGrid, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub grid_name: String,
    pub omegas: Vec<f64>,
    pub layers: Vec<String>,
    pub domains: Vec<String>,
    pub containers: Vec<String>,
    /// SHA-256 of the probe input batch, lowercase hex.
    pub probe_hash: String,
    #[serde(default)]
    pub flatten: FlattenMode,
    #[serde(default)]
    pub created: serde_json::Value,
}

/// SHA-256 over the little-endian `f32` bytes of a probe batch.
pub fn probe_hash(batch: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in batch {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<HyperparameterGrid> {
        HyperparameterGrid::new(self.grid_name.clone(), self.omegas.clone())
    }

    /// Structural checks that need no container access.
    pub fn check(&self) -> Result<()> {
        self.grid()?;
        if self.layers.is_empty() {
            return Err(Error::Manifest("no layers listed".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Manifest("no domains listed".into()));
        }
        for d in &self.domains {
            Domain::parse(d)?;
        }
        if self.containers.is_empty() {
            return Err(Error::Manifest("no containers listed".into()));
        }
        if self.probe_hash.len() != 64 || hex::decode(&self.probe_hash).is_err() {
            return Err(Error::Manifest("probe_hash must be 32 bytes of hex".into()));
        }
        Ok(())
    }
}

/// A manifest whose every cell has been located in its containers.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub manifest: RunManifest,
    tensors: HashMap<String, NcadTensor>,
}

impl ResolvedRun {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = RunManifest::read(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::resolve(manifest, &dir)
    }

    pub fn resolve(manifest: RunManifest, dir: &Path) -> Result<Self> {
        manifest.check()?;
        let mut tensors = HashMap::new();
        for file in &manifest.containers {
            let p: PathBuf = dir.join(file);
            let c = NcadContainer::read(&p).map_err(|e| Error::Manifest(format!("{}: {e}", p.display())))?;
            for t in c.tensors {
                if tensors.contains_key(&t.name) {
                    return Err(Error::DuplicateName(t.name));
                }
                tensors.insert(t.name.clone(), t);
            }
        }
        Self::from_tensors(manifest, tensors)
    }

    pub fn from_tensors(manifest: RunManifest, tensors: HashMap<String, NcadTensor>) -> Result<Self> {
        manifest.check()?;
        let mut missing = Vec::new();
        for i in 0..manifest.omegas.len() {
            for layer in &manifest.layers {
                for domain in &manifest.domains {
                    let name = NcadTensor::activation_name(i, layer, domain);
                    if !tensors.contains_key(&name) {
                        missing.push(name);
                    }
                }
            }
        }
        if let Some(first) = missing.first() {
            return Err(Error::Manifest(format!(
                "{} cell(s) missing from containers, first: `{first}`",
                missing.len()
            )));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn activation(&self, index: usize, layer: &str, domain: &Domain) -> Result<ActivationMatrix> {
        let name = NcadTensor::activation_name(index, layer, &domain.tag());
        let t = self
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Manifest(format!("no tensor `{name}`")))?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        let values = t.data.iter().map(|&v| f64::from(v)).collect();
        ActivationMatrix::from_tensor(layer, domain.clone(), &dims, values, self.manifest.flatten)
    }

    pub fn batches(&self, domain: &Domain) -> Result<Vec<Vec<ActivationMatrix>>> {
        if !self.manifest.domains.contains(&domain.tag()) {
            return Err(Error::Manifest(format!("domain `{domain}` not in manifest")));
        }
        (0..self.manifest.omegas.len())
            .map(|i| {
                self.manifest
                    .layers
                    .iter()
                    .map(|l| self.activation(i, l, domain))
                    .collect()
            })
            .collect()
    }

    pub fn trajectory(&self, domain: &Domain) -> Result<Trajectory> {
        build_trajectory(&self.batches(domain)?, self.manifest.grid()?)
    }

    pub fn domains(&self) -> Result<Vec<Domain>> {
        self.manifest.domains.iter().map(|d| Domain::parse(d)).collect()
    }
}

/// Collects activation tensors and writes one container per grid point
/// plus the manifest.
#[derive(Debug)]
pub struct RunWriter {
    manifest: RunManifest,
    per_checkpoint: Vec<Vec<NcadTensor>>,
}

impl RunWriter {
    pub fn new(grid: &HyperparameterGrid, layers: Vec<String>, domains: Vec<Domain>, probe_hash: String) -> Self {
        let containers = (0..grid.len()).map(|i| format!("ckpt{i}.ncad")).collect();
        Self {
            manifest: RunManifest {
                grid_name: grid.name().to_string(),
                omegas: grid.values().to_vec(),
                layers,
                domains: domains.iter().map(Domain::tag).collect(),
                containers,
                probe_hash,
                flatten: FlattenMode::Full,
                created: serde_json::json!({ "tool": "nc-core", "version": env!("CARGO_PKG_VERSION") }),
            },
            per_checkpoint: vec![Vec::new(); grid.len()],
        }
    }

    pub fn metadata(mut self, created: serde_json::Value) -> Self {
        self.manifest.created = created;
        self
    }

    pub fn push(&mut self, index: usize, acts: &ActivationMatrix) {
        let name = NcadTensor::activation_name(index, &acts.layer_id, &acts.domain.tag());
        let data = acts.values.iter().map(|&v| v as f32).collect();
        self.per_checkpoint[index].push(NcadTensor::new(
            name,
            vec![acts.n_samples as u64, acts.n_features as u64],
            data,
        ));
    }

    /// Writes `ckpt{i}.ncad` files and `manifest.json` into `dir`, returning
    /// the manifest path.
    pub fn finish(self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (file, tensors) in self.manifest.containers.iter().zip(self.per_checkpoint) {
            NcadContainer::new(tensors).write(dir.join(file))?;
        }
        let path = dir.join("manifest.json");
        self.manifest.write(&path)?;
        Ok(path)
    }
}
