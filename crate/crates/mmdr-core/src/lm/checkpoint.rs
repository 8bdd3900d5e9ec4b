//! Versioned JSON checkpoints: named tensors, shapes, seed, config hash, and
//! optional optimizer state. Values survive the round trip bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::{Adam, Matrix, ParamGroup};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    /// Canonical JSON of the producing configuration.
    pub config_json: String,
    pub seed: u64,
    pub step: usize,
    pub tensors: BTreeMap<String, Matrix>,
    #[serde(default)]
    pub opt_moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Checkpoint {
    pub fn from_model<M: ParamGroup>(
        model: &mut M,
        config_hash: String,
        config_json: String,
        seed: u64,
        step: usize,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit_params(&mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash,
            config_json,
            seed,
            step,
            tensors,
            opt_moments: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: &Adam) -> Self {
        self.opt_moments = opt.moments.clone();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", parent.display())))?;
        }
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Reject checkpoints produced under a different effective config.
    pub fn verify_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {expected}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Copy tensors into the model. Every model tensor must be present with a
    /// matching shape; extra stored tensors are ignored (they may belong to a
    /// larger training assembly).
    pub fn restore_into<M: ParamGroup>(&self, model: &mut M) -> Result<()> {
        let mut missing = Vec::new();
        model.visit_params(&mut |name, p| match self.tensors.get(name) {
            Some(t) if t.rows() == p.value.rows() && t.cols() == p.value.cols() => {
                p.value = t.clone();
            }
            Some(t) => missing.push(format!(
                "{name}: shape {}x{} vs stored {}x{}",
                p.value.rows(),
                p.value.cols(),
                t.rows(),
                t.cols()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint incompatible: {}",
                missing.join("; ")
            )));
        }
        Ok(())
    }

    /// Copy only tensors whose name matches the prefix filter; used to load
    /// pretrained encoder subsets into a full model.
    pub fn restore_matching<M: ParamGroup>(
        &self,
        model: &mut M,
        want: &dyn Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut copied = 0usize;
        let mut problems = Vec::new();
        model.visit_params(&mut |name, p| {
            if !want(name) {
                return;
            }
            match self.tensors.get(name) {
                Some(t) if t.rows() == p.value.rows() && t.cols() == p.value.cols() => {
                    p.value = t.clone();
                    copied += 1;
                }
                Some(_) => problems.push(format!("{name}: shape mismatch")),
                None => problems.push(format!("{name}: absent")),
            }
        });
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "partial restore failed: {}",
                problems.join("; ")
            )));
        }
        Ok(copied)
    }
}
