//! Parameter checkpoints.
//!
//! Layout: the magic line `unikd-checkpoint`, one line of JSON header
//! ([`CheckpointHeader`]), then every tensor's values as little-endian `f64`
//! in header order. Names are hierarchical (`backbone.stage2.conv1.weight`);
//! fusion and head parameters live under the reserved prefixes
//! [`AFF_STUDENT`], [`AFF_TEACHER`] and [`FDP`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UniKdError};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "unikd-checkpoint";

pub const BACKBONE: &str = "backbone";
pub const AFF_STUDENT: &str = "aff.student";
pub const AFF_TEACHER: &str = "aff.teacher";
pub const FDP: &str = "fdp";
pub const ADAPTER: &str = "adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub architecture: String,
    pub class_count: usize,
    pub config_hash: String,
    pub input_size: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: BTreeMap::new() }
    }

    pub fn insert_module(&mut self, prefix: &str, m: &dyn Module) {
        m.visit_params(prefix, &mut |name, p| {
            self.tensors.insert(name.to_string(), p.value.clone());
        });
    }

    /// Copies every parameter of `m` from the tensors under `prefix`.
    pub fn load_module(&self, prefix: &str, m: &mut dyn Module) -> Result<()> {
        let mut err = None;
        m.visit_params_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    err = Some(UniKdError::Checkpoint(format!(
                        "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(UniKdError::Checkpoint(format!("missing tensor `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&dotted))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| UniKdError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(UniKdError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(&line)?;
        if header.meta.schema_version != SCHEMA_VERSION {
            return Err(UniKdError::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                header.meta.schema_version
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| UniKdError::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
        }
        if r.read(&mut buf)? != 0 {
            return Err(UniKdError::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}
