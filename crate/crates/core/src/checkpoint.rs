//! Versioned model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`.
//! The manifest lists every tensor with its domain, name, shape and offset
//! into the blob, which stores values as little-endian `f32`.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::DomainId;
use crate::error::{Error, Result};
use crate::io;
use crate::propagation::DomainModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub domain: DomainId,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Best epoch of the source and target models.
    pub epochs: [usize; 2],
    pub train_hyper_weights: bool,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: [DomainModel; 2],
    pub config: serde_json::Value,
    pub seed: u64,
    pub epochs: [usize; 2],
}

fn shape_of(model: &DomainModel, name: &str) -> Vec<usize> {
    let d = model.dim();
    match name {
        "user_table" => vec![model.num_users(), d],
        "item_table" => vec![model.num_items(), d],
        n if n.starts_with("hyper_weight_") => vec![d, d],
        _ => vec![d],
    }
}

impl Checkpoint {
    /// Values are narrowed to `f32`; loading widens them back exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.models[0].train_hyper_weights != self.models[1].train_hyper_weights {
            return Err(Error::Contract("domains disagree on trainable layer maps".into()));
        }
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (model, domain) in self.models.iter().zip([DomainId::Source, DomainId::Target]) {
            for (name, values) in model.tensors() {
                tensors.push(TensorEntry {
                    domain,
                    shape: shape_of(model, &name),
                    name,
                    offset,
                });
                for &v in values {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
                offset += values.len();
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            epochs: self.epochs,
            train_hyper_weights: self.models[0].train_hyper_weights,
            config: self.config.clone(),
            tensors,
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        io::write_atomic(&dir.join(BLOB), &blob)?;
        io::write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_str(&io::read_to_string(&mpath)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bpath = dir.join(BLOB);
        let bytes = std::fs::read(&bpath).map_err(|e| Error::io(format!("reading {}", bpath.display()), e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Schema(format!("{}: truncated blob", bpath.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();

        let models = [DomainId::Source, DomainId::Target].map(|domain| {
            let entries: Vec<&TensorEntry> = manifest.tensors.iter().filter(|t| t.domain == domain).collect();
            rebuild(&entries, &values, manifest.train_hyper_weights)
        });
        let [source, target] = models;
        let models = [source?, target?];
        let used: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if used != values.len() {
            return Err(Error::Schema(format!("blob holds {} values, manifest describes {used}", values.len())));
        }
        Ok(Checkpoint {
            models,
            config: manifest.config,
            seed: manifest.seed,
            epochs: manifest.epochs,
        })
    }
}

fn rebuild(entries: &[&TensorEntry], values: &[f64], train_hyper_weights: bool) -> Result<DomainModel> {
    let get = |name: &str| -> Result<&TensorEntry> {
        entries
            .iter()
            .copied()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks tensor `{name}`")))
    };
    let slice = |t: &TensorEntry| -> Result<Vec<f64>> {
        let len: usize = t.shape.iter().product();
        values
            .get(t.offset..t.offset + len)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Schema(format!("tensor `{}` runs past the blob", t.name)))
    };
    let matrix = |name: &str| -> Result<Array2<f64>> {
        let t = get(name)?;
        let [r, c] = t.shape[..] else {
            return Err(Error::Schema(format!("tensor `{name}` must be 2-d")));
        };
        Array2::from_shape_vec((r, c), slice(t)?).map_err(|e| Error::Schema(e.to_string()))
    };
    let vector = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(slice(get(name)?)?)) };
    let layers = entries.iter().filter(|t| t.name.starts_with("hyper_weight_")).count();
    let model = DomainModel {
        user_table: matrix("user_table")?,
        item_table: matrix("item_table")?,
        hyper_weights: (0..layers).map(|l| matrix(&format!("hyper_weight_{l}"))).collect::<Result<_>>()?,
        attn_u: vector("attn_u")?,
        attn_v: vector("attn_v")?,
        attn_vhat: vector("attn_vhat")?,
        attn_vtilde: vector("attn_vtilde")?,
        train_hyper_weights,
    };
    model.validate()?;
    Ok(model)
}
