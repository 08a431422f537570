//! Self-describing JSON checkpoints: named row-major tensors plus free-form
//! metadata, under a mandatory format version.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dense::{Activation, DenseNet, Layer};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    /// Activation per layer for every network stored in `tensors`.
    #[serde(default)]
    pub nets: BTreeMap<String, Vec<Activation>>,
    pub tensors: Vec<Tensor>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            nets: BTreeMap::new(),
            tensors: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push_net(&mut self, name: &str, net: &DenseNet) {
        self.nets.insert(
            name.to_string(),
            net.layers().iter().map(|l| l.activation).collect(),
        );
        for (i, l) in net.layers().iter().enumerate() {
            self.tensors.push(Tensor {
                name: format!("{name}.{i}.weight"),
                shape: vec![l.out_dim(), l.in_dim()],
                values: l.weight.iter().copied().collect(),
            });
            self.tensors.push(Tensor {
                name: format!("{name}.{i}.bias"),
                shape: vec![l.out_dim()],
                values: l.bias.to_vec(),
            });
        }
    }

    pub fn push_vec(&mut self, name: &str, values: &[f64]) {
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: vec![values.len()],
            values: values.to_vec(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor(name)?.values.clone())
    }

    pub fn net(&self, name: &str) -> Result<DenseNet> {
        let acts = self
            .nets
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing net {name}")))?;
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &activation) in acts.iter().enumerate() {
            let w = self.tensor(&format!("{name}.{i}.weight"))?;
            let b = self.tensor(&format!("{name}.{i}.bias"))?;
            if w.shape.len() != 2 || w.shape[0] * w.shape[1] != w.values.len() {
                return Err(Error::Checkpoint(format!("bad shape for {}", w.name)));
            }
            if b.shape != [w.shape[0]] || b.values.len() != w.shape[0] {
                return Err(Error::Checkpoint(format!("bad shape for {}", b.name)));
            }
            let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.values.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            layers.push(Layer {
                weight,
                bias: Array1::from(b.values.clone()),
                activation,
            });
        }
        DenseNet::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hash of all tensor names, shapes and bit patterns.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for s in &t.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &t.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Bit-level hash of a network's parameters.
pub fn net_hash(net: &DenseNet) -> String {
    let mut ck = Checkpoint::new("net");
    ck.push_net("net", net);
    ck.params_hash()
}
