//! Quantized model container: packed block linears plus float copies of
//! everything else.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::model::{ModelWeights, LINEAR_NAMES};
use crate::quant::{PackedTensor, Quantized};
use crate::tensorfile::{load_tensors, save_tensors, StoredTensor, TensorFile};

/// Suffix of the byte entry holding a packed tensor.
pub const PACKED_SUFFIX: &str = ".packed";

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Model with every block linear replaced by its dequantized value.
    pub weights: ModelWeights<f32>,
    /// Packed block linears keyed by tensor name (`blocks.0.wq`, ...).
    pub packed: BTreeMap<String, PackedTensor>,
}

impl QuantizedModel {
    /// `quantized[k]` holds block `k`'s linears in [`LINEAR_NAMES`] order.
    pub fn from_parts(weights: &ModelWeights<f32>, quantized: &[Vec<Quantized<f32>>]) -> Result<Self> {
        let mut packed = BTreeMap::new();
        for (k, qs) in quantized.iter().enumerate() {
            for (name, q) in LINEAR_NAMES.iter().zip(qs) {
                let full = format!("blocks.{k}.{name}");
                packed.insert(full.clone(), PackedTensor::pack(full, q)?);
            }
        }
        Ok(Self {
            weights: weights.clone(),
            packed,
        })
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        for (name, t) in self.weights.named_tensors() {
            if !self.packed.contains_key(&name) {
                f.insert(name, t.clone());
            }
        }
        for (name, p) in &self.packed {
            let data = p.to_bytes()?;
            f.insert(
                format!("{name}{PACKED_SUFFIX}"),
                StoredTensor::U8 {
                    shape: vec![data.len()],
                    data,
                },
            );
        }
        f.metadata
            .insert("model_config".into(), serde_json::to_string(&self.weights.cfg)?);
        if let Some(p) = self.packed.values().next() {
            f.metadata.insert("quant_config".into(), p.cfg.to_string());
        }
        Ok(f)
    }

    /// Inverse of [`QuantizedModel::to_tensor_file`]; packed entries are
    /// dequantized into the float weights.
    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let mut unpacked = f.clone();
        let mut packed = BTreeMap::new();
        for (key, stored) in &f.tensors {
            let Some(name) = key.strip_suffix(PACKED_SUFFIX) else {
                continue;
            };
            let StoredTensor::U8 { data, .. } = stored else {
                return Err(format_err(key.clone(), "packed entry must hold bytes"));
            };
            let p = PackedTensor::from_bytes(data)?;
            if p.name != name {
                return Err(format_err(key.clone(), format!("header names `{}`", p.name)));
            }
            unpacked.tensors.remove(key);
            unpacked.insert(name.to_string(), p.dequantize()?);
            packed.insert(name.to_string(), p);
        }
        let weights = ModelWeights::from_tensor_file(&unpacked)?;
        Ok(Self { weights, packed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(path, &self.to_tensor_file()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&load_tensors(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_tensor_file()?.to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_init, ModelConfig};
    use crate::quant::{rtn, QuantConfig};

    #[test]
    fn round_trip_preserves_dequantized_weights() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 20,
            max_seq_len: 8,
            seed: 1,
        };
        let m = model_init::<f32>(&cfg).unwrap();
        let qcfg = QuantConfig::new(3, 6).unwrap();
        let mut deq = m.clone();
        let mut all = Vec::new();
        for (k, b) in m.blocks.iter().enumerate() {
            let qs: Vec<_> = b.linears().iter().map(|w| rtn(w, &qcfg).unwrap()).collect();
            for (name, q) in LINEAR_NAMES.iter().zip(&qs) {
                *deq.blocks[k].linear_mut(name).unwrap() = q.dequant.clone();
            }
            all.push(qs);
        }
        let qm = QuantizedModel::from_parts(&deq, &all).unwrap();
        assert_eq!(qm.packed.len(), 12);
        let bytes = qm.to_bytes().unwrap();
        let back = QuantizedModel::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, qm);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
