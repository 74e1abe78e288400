// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

/// All weights, keyed by a stable path string such as `blocks.2.attn.h1.wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

pub(crate) fn block(layer: usize, rest: &str) -> String {
    format!("blocks.{layer}.{rest}")
}

pub(crate) fn head_param(layer: usize, head: usize, name: &str) -> String {
    format!("blocks.{layer}.attn.h{head}.{name}")
}

pub(crate) const HEAD_PARAMS: [&str; 7] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo"];
pub(crate) const MLP_PARAMS: [&str; 4] = ["w_in", "b_in", "w_out", "b_out"];

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

impl ModelParams {
    /// Random initialization: unit-normal embeddings, uniform(+-1/sqrt(fan_in))
    /// projections, identity layernorms.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh, dm, v) = (
            config.d_model,
            config.d_head,
            config.d_mlp,
            config.vocab_size,
        );
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();

        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let gauss = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        };
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new(-bound, bound).expect("valid bounds");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect())
        };

        tensors.insert("embed.tok".into(), gauss(&[v, d], &mut rng)?);
        tensors.insert(
            "embed.pos".into(),
            gauss(&[config.max_seq_len, d], &mut rng)?,
        );
        for l in 0..config.n_layers {
            for ln in ["ln1", "ln2"] {
                tensors.insert(block(l, &format!("{ln}.w")), Tensor::full(&[d], 1.0));
                tensors.insert(block(l, &format!("{ln}.b")), Tensor::zeros(&[d]));
            }
            for h in 0..config.n_heads {
                for w in ["wq", "wk", "wv"] {
                    tensors.insert(head_param(l, h, w), uniform(&[d, dh], d, &mut rng)?);
                }
                for b in ["bq", "bk", "bv"] {
                    tensors.insert(head_param(l, h, b), uniform(&[dh], d, &mut rng)?);
                }
                tensors.insert(head_param(l, h, "wo"), uniform(&[dh, d], d, &mut rng)?);
            }
            tensors.insert(block(l, "mlp.w_in"), uniform(&[d, dm], d, &mut rng)?);
            tensors.insert(block(l, "mlp.b_in"), uniform(&[dm], d, &mut rng)?);
            tensors.insert(block(l, "mlp.w_out"), uniform(&[dm, d], dm, &mut rng)?);
            tensors.insert(block(l, "mlp.b_out"), uniform(&[d], dm, &mut rng)?);
        }
        tensors.insert("ln_f.w".into(), Tensor::full(&[d], 1.0));
        tensors.insert("ln_f.b".into(), Tensor::zeros(&[d]));
        tensors.insert("unembed".into(), uniform(&[d, v], d, &mut rng)?);
        Ok(ModelParams {
            config: config.clone(),
            tensors: tensors.into_iter().map(|(k, t)| (k, Arc::new(t))).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .map(|t| &**t)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().map(|(k, t)| (k, &**t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, t)| (k, Arc::make_mut(t)))
    }

    pub(crate) fn iter_shared(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.tensors.iter()
    }

    pub fn paths(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Parameters owned by a graph node. Input, logits and layernorms own none.
    pub fn node_param_paths(&self, node: NodeId) -> Vec<String> {
        match node {
            NodeId::Head { layer, head } => HEAD_PARAMS
                .iter()
                .map(|p| head_param(layer, head, p))
                .collect(),
            NodeId::Mlp(layer) => MLP_PARAMS
                .iter()
                .map(|p| block(layer, &format!("mlp.{p}")))
                .collect(),
            NodeId::Input | NodeId::Logits => Vec::new(),
        }
    }

    /// Concatenates the listed tensors in order.
    pub fn flatten(&self, paths: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in paths {
            out.extend_from_slice(self.get(p)?.data());
        }
        Ok(out)
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn unflatten(&mut self, paths: &[String], flat: &[f64]) -> Result<()> {
        let total: usize = paths
            .iter()
            .map(|p| self.get(p).map(Tensor::len))
            .sum::<Result<usize>>()?;
        if total != flat.len() {
            return Err(Error::shape(
                "unflatten",
                format!("{} values for {total} parameters", flat.len()),
            ));
        }
        let mut offset = 0;
        for p in paths {
            let t = self.get_mut(p)?;
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.shape().to_vec()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut data = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for (path, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad(&format!("truncated data for `{path}`")));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            tensors.insert(path, Arc::new(Tensor::new(shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let params = ModelParams {
            config: header.config,
            tensors,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = ModelParams::init(&self.config, 0)?;
        for (k, t) in &reference.tensors {
            let got = self.get(k)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{k}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if self.tensors.len() != reference.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(())
    }
}
