//! TopK sparse autoencoder over classifier features.
//!
//! `encode(x) = TopK(W_enc (x − b_pre))` and `decode(z) = W_dec z` (no bias on
//! decode). Training minimizes mean squared reconstruction error with Adam,
//! renormalizing decoder columns to unit length after every step.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::models::Checkpoint;
use crate::numerics::{topk_indices, Graph, Optimizer, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub expansion: usize,
    /// Fraction of dictionary entries kept; `K = ceil(ratio × dict_dim)`.
    pub topk_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Upper bound on the batch size; the batch is `min(batch_size, n)`.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self { expansion: 8, topk_ratio: 0.10, learning_rate: 5e-4, epochs: 10, batch_size: 1024, seed: 0 }
    }
}

impl SaeConfig {
    pub fn dict_dim(&self, feat_dim: usize) -> usize {
        self.expansion * feat_dim
    }

    pub fn k(&self, feat_dim: usize) -> usize {
        let dict = self.dict_dim(feat_dim);
        ((self.topk_ratio * dict as f64 - 1e-9).ceil() as usize).clamp(1, dict)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder {
    /// `[dict_dim, feat_dim]`.
    pub w_enc: Tensor,
    pub b_pre: Tensor,
    /// `[feat_dim, dict_dim]`.
    pub w_dec: Tensor,
    pub k: usize,
}

impl SparseAutoencoder {
    /// Random unit-norm decoder columns, encoder tied to the decoder transpose, `b_pre` as given.
    pub fn init(feat_dim: usize, dict_dim: usize, k: usize, b_pre: Tensor, seed: u64) -> Result<Self> {
        if k == 0 || k > dict_dim || feat_dim == 0 {
            return Err(Error::InvalidArgument(format!("bad sae dims feat {feat_dim}, dict {dict_dim}, k {k}")));
        }
        if b_pre.shape() != [feat_dim] {
            return Err(Error::Shape(format!("b_pre {:?} for feature dim {feat_dim}", b_pre.shape())));
        }
        let mut r = rng::seeded(seed);
        let data = (0..feat_dim * dict_dim).map(|_| rng::normal(&mut r)).collect();
        let mut w_dec = Tensor::new(&[feat_dim, dict_dim], data)?;
        normalize_columns(&mut w_dec);
        Ok(Self { w_enc: w_dec.transpose(), b_pre, w_dec, k })
    }

    pub fn feat_dim(&self) -> usize {
        self.b_pre.numel()
    }

    pub fn dict_dim(&self) -> usize {
        self.w_enc.shape()[0]
    }

    fn check_feature(&self, len: usize) -> Result<()> {
        if len != self.feat_dim() {
            return Err(Error::Shape(format!("feature of dim {len}, sae expects {}", self.feat_dim())));
        }
        Ok(())
    }

    /// Pre-TopK activations `W_enc (x − b_pre)`.
    pub fn pre_activation(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature.len())?;
        let d = self.feat_dim();
        let centered: Vec<f64> = feature.iter().zip(self.b_pre.data()).map(|(x, b)| x - b).collect();
        Ok((0..self.dict_dim())
            .map(|j| self.w_enc.data()[j * d..(j + 1) * d].iter().zip(&centered).map(|(w, c)| w * c).sum())
            .collect())
    }

    pub fn encode(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let pre = self.pre_activation(feature)?;
        let mut code = vec![0.0; pre.len()];
        for j in topk_indices(&pre, self.k) {
            code[j] = pre[j];
        }
        Ok(code)
    }

    pub fn decode(&self, code: &[f64]) -> Result<Vec<f64>> {
        let m = self.dict_dim();
        if code.len() != m {
            return Err(Error::Shape(format!("code of dim {}, sae expects {m}", code.len())));
        }
        Ok((0..self.feat_dim())
            .map(|i| self.w_dec.data()[i * m..(i + 1) * m].iter().zip(code).map(|(w, z)| w * z).sum())
            .collect())
    }

    /// Row-wise encode of a `[n, feat_dim]` matrix.
    pub fn encode_rows(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let z = self.encode_graph(&mut g, &v, x)?;
        Ok(g.value(z).clone())
    }

    pub fn reconstruct_rows(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let z = self.encode_graph(&mut g, &v, x)?;
        let r = self.decode_graph(&mut g, &v, z)?;
        Ok(g.value(r).clone())
    }

    /// Binds `[w_enc, b_pre, w_dec]`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> [Var; 3] {
        [
            g.leaf(self.w_enc.clone(), trainable),
            g.leaf(self.b_pre.clone(), trainable),
            g.leaf(self.w_dec.clone(), trainable),
        ]
    }

    /// Pre-TopK activations of `[n, feat_dim]` rows on the graph.
    pub fn pre_activation_graph(&self, g: &mut Graph, v: &[Var; 3], x: Var) -> Result<Var> {
        let neg_b = g.scale(v[1], -1.0);
        let centered = g.add_bias(x, neg_b)?;
        let wt = g.transpose(v[0])?;
        g.matmul(centered, wt)
    }

    pub fn encode_graph(&self, g: &mut Graph, v: &[Var; 3], x: Var) -> Result<Var> {
        let pre = self.pre_activation_graph(g, v, x)?;
        g.topk_rows(pre, self.k)
    }

    pub fn decode_graph(&self, g: &mut Graph, v: &[Var; 3], code: Var) -> Result<Var> {
        let wt = g.transpose(v[2])?;
        g.matmul(code, wt)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let arch = json!({"model": "sae", "feat_dim": self.feat_dim(), "dict_dim": self.dict_dim(), "k": self.k});
        let mut ck = Checkpoint::new(arch, metadata);
        ck.push("w_enc", &self.w_enc);
        ck.push("b_pre", &self.b_pre);
        ck.push("w_dec", &self.w_dec);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let a = &ck.architecture;
        if a["model"] != "sae" {
            return Err(Error::Checkpoint(format!("not an sae checkpoint: {}", a["model"])));
        }
        let dim = |key: &str| {
            a[key].as_u64().map(|v| v as usize).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))
        };
        let (d, m, k) = (dim("feat_dim")?, dim("dict_dim")?, dim("k")?);
        Ok(Self {
            w_enc: ck.expect("w_enc", &[m, d])?,
            b_pre: ck.expect("b_pre", &[d])?,
            w_dec: ck.expect("w_dec", &[d, m])?,
            k,
        })
    }
}

/// Rescales every column of a `[rows, cols]` matrix to unit length (zero columns are left alone).
pub fn normalize_columns(w: &mut Tensor) {
    let (r, c) = (w.rows(), w.cols());
    let data = w.data_mut();
    for j in 0..c {
        let norm = (0..r).map(|i| data[i * c + j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..r {
                data[i * c + j] /= norm;
            }
        }
    }
}

fn column_means(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in m.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    Tensor::vector(m.into_iter().map(|s| s / n as f64).collect())
}

/// Mean over dimensions of the per-dimension variance.
pub fn mean_variance(x: &Tensor) -> f64 {
    let mu = column_means(x);
    let (n, d) = (x.rows(), x.cols());
    (0..n).map(|i| x.row(i).iter().zip(mu.data()).map(|(v, m)| (v - m).powi(2)).sum::<f64>()).sum::<f64>()
        / (n * d) as f64
}

/// Mean squared reconstruction error per element.
pub fn reconstruction_mse(sae: &SparseAutoencoder, features: &Tensor) -> Result<f64> {
    let r = sae.reconstruct_rows(features)?;
    Ok(r.data().iter().zip(features.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.numel() as f64)
}

/// Rescales the encoder so the initial reconstruction has the least-squares gain on `features`.
///
/// With tied unit-norm weights the reconstruction overshoots by roughly
/// `k / feat_dim`; TopK selection is invariant to a positive scale, so a
/// single scalar fixes the gain without changing which latents fire.
fn calibrate_encoder_scale(sae: &mut SparseAutoencoder, features: &Tensor) -> Result<()> {
    let rows = features.rows().min(1024);
    let d = features.cols();
    let sample = Tensor::new(&[rows, d], features.data()[..rows * d].to_vec())?;
    let r = sae.reconstruct_rows(&sample)?;
    let mut dot = 0.0;
    let mut norm = 0.0;
    for i in 0..rows {
        for ((x, b), y) in sample.row(i).iter().zip(sae.b_pre.data()).zip(r.row(i)) {
            dot += (x - b) * y;
            norm += y * y;
        }
    }
    if norm > 0.0 && dot > 0.0 {
        let c = dot / norm;
        sae.w_enc.data_mut().iter_mut().for_each(|w| *w *= c);
    }
    Ok(())
}

/// Trains on a `[n, feat_dim]` feature matrix. Returns the model and per-epoch mean training MSE.
pub fn train_sae(features: &Tensor, config: &SaeConfig) -> Result<(SparseAutoencoder, Vec<f64>)> {
    if features.rank() != 2 || !features.all_finite() {
        return Err(Error::InvalidArgument("sae training needs a finite [n, d] feature matrix".into()));
    }
    let (n, d) = (features.rows(), features.cols());
    let dict = config.dict_dim(d);
    let mut sae = SparseAutoencoder::init(d, dict, config.k(d), column_means(features), config.seed)?;
    calibrate_encoder_scale(&mut sae, features)?;
    let batch = config.batch_size.min(n).max(1);
    let mut opt = Optimizer::adam(config.learning_rate, [&sae.w_enc, &sae.b_pre, &sae.w_dec]);
    let order_seed = rng::derive_seed(config.seed, rng::tag("sae-batches"));
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for idx in crate::models::classifier::epoch_batches(n, batch, order_seed, epoch) {
            let rows: Vec<f64> = idx.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
            let x_t = Tensor::new(&[idx.len(), d], rows)?;
            let mut g = Graph::new();
            let v = sae.bind(&mut g, true);
            let x = g.constant(x_t);
            let z = sae.encode_graph(&mut g, &v, x)?;
            let r = sae.decode_graph(&mut g, &v, z)?;
            let diff = g.sub(r, x)?;
            let sq = g.square(diff);
            let loss = g.mean(sq);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = v.iter().map(|&p| grads.take(p).expect("bound leaf")).collect();
            opt.step(vec![&mut sae.w_enc, &mut sae.b_pre, &mut sae.w_dec], &gs)?;
            normalize_columns(&mut sae.w_dec);
            total += lv * idx.len() as f64;
            step += 1;
        }
        curve.push(total / n as f64);
        log::debug!("sae epoch {epoch}: mse {:.3e}", curve[epoch]);
    }
    for t in [&mut sae.w_enc, &mut sae.b_pre, &mut sae.w_dec] {
        t.quantize_f32();
    }
    Ok((sae, curve))
}
