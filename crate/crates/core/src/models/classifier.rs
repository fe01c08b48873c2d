//! Target classifier: encoder `f` followed by an affine head `g`.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::encoder::{init_weight, Architecture, Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{softmax_rows, Graph, Optimizer, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub encoder: EncoderKind,
    pub feat_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { encoder: EncoderKind::Cnn, feat_dim: 64, epochs: 8, learning_rate: 3e-3, batch_size: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { epochs: 40, learning_rate: 1e-2, batch_size: 64, threshold: 0.3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub encoder: Encoder,
    /// `[feat_dim, classes]`.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub multilabel: bool,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ClassifierModel {
    pub fn init(arch: Architecture, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("classifier needs >= 2 classes, got {classes}")));
        }
        let encoder = Encoder::init(arch, rng::derive_seed(seed, rng::tag("encoder")))?;
        let mut r = rng::stream(seed, "head");
        let mut head_w = init_weight(&[arch.feat_dim, classes], false, &mut r);
        head_w = head_w.map(|v| v * 0.5);
        Ok(Self { encoder, head_w, head_b: Tensor::zeros(&[classes]), multilabel: false })
    }

    pub fn classes(&self) -> usize {
        self.head_b.numel()
    }

    pub fn feat_dim(&self) -> usize {
        self.encoder.arch.feat_dim
    }

    pub fn features(&self, images: &[&Image]) -> Result<Tensor> {
        self.encoder.forward(images)
    }

    /// `g` applied to a `[n, feat_dim]` feature matrix.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let (w, b) = (g.constant(self.head_w.clone()), g.constant(self.head_b.clone()));
        let out = head_graph(&mut g, f, w, b)?;
        Ok(g.value(out).clone())
    }

    pub fn logits(&self, images: &[&Image]) -> Result<Tensor> {
        self.head(&self.features(images)?)
    }

    /// Class probabilities: softmax, or per-class sigmoid for a multilabel head.
    pub fn probabilities(&self, logits: &Tensor) -> Tensor {
        if self.multilabel {
            logits.map(sigmoid)
        } else {
            Tensor::from_parts(logits.shape().to_vec(), softmax_rows(logits))
        }
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok((0..l.rows()).map(|i| argmax(l.row(i))).collect())
    }

    /// Classes whose sigmoid probability exceeds `threshold`.
    pub fn predict_set(&self, image: &Image, threshold: f64) -> Result<Vec<usize>> {
        let l = self.logits(&[image])?;
        Ok(l.row(0).iter().enumerate().filter(|(_, &z)| sigmoid(z) > threshold).map(|(c, _)| c).collect())
    }

    fn quantize(&mut self) {
        for p in self.encoder.params_mut() {
            p.quantize_f32();
        }
        self.head_w.quantize_f32();
        self.head_b.quantize_f32();
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let arch = json!({
            "model": "classifier",
            "encoder": self.encoder.arch,
            "classes": self.classes(),
            "multilabel": self.multilabel,
        });
        let mut ck = Checkpoint::new(arch, metadata);
        for (name, t) in self.encoder.named_params() {
            ck.push(format!("f.{name}"), t);
        }
        ck.push("g.w", &self.head_w);
        ck.push("g.b", &self.head_b);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let a = &ck.architecture;
        if a["model"] != "classifier" {
            return Err(Error::Checkpoint(format!("not a classifier checkpoint: {}", a["model"])));
        }
        let arch: Architecture = serde_json::from_value(a["encoder"].clone())?;
        let classes = a["classes"].as_u64().ok_or_else(|| Error::Checkpoint("missing class count".into()))? as usize;
        let encoder = Encoder::from_named(arch, |n, s| ck.expect(n, s), "f.")?;
        Ok(Self {
            encoder,
            head_w: ck.expect("g.w", &[arch.feat_dim, classes])?,
            head_b: ck.expect("g.b", &[classes])?,
            multilabel: a["multilabel"].as_bool().unwrap_or(false),
        })
    }
}

pub fn head_graph(g: &mut Graph, f: Var, w: Var, b: Var) -> Result<Var> {
    let z = g.matmul(f, w)?;
    g.add_bias(z, b)
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, step, loss })
    }
}

/// Mini-batch index order for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::seeded(rng::derive_seed(seed, epoch as u64)), &mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains `f` and `g` jointly with softmax cross-entropy. Returns the model and the per-epoch mean loss.
pub fn train_classifier(
    images: &[&Image],
    labels: &[usize],
    classes: usize,
    config: &ClassifierConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need a nonempty dataset with one label per image ({} images, {} labels)",
            images.len(),
            labels.len()
        )));
    }
    let side = images[0].height();
    let arch = match config.encoder {
        EncoderKind::Cnn => Architecture::cnn(side, config.feat_dim),
        EncoderKind::Mlp => Architecture::mlp(side, config.feat_dim),
    };
    let mut model = ClassifierModel::init(arch, classes, config.seed)?;
    let mut opt = Optimizer::adam(
        config.learning_rate,
        model.encoder.params().iter().chain([&model.head_w, &model.head_b]),
    );
    let batch_seed = rng::derive_seed(config.seed, rng::tag("batches"));
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(images.len(), config.batch_size, batch_seed, epoch) {
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = model.encoder.bind(&mut g, true);
            let (w, b) = (g.param(&model.head_w), g.param(&model.head_b));
            let x = g.constant(Image::batch(&batch)?);
            let f = model.encoder.forward_graph(&mut g, &p, x)?;
            let z = head_graph(&mut g, f, w, b)?;
            let loss = g.softmax_cross_entropy(z, &ys)?;
            let lv = g.value(loss).item();
            check_loss(lv, epoch, step)?;
            let mut grads = g.backward(loss).map_err(|_| Error::Diverged { epoch, step, loss: lv })?;
            let gs: Vec<Tensor> =
                p.iter().chain([&w, &b]).map(|v| grads.take(*v).expect("bound leaf")).collect();
            opt.step(model.encoder.params_mut().chain([&mut model.head_w, &mut model.head_b]).collect(), &gs)?;
            total += lv * idx.len() as f64;
            step += 1;
        }
        curve.push(total / images.len() as f64);
        log::debug!("classifier epoch {epoch}: loss {:.4}", curve[epoch]);
    }
    model.quantize();
    Ok((model, curve))
}

/// Retrains only `g` with per-class sigmoid cross-entropy on multi-hot labels; `f` stays frozen.
pub fn finetune_multilabel_head(
    model: &ClassifierModel,
    images: &[&Image],
    labels: &[Vec<usize>],
    config: &HeadConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument("multilabel fine-tuning needs one label set per image".into()));
    }
    let c = model.classes();
    let feats = model.features(images)?;
    let mut targets = vec![0.0; images.len() * c];
    for (i, ls) in labels.iter().enumerate() {
        for &l in ls {
            if l >= c {
                return Err(Error::InvalidArgument(format!("label {l} with {c} classes")));
            }
            targets[i * c + l] = 1.0;
        }
    }
    let mut out = model.clone();
    out.multilabel = true;
    let mut opt = Optimizer::adam(config.learning_rate, [&out.head_w, &out.head_b]);
    let d = model.feat_dim();
    let batch_seed = rng::derive_seed(config.seed, rng::tag("head-batches"));
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(images.len(), config.batch_size, batch_seed, epoch) {
            let fx: Vec<f64> = idx.iter().flat_map(|&i| feats.row(i).iter().copied()).collect();
            let ty: Vec<f64> = idx.iter().flat_map(|&i| targets[i * c..(i + 1) * c].iter().copied()).collect();
            let mut g = Graph::new();
            let f = g.constant(Tensor::new(&[idx.len(), d], fx)?);
            let (w, b) = (g.param(&out.head_w), g.param(&out.head_b));
            let z = head_graph(&mut g, f, w, b)?;
            let loss = g.bce_with_logits(z, &Tensor::new(&[idx.len(), c], ty)?)?;
            let lv = g.value(loss).item();
            check_loss(lv, epoch, step)?;
            let mut grads = g.backward(loss)?;
            let gs = vec![grads.take(w).expect("leaf"), grads.take(b).expect("leaf")];
            opt.step(vec![&mut out.head_w, &mut out.head_b], &gs)?;
            total += lv * idx.len() as f64;
            step += 1;
        }
        curve.push(total / images.len() as f64);
    }
    out.head_w.quantize_f32();
    out.head_b.quantize_f32();
    Ok((out, curve))
}
