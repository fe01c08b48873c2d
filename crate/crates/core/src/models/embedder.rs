//! Two-tower joint image/text embedder trained with a symmetric contrastive loss.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::classifier::epoch_batches;
use super::encoder::{batched_rows, init_weight, Architecture, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Optimizer, Tensor, Var};
use crate::rng;

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Lowercased words split on whitespace and commas.
fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()).map(str::to_lowercase)
}

/// Word vocabulary; index 0 is the reserved unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = phrases
            .into_iter()
            .flat_map(|p| words(p).collect::<Vec<_>>())
            .collect();
        Self::from_tokens(set.into_iter())
    }

    fn from_tokens(tokens: impl Iterator<Item = String>) -> Self {
        let mut all = vec![UNKNOWN_TOKEN.to_string()];
        all.extend(tokens.filter(|t| t != UNKNOWN_TOKEN));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`; unknown words and the empty string map to the unknown token.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> =
            words(text).map(|t| *self.index.get(&t).unwrap_or(&0)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub joint_dim: usize,
    pub feat_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability that an image is paired with its distractor caption rather than its causal one.
    pub distractor_caption_prob: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            joint_dim: 32,
            feat_dim: 64,
            token_dim: 32,
            hidden: 64,
            temperature: 0.07,
            epochs: 8,
            learning_rate: 3e-3,
            batch_size: 64,
            distractor_caption_prob: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedder {
    pub image: Encoder,
    pub vocab: Vocabulary,
    pub temperature: f64,
    /// Image projection, text token table, text hidden and text projection, in that order.
    params: Vec<Tensor>,
}

const PARAM_NAMES: [&str; 7] = ["img.proj.w", "img.proj.b", "txt.tok", "txt.fc1.w", "txt.fc1.b", "txt.fc2.w", "txt.fc2.b"];

impl JointEmbedder {
    pub fn init(side: usize, vocab: Vocabulary, config: &EmbedderConfig) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::InvalidArgument("embedder vocabulary is empty".into()));
        }
        if config.temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let arch = Architecture::cnn(side, config.feat_dim);
        let image = Encoder::init(arch, rng::derive_seed(config.seed, rng::tag("img-tower")))?;
        let mut r = rng::stream(config.seed, "txt-tower");
        let (d, e, h) = (config.joint_dim, config.token_dim, config.hidden);
        let params = vec![
            init_weight(&[config.feat_dim, d], false, &mut r).map(|v| v * 0.5),
            Tensor::zeros(&[d]),
            init_weight(&[vocab.len(), e], false, &mut r).map(|v| v * 0.5),
            init_weight(&[e, h], false, &mut r),
            Tensor::zeros(&[h]),
            init_weight(&[h, d], false, &mut r).map(|v| v * 0.5),
            Tensor::zeros(&[d]),
        ];
        Ok(Self { image, vocab, temperature: config.temperature, params })
    }

    pub fn joint_dim(&self) -> usize {
        self.params[1].numel()
    }

    fn bind_rest(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    fn image_graph(&self, g: &mut Graph, enc: &[Var], rest: &[Var], x: Var) -> Result<Var> {
        let f = self.image.forward_graph(g, enc, x)?;
        let z = g.matmul(f, rest[0])?;
        let z = g.add_bias(z, rest[1])?;
        Ok(g.l2_normalize_rows(z))
    }

    /// Averaging matrix `[n, vocab]` selecting the mean token embedding of each text.
    fn bag_matrix(&self, texts: &[&str]) -> Tensor {
        let v = self.vocab.len();
        let mut m = vec![0.0; texts.len() * v];
        for (i, t) in texts.iter().enumerate() {
            let ids = self.vocab.encode(t);
            let w = 1.0 / ids.len() as f64;
            for id in ids {
                m[i * v + id] += w;
            }
        }
        Tensor::from_parts(vec![texts.len(), v], m)
    }

    fn text_graph(&self, g: &mut Graph, rest: &[Var], texts: &[&str]) -> Result<Var> {
        let bag = g.constant(self.bag_matrix(texts));
        let e = g.matmul(bag, rest[2])?;
        let h = g.matmul(e, rest[3])?;
        let h = g.add_bias(h, rest[4])?;
        let h = g.relu(h);
        let z = g.matmul(h, rest[5])?;
        let z = g.add_bias(z, rest[6])?;
        Ok(g.l2_normalize_rows(z))
    }

    /// Unit-norm image embeddings `[n, joint_dim]`.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor> {
        batched_rows(images, self.joint_dim(), |chunk| {
            let mut g = Graph::new();
            let enc = self.image.bind(&mut g, false);
            let rest = self.bind_rest(&mut g, false);
            let x = g.constant(Image::batch(chunk)?);
            let z = self.image_graph(&mut g, &enc, &rest, x)?;
            g.check()?;
            Ok(g.value(z).clone())
        })
    }

    /// Unit-norm text embeddings `[n, joint_dim]`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("no texts to embed".into()));
        }
        let mut g = Graph::new();
        let rest = self.bind_rest(&mut g, false);
        let z = self.text_graph(&mut g, &rest, texts)?;
        g.check()?;
        Ok(g.value(z).clone())
    }

    fn quantize(&mut self) {
        for p in self.image.params_mut().chain(self.params.iter_mut()) {
            p.quantize_f32();
        }
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let arch = json!({
            "model": "embedder",
            "encoder": self.image.arch,
            "joint_dim": self.joint_dim(),
            "temperature": self.temperature,
            "vocab": &self.vocab.tokens()[1..],
        });
        let mut ck = Checkpoint::new(arch, metadata);
        for (name, t) in self.image.named_params() {
            ck.push(format!("img.f.{name}"), t);
        }
        for (name, t) in PARAM_NAMES.iter().zip(&self.params) {
            ck.push(*name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let a = &ck.architecture;
        if a["model"] != "embedder" {
            return Err(Error::Checkpoint(format!("not an embedder checkpoint: {}", a["model"])));
        }
        let arch: Architecture = serde_json::from_value(a["encoder"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(a["vocab"].clone())?;
        let vocab = Vocabulary::from_tokens(tokens.into_iter());
        let temperature = a["temperature"].as_f64().ok_or_else(|| Error::Checkpoint("missing temperature".into()))?;
        let image = Encoder::from_named(arch, |n, s| ck.expect(n, s), "img.f.")?;
        let params = PARAM_NAMES.iter().map(|n| ck.tensor(n).cloned()).collect::<Result<Vec<_>>>()?;
        if params[2].shape()[0] != vocab.len() {
            return Err(Error::Checkpoint("token table does not match vocabulary".into()));
        }
        Ok(Self { image, vocab, temperature, params })
    }
}

/// Trains both towers on `(image, caption)` pairs. Returns the model and per-epoch mean loss.
///
/// The loss is symmetric cross-entropy over in-batch similarities divided by
/// the temperature. Identical captions within a batch are merged into one
/// candidate: image→text targets its caption, text→image spreads the target
/// uniformly over every image carrying it. `negatives` are extra phrases
/// appended to each batch's text candidates on the image→text side.
pub fn train_embedder(
    pairs: &[(&Image, &str)],
    vocab: Vocabulary,
    negatives: &[&str],
    config: &EmbedderConfig,
) -> Result<(JointEmbedder, Vec<f64>)> {
    if pairs.len() < 2 || config.batch_size < 2 {
        return Err(Error::InvalidArgument("contrastive training needs >= 2 pairs per batch".into()));
    }
    let side = pairs[0].0.height();
    let mut model = JointEmbedder::init(side, vocab, config)?;
    let mut opt = Optimizer::adam(config.learning_rate, model.image.params().iter().chain(&model.params));
    let batch_seed = rng::derive_seed(config.seed, rng::tag("pairs"));
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut counted = 0;
        for idx in epoch_batches(pairs.len(), config.batch_size, batch_seed, epoch) {
            if idx.len() < 2 {
                continue;
            }
            let imgs: Vec<&Image> = idx.iter().map(|&i| pairs[i].0).collect();
            let mut candidates: Vec<&str> = Vec::new();
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    let t = pairs[i].1;
                    candidates.iter().position(|c| *c == t).unwrap_or_else(|| {
                        candidates.push(t);
                        candidates.len() - 1
                    })
                })
                .collect();
            let unique = candidates.len();
            for n in negatives {
                if !candidates.contains(n) {
                    candidates.push(n);
                }
            }
            let mut spread = vec![0.0; unique * idx.len()];
            for u in 0..unique {
                let members: Vec<usize> = (0..idx.len()).filter(|&b| labels[b] == u).collect();
                for &b in &members {
                    spread[u * idx.len() + b] = 1.0 / members.len() as f64;
                }
            }
            let spread = Tensor::new(&[unique, idx.len()], spread)?;

            let mut g = Graph::new();
            let enc = model.image.bind(&mut g, true);
            let rest = model.bind_rest(&mut g, true);
            let x = g.constant(Image::batch(&imgs)?);
            let zi = model.image_graph(&mut g, &enc, &rest, x)?;
            let zt = model.text_graph(&mut g, &rest, &candidates)?;
            let zt_t = g.transpose(zt)?;
            let sim = g.matmul(zi, zt_t)?;
            let logits = g.scale(sim, 1.0 / model.temperature);
            let l_img = g.softmax_cross_entropy(logits, &labels)?;
            let own: Vec<usize> = (0..unique).collect();
            let caption_cols = g.select_cols(logits, &own)?;
            let logits_t = g.transpose(caption_cols)?;
            let l_txt = g.soft_cross_entropy(logits_t, &spread)?;
            let sum = g.add(l_img, l_txt)?;
            let loss = g.scale(sum, 0.5);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = enc.iter().chain(&rest).map(|v| grads.take(*v).expect("bound leaf")).collect();
            opt.step(model.image.params_mut().chain(model.params.iter_mut()).collect(), &gs)?;
            total += lv * idx.len() as f64;
            counted += idx.len();
            step += 1;
        }
        curve.push(total / counted.max(1) as f64);
        log::debug!("embedder epoch {epoch}: loss {:.4}", curve[epoch]);
    }
    model.quantize();
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> JointEmbedder {
        let vocab = Vocabulary::build(["red cross", "blue stripes"]);
        let cfg = EmbedderConfig { feat_dim: 8, joint_dim: 6, token_dim: 4, hidden: 5, ..Default::default() };
        JointEmbedder::init(16, vocab, &cfg).unwrap()
    }

    #[test]
    fn vocabulary_reserves_unknown() {
        let v = Vocabulary::build(["Red cross", "red square"]);
        assert_eq!(v.tokens(), &["<unk>", "cross", "red", "square"]);
        assert_eq!(v.encode(""), vec![0]);
        assert_eq!(v.encode("red zebra"), vec![2, 0]);
        assert!(Vocabulary::build([""]).is_empty());
    }

    #[test]
    fn towers_emit_unit_vectors() {
        let m = small_model();
        let t = m.embed_texts(&["", "red cross", "never seen"]).unwrap();
        for i in 0..3 {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let img = Image::filled(16, 16, [0.1, 0.8, 0.3]);
        let e = m.embed_images(&[&img]).unwrap();
        let c = crate::numerics::cosine(e.row(0), e.row(0));
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let cfg = EmbedderConfig::default();
        assert!(JointEmbedder::init(16, Vocabulary::build([]), &cfg).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = small_model();
        m.quantize();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint(json!({})).to_bytes().unwrap()).unwrap();
        let back = JointEmbedder::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn training_reduces_loss() {
        let red = Image::filled(16, 16, [0.9, 0.1, 0.1]);
        let blue = Image::filled(16, 16, [0.1, 0.1, 0.9]);
        let pairs: Vec<(&Image, &str)> =
            (0..16).map(|i| if i % 2 == 0 { (&red, "red cross") } else { (&blue, "blue stripes") }).collect();
        let vocab = Vocabulary::build(["red cross", "blue stripes"]);
        let cfg = EmbedderConfig { feat_dim: 8, joint_dim: 6, epochs: 15, batch_size: 8, ..Default::default() };
        let (m, curve) = train_embedder(&pairs, vocab, &[], &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let zi = m.embed_images(&[&red]).unwrap();
        let zt = m.embed_texts(&["red cross", "blue stripes"]).unwrap();
        assert!(crate::numerics::cosine(zi.row(0), zt.row(0)) > crate::numerics::cosine(zi.row(0), zt.row(1)));
    }
}
