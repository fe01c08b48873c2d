//! Image encoders shared by the classifier and the embedder image tower.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::numerics::{Graph, Tensor, Var};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Mlp,
}

/// Encoder shape. The CNN is two stride-2 3×3 conv ReLU blocks followed by a
/// global average pool, so its features are area-weighted means of local
/// responses; the MLP is two dense ReLU layers on raw pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: EncoderKind,
    pub side: usize,
    /// Conv channels (CNN, the second equals `feat_dim`) or hidden units (MLP, first entry only).
    pub widths: [usize; 2],
    pub feat_dim: usize,
}

impl Architecture {
    pub fn cnn(side: usize, feat_dim: usize) -> Self {
        Self { kind: EncoderKind::Cnn, side, widths: [16, feat_dim], feat_dim }
    }

    pub fn mlp(side: usize, feat_dim: usize) -> Self {
        Self { kind: EncoderKind::Mlp, side, widths: [128, 0], feat_dim }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2] = self.widths;
        match self.kind {
            EncoderKind::Cnn => vec![
                ("conv1.w", vec![c1, CHANNELS, 3, 3]),
                ("conv1.b", vec![c1]),
                ("conv2.w", vec![c2, c1, 3, 3]),
                ("conv2.b", vec![c2]),
            ],
            EncoderKind::Mlp => vec![
                ("fc1.w", vec![CHANNELS * self.side * self.side, c1]),
                ("fc1.b", vec![c1]),
                ("fc2.w", vec![c1, self.feat_dim]),
                ("fc2.b", vec![self.feat_dim]),
            ],
        }
    }
}

/// He-normal weight (fan-in from all but the leading dim for conv, the leading dim for dense).
pub(crate) fn init_weight(shape: &[usize], conv: bool, r: &mut rng::Rng) -> Tensor {
    let fan_in: usize = if conv { shape[1..].iter().product() } else { shape[0] };
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| std * rng::normal(r)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub arch: Architecture,
    params: Vec<Tensor>,
}

impl Encoder {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let cnn_mismatch = arch.kind == EncoderKind::Cnn && arch.widths[1] != arch.feat_dim;
        if arch.side < 8 || arch.feat_dim == 0 || arch.widths[0] == 0 || cnn_mismatch {
            return Err(Error::InvalidArgument(format!("bad encoder architecture {arch:?}")));
        }
        let mut r = rng::seeded(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    init_weight(&shape, shape.len() == 4, &mut r)
                }
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn from_named(arch: Architecture, lookup: impl Fn(&str, &[usize]) -> Result<Tensor>, prefix: &str) -> Result<Self> {
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| lookup(&format!("{prefix}{name}"), &shape))
            .collect::<Result<_>>()?;
        Ok(Self { arch, params })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        self.arch.param_shapes().into_iter().map(|(n, _)| n).zip(&self.params).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut()
    }

    /// Adds the parameters to `g` as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// `x: [b, 3, side, side]` → features `[b, feat_dim]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_graph_parts(g, p, x)?.1)
    }

    /// Returns a smooth ascent handle for each feature together with the features.
    ///
    /// For the MLP the handle is the last pre-ReLU layer. CNN features are
    /// pooled means that stay differentiable wherever any position is active,
    /// so the features serve as their own handle.
    pub fn forward_graph_parts(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let b = g.value(x).shape()[0];
        let pre = match self.arch.kind {
            EncoderKind::Cnn => {
                let h = g.conv2d(x, p[0], p[1], 2, 1)?;
                let h = g.relu(h);
                let h = g.conv2d(h, p[2], p[3], 2, 1)?;
                let h = g.relu(h);
                let f = g.global_avg_pool(h)?;
                return Ok((f, f));
            }
            EncoderKind::Mlp => {
                let s = self.arch.side;
                let h = g.reshape(x, &[b, CHANNELS * s * s])?;
                let h = g.matmul(h, p[0])?;
                let h = g.add_bias(h, p[1])?;
                let h = g.relu(h);
                let h = g.matmul(h, p[2])?;
                g.add_bias(h, p[3])?
            }
        };
        Ok((pre, g.relu(pre)))
    }

    /// Inference on a list of images, chunked and run data-parallel.
    pub fn forward(&self, images: &[&Image]) -> Result<Tensor> {
        batched_rows(images, self.arch.feat_dim, |chunk| {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let x = g.constant(Image::batch(chunk)?);
            let f = self.forward_graph(&mut g, &p, x)?;
            g.check()?;
            Ok(g.value(f).clone())
        })
    }
}

pub(crate) const INFER_CHUNK: usize = 64;

/// Runs `f` over fixed-size chunks of `images` in parallel and concatenates the row blocks in order.
pub(crate) fn batched_rows(
    images: &[&Image],
    width: usize,
    f: impl Fn(&[&Image]) -> Result<Tensor> + Sync + Send,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to encode".into()));
    }
    let chunks: Vec<&[&Image]> = images.chunks(INFER_CHUNK).collect();
    let blocks = par::try_map_range(chunks.len(), |i| f(chunks[i]))?;
    let mut data = Vec::with_capacity(images.len() * width);
    for b in blocks {
        data.extend(b.into_data());
    }
    Tensor::new(&[images.len(), width], data)
}
