//! Concept-image synthesis by phase-only optimization under a fixed magnitude spectrum.
//!
//! Each channel of the pre-squash image is `Re(idft2(M ⊙ e^{iφ}))` with `M`
//! fixed. The free parameter is an unconstrained grid `θ`; the phase is its
//! antisymmetric part `φ(k) = (θ(k) − θ(−k)) / 2`, which makes the spectrum
//! Hermitian so the inverse is exactly real and `|dft2(image)| = M` holds by
//! construction. The pre-squash image is mapped to `[0, 1]` by a fixed
//! sigmoid. Optimization maximizes the objective minus a total-variation
//! penalty with Adam and returns the best iterate seen.

use serde::{Deserialize, Serialize};

use crate::attribution::{NeuronSelection, Space};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::models::ClassifierModel;
use crate::numerics::dft::conjugate_index;
use crate::numerics::{adam_step, DftBasis, Graph, OptimizerState, Tensor, Var};
use crate::rng;
use crate::sae::SparseAutoencoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeSource {
    /// Mean magnitude spectrum of the training images.
    Dataset,
    /// Analytic `1/f` falloff matched to the training-set mean and spread.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VizConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight of the total-variation penalty.
    pub lambda: f64,
    pub magnitude: MagnitudeSource,
    /// Slope of the output sigmoid `σ(gain · (v − 0.5))`.
    pub squash_gain: f64,
    pub seed: u64,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            iterations: 512,
            learning_rate: 0.05,
            lambda: 1e-3,
            magnitude: MagnitudeSource::Dataset,
            squash_gain: 6.0,
            seed: 0,
        }
    }
}

impl VizConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.lambda < 0.0 || self.learning_rate <= 0.0 || self.squash_gain <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid visualization config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptImage {
    pub image: Image,
    pub class: usize,
    pub neurons: Vec<usize>,
    pub space: Space,
    /// Criterion value at every iteration (before that iteration's update).
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

impl ConceptImage {
    pub fn criterion(&self) -> f64 {
        self.trace[self.best_iteration]
    }

    /// Sidecar metadata for an exported concept image.
    pub fn sidecar(&self, config: &VizConfig) -> serde_json::Value {
        serde_json::json!({
            "class": self.class,
            "neurons": self.neurons,
            "space": self.space,
            "config": config,
            "criterion": self.criterion(),
            "best_iteration": self.best_iteration,
        })
    }
}

/// A differentiable criterion on a `[1, 3, H, W]` image.
pub trait Objective: Sync {
    /// Returns `(criterion, surrogate)`: the reported value and the scalar whose
    /// gradient drives the ascent. They coincide for objectives without masking.
    fn evaluate(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    fn evaluate(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let v = self(g, image)?;
        Ok((v, v))
    }
}

/// Summed activation of selected neurons: raw features, or SAE code entries.
///
/// The ascent follows the neurons' pre-activations (before the feature ReLU,
/// or before TopK in SAE space); the reported criterion is the masked value.
/// This keeps a gradient when a selected unit is currently switched off.
pub struct NeuronObjective<'a> {
    pub model: &'a ClassifierModel,
    pub sae: Option<&'a SparseAutoencoder>,
    pub neurons: &'a [usize],
}

impl Objective for NeuronObjective<'_> {
    fn evaluate(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let p = self.model.encoder.bind(g, false);
        let (pre, f) = self.model.encoder.forward_graph_parts(g, &p, image)?;
        let (active, drive) = match self.sae {
            None => (f, pre),
            Some(s) => {
                let v = s.bind(g, false);
                let a = s.pre_activation_graph(g, &v, f)?;
                (g.topk_rows(a, s.k)?, a)
            }
        };
        let crit = g.select_cols(active, self.neurons)?;
        let surr = g.select_cols(drive, self.neurons)?;
        Ok((g.sum(crit), g.sum(surr)))
    }
}

/// Elementwise mean of `|dft2|` per channel, `[3, H, W]`.
pub fn mean_magnitude_spectrum(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image set".into()))?;
    let (h, w) = (first.height(), first.width());
    let basis = DftBasis::new(h, w)?;
    let mut acc = vec![0.0; CHANNELS * h * w];
    for im in images {
        if (im.height(), im.width()) != (h, w) {
            return Err(Error::Shape("images must share a size".into()));
        }
        for c in 0..CHANNELS {
            let mag = basis.forward(&im.channel(c))?.magnitude();
            for (a, m) in acc[c * h * w..(c + 1) * h * w].iter_mut().zip(mag) {
                *a += m;
            }
        }
    }
    let n = images.len() as f64;
    Tensor::new(&[CHANNELS, h, w], acc.into_iter().map(|v| v / n).collect())
}

/// `1/f` magnitude with DC set to `H·W·mean[c]` and total AC energy matching pixel std `std`.
pub fn inverse_frequency_spectrum(height: usize, width: usize, mean: [f64; 3], std: f64) -> Result<Tensor> {
    if height == 0 || width == 0 || std < 0.0 {
        return Err(Error::InvalidArgument("bad spectrum parameters".into()));
    }
    let hw = (height * width) as f64;
    let falloff: Vec<f64> = (0..height)
        .flat_map(|u| {
            (0..width).map(move |v| {
                let fu = u.min(height - u) as f64;
                let fv = v.min(width - v) as f64;
                1.0 / (fu * fu + fv * fv).sqrt().max(1.0)
            })
        })
        .collect();
    let energy: f64 = falloff.iter().skip(1).map(|f| f * f).sum();
    let scale = if energy > 0.0 { hw * std / energy.sqrt() } else { 0.0 };
    let mut data = Vec::with_capacity(CHANNELS * height * width);
    for m in mean {
        data.push(hw * m);
        data.extend(falloff.iter().skip(1).map(|f| scale * f));
    }
    Tensor::new(&[CHANNELS, height, width], data)
}

/// Result of a raw optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct VizRun {
    pub image: Image,
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

fn total_variation(g: &mut Graph, img: Var, h: usize, w: usize) -> Result<Var> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..CHANNELS {
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                if y + 1 < h {
                    a.push(base + (y + 1) * w + x);
                    b.push(base + y * w + x);
                }
                if x + 1 < w {
                    a.push(base + y * w + x + 1);
                    b.push(base + y * w + x);
                }
            }
        }
    }
    let n = a.len();
    let ga = g.gather(img, a, &[n])?;
    let gb = g.gather(img, b, &[n])?;
    let d = g.sub(ga, gb)?;
    let d = g.abs(d);
    Ok(g.sum(d))
}

/// Called with the iteration index and the pre-squash image.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Phase optimization of `objective` under `magnitude` (`[3, H, W]`).
///
/// `observer` sees the pre-squash image of every iteration.
pub fn optimize(
    objective: &dyn Objective,
    magnitude: &Tensor,
    config: &VizConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<VizRun> {
    config.validate()?;
    let &[CHANNELS, h, w] = magnitude.shape() else {
        return Err(Error::Shape(format!("magnitude must be [3,H,W], got {:?}", magnitude.shape())));
    };
    let basis = DftBasis::new(h, w)?;
    let conj = conjugate_index(h, w);
    let conj3: Vec<usize> = (0..CHANNELS).flat_map(|c| conj.iter().map(move |&k| c * h * w + k)).collect();
    // Exact Hermitian symmetry of the magnitude keeps the inverse real to rounding.
    let sym: Vec<f64> =
        magnitude.data().iter().zip(&conj3).map(|(m, &k)| 0.5 * (m + magnitude.data()[k])).collect();
    let mag = Tensor::new(&[CHANNELS, h, w], sym)?;

    let mut r = rng::stream(config.seed, "phase");
    let theta0 = (0..CHANNELS * h * w).map(|_| rng::uniform(&mut r, -std::f64::consts::PI, std::f64::consts::PI));
    let mut theta = Tensor::new(&[CHANNELS, h, w], theta0.collect())?;
    let mut state = OptimizerState::adam(config.learning_rate, theta.numel());

    let mut trace = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, Tensor)> = None;
    for it in 0..config.iterations {
        let mut g = Graph::new();
        let th = g.param(&theta);
        let th_conj = g.gather(th, conj3.clone(), &[CHANNELS, h, w])?;
        let diff = g.sub(th, th_conj)?;
        let phi = g.scale(diff, 0.5);
        let (cos, sin) = (g.cos(phi), g.sin(phi));
        let m = g.constant(mag.clone());
        let re = g.mul(m, cos)?;
        let im = g.mul(m, sin)?;
        let pre = basis.inverse_real_on_graph(&mut g, re, im)?;
        if let Some(obs) = observer.as_mut() {
            obs(it, g.value(pre));
        }
        let centered = g.add_scalar(pre, -0.5);
        let scaled = g.scale(centered, config.squash_gain);
        let img = g.sigmoid(scaled);
        let batch = g.reshape(img, &[1, CHANNELS, h, w])?;
        let (crit, surrogate) = objective.evaluate(&mut g, batch)?;
        let cv = g.value(crit).item();
        if !cv.is_finite() || g.check().is_err() {
            return Err(Error::VizDiverged { iteration: it });
        }
        trace.push(cv);
        if best.as_ref().is_none_or(|(b, _)| cv > trace[*b]) {
            best = Some((it, g.value(img).clone()));
        }
        let tv = total_variation(&mut g, img, h, w)?;
        let gain = g.scale(surrogate, -1.0);
        let penalty = g.scale(tv, config.lambda);
        let loss = g.add(gain, penalty)?;
        let mut grads = g.backward(loss).map_err(|_| Error::VizDiverged { iteration: it })?;
        let grad = grads.take(th).expect("phase leaf");
        adam_step(&mut state, &mut theta, &grad)?;
    }
    let (best_iteration, img) = best.expect("at least one iteration");
    Ok(VizRun { image: Image::from_tensor(&img)?, trace, best_iteration })
}

/// Concept image for `selection` in raw space, or SAE space when `sae` is given.
pub fn synthesize(
    model: &ClassifierModel,
    sae: Option<&SparseAutoencoder>,
    selection: &NeuronSelection,
    magnitude: &Tensor,
    config: &VizConfig,
) -> Result<ConceptImage> {
    let dim = sae.map_or(model.feat_dim(), SparseAutoencoder::dict_dim);
    if let Some(&bad) = selection.indices.iter().find(|&&j| j >= dim) {
        return Err(Error::InvalidArgument(format!("neuron {bad} out of range {dim}")));
    }
    let objective = NeuronObjective { model, sae, neurons: &selection.indices };
    let run = optimize(&objective, magnitude, config, None)?;
    Ok(ConceptImage {
        image: run.image,
        class: selection.class,
        neurons: selection.indices.clone(),
        space: if sae.is_some() { Space::Sae } else { Space::Raw },
        trace: run.trace,
        best_iteration: run.best_iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dft2;

    fn quick(iterations: usize) -> VizConfig {
        VizConfig { iterations, ..Default::default() }
    }

    fn mean_probe() -> impl Fn(&mut Graph, Var) -> Result<Var> + Sync {
        |g: &mut Graph, x: Var| Ok(g.mean(x))
    }

    #[test]
    fn constant_image_spectrum_is_dc_only() {
        let img = Image::filled(8, 8, [0.5, 0.25, 1.0]);
        let m = mean_magnitude_spectrum(&[&img]).unwrap();
        for c in 0..3 {
            let ch = &m.data()[c * 64..(c + 1) * 64];
            assert!((ch[0] - 64.0 * [0.5, 0.25, 1.0][c]).abs() < 1e-9);
            assert!(ch[1..].iter().all(|v| v.abs() < 1e-9));
        }
        assert!(mean_magnitude_spectrum(&[]).is_err());
    }

    #[test]
    fn mean_spectrum_of_symmetric_pair_matches_two_image_average() {
        let mut a = Image::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 0..8 {
                let v = ((x * 3 + y * 5) % 7) as f64 / 7.0;
                a.set_pixel(y, x, [v, 1.0 - v, v * v]);
            }
        }
        let b_data: Vec<f64> = a.data().iter().map(|v| 1.0 - v).collect();
        let b = Image::new(8, 8, b_data).unwrap();
        let m = mean_magnitude_spectrum(&[&a, &b]).unwrap();
        for c in 0..3 {
            let ma = dft2(&a.channel(c)).unwrap().magnitude();
            let mb = dft2(&b.channel(c)).unwrap().magnitude();
            for k in 0..64 {
                assert!((m.data()[c * 64 + k] - 0.5 * (ma[k] + mb[k])).abs() < 1e-9);
            }
            // Away from DC, 1 − g has the same magnitude as g.
            for k in 1..64 {
                assert!((ma[k] - mb[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn magnitude_is_preserved_every_iteration() {
        let mag = inverse_frequency_spectrum(8, 8, [0.4, 0.5, 0.6], 0.2).unwrap();
        let mut worst = 0.0f64;
        let mut obs = |_: usize, pre: &Tensor| {
            for c in 0..3 {
                let ch = Tensor::new(&[8, 8], pre.data()[c * 64..(c + 1) * 64].to_vec()).unwrap();
                for (a, b) in dft2(&ch).unwrap().magnitude().iter().zip(&mag.data()[c * 64..(c + 1) * 64]) {
                    worst = worst.max((a - b).abs());
                }
            }
        };
        optimize(&mean_probe(), &mag, &quick(20), Some(&mut obs)).unwrap();
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn mean_intensity_probe_increases() {
        let mag = inverse_frequency_spectrum(8, 8, [0.5; 3], 0.25).unwrap();
        let run = optimize(&mean_probe(), &mag, &quick(60), None).unwrap();
        assert!(run.trace[run.best_iteration] > run.trace[0]);
        assert_eq!(run.trace.len(), 60);
        let max = run.trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(run.trace[run.best_iteration], max);
        assert!((run.image.mean_intensity() - max).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mag = inverse_frequency_spectrum(8, 8, [0.5; 3], 0.25).unwrap();
        let a = optimize(&mean_probe(), &mag, &quick(10), None).unwrap();
        let b = optimize(&mean_probe(), &mag, &quick(10), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_objective_reports_iteration() {
        let mag = inverse_frequency_spectrum(8, 8, [0.5; 3], 0.25).unwrap();
        let bad = |g: &mut Graph, x: Var| {
            let m = g.mean(x);
            let s = g.add_scalar(m, -10.0);
            Ok(g.log(s))
        };
        match optimize(&bad, &mag, &quick(5), None) {
            Err(Error::VizDiverged { iteration }) => assert_eq!(iteration, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
