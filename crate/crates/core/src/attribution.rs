//! Integrated-gradients contribution scores and top-neuron selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ClassifierModel;
use crate::numerics::{topk_indices, Graph, Tensor, Var};
use crate::par;
use crate::sae::SparseAutoencoder;

/// Which representation neurons are scored and selected in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Raw,
    Sae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub steps: usize,
    pub k_neu: usize,
    /// Path start; `None` means the zero vector of the chosen space.
    pub baseline: Option<Vec<f64>>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { steps: 100, k_neu: 6, baseline: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronSelection {
    pub class: usize,
    /// Selected indices in descending score order.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// `s_j = (z_j − z′_j) · (1/M) Σ_{m=1..M} ∂F/∂z_j (z′ + (m/M)(z − z′))`.
///
/// `head` maps a `[1, d]` input node to a scalar output node. Path points are
/// evaluated independently (possibly in parallel) and summed in ascending `m`.
pub fn integrated_gradients<F>(head: &F, z: &[f64], baseline: &[f64], steps: usize) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs M >= 1".into()));
    }
    if z.len() != baseline.len() {
        return Err(Error::Shape(format!("input dim {} vs baseline dim {}", z.len(), baseline.len())));
    }
    let d = z.len();
    let grads = par::try_map_range(steps, |i| {
        let alpha = (i + 1) as f64 / steps as f64;
        let point: Vec<f64> = baseline.iter().zip(z).map(|(b, x)| b + alpha * (x - b)).collect();
        let mut g = Graph::new();
        let input = g.leaf(Tensor::new(&[1, d], point)?, true);
        let out = head(&mut g, input)?;
        let mut grads = g.backward(out)?;
        let grad = grads.take(input).expect("input leaf");
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "integrated_gradients" });
        }
        Ok(grad.into_data())
    })?;
    let mut sum = vec![0.0; d];
    for g in &grads {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    Ok(sum.iter().zip(z).zip(baseline).map(|((s, x), b)| (x - b) * s / steps as f64).collect())
}

/// The `k_neu` highest-scoring indices, descending, ties by lowest index.
pub fn select_top_neurons(class: usize, scores: &[f64], k_neu: usize) -> Result<NeuronSelection> {
    if k_neu == 0 || k_neu > scores.len() {
        return Err(Error::InvalidArgument(format!("k_neu = {k_neu} with {} scores", scores.len())));
    }
    Ok(NeuronSelection { class, indices: topk_indices(scores, k_neu), scores: scores.to_vec() })
}

fn class_logit(g: &mut Graph, model: &ClassifierModel, feat: Var, class: usize) -> Result<Var> {
    let w = g.constant(model.head_w.clone());
    let b = g.constant(model.head_b.clone());
    let z = crate::models::classifier::head_graph(g, feat, w, b)?;
    let pick = g.select_cols(z, &[class])?;
    Ok(g.sum(pick))
}

/// `F_c(z) = [g(z)]_c` on raw features.
pub fn raw_head(model: &ClassifierModel, class: usize) -> impl Fn(&mut Graph, Var) -> Result<Var> + Sync + '_ {
    move |g, z| class_logit(g, model, z, class)
}

/// `F_c(ẑ) = [g(W_dec ẑ)]_c` on SAE codes.
pub fn sae_head<'a>(
    model: &'a ClassifierModel,
    sae: &'a SparseAutoencoder,
    class: usize,
) -> impl Fn(&mut Graph, Var) -> Result<Var> + Sync + 'a {
    move |g, code| {
        let wt = g.constant(sae.w_dec.transpose());
        let feat = g.matmul(code, wt)?;
        class_logit(g, model, feat, class)
    }
}

/// Scores every neuron of `feature` (raw, or its SAE code when `sae` is given) toward `class`.
pub fn attribute(
    model: &ClassifierModel,
    sae: Option<&SparseAutoencoder>,
    feature: &[f64],
    class: usize,
    config: &AttributionConfig,
) -> Result<NeuronSelection> {
    if class >= model.classes() {
        return Err(Error::InvalidArgument(format!("class {class} with {} classes", model.classes())));
    }
    let z = match sae {
        Some(s) => s.encode(feature)?,
        None => feature.to_vec(),
    };
    let baseline = config.baseline.clone().unwrap_or_else(|| vec![0.0; z.len()]);
    let scores = match sae {
        Some(s) => integrated_gradients(&sae_head(model, s, class), &z, &baseline, config.steps)?,
        None => integrated_gradients(&raw_head(model, class), &z, &baseline, config.steps)?,
    };
    select_top_neurons(class, &scores, config.k_neu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(w: Vec<f64>) -> impl Fn(&mut Graph, Var) -> Result<Var> + Sync {
        move |g, z| {
            let wv = g.constant(Tensor::new(&[w.len(), 1], w.clone())?);
            let y = g.matmul(z, wv)?;
            Ok(g.sum(y))
        }
    }

    #[test]
    fn zero_attribution_at_baseline() {
        let f = |g: &mut Graph, z: Var| {
            let s = g.sin(z);
            let q = g.square(s);
            Ok(g.sum(q))
        };
        let z = [0.4, -1.2, 2.0];
        assert_eq!(integrated_gradients(&f, &z, &z, 10).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_head_closed_form() {
        let w = vec![0.5, -2.0, 1.5];
        let z = [1.0, 2.0, -3.0];
        let zb = [0.1, 0.0, 0.5];
        for m in [1, 7, 100] {
            let s = integrated_gradients(&linear(w.clone()), &z, &zb, m).unwrap();
            for j in 0..3 {
                assert!((s[j] - (z[j] - zb[j]) * w[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_weights_doubles_scores() {
        let z = [1.0, -0.5, 3.0];
        let a = integrated_gradients(&linear(vec![1.0, 2.0, -1.0]), &z, &[0.0; 3], 5).unwrap();
        let b = integrated_gradients(&linear(vec![2.0, 4.0, -2.0]), &z, &[0.0; 3], 5).unwrap();
        for j in 0..3 {
            assert_eq!(b[j], 2.0 * a[j]);
        }
    }

    #[test]
    fn orthogonal_heads_select_disjoint_neurons() {
        use crate::models::{Architecture, ClassifierModel};
        let d = 8;
        let mut model = ClassifierModel::init(Architecture::cnn(16, d), 2, 0).unwrap();
        // Class 0 reads the first half of the features, class 1 the second half.
        let w: Vec<f64> = (0..d).flat_map(|j| if j < d / 2 { [1.0 + j as f64, 0.0] } else { [0.0, 1.0 + j as f64] }).collect();
        model.head_w = Tensor::new(&[d, 2], w).unwrap();
        let feature = vec![0.5; d];
        let cfg = AttributionConfig { k_neu: 2, ..Default::default() };
        let a = attribute(&model, None, &feature, 0, &cfg).unwrap();
        let b = attribute(&model, None, &feature, 1, &cfg).unwrap();
        assert!(a.indices.iter().all(|i| *i < d / 2));
        assert!(b.indices.iter().all(|i| *i >= d / 2));
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_top_neurons(0, &[0.5, 2.0, 1.0], 2).unwrap().indices, vec![1, 2]);
        assert_eq!(select_top_neurons(0, &[0.5, 2.0, 1.0], 3).unwrap().indices, vec![1, 2, 0]);
        assert!(select_top_neurons(0, &[0.5], 2).is_err());
        assert!(select_top_neurons(0, &[0.5], 0).is_err());
    }

    #[test]
    fn matches_brute_force_sort() {
        let mut r = crate::rng::seeded(11);
        for _ in 0..1000 {
            let n = 1 + crate::rng::index(&mut r, 20);
            let k = 1 + crate::rng::index(&mut r, n);
            let s: Vec<f64> = (0..n).map(|_| (crate::rng::normal(&mut r) * 4.0).round() / 4.0).collect();
            let mut all: Vec<usize> = (0..n).collect();
            all.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(select_top_neurons(0, &s, k).unwrap().indices, all[..k].to_vec());
        }
    }

    proptest! {
        #[test]
        fn shifting_scores_keeps_selection(v in proptest::collection::vec(-10.0f64..10.0, 1..30), c in -5.0f64..5.0, k in 1usize..30) {
            let k = k.min(v.len());
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = select_top_neurons(0, &v, k).unwrap().indices;
            let b = select_top_neurons(0, &shifted, k).unwrap().indices;
            // Shifting can merge values that differed by less than an ulp; compare score multisets then.
            if a != b {
                let sa: Vec<f64> = a.iter().map(|&i| shifted[i]).collect();
                let sb: Vec<f64> = b.iter().map(|&i| shifted[i]).collect();
                prop_assert_eq!(sa, sb);
            }
        }
    }
}
