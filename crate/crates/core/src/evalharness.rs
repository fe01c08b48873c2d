//! Evaluation: concept-image validity, a joint-space caption score, and the
//! synthetic faithfulness benchmark comparing TEXTER with its baselines.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conceptbank::BankEntry;
use crate::error::{Error, Result, StageExt};
use crate::explain::{
    concept_image, random_order, select_neurons, texter_scores, ttc_scores, EmbeddedBank, ExplainConfig, Mode, Models,
};
use crate::attribution::Space;
use crate::featviz::ConceptImage;
use crate::image::Image;
use crate::models::{argmax, ClassifierModel, JointEmbedder};
use crate::numerics::{cosine, topk_indices};
use crate::synthdata::Sample;
use crate::{par, rng};

pub const NOT_COMPUTED: &str = "not computed: requires generative model";

/// Below this many test images the benchmark still runs but warns.
pub const MIN_TEST_IMAGES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 1000, level: 0.95, seed: 0 }
    }
}

/// Percentile bootstrap interval of the mean of `values`.
///
/// The resample indices depend only on `values.len()` and the seed, so
/// intervals for different methods on the same test set are paired.
pub fn bootstrap_mean_ci(values: &[f64], config: &BootstrapConfig) -> Result<Interval> {
    if values.is_empty() || config.resamples == 0 || !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidArgument("bootstrap needs values, resamples >= 1 and level in (0, 1)".into()));
    }
    let n = values.len();
    let mut r = rng::stream(config.seed, "bootstrap");
    let mut means: Vec<f64> = (0..config.resamples)
        .map(|_| (0..n).map(|_| values[rng::index(&mut r, n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    let b = config.resamples as f64;
    let lo = ((tail * b).floor() as usize).min(config.resamples - 1);
    let hi = (((1.0 - tail) * b).ceil() as usize).saturating_sub(1).min(config.resamples - 1);
    Ok(Interval { lo: means[lo], hi: means[hi] })
}

/// Normal-approximation interval for a binomial proportion `p` over `n` trials.
pub fn binomial_ci(p: f64, n: usize, level: f64) -> Interval {
    let z = normal_quantile(0.5 + level / 2.0);
    let half = z * (p * (1.0 - p) / n.max(1) as f64).sqrt();
    Interval { lo: (p - half).max(0.0), hi: (p + half).min(1.0) }
}

/// Standard normal quantile by bisection on the error function.
fn normal_quantile(q: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 (abs error < 1.5e-7).
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    y.copysign(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityRecord {
    pub class: usize,
    pub original_prediction: usize,
    pub concept_prediction: usize,
    /// 0-based position of `class` in the concept image's logit ranking.
    pub concept_rank: usize,
    /// `None` when the original confidence is exactly zero.
    pub r_conf: Option<f64>,
    pub cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub classes: usize,
    pub samples: usize,
    pub acc1: f64,
    pub acc1_ci: Interval,
    /// `k` of the wider accuracy: 5, or ceil(C / 2) when there are fewer than 5 classes.
    pub acc_k: usize,
    pub acc_wide: f64,
    pub header: String,
    pub chance: f64,
    pub r_conf: f64,
    pub r_conf_excluded: usize,
    pub cos: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<Space>,
    pub lpips: String,
    pub fs: String,
    pub records: Vec<ValidityRecord>,
}

/// Accuracy, confidence ratio and logit cosine of concept images against their originals.
///
/// Each pair is (original image, concept image, target class).
pub fn validity_metrics(
    classifier: &ClassifierModel,
    pairs: &[(&Image, &Image, usize)],
    bootstrap: &BootstrapConfig,
) -> Result<ValidityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validity pairs".into()));
    }
    let classes = classifier.classes();
    if let Some(&(_, _, c)) = pairs.iter().find(|p| p.2 >= classes) {
        return Err(Error::InvalidArgument(format!("class {c} with {classes} classes")));
    }
    let originals: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
    let concepts: Vec<&Image> = pairs.iter().map(|p| p.1).collect();
    let lo = classifier.logits(&originals)?;
    let lc = classifier.logits(&concepts)?;
    let po = classifier.probabilities(&lo);
    let pc = classifier.probabilities(&lc);

    let records: Vec<ValidityRecord> = par::map_range(pairs.len(), |i| {
        let c = pairs[i].2;
        let order = topk_indices(lc.row(i), classes);
        let denom = po.row(i)[c];
        ValidityRecord {
            class: c,
            original_prediction: argmax(lo.row(i)),
            concept_prediction: order[0],
            concept_rank: order.iter().position(|&k| k == c).unwrap_or(classes),
            r_conf: (denom != 0.0).then(|| pc.row(i)[c] / denom),
            cos: cosine(lo.row(i), lc.row(i)),
        }
    });

    let acc_k = if classes < 5 { classes.div_ceil(2) } else { 5 };
    let n = records.len() as f64;
    let hits: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.concept_rank == 0))).collect();
    let ratios: Vec<f64> = records.iter().filter_map(|r| r.r_conf).collect();
    Ok(ValidityReport {
        classes,
        samples: records.len(),
        acc1: hits.iter().sum::<f64>() / n,
        acc1_ci: bootstrap_mean_ci(&hits, bootstrap)?,
        acc_k,
        acc_wide: records.iter().filter(|r| r.concept_rank < acc_k).count() as f64 / n,
        header: if acc_k == 5 {
            "acc_wide is top-5 accuracy".into()
        } else {
            format!("acc_wide is top-{acc_k} accuracy (ceil(C/2), C = {classes} < 5)")
        },
        chance: 1.0 / classes as f64,
        r_conf: if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 },
        r_conf_excluded: records.len() - ratios.len(),
        cos: records.iter().map(|r| r.cos).sum::<f64>() / n,
        space: None,
        lpips: NOT_COMPUTED.into(),
        fs: NOT_COMPUTED.into(),
        records,
    })
}

/// Joint-space similarity between an image and "a photo of {class} showing t1, t2, ...".
///
/// With an empty class name the prompt is just the joined descriptions.
pub fn clipscore_analog(embedder: &JointEmbedder, image: &Image, class_name: &str, texts: &[&str]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no descriptions to score".into()));
    }
    let joined = texts.join(", ");
    let prompt = if class_name.is_empty() { joined } else { format!("a photo of {class_name} showing {joined}") };
    let img = embedder.embed_images(&[image])?;
    let txt = embedder.embed_texts(&[prompt.as_str()])?;
    Ok(cosine(img.row(0), txt.row(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub ci: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Mode,
    /// Top-1 description is the causal phrase.
    pub causal_hit: Rate,
    /// Top-1 description is a distractor phrase.
    pub distractor_hit: Rate,
    /// The causal phrase is among the top `k_con`.
    pub causal_in_top_k: Rate,
    /// Mean 1-based rank of the causal phrase over images whose slice has one.
    pub mean_causal_rank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub index: usize,
    pub label: usize,
    pub class: usize,
    pub neurons: Vec<usize>,
    pub crop_seed: u64,
    pub random_seed: u64,
    /// Top `k_con` bank indices per method, in method order.
    pub top: Vec<(Mode, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct BenchConfig {
    pub explain: ExplainConfig,
    pub bootstrap: BootstrapConfig,
    /// Root of the per-image crop and random-baseline seeds.
    pub seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub test_size: usize,
    pub k_con: usize,
    /// Mean of `k_con / |bank slice|` over the test images.
    pub random_expectation: f64,
    pub random_expectation_ci: Interval,
    pub methods: Vec<MethodReport>,
    pub warnings: Vec<String>,
    pub lpips: String,
    pub fs: String,
    pub records: Vec<BenchRecord>,
    pub config: BenchConfig,
}

impl FaithfulnessReport {
    pub fn method(&self, mode: Mode) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == mode)
    }
}

/// Benchmark report plus the concept images it synthesized.
#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub report: FaithfulnessReport,
    /// Distinct concept images in order of first use.
    pub concepts: Vec<ConceptImage>,
    /// Index into `concepts` for every test image.
    pub concept_of: Vec<usize>,
}

/// Per-image crop and random-baseline seeds, shared by every method.
pub fn image_seeds(seed: u64, index: usize) -> (u64, u64) {
    let i = index as u64;
    (rng::derive_seed(rng::derive_seed(seed, rng::tag("crop")), i), rng::derive_seed(rng::derive_seed(seed, rng::tag("random")), i))
}

/// Hit rates of one method given its full description order for every image.
pub fn method_report(
    method: Mode,
    orders: &[Vec<usize>],
    slices: &[&[BankEntry]],
    k_con: usize,
    bootstrap: &BootstrapConfig,
) -> Result<MethodReport> {
    if orders.len() != slices.len() || orders.is_empty() {
        return Err(Error::InvalidArgument("one description order per test image is required".into()));
    }
    let indicator = |pred: &dyn Fn(&[usize], &[BankEntry]) -> bool| -> Vec<f64> {
        orders.iter().zip(slices).map(|(o, s)| f64::from(u8::from(pred(o, s)))).collect()
    };
    let causal = indicator(&|o, s| s[o[0]].flags.causal);
    let distractor = indicator(&|o, s| s[o[0]].flags.distractor);
    let in_top = indicator(&|o, s| o.iter().take(k_con).any(|&j| s[j].flags.causal));
    let rate = |v: &[f64]| -> Result<Rate> {
        Ok(Rate { rate: v.iter().sum::<f64>() / v.len() as f64, ci: bootstrap_mean_ci(v, bootstrap)? })
    };
    let ranks: Vec<f64> = orders
        .iter()
        .zip(slices)
        .filter_map(|(o, s)| o.iter().position(|&j| s[j].flags.causal).map(|p| (p + 1) as f64))
        .collect();
    Ok(MethodReport {
        method,
        causal_hit: rate(&causal)?,
        distractor_hit: rate(&distractor)?,
        causal_in_top_k: rate(&in_top)?,
        mean_causal_rank: (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64),
    })
}

/// Runs TEXTER, text-to-concept and the random baseline on the same test
/// images, bank slices (indexed by class) and per-image seeds.
///
/// Each image is explained for the classifier's predicted class. Concept
/// images depend only on (class, neuron set) because the synthesis seed is
/// shared, so they are computed once per distinct key.
pub fn faithfulness_benchmark(
    models: &Models,
    slices: &[EmbeddedBank],
    test: &[Sample],
    config: &BenchConfig,
) -> Result<BenchOutput> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let classes = models.classifier.classes();
    if slices.len() < classes {
        return Err(Error::InvalidArgument(format!("{} bank slices for {classes} classes", slices.len())));
    }
    let k = config.explain.k_con;
    if let Some(s) = slices.iter().find(|s| k == 0 || k > s.len()) {
        return Err(Error::InvalidArgument(format!("k_con = {k} with a bank slice of {}", s.len())));
    }
    let mut warnings = Vec::new();
    if test.len() < MIN_TEST_IMAGES {
        let w = format!("only {} test images (< {MIN_TEST_IMAGES}); intervals are unreliable", test.len());
        log::warn!("{w}");
        warnings.push(w);
    }

    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let predicted = models.classifier.predict(&images)?;
    let selections = par::try_map_range(test.len(), |i| {
        select_neurons(models, images[i], Some(predicted[i]), &config.explain.attribution)
    })
    .stage("attribution")?;

    let mut keys: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut key_index: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    let concept_of: Vec<usize> = selections
        .iter()
        .map(|s| {
            let mut neurons = s.indices.clone();
            neurons.sort_unstable();
            let key = (s.class, neurons);
            *key_index.entry(key.clone()).or_insert_with(|| {
                keys.push(key);
                keys.len() - 1
            })
        })
        .collect();
    let first_use: Vec<usize> = (0..keys.len()).map(|u| concept_of.iter().position(|&c| c == u).unwrap_or(0)).collect();
    let concepts = par::try_map_range(keys.len(), |u| concept_image(models, &selections[first_use[u]], &config.explain.viz))
        .stage("featviz")?;
    log::info!("{} distinct concept images for {} test images", concepts.len(), test.len());

    let per_image = par::try_map_range(test.len(), |i| -> Result<[Vec<usize>; 3]> {
        let c = predicted[i];
        let bank = &slices[c];
        let (crop_seed, random_seed) = image_seeds(config.seed, i);
        let mut cfg = config.explain.clone();
        cfg.crop.seed = crop_seed;
        let texter = topk_indices(&texter_scores(models, &concepts[concept_of[i]], bank, &cfg)?, bank.len());
        let ttc = topk_indices(&ttc_scores(models, images[i], bank)?, bank.len());
        Ok([texter, ttc, random_order(bank.len(), random_seed)])
    })?;

    let entry_slices: Vec<&[BankEntry]> = predicted.iter().map(|&c| slices[c].entries.as_slice()).collect();
    let modes = [Mode::Texter, Mode::Ttc, Mode::Random];
    let methods = modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| {
            let orders: Vec<Vec<usize>> = per_image.iter().map(|o| o[m].clone()).collect();
            method_report(mode, &orders, &entry_slices, k, &config.bootstrap)
        })
        .collect::<Result<Vec<_>>>()?;

    let records = per_image
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let (crop_seed, random_seed) = image_seeds(config.seed, i);
            BenchRecord {
                index: i,
                label: test[i].label,
                class: predicted[i],
                neurons: selections[i].indices.clone(),
                crop_seed,
                random_seed,
                top: modes.iter().zip(o).map(|(&m, ord)| (m, ord[..k].to_vec())).collect(),
            }
        })
        .collect();

    let expectation = entry_slices.iter().map(|s| k as f64 / s.len() as f64).sum::<f64>() / test.len() as f64;
    let report = FaithfulnessReport {
        test_size: test.len(),
        k_con: k,
        random_expectation: expectation,
        random_expectation_ci: binomial_ci(expectation, test.len(), config.bootstrap.level),
        methods,
        warnings,
        lpips: NOT_COMPUTED.into(),
        fs: NOT_COMPUTED.into(),
        records,
        config: config.clone(),
    };
    Ok(BenchOutput { report, concepts, concept_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conceptbank::{EntryFlags, Source};
    use crate::models::{Architecture, EmbedderConfig, Vocabulary};
    use proptest::prelude::*;

    fn entry(text: &str, causal: bool, distractor: bool) -> BankEntry {
        BankEntry { text: text.into(), source: Source::Llm, flags: EntryFlags { causal, distractor } }
    }

    fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| Image::new(side, side, (0..3 * side * side).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect()).unwrap()).collect()
    }

    #[test]
    fn identical_concept_images_are_perfectly_valid() {
        let model = ClassifierModel::init(Architecture::cnn(16, 8), 3, 1).unwrap();
        let images = random_images(12, 16, 2);
        let refs: Vec<&Image> = images.iter().collect();
        let predicted = model.predict(&refs).unwrap();
        let pairs: Vec<(&Image, &Image, usize)> = images.iter().zip(&predicted).map(|(im, &c)| (im, im, c)).collect();
        let v = validity_metrics(&model, &pairs, &BootstrapConfig::default()).unwrap();
        assert_eq!(v.acc1, 1.0);
        assert!((v.r_conf - 1.0).abs() < 1e-12 && (v.cos - 1.0).abs() < 1e-12);
        assert_eq!((v.acc_k, v.chance, v.r_conf_excluded), (2, 1.0 / 3.0, 0));
    }

    #[test]
    fn caption_score_structure() {
        let vocab = Vocabulary::build(["red cross", "blue stripes", "photo of showing"]);
        let embedder = JointEmbedder::init(16, vocab, &EmbedderConfig::default()).unwrap();
        let image = &random_images(1, 16, 3)[0];
        let a = clipscore_analog(&embedder, image, "cross", &["red cross", "blue stripes"]).unwrap();
        assert_eq!(a, clipscore_analog(&embedder, image, "cross", &["red cross", "blue stripes"]).unwrap());
        let plain = cosine(
            embedder.embed_images(&[image]).unwrap().row(0),
            embedder.embed_texts(&["red cross"]).unwrap().row(0),
        );
        assert!((clipscore_analog(&embedder, image, "", &["red cross"]).unwrap() - plain).abs() < 1e-12);
        assert!(clipscore_analog(&embedder, image, "cross", &[]).is_err());
    }

    #[test]
    fn bootstrap_of_constant_is_degenerate() {
        let ci = bootstrap_mean_ci(&[0.5; 40], &BootstrapConfig::default()).unwrap();
        assert_eq!(ci, Interval { lo: 0.5, hi: 0.5 });
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let cfg = BootstrapConfig::default();
        assert_eq!(bootstrap_mean_ci(&v, &cfg).unwrap(), bootstrap_mean_ci(&v, &cfg).unwrap());
        let ci = bootstrap_mean_ci(&v, &cfg).unwrap();
        assert!(ci.contains(0.34) && ci.hi - ci.lo < 0.25);
    }

    #[test]
    fn binomial_interval_width() {
        let ci = binomial_ci(0.5, 100, 0.95);
        assert!((ci.hi - 0.5 - 1.959_964 * 0.05).abs() < 1e-5);
    }

    #[test]
    fn swapping_flags_swaps_hit_columns() {
        let bank = [entry("a", true, false), entry("b", false, true), entry("c", false, false), entry("d", false, true)];
        let swapped: Vec<BankEntry> = bank
            .iter()
            .map(|e| BankEntry { flags: EntryFlags { causal: e.flags.distractor, distractor: e.flags.causal }, ..e.clone() })
            .collect();
        let orders = vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3], vec![3, 2, 1, 0], vec![2, 0, 1, 3]];
        let cfg = BootstrapConfig::default();
        let a = method_report(Mode::Texter, &orders, &[&bank[..]; 4], 2, &cfg).unwrap();
        let b = method_report(Mode::Texter, &orders, &[&swapped[..]; 4], 2, &cfg).unwrap();
        assert_eq!(a.causal_hit, b.distractor_hit);
        assert_eq!(a.distractor_hit, b.causal_hit);
        assert_eq!(a.causal_hit.rate, 0.25);
        assert_eq!(a.distractor_hit.rate, 0.5);
        assert_eq!(a.mean_causal_rank, Some((1.0 + 2.0 + 4.0 + 2.0) / 4.0));
    }

    #[test]
    fn image_seeds_differ_per_image() {
        assert_ne!(image_seeds(0, 0), image_seeds(0, 1));
        assert_eq!(image_seeds(3, 7), image_seeds(3, 7));
    }

    proptest! {
        #[test]
        fn random_orders_hit_at_combinatorial_rate(seed in 0u64..1000) {
            // One causal entry among 20, k = 4: in-top-k rate over many images ≈ 0.2.
            let bank: Vec<BankEntry> = (0..20).map(|i| entry(&format!("t{i}"), i == 7, false)).collect();
            let n = 400;
            let orders: Vec<Vec<usize>> = (0..n).map(|i| random_order(20, image_seeds(seed, i).1)).collect();
            let slices = vec![&bank[..]; n];
            let r = method_report(Mode::Random, &orders, &slices, 4, &BootstrapConfig::default()).unwrap();
            prop_assert!((r.causal_in_top_k.rate - 0.2).abs() < 0.1);
            prop_assert!(r.causal_hit.rate <= r.causal_in_top_k.rate);
        }

        #[test]
        fn bootstrap_interval_brackets_mean(v in proptest::collection::vec(0.0f64..1.0, 1..60), seed in 0u64..50) {
            let cfg = BootstrapConfig { seed, ..BootstrapConfig::default() };
            let ci = bootstrap_mean_ci(&v, &cfg).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(ci.lo <= ci.hi && ci.lo >= lo - 1e-12 && ci.hi <= hi + 1e-12);
        }
    }
}
