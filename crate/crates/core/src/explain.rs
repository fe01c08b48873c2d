//! Explanations: rank bank descriptions against aligned features of concept-image
//! patches (TEXTER), of the whole original image (text-to-concept), or at random.

use serde::{Deserialize, Serialize};

use crate::alignment::Aligner;
use crate::attribution::{attribute, AttributionConfig, NeuronSelection};
use crate::conceptbank::BankEntry;
use crate::error::{Error, Result, StageExt};
use crate::featviz::{synthesize, ConceptImage, VizConfig};
use crate::image::Image;
use crate::models::{argmax, ClassifierModel, JointEmbedder};
use crate::numerics::{cosine, topk_indices, Tensor};
use crate::par;
use crate::rng;
use crate::sae::SparseAutoencoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub count: usize,
    /// Patch side as a fraction of the image side, drawn uniformly from `[low, high]`.
    pub low: f64,
    pub high: f64,
    /// Std of the patch centre around the image centre, as a fraction of the image side.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { count: 6, low: 0.25, high: 0.30, sigma: 0.125, seed: 0 }
    }
}

/// Square crop window in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub side: f64,
}

pub fn sample_crops(height: usize, width: usize, config: &CropConfig) -> Result<Vec<CropRect>> {
    if !(config.low > 0.0 && config.low <= config.high && config.high <= 1.0) {
        return Err(Error::InvalidArgument(format!("degenerate crop range [{}, {}]", config.low, config.high)));
    }
    if config.count == 0 || config.sigma < 0.0 {
        return Err(Error::InvalidArgument("crop count must be >= 1 and sigma >= 0".into()));
    }
    if height.min(width) < 8 {
        return Err(Error::InvalidArgument("image side must be >= 8 to crop".into()));
    }
    let base = height.min(width) as f64;
    let mut r = rng::stream(config.seed, "crops");
    Ok((0..config.count)
        .map(|_| {
            let side = base * rng::uniform(&mut r, config.low, config.high);
            let cy = height as f64 / 2.0 + config.sigma * height as f64 * rng::normal(&mut r);
            let cx = width as f64 / 2.0 + config.sigma * width as f64 * rng::normal(&mut r);
            CropRect {
                top: (cy - side / 2.0).clamp(0.0, height as f64 - side),
                left: (cx - side / 2.0).clamp(0.0, width as f64 - side),
                side,
            }
        })
        .collect())
}

/// Crops resized back to the input resolution.
pub fn crop_patches(image: &Image, config: &CropConfig) -> Result<Vec<Image>> {
    let (h, w) = (image.height(), image.width());
    Ok(sample_crops(h, w, config)?.into_iter().map(|c| image.crop_resize(c.top, c.left, c.side, h, w)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Texter,
    Ttc,
    Random,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texter" => Ok(Mode::Texter),
            "ttc" | "text-to-concept" => Ok(Mode::Ttc),
            "random" => Ok(Mode::Random),
            other => Err(Error::Config(format!("unknown method `{other}` (texter, ttc, random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub text: String,
    pub score: f64,
    /// Position of the description in the bank slice.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub viz: u64,
    pub crop: u64,
    pub random: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub input: String,
    pub class: usize,
    pub mode: Mode,
    pub k_con: usize,
    pub results: Vec<Ranked>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concept_image_path: Option<String>,
    pub seeds: Seeds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub attribution: AttributionConfig,
    pub viz: VizConfig,
    pub crop: CropConfig,
    pub k_con: usize,
    /// Also score the whole concept image alongside its patches.
    pub whole_image: bool,
    pub random_seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            attribution: AttributionConfig::default(),
            viz: VizConfig::default(),
            crop: CropConfig::default(),
            k_con: 3,
            whole_image: false,
            random_seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds { viz: self.viz.seed, crop: self.crop.seed, random: self.random_seed }
    }
}

/// Trained components an explanation draws on.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub classifier: &'a ClassifierModel,
    pub sae: Option<&'a SparseAutoencoder>,
    pub embedder: &'a JointEmbedder,
    pub aligner: &'a Aligner,
    /// Fixed magnitude spectrum for concept-image synthesis.
    pub magnitude: &'a Tensor,
}

/// Bank slice with its text embeddings precomputed.
#[derive(Clone, Debug)]
pub struct EmbeddedBank {
    pub entries: Vec<BankEntry>,
    pub vectors: Tensor,
}

impl EmbeddedBank {
    pub fn new(embedder: &JointEmbedder, entries: Vec<BankEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("bank slice is empty".into()));
        }
        let texts: Vec<&str> = entries.iter().map(|e| e.text.as_str()).collect();
        let vectors = embedder.embed_texts(&texts)?;
        Ok(Self { entries, vectors })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `score_i = mean_p cos(query_p, text_i)`.
pub fn mean_cosine_scores(queries: &Tensor, texts: &Tensor) -> Vec<f64> {
    let p = queries.rows();
    par::map_range(texts.rows(), |i| {
        (0..p).map(|q| cosine(queries.row(q), texts.row(i))).sum::<f64>() / p as f64
    })
}

/// Top `k` by score, descending; ties keep bank order.
pub fn top_k(bank: &EmbeddedBank, scores: &[f64], k: usize) -> Result<Vec<Ranked>> {
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!("k_con = {k} with a bank of {}", bank.len())));
    }
    Ok(topk_indices(scores, k)
        .into_iter()
        .map(|i| Ranked { text: bank.entries[i].text.clone(), score: scores[i], index: i })
        .collect())
}

/// Scores every description by its mean cosine with the aligned patch features and keeps the top `k_con`.
pub fn rank_descriptions(
    classifier: &ClassifierModel,
    aligner: &Aligner,
    patches: &[&Image],
    bank: &EmbeddedBank,
    k_con: usize,
) -> Result<Vec<Ranked>> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("no patches to score".into()));
    }
    let aligned = aligner.align_rows(&classifier.features(patches)?)?;
    top_k(bank, &mean_cosine_scores(&aligned, &bank.vectors), k_con)
}

/// Target class (argmax prediction when `class` is `None`) and its neuron selection for `image`.
pub fn select_neurons(
    models: &Models,
    image: &Image,
    class: Option<usize>,
    config: &AttributionConfig,
) -> Result<NeuronSelection> {
    let c = predicted_class(models, image, class)?;
    let f = models.classifier.features(&[image])?;
    attribute(models.classifier, models.sae, f.row(0), c, config)
}

pub fn concept_image(models: &Models, selection: &NeuronSelection, viz: &VizConfig) -> Result<ConceptImage> {
    synthesize(models.classifier, models.sae, selection, models.magnitude, viz)
}

/// Mean patch cosine of every description for an already synthesized concept image.
pub fn texter_scores(models: &Models, concept: &ConceptImage, bank: &EmbeddedBank, config: &ExplainConfig) -> Result<Vec<f64>> {
    let mut patches = crop_patches(&concept.image, &config.crop).stage("crop")?;
    if config.whole_image {
        patches.push(concept.image.clone());
    }
    let refs: Vec<&Image> = patches.iter().collect();
    let aligned = models.aligner.align_rows(&models.classifier.features(&refs)?).stage("rank")?;
    Ok(mean_cosine_scores(&aligned, &bank.vectors))
}

/// Whole-image cosine of every description (text-to-concept).
pub fn ttc_scores(models: &Models, image: &Image, bank: &EmbeddedBank) -> Result<Vec<f64>> {
    let aligned = models.aligner.align_rows(&models.classifier.features(&[image])?).stage("rank")?;
    Ok(mean_cosine_scores(&aligned, &bank.vectors))
}

/// Seeded uniform permutation of `0..n`; the random baseline reads its first `k_con` entries.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, "random-baseline"), &mut idx);
    idx
}

fn predicted_class(models: &Models, image: &Image, class: Option<usize>) -> Result<usize> {
    match class {
        Some(c) if c >= models.classifier.classes() => {
            Err(Error::InvalidArgument(format!("class {c} with {} classes", models.classifier.classes())))
        }
        Some(c) => Ok(c),
        None => Ok(argmax(models.classifier.logits(&[image])?.row(0))),
    }
}

/// Ranking stage of TEXTER for an already synthesized concept image.
pub fn explain_concept(
    models: &Models,
    concept: &ConceptImage,
    bank: &EmbeddedBank,
    input: &str,
    config: &ExplainConfig,
) -> Result<Explanation> {
    let scores = texter_scores(models, concept, bank, config)?;
    Ok(Explanation {
        input: input.to_string(),
        class: concept.class,
        mode: Mode::Texter,
        k_con: config.k_con,
        results: top_k(bank, &scores, config.k_con).stage("rank")?,
        concept_image_path: None,
        seeds: config.seeds(),
    })
}

/// Full TEXTER pipeline: attribution, concept image, crops, ranking.
pub fn explain_texter(
    models: &Models,
    bank: &EmbeddedBank,
    image: &Image,
    input: &str,
    class: Option<usize>,
    config: &ExplainConfig,
) -> Result<(Explanation, ConceptImage)> {
    let selection = select_neurons(models, image, class, &config.attribution).stage("attribution")?;
    let concept = concept_image(models, &selection, &config.viz).stage("featviz")?;
    let e = explain_concept(models, &concept, bank, input, config)?;
    Ok((e, concept))
}

/// Text-to-concept baseline: whole-image aligned feature against every description.
pub fn explain_ttc(
    models: &Models,
    bank: &EmbeddedBank,
    image: &Image,
    input: &str,
    class: Option<usize>,
    config: &ExplainConfig,
) -> Result<Explanation> {
    let c = predicted_class(models, image, class)?;
    let scores = ttc_scores(models, image, bank)?;
    Ok(Explanation {
        input: input.to_string(),
        class: c,
        mode: Mode::Ttc,
        k_con: config.k_con,
        results: top_k(bank, &scores, config.k_con).stage("rank")?,
        concept_image_path: None,
        seeds: config.seeds(),
    })
}

/// Random baseline: `k_con` distinct descriptions drawn uniformly (scores are zero).
pub fn explain_random(bank: &EmbeddedBank, input: &str, class: usize, config: &ExplainConfig) -> Result<Explanation> {
    let k = config.k_con;
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!("k_con = {k} with a bank of {}", bank.len())));
    }
    let results = random_order(bank.len(), config.random_seed)[..k]
        .iter()
        .map(|&i| Ranked { text: bank.entries[i].text.clone(), score: 0.0, index: i })
        .collect();
    Ok(Explanation {
        input: input.to_string(),
        class,
        mode: Mode::Random,
        k_con: k,
        results,
        concept_image_path: None,
        seeds: config.seeds(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conceptbank::{EntryFlags, Source};

    fn entries(texts: &[&str]) -> Vec<BankEntry> {
        texts
            .iter()
            .map(|t| BankEntry { text: t.to_string(), source: Source::Synthetic, flags: EntryFlags::default() })
            .collect()
    }

    fn bank_with(vectors: Tensor) -> EmbeddedBank {
        let names: Vec<String> = (0..vectors.rows()).map(|i| format!("d{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        EmbeddedBank { entries: entries(&refs), vectors }
    }

    #[test]
    fn six_patches_by_default() {
        let img = Image::filled(32, 32, [0.5; 3]);
        assert_eq!(crop_patches(&img, &CropConfig::default()).unwrap().len(), 6);
    }

    #[test]
    fn full_range_without_jitter_returns_the_original() {
        let mut img = Image::filled(16, 16, [0.0; 3]);
        for y in 0..16 {
            for x in 0..16 {
                img.set_pixel(y, x, [x as f64 / 16.0, y as f64 / 16.0, 0.3]);
            }
        }
        let cfg = CropConfig { low: 1.0, high: 1.0, sigma: 0.0, ..Default::default() };
        for p in crop_patches(&img, &cfg).unwrap() {
            assert_eq!(p, img);
        }
    }

    #[test]
    fn crops_stay_in_bounds() {
        for seed in 0..100 {
            let cfg = CropConfig { count: 100, seed, sigma: 0.5, ..Default::default() };
            for c in sample_crops(32, 32, &cfg).unwrap() {
                assert!(c.top >= 0.0 && c.left >= 0.0);
                assert!(c.top + c.side <= 32.0 + 1e-12 && c.left + c.side <= 32.0 + 1e-12);
                assert!(c.side >= 0.25 * 32.0 && c.side <= 0.30 * 32.0);
            }
        }
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        for (low, high) in [(0.0, 0.3), (0.4, 0.3), (0.5, 1.5)] {
            let cfg = CropConfig { low, high, ..Default::default() };
            assert!(sample_crops(32, 32, &cfg).is_err());
        }
    }

    #[test]
    fn single_patch_single_description_is_plain_cosine() {
        let q = Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]).unwrap();
        let t = Tensor::matrix(1, 3, vec![-0.3, 1.0, 2.0]).unwrap();
        let bank = bank_with(t.clone());
        let r = top_k(&bank, &mean_cosine_scores(&q, &t), 1).unwrap();
        assert_eq!(r[0].score, cosine(q.row(0), t.row(0)));
    }

    #[test]
    fn identical_patches_average_to_single_patch_score() {
        let q1 = Tensor::matrix(1, 3, vec![0.2, -1.0, 0.4]).unwrap();
        let q6 = Tensor::matrix(6, 3, q1.data().repeat(6)).unwrap();
        let t = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.3, 0.3, -0.9]).unwrap();
        let (a, b) = (mean_cosine_scores(&q1, &t), mean_cosine_scores(&q6, &t));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_keep_bank_order_and_low_additions_do_not_change_top_k() {
        let bank = bank_with(Tensor::zeros(&[4, 2]));
        let r = top_k(&bank, &[0.5, 0.9, 0.5, 0.1], 3).unwrap();
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 0, 2]);
        let bigger = bank_with(Tensor::zeros(&[5, 2]));
        let r2 = top_k(&bigger, &[0.5, 0.9, 0.5, 0.1, 0.2], 3).unwrap();
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), r2.iter().map(|x| x.index).collect::<Vec<_>>());
        assert!(top_k(&bank, &[0.0; 4], 5).is_err());
    }

    #[test]
    fn random_mode_is_a_seeded_permutation() {
        let bank = bank_with(Tensor::zeros(&[5, 2]));
        let cfg = ExplainConfig { k_con: 5, random_seed: 3, ..Default::default() };
        let a = explain_random(&bank, "x", 0, &cfg).unwrap();
        let mut idx: Vec<usize> = a.results.iter().map(|r| r.index).collect();
        assert_eq!(a, explain_random(&bank, "x", 0, &cfg).unwrap());
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ttc".parse::<Mode>().unwrap(), Mode::Ttc);
        assert!("other".parse::<Mode>().is_err());
    }
}
