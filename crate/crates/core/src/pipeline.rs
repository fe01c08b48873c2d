//! Run configuration, artifact layout and the stage functions behind the CLI.
//!
//! Every stage reads its prerequisites from the output directory, writes its
//! artifacts there and records a manifest with SHA-256 digests of both. All
//! randomness is derived from the run seed, so rerunning a stage with the same
//! config reproduces its outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::alignment::{train_aligner, AlignConfig, Aligner};
use crate::attribution::Space;
use crate::conceptbank::{load_bank, ConceptBank};
use crate::error::{Error, Result, StageExt};
use crate::evalharness::{
    clipscore_analog, faithfulness_benchmark, image_seeds, validity_metrics, BenchConfig, BootstrapConfig,
    FaithfulnessReport, ValidityReport,
};
use crate::explain::{explain_random, explain_texter, explain_ttc, EmbeddedBank, ExplainConfig, Explanation, Mode, Models};
use crate::featviz::{inverse_frequency_spectrum, mean_magnitude_spectrum, MagnitudeSource};
use crate::image::Image;
use crate::models::{
    train_classifier, train_embedder, Checkpoint, ClassifierConfig, ClassifierModel, EmbedderConfig, JointEmbedder,
    Vocabulary,
};
use crate::numerics::Tensor;
use crate::sae::{train_sae, SaeConfig, SparseAutoencoder};
use crate::synthdata::{attribute_bank, export, generate, import, label_bank, BankSizes, Sample, SceneSpec};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Root of every artifact written by the pipeline.
    pub out: PathBuf,
    /// Existing description bank (JSONL); when absent the synthetic bank is generated.
    pub bank: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("run"), bank: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train: usize,
    pub test: usize,
    /// Fresh images whose classifier features train the SAE.
    pub sae_pool: usize,
    pub bank: BankSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scene: SceneSpec::default(), train: 2000, test: 200, sae_pool: 20_000, bank: BankSizes::DESK }
    }
}

/// The single JSON document driving a run. Stage `seed` fields are offsets
/// mixed with the run seed (see [`stage_seed`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub embedder: EmbedderConfig,
    pub sae: SaeConfig,
    /// Explain in SAE latent space; when false (or no SAE is trained) raw features are used.
    pub use_sae: bool,
    pub aligner: AlignConfig,
    pub explain: ExplainConfig,
    pub bootstrap: BootstrapConfig,
    pub method: Mode,
    /// Class to explain; `None` explains the predicted class.
    pub class: Option<usize>,
    /// Test images explained by the `explain` stage.
    pub explain_images: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            embedder: EmbedderConfig::default(),
            sae: SaeConfig::default(),
            use_sae: true,
            aligner: AlignConfig::default(),
            explain: ExplainConfig::default(),
            bootstrap: BootstrapConfig::default(),
            method: Mode::Texter,
            class: None,
            explain_images: vec![0, 1, 2, 3],
        }
    }
}

/// Config keys whose defaults come from the method's reference setup rather than desk-scale tuning.
pub const REFERENCE_DEFAULTS: &[&str] = &[
    "attribution.steps",
    "attribution.k_neu",
    "explain.k_con",
    "explain.crop.count",
    "explain.crop.low",
    "explain.crop.high",
    "sae.expansion",
    "sae.topk_ratio",
    "sae.learning_rate",
    "sae.epochs",
    "aligner.fraction",
    "viz.iterations",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.train == 0 || self.data.test == 0 || self.data.sae_pool == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if let Some(c) = self.class.filter(|&c| c >= self.data.scene.classes) {
            return Err(Error::Config(format!("class {c} with {} classes", self.data.scene.classes)));
        }
        if let Some(&i) = self.explain_images.iter().find(|&&i| i >= self.data.test) {
            return Err(Error::Config(format!("explain image {i} beyond the {} test images", self.data.test)));
        }
        if self.classifier.feat_dim != self.embedder.feat_dim {
            return Err(Error::Config("classifier.feat_dim and embedder.feat_dim must match".into()));
        }
        Ok(())
    }

    /// Every leaf key with its default, one per line; reference-setup defaults are starred.
    pub fn describe_defaults() -> String {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut lines);
        let mut out = String::from("Config keys (JSON paths) and defaults; * marks a reference-setup default:\n");
        for (key, value) in lines {
            let star = if REFERENCE_DEFAULTS.iter().any(|k| key.ends_with(k)) { "*" } else { " " };
            out.push_str(&format!("  {star} {key} = {value}\n"));
        }
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Seed for a stage: the run seed mixed with the stage name and the stage's own offset.
pub fn stage_seed(run_seed: u64, stage: &str, offset: u64) -> u64 {
    rng::derive_seed(run_seed, rng::tag(stage) ^ offset)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainClassifier,
    TrainEmbedder,
    TrainSae,
    TrainAligner,
    Explain,
    Evaluate,
    BenchFaithfulness,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainClassifier,
        Stage::TrainEmbedder,
        Stage::TrainSae,
        Stage::TrainAligner,
        Stage::Explain,
        Stage::Evaluate,
        Stage::BenchFaithfulness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainClassifier => "train-classifier",
            Stage::TrainEmbedder => "train-embedder",
            Stage::TrainSae => "train-sae",
            Stage::TrainAligner => "train-aligner",
            Stage::Explain => "explain",
            Stage::Evaluate => "evaluate",
            Stage::BenchFaithfulness => "bench-faithfulness",
        }
    }
}

/// File locations under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.root.join("data/test")
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("data/bank.jsonl")
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{model}.ckpt"))
    }

    pub fn explanations(&self) -> PathBuf {
        self.root.join("explanations")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    /// Fails with the stage that produces `path` when it does not exist.
    fn require(&self, path: PathBuf, producer: Stage) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { stage: producer.name(), path })
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file, or of every file under a directory in sorted order.
fn digests(layout: &Layout, path: &Path) -> Result<Vec<Value>> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    files.iter().map(|f| Ok(json!({"path": layout.relative(f), "sha256": sha256_file(f)?}))).collect()
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn write_manifest(layout: &Layout, stage: Stage, config: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let mut ins = Vec::new();
    for p in inputs {
        ins.extend(digests(layout, p)?);
    }
    let mut outs = Vec::new();
    for p in outputs {
        outs.extend(digests(layout, p)?);
    }
    let manifest = json!({
        "stage": stage.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": ins,
        "outputs": outs,
    });
    write_json(&layout.manifest(stage), &manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    ck.save(path)
}

/// Loaded artifacts needed by the explanation stages.
pub struct Trained {
    pub classifier: ClassifierModel,
    pub sae: Option<SparseAutoencoder>,
    pub embedder: JointEmbedder,
    pub aligner: Aligner,
    pub magnitude: Tensor,
    pub slices: Vec<EmbeddedBank>,
    pub test: Vec<Sample>,
}

impl Trained {
    pub fn models(&self) -> Models<'_> {
        Models {
            classifier: &self.classifier,
            sae: self.sae.as_ref(),
            embedder: &self.embedder,
            aligner: &self.aligner,
            magnitude: &self.magnitude,
        }
    }

    pub fn space(&self) -> Space {
        if self.sae.is_some() {
            Space::Sae
        } else {
            Space::Raw
        }
    }
}

/// The pipeline bound to one config.
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config.paths.out.clone());
        Ok(Self { config, layout })
    }

    fn seed(&self, stage: &str, offset: u64) -> u64 {
        stage_seed(self.config.seed, stage, offset)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainClassifier => self.train_classifier(),
            Stage::TrainEmbedder => self.train_embedder(),
            Stage::TrainSae => self.train_sae(),
            Stage::TrainAligner => self.train_aligner(),
            Stage::Explain => self.explain().map(|_| ()),
            Stage::Evaluate => self.evaluate().map(|_| ()),
            Stage::BenchFaithfulness => self.bench_faithfulness().map(|_| ()),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        Stage::ALL.iter().try_for_each(|&s| self.run(s))
    }

    pub fn gen_data(&self) -> Result<()> {
        let d = &self.config.data;
        let train = generate(&d.scene, d.train, self.seed("train-data", 0))?;
        let test = generate(&d.scene, d.test, self.seed("test-data", 0))?;
        for dir in [self.layout.train_dir(), self.layout.test_dir()] {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
        }
        export(&self.layout.train_dir(), &train)?;
        export(&self.layout.test_dir(), &test)?;
        let mut bank = match &self.config.paths.bank {
            Some(path) => load_bank(path)?,
            None => attribute_bank(&d.scene, d.bank)?,
        };
        label_bank(&mut bank, &d.scene);
        bank.save(&self.layout.bank())?;
        let inputs: Vec<PathBuf> = self.config.paths.bank.iter().cloned().collect();
        write_manifest(
            &self.layout,
            Stage::GenData,
            &self.config,
            &inputs,
            &[self.layout.train_dir(), self.layout.test_dir(), self.layout.bank()],
        )
    }

    fn load_samples(&self, dir: PathBuf) -> Result<Vec<Sample>> {
        import(&self.layout.require(dir, Stage::GenData)?)
    }

    fn load_bank(&self) -> Result<ConceptBank> {
        let mut bank = load_bank(&self.layout.require(self.layout.bank(), Stage::GenData)?)?;
        label_bank(&mut bank, &self.config.data.scene);
        Ok(bank)
    }

    fn load_checkpoint(&self, model: &str, producer: Stage) -> Result<Checkpoint> {
        Checkpoint::load(&self.layout.require(self.layout.checkpoint(model), producer)?)
    }

    fn metadata(&self, stage: Stage, curve: &[f64]) -> Value {
        json!({"stage": stage.name(), "config": self.config, "loss_curve": curve})
    }

    pub fn train_classifier(&self) -> Result<()> {
        let train = self.load_samples(self.layout.train_dir())?;
        let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let cfg = ClassifierConfig { seed: self.seed("classifier", self.config.classifier.seed), ..self.config.classifier.clone() };
        let (model, curve) = train_classifier(&images, &labels, self.config.data.scene.classes, &cfg)?;
        let path = self.layout.checkpoint("classifier");
        save_checkpoint(&path, &model.to_checkpoint(self.metadata(Stage::TrainClassifier, &curve)))?;
        write_manifest(&self.layout, Stage::TrainClassifier, &self.config, &[self.layout.train_dir()], &[path])
    }

    pub fn train_embedder(&self) -> Result<()> {
        let train = self.load_samples(self.layout.train_dir())?;
        let bank = self.load_bank()?;
        let mut phrases: Vec<&str> = bank.class_ids().flat_map(|c| bank.texts(c)).collect();
        phrases.sort_unstable();
        phrases.dedup();
        let vocab = Vocabulary::build(phrases.iter().copied());
        let cfg = EmbedderConfig { seed: self.seed("embedder", self.config.embedder.seed), ..self.config.embedder.clone() };
        let pairs = caption_pairs(&train, cfg.distractor_caption_prob, self.seed("captions", 0));
        let (model, curve) = train_embedder(&pairs, vocab, &phrases, &cfg)?;
        let path = self.layout.checkpoint("embedder");
        save_checkpoint(&path, &model.to_checkpoint(self.metadata(Stage::TrainEmbedder, &curve)))?;
        write_manifest(
            &self.layout,
            Stage::TrainEmbedder,
            &self.config,
            &[self.layout.train_dir(), self.layout.bank()],
            &[path],
        )
    }

    pub fn train_sae(&self) -> Result<()> {
        let ck = self.load_checkpoint("classifier", Stage::TrainClassifier)?;
        let classifier = ClassifierModel::from_checkpoint(&ck)?;
        let pool = generate(&self.config.data.scene, self.config.data.sae_pool, self.seed("sae-pool", 0))?;
        // Same 8-bit quantization as the exported datasets.
        let images = pool
            .iter()
            .map(|s| Image::from_ppm_bytes(&s.image.to_ppm_bytes()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let features = classifier.features(&refs)?;
        let cfg = SaeConfig { seed: self.seed("sae", self.config.sae.seed), ..self.config.sae.clone() };
        let (sae, curve) = train_sae(&features, &cfg)?;
        let path = self.layout.checkpoint("sae");
        save_checkpoint(&path, &sae.to_checkpoint(self.metadata(Stage::TrainSae, &curve)))?;
        write_manifest(&self.layout, Stage::TrainSae, &self.config, &[self.layout.checkpoint("classifier")], &[path])
    }

    pub fn train_aligner(&self) -> Result<()> {
        let classifier = ClassifierModel::from_checkpoint(&self.load_checkpoint("classifier", Stage::TrainClassifier)?)?;
        let embedder = JointEmbedder::from_checkpoint(&self.load_checkpoint("embedder", Stage::TrainEmbedder)?)?;
        let train = self.load_samples(self.layout.train_dir())?;
        let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let cfg = AlignConfig { seed: self.seed("aligner", self.config.aligner.seed), ..self.config.aligner.clone() };
        let aligner = train_aligner(&classifier, &embedder, &images, &cfg)?;
        let path = self.layout.checkpoint("aligner");
        save_checkpoint(&path, &aligner.to_checkpoint(self.metadata(Stage::TrainAligner, &[aligner.residual])))?;
        write_manifest(
            &self.layout,
            Stage::TrainAligner,
            &self.config,
            &[self.layout.train_dir(), self.layout.checkpoint("classifier"), self.layout.checkpoint("embedder")],
            &[path],
        )
    }

    /// Explanation config with the run-derived synthesis seed.
    pub fn explain_config(&self) -> ExplainConfig {
        let mut cfg = self.config.explain.clone();
        cfg.viz.seed = self.seed("viz", cfg.viz.seed);
        cfg
    }

    fn bench_seed(&self) -> u64 {
        self.seed("per-image", 0)
    }

    fn sae_in_use(&self) -> bool {
        self.config.use_sae && self.layout.checkpoint("sae").exists()
    }

    fn model_inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.layout.test_dir(), self.layout.bank(), self.layout.train_dir()];
        let models: &[&str] = if self.sae_in_use() {
            &["classifier", "embedder", "aligner", "sae"]
        } else {
            &["classifier", "embedder", "aligner"]
        };
        v.extend(models.iter().map(|m| self.layout.checkpoint(m)));
        v
    }

    /// Loads every model the explanation stages need. Without a usable SAE
    /// the raw feature space is used.
    pub fn load_trained(&self) -> Result<Trained> {
        let classifier = ClassifierModel::from_checkpoint(&self.load_checkpoint("classifier", Stage::TrainClassifier)?)?;
        let embedder = JointEmbedder::from_checkpoint(&self.load_checkpoint("embedder", Stage::TrainEmbedder)?)?;
        let aligner = Aligner::from_checkpoint(&self.load_checkpoint("aligner", Stage::TrainAligner)?)?;
        let sae = if self.sae_in_use() {
            Some(SparseAutoencoder::from_checkpoint(&self.load_checkpoint("sae", Stage::TrainSae)?)?)
        } else {
            log::info!("no SAE in use; explaining in raw feature space");
            None
        };
        let train = self.load_samples(self.layout.train_dir())?;
        let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let magnitude = magnitude_spectrum(self.config.explain.viz.magnitude, &images)?;
        let bank = self.load_bank()?;
        let slices = (0..classifier.classes())
            .map(|c| {
                let entries = bank
                    .entries(c)
                    .ok_or_else(|| Error::Config(format!("bank has no descriptions for class {c}")))?;
                EmbeddedBank::new(&embedder, entries.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let test = self.load_samples(self.layout.test_dir())?;
        Ok(Trained { classifier, sae, embedder, aligner, magnitude, slices, test })
    }

    /// Explains the configured test images with the configured method.
    pub fn explain(&self) -> Result<Vec<Explanation>> {
        let trained = self.load_trained()?;
        let models = trained.models();
        let dir = self.layout.explanations();
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let base = self.explain_config();
        let mut out = Vec::new();
        for &i in &self.config.explain_images {
            let image = &trained.test[i].image;
            let input = format!("test/{i:06}");
            let (crop_seed, random_seed) = image_seeds(self.bench_seed(), i);
            let mut cfg = base.clone();
            cfg.crop.seed = crop_seed;
            cfg.random_seed = random_seed;
            let class = match self.config.class {
                Some(c) => c,
                None => trained.classifier.predict(&[image])?[0],
            };
            let bank = &trained.slices[class];
            let explanation = match self.config.method {
                Mode::Texter => {
                    let (mut e, concept) = explain_texter(&models, bank, image, &input, Some(class), &cfg)?;
                    let ppm = dir.join(format!("{i:06}_concept.ppm"));
                    concept.image.write_ppm(&ppm)?;
                    write_json(&dir.join(format!("{i:06}_concept.json")), &concept.sidecar(&cfg.viz))?;
                    e.concept_image_path = Some(self.layout.relative(&ppm));
                    e
                }
                Mode::Ttc => explain_ttc(&models, bank, image, &input, Some(class), &cfg)?,
                Mode::Random => explain_random(bank, &input, class, &cfg)?,
            };
            write_json(
                &dir.join(format!("{i:06}.json")),
                &json!({"explanation": explanation, "space": trained.space(), "config": self.config}),
            )?;
            out.push(explanation);
        }
        write_manifest(&self.layout, Stage::Explain, &self.config, &self.model_inputs(), &[dir])?;
        Ok(out)
    }

    fn bench_config(&self) -> BenchConfig {
        BenchConfig { explain: self.explain_config(), bootstrap: self.config.bootstrap.clone(), seed: self.bench_seed() }
    }

    /// Faithfulness benchmark over the whole test set.
    pub fn bench_faithfulness(&self) -> Result<FaithfulnessReport> {
        let trained = self.load_trained()?;
        let output = faithfulness_benchmark(&trained.models(), &trained.slices, &trained.test, &self.bench_config())
            .stage("benchmark")?;
        let path = self.layout.reports().join("faithfulness.json");
        write_json(&path, &json!({"report": output.report, "space": trained.space(), "config": self.config}))?;
        write_manifest(&self.layout, Stage::BenchFaithfulness, &self.config, &self.model_inputs(), &[path])?;
        Ok(output.report)
    }

    /// Validity of concept images for each test image's predicted class, plus
    /// the joint-space caption score of TEXTER and text-to-concept descriptions.
    pub fn evaluate(&self) -> Result<EvaluationReport> {
        let trained = self.load_trained()?;
        let models = trained.models();
        let output = faithfulness_benchmark(&models, &trained.slices, &trained.test, &self.bench_config())
            .stage("benchmark")?;
        let pairs: Vec<(&Image, &Image, usize)> = output
            .report
            .records
            .iter()
            .map(|r| (&trained.test[r.index].image, &output.concepts[output.concept_of[r.index]].image, r.class))
            .collect();
        let mut validity = validity_metrics(&trained.classifier, &pairs, &self.config.bootstrap)?;
        validity.space = Some(trained.space());

        let mut caption = Vec::new();
        for mode in [Mode::Texter, Mode::Ttc] {
            let scores = crate::par::try_map_range(output.report.records.len(), |i| {
                let r = &output.report.records[i];
                let top = &r.top.iter().find(|(m, _)| *m == mode).expect("every method recorded").1;
                let bank = &trained.slices[r.class];
                let texts: Vec<&str> = top.iter().map(|&j| bank.entries[j].text.as_str()).collect();
                let image = &output.concepts[output.concept_of[i]].image;
                clipscore_analog(&trained.embedder, image, &self.config.data.scene.class_name(r.class), &texts)
            })?;
            caption.push(CaptionScore { method: mode, mean: scores.iter().sum::<f64>() / scores.len() as f64 });
        }
        let report = EvaluationReport { space: trained.space(), validity, caption_score: caption };
        let path = self.layout.reports().join("evaluation.json");
        write_json(&path, &json!({"report": report, "config": self.config}))?;
        write_manifest(&self.layout, Stage::Evaluate, &self.config, &self.model_inputs(), &[path])?;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub method: Mode,
    /// Mean joint-space score of the method's descriptions against the concept image.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub space: Space,
    pub validity: ValidityReport,
    pub caption_score: Vec<CaptionScore>,
}

/// Pairs each training image with its distractor caption with probability `distractor_prob`, else its causal one.
pub fn caption_pairs(samples: &[Sample], distractor_prob: f64, seed: u64) -> Vec<(&Image, &str)> {
    let mut r = rng::stream(seed, "captions");
    samples
        .iter()
        .map(|s| {
            let pick_distractor = rng::uniform(&mut r, 0.0, 1.0) < distractor_prob;
            (&s.image, if pick_distractor { s.distractor.as_str() } else { s.causal.as_str() })
        })
        .collect()
}

/// Fixed magnitude spectrum for concept-image synthesis.
pub fn magnitude_spectrum(source: MagnitudeSource, images: &[&Image]) -> Result<Tensor> {
    match source {
        MagnitudeSource::Dataset => mean_magnitude_spectrum(images),
        MagnitudeSource::InverseFrequency => {
            let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image set".into()))?;
            let mut mean = [0.0; 3];
            let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
            for img in images {
                for (c, m) in mean.iter_mut().enumerate() {
                    for &v in img.channel(c).data() {
                        *m += v;
                        sum += v;
                        sq += v * v;
                        count += 1.0;
                    }
                }
            }
            let per_channel = count / 3.0;
            mean.iter_mut().for_each(|m| *m /= per_channel);
            let overall = sum / count;
            let std = (sq / count - overall * overall).max(0.0).sqrt();
            inverse_frequency_spectrum(first.height(), first.width(), mean, std)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), cfg);
    }

    #[test]
    fn reference_defaults_hold() {
        let c = RunConfig::default();
        assert_eq!((c.explain.attribution.steps, c.explain.attribution.k_neu, c.explain.k_con), (100, 6, 3));
        assert_eq!((c.sae.expansion, c.sae.topk_ratio, c.sae.learning_rate, c.sae.epochs), (8, 0.10, 5e-4, 10));
        assert_eq!(c.aligner.fraction, 0.2);
        assert_eq!(c.explain.viz.iterations, 512);
        assert_eq!((c.explain.crop.low, c.explain.crop.high, c.explain.crop.count), (0.25, 0.30, 6));
    }

    #[test]
    fn help_lists_every_key() {
        let text = RunConfig::describe_defaults();
        for key in ["seed", "data.sae_pool", "explain.viz.squash_gain", "sae.topk_ratio", "paths.out"] {
            assert!(text.contains(&format!(" {key} = ")), "{key} missing");
        }
        assert!(text.contains("* sae.expansion = 8"));
        assert!(text.contains("  seed = 0"));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let mut c = RunConfig { class: Some(9), ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.class = None;
        c.explain_images = vec![500];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_prerequisite_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { paths: Paths { out: dir.path().to_path_buf(), bank: None }, ..RunConfig::default() };
        let p = Pipeline::new(cfg).unwrap();
        match p.train_sae() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "train-classifier"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stage_seeds_are_distinct() {
        assert_ne!(stage_seed(0, "sae", 0), stage_seed(0, "aligner", 0));
        assert_ne!(stage_seed(0, "sae", 0), stage_seed(1, "sae", 0));
        assert_ne!(stage_seed(0, "sae", 0), stage_seed(0, "sae", 1));
    }
}
