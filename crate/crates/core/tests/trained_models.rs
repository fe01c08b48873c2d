//! Behavioural checks on models trained with the default pipeline configuration.

use std::sync::OnceLock;

use texter::conceptbank::load_bank;
use texter::evalharness::{clipscore_analog, validity_metrics, BootstrapConfig};
use texter::image::Image;
use texter::models::{finetune_multilabel_head, Checkpoint, ClassifierModel, HeadConfig, JointEmbedder};
use texter::numerics::cosine;
use texter::pipeline::{Paths, Pipeline, RunConfig, Stage};
use texter::rng;
use texter::synthdata::{generate, generate_multilabel, import, label_bank, Sample};

struct Fixture {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
    classifier: ClassifierModel,
    embedder: JointEmbedder,
    train: Vec<Sample>,
    test: Vec<Sample>,
    phrases: Vec<String>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig { paths: Paths { out: dir.path().join("run"), bank: None }, ..RunConfig::default() };
        let pipeline = Pipeline::new(config).unwrap();
        for stage in [Stage::GenData, Stage::TrainClassifier, Stage::TrainEmbedder] {
            pipeline.run(stage).unwrap();
        }
        let layout = &pipeline.layout;
        let classifier = ClassifierModel::from_checkpoint(&Checkpoint::load(&layout.checkpoint("classifier")).unwrap()).unwrap();
        let embedder = JointEmbedder::from_checkpoint(&Checkpoint::load(&layout.checkpoint("embedder")).unwrap()).unwrap();
        let mut bank = load_bank(&layout.bank()).unwrap();
        label_bank(&mut bank, &pipeline.config.data.scene);
        let mut phrases: Vec<String> = bank.class_ids().flat_map(|c| bank.texts(c)).map(String::from).collect();
        phrases.sort_unstable();
        phrases.dedup();
        Fixture {
            train: import(&layout.train_dir()).unwrap(),
            test: import(&layout.test_dir()).unwrap(),
            _dir: dir,
            pipeline,
            classifier,
            embedder,
            phrases,
        }
    })
}

fn images(samples: &[Sample]) -> Vec<&Image> {
    samples.iter().map(|s| &s.image).collect()
}

#[test]
fn classifier_fits_the_training_set() {
    let f = fixture();
    let predicted = f.classifier.predict(&images(&f.train)).unwrap();
    let correct = predicted.iter().zip(&f.train).filter(|(p, s)| **p == s.label).count();
    let acc = correct as f64 / f.train.len() as f64;
    assert!(acc >= 0.98, "train accuracy {acc}");
}

#[test]
fn multilabel_head_finds_both_objects() {
    let f = fixture();
    let spec = &f.pipeline.config.data.scene;
    let train = generate_multilabel(spec, 1000, 0.5, 31).unwrap();
    let held_out = generate_multilabel(spec, 300, 1.0, 32).unwrap();
    let labels: Vec<Vec<usize>> = train.iter().map(|s| s.labels.clone()).collect();
    let cfg = HeadConfig::default();
    let (model, _) = finetune_multilabel_head(&f.classifier, &images(&train), &labels, &cfg).unwrap();
    let both = held_out
        .iter()
        .filter(|s| {
            let set = model.predict_set(&s.image, cfg.threshold).unwrap();
            s.labels.iter().all(|c| set.contains(c))
        })
        .count();
    let rate = both as f64 / held_out.len() as f64;
    assert!(rate >= 0.80, "both classes predicted on {rate:.3} of two-object scenes");
}

#[test]
fn embedder_retrieves_caption_phrases() {
    let f = fixture();
    let texts: Vec<&str> = f.phrases.iter().map(String::as_str).collect();
    let text_emb = f.embedder.embed_texts(&texts).unwrap();
    let image_emb = f.embedder.embed_images(&images(&f.test)).unwrap();
    let hits = f
        .test
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let scores: Vec<f64> = (0..texts.len()).map(|j| cosine(image_emb.row(*i), text_emb.row(j))).collect();
            let top = texter::models::argmax(&scores);
            s.captions.iter().any(|c| c == texts[top])
        })
        .count();
    let rate = hits as f64 / f.test.len() as f64;
    assert!(rate >= 0.90, "top-1 phrase is a caption phrase on {rate:.3} of held-out images");
}

#[test]
fn caption_score_prefers_the_matching_caption_set() {
    let f = fixture();
    let spec = &f.pipeline.config.data.scene;
    let mut r = rng::seeded(41);
    let mut wins = 0;
    for s in &f.test {
        let own: Vec<&str> = s.captions.iter().map(String::as_str).collect();
        let other = loop {
            let o = &f.test[rng::index(&mut r, f.test.len())];
            if o.label != s.label {
                break o;
            }
        };
        let shuffled: Vec<&str> = other.captions.iter().map(String::as_str).collect();
        let a = clipscore_analog(&f.embedder, &s.image, &spec.class_name(s.label), &own).unwrap();
        let b = clipscore_analog(&f.embedder, &s.image, &spec.class_name(other.label), &shuffled).unwrap();
        if a >= b {
            wins += 1;
        }
    }
    let rate = wins as f64 / f.test.len() as f64;
    assert!(rate >= 0.90, "matching caption set scores higher on {rate:.3} of samples");
}

#[test]
fn noise_concept_images_score_near_chance() {
    let f = fixture();
    let side = f.pipeline.config.data.scene.side;
    let originals = generate(&f.pipeline.config.data.scene, 400, 51).unwrap();
    let mut r = rng::seeded(52);
    let noise: Vec<Image> = (0..originals.len())
        .map(|_| Image::new(side, side, (0..3 * side * side).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect()).unwrap())
        .collect();
    let pairs: Vec<(&Image, &Image, usize)> =
        originals.iter().zip(&noise).map(|(s, n)| (&s.image, n, s.label)).collect();
    let v = validity_metrics(&f.classifier, &pairs, &BootstrapConfig::default()).unwrap();
    assert!((v.acc1 - v.chance).abs() <= 0.1, "Acc1 {} vs chance {}", v.acc1, v.chance);
}
