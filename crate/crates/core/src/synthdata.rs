//! Synthetic scenes with a small causal marker and a dominant distractor background.
//!
//! Each image is a deterministic background texture (the distractor, drawn
//! independently of the label) with one saturated glyph stamped at a random
//! position (the causal marker, which alone determines the label), plus
//! optional Gaussian pixel noise.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conceptbank::{ConceptBank, EntryFlags, Source};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Cross,
    Ring,
    Triangle,
    Square,
    Diamond,
    Bar,
    Dot,
}

impl Glyph {
    /// Whether cell `(y, x)` of a `side × side` box is inked.
    pub fn covers(self, y: usize, x: usize, side: usize) -> bool {
        let c = (side as f64 - 1.0) / 2.0;
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        let r = (dy * dy + dx * dx).sqrt();
        let half = side as f64 / 2.0;
        match self {
            Glyph::Cross => dy.abs() <= 1.0 || dx.abs() <= 1.0,
            Glyph::Ring => r >= half - 2.2 && r <= half,
            Glyph::Triangle => dx.abs() <= (y as f64 + 1.0) / 2.0,
            Glyph::Square => true,
            Glyph::Diamond => dy.abs() + dx.abs() <= c,
            Glyph::Bar => dy.abs() <= 1.5,
            Glyph::Dot => r <= half - 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Checks,
    Speckle,
    Grid,
    Waves,
    Dots,
}

pub struct Marker {
    pub phrase: &'static str,
    pub glyph: Glyph,
    pub color: [f64; 3],
}

pub struct Distractor {
    pub phrase: &'static str,
    pub texture: Texture,
    pub base: [f64; 3],
    pub accent: [f64; 3],
}

pub const MARKERS: [Marker; 8] = [
    Marker { phrase: "red cross", glyph: Glyph::Cross, color: [0.95, 0.08, 0.08] },
    Marker { phrase: "yellow ring", glyph: Glyph::Ring, color: [0.97, 0.92, 0.10] },
    Marker { phrase: "cyan triangle", glyph: Glyph::Triangle, color: [0.08, 0.92, 0.95] },
    Marker { phrase: "magenta square", glyph: Glyph::Square, color: [0.92, 0.08, 0.88] },
    Marker { phrase: "white diamond", glyph: Glyph::Diamond, color: [0.98, 0.98, 0.98] },
    Marker { phrase: "orange bar", glyph: Glyph::Bar, color: [1.00, 0.55, 0.00] },
    Marker { phrase: "lime dot", glyph: Glyph::Dot, color: [0.60, 1.00, 0.10] },
    Marker { phrase: "violet cross", glyph: Glyph::Cross, color: [0.55, 0.20, 1.00] },
];

/// Achromatic background textures, told apart by pattern and luminance only.
pub const DISTRACTORS: [Distractor; 6] = [
    Distractor { phrase: "horizontal stripes", texture: Texture::Stripes, base: [0.62, 0.62, 0.62], accent: [0.36, 0.36, 0.36] },
    Distractor { phrase: "square grid", texture: Texture::Grid, base: [0.66, 0.66, 0.66], accent: [0.34, 0.34, 0.34] },
    Distractor { phrase: "wavy lines", texture: Texture::Waves, base: [0.48, 0.48, 0.48], accent: [0.26, 0.26, 0.26] },
    Distractor { phrase: "dotted pattern", texture: Texture::Dots, base: [0.58, 0.58, 0.58], accent: [0.30, 0.30, 0.30] },
    // Blocky and noise textures last: they resemble upsampled synthesized patches.
    Distractor { phrase: "checkerboard", texture: Texture::Checks, base: [0.54, 0.54, 0.54], accent: [0.28, 0.28, 0.28] },
    Distractor { phrase: "gray speckle", texture: Texture::Speckle, base: [0.56, 0.56, 0.56], accent: [0.36, 0.36, 0.36] },
];

const FILLER_ADJECTIVES: [&str; 16] = [
    "smooth", "rough", "shiny", "soft", "sharp", "faint", "glossy", "fuzzy", "narrow", "wide",
    "tiny", "large", "curved", "jagged", "blurry", "crisp",
];
const FILLER_NOUNS: [&str; 12] = [
    "edges", "shadow", "outline", "surface", "corner", "texture", "highlight", "reflection",
    "contour", "border", "layer", "fold",
];

impl Distractor {
    fn color_at(&self, y: usize, x: usize) -> [f64; 3] {
        let accent = match self.texture {
            Texture::Stripes => (y / 2) % 2 == 1,
            Texture::Checks => (y / 4 + x / 4) % 2 == 1,
            Texture::Speckle => {
                let h = rng::derive_seed(0x5eed, ((y as u64) << 32) | x as u64);
                h.is_multiple_of(3)
            }
            Texture::Grid => y.is_multiple_of(6) || x.is_multiple_of(6),
            Texture::Waves => (x as f64 * 0.9 + 2.0 * (y as f64 * 0.45).sin()).sin() > 0.0,
            Texture::Dots => y % 5 == 2 && x % 5 == 2,
        };
        if accent {
            self.accent
        } else {
            self.base
        }
    }
}

/// Parameters of the synthetic scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Image side length in pixels.
    pub side: usize,
    /// Number of classes; class `c` is marked by `MARKERS[c]`.
    pub classes: usize,
    /// Palette size; distractors are `DISTRACTORS[..distractors]`.
    pub distractors: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Side of the square box the marker glyph is drawn in.
    pub marker_side: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { side: 32, classes: 4, distractors: 4, noise: 0.02, marker_side: 9 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 || self.classes > MARKERS.len() {
            return err(format!("classes must be in 2..={}, got {}", MARKERS.len(), self.classes));
        }
        if self.side < 8 {
            return err(format!("image side must be >= 8, got {}", self.side));
        }
        if self.distractors == 0 || self.distractors > DISTRACTORS.len() {
            return err(format!("distractors must be in 1..={}, got {}", DISTRACTORS.len(), self.distractors));
        }
        if !(0.0..=0.1).contains(&self.noise) {
            return err(format!("noise must be in [0, 0.1], got {}", self.noise));
        }
        if self.marker_side == 0
            || self.marker_side > self.side
            || (self.marker_side * self.marker_side) as f64 > 0.10 * (self.side * self.side) as f64
        {
            return err(format!("marker box {} exceeds 10% of the image", self.marker_side));
        }
        Ok(())
    }

    pub fn marker(&self, class: usize) -> &'static Marker {
        &MARKERS[class]
    }

    pub fn palette(&self) -> &'static [Distractor] {
        &DISTRACTORS[..self.distractors]
    }

    pub fn causal_phrase(&self, class: usize) -> &'static str {
        MARKERS[class].phrase
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("class {class}")
    }

    /// Every caption phrase the scene can produce.
    pub fn vocabulary_phrases(&self) -> Vec<&'static str> {
        let mut v: Vec<&str> = (0..self.classes).map(|c| self.causal_phrase(c)).collect();
        v.extend(self.palette().iter().map(|d| d.phrase));
        v
    }
}

/// Placement of one marker glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerBox {
    pub class: usize,
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl MarkerBox {
    fn overlaps(&self, other: &MarkerBox) -> bool {
        self.top < other.top + other.side
            && other.top < self.top + self.side
            && self.left < other.left + other.side
            && other.left < self.left + self.side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Primary class (the single label for single-marker scenes).
    pub label: usize,
    /// All classes present (multi-hot support).
    pub labels: Vec<usize>,
    pub causal: String,
    pub distractor: String,
    pub captions: Vec<String>,
    pub markers: Vec<MarkerBox>,
}

impl Sample {
    /// Number of pixels inked by marker glyphs.
    pub fn causal_pixel_count(&self) -> usize {
        let mut count = 0;
        for y in 0..self.image.height() {
            for x in 0..self.image.width() {
                if self.markers.iter().any(|m| inked(m, y, x)) {
                    count += 1;
                }
            }
        }
        count
    }
}

fn inked(m: &MarkerBox, y: usize, x: usize) -> bool {
    y >= m.top
        && y < m.top + m.side
        && x >= m.left
        && x < m.left + m.side
        && MARKERS[m.class].glyph.covers(y - m.top, x - m.left, m.side)
}

fn render(spec: &SceneSpec, distractor: usize, markers: &[MarkerBox], noise_rng: &mut rng::Rng) -> Image {
    let d = &spec.palette()[distractor];
    let mut img = Image::filled(spec.side, spec.side, [0.0; 3]);
    for y in 0..spec.side {
        for x in 0..spec.side {
            img.set_pixel(y, x, d.color_at(y, x));
        }
    }
    for m in markers {
        let color = MARKERS[m.class].color;
        for dy in 0..m.side {
            for dx in 0..m.side {
                if MARKERS[m.class].glyph.covers(dy, dx, m.side) {
                    img.set_pixel(m.top + dy, m.left + dx, color);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for c in 0..3 {
            for y in 0..spec.side {
                for x in 0..spec.side {
                    let v = img.get(c, y, x) + spec.noise * rng::normal(noise_rng);
                    img.set(c, y, x, v);
                }
            }
        }
    }
    img.clamp();
    img
}

fn place(spec: &SceneSpec, class: usize, r: &mut rng::Rng) -> MarkerBox {
    let span = spec.side - spec.marker_side + 1;
    MarkerBox { class, top: rng::index(r, span), left: rng::index(r, span), side: spec.marker_side }
}

fn build_sample(spec: &SceneSpec, classes: &[usize], r: &mut rng::Rng) -> Sample {
    let distractor = rng::index(r, spec.distractors);
    let mut markers: Vec<MarkerBox> = Vec::with_capacity(classes.len());
    for &c in classes {
        // Rejection-sample non-overlapping boxes; the scene is large enough that this terminates quickly.
        loop {
            let b = place(spec, c, r);
            if markers.iter().all(|m| !m.overlaps(&b)) {
                markers.push(b);
                break;
            }
        }
    }
    let image = render(spec, distractor, &markers, r);
    let dphrase = spec.palette()[distractor].phrase.to_string();
    let mut captions: Vec<String> = classes.iter().map(|&c| spec.causal_phrase(c).to_string()).collect();
    captions.push(dphrase.clone());
    let mut labels = classes.to_vec();
    labels.sort_unstable();
    Sample {
        image,
        label: classes[0],
        labels,
        causal: spec.causal_phrase(classes[0]).to_string(),
        distractor: dphrase,
        captions,
        markers,
    }
}

/// Deterministic single-marker samples with balanced labels.
pub fn generate(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng::shuffle(&mut rng::stream(seed, "labels"), &mut labels);
    let base = rng::derive_seed(seed, rng::tag("samples"));
    Ok(par::map_range(n, |i| {
        let mut r = rng::seeded(rng::derive_seed(base, i as u64));
        build_sample(spec, &[labels[i]], &mut r)
    }))
}

/// Samples carrying one or two markers of distinct classes (`two_fraction` of them two).
pub fn generate_multilabel(spec: &SceneSpec, n: usize, two_fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if 4 * spec.marker_side > spec.side * 2 {
        return Err(Error::InvalidArgument("scene too small for two markers".into()));
    }
    let base = rng::derive_seed(seed, rng::tag("multilabel"));
    Ok(par::map_range(n, |i| {
        let mut r = rng::seeded(rng::derive_seed(base, i as u64));
        let first = rng::index(&mut r, spec.classes);
        let mut classes = vec![first];
        if rng::uniform(&mut r, 0.0, 1.0) < two_fraction {
            let second = (first + 1 + rng::index(&mut r, spec.classes - 1)) % spec.classes;
            classes.push(second);
        }
        build_sample(spec, &classes, &mut r)
    }))
}

/// Per-class bank sizes by source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSizes {
    pub llm: usize,
    pub vlm: usize,
}

impl BankSizes {
    /// 100 generic + 30 image-grounded descriptions per class.
    pub const FULL: BankSizes = BankSizes { llm: 100, vlm: 30 };
    /// Desk-scale default (one fifth of full scale).
    pub const DESK: BankSizes = BankSizes { llm: 20, vlm: 6 };

    pub fn total(&self) -> usize {
        self.llm + self.vlm
    }
}

impl Default for BankSizes {
    fn default() -> Self {
        Self::DESK
    }
}

pub fn filler_pool() -> Vec<String> {
    FILLER_ADJECTIVES
        .iter()
        .flat_map(|a| FILLER_NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect()
}

/// Ground-truth bank: per class the causal phrase (generic, "llm"), every
/// distractor phrase (image-grounded, "vlm") and filler phrases up to `sizes`.
pub fn attribute_bank(spec: &SceneSpec, sizes: BankSizes) -> Result<ConceptBank> {
    spec.validate()?;
    let d = spec.distractors;
    if sizes.llm < 1 || sizes.vlm < d {
        return Err(Error::InvalidArgument(format!(
            "bank needs llm >= 1 and vlm >= {d} (one per distractor), got {sizes:?}"
        )));
    }
    let pool = filler_pool();
    let fillers_needed = sizes.llm - 1 + sizes.vlm - d;
    if fillers_needed > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "bank of {} needs {fillers_needed} fillers, pool has {}",
            sizes.total(),
            pool.len()
        )));
    }
    let mut bank = ConceptBank::new("synthetic");
    for c in 0..spec.classes {
        let causal = EntryFlags { causal: true, distractor: false };
        bank.insert_flagged(c, spec.causal_phrase(c), Source::Llm, causal)?;
        let mut fillers = pool.clone();
        rng::shuffle(&mut rng::stream(c as u64, "fillers"), &mut fillers);
        let mut fillers = fillers.into_iter();
        for _ in 0..sizes.llm - 1 {
            bank.insert(c, &fillers.next().expect("pool size checked"), Source::Llm)?;
        }
        let distractor = EntryFlags { causal: false, distractor: true };
        for dist in spec.palette() {
            bank.insert_flagged(c, dist.phrase, Source::Vlm, distractor)?;
        }
        for _ in 0..sizes.vlm - d {
            bank.insert(c, &fillers.next().expect("pool size checked"), Source::Vlm)?;
        }
    }
    Ok(bank)
}

/// Re-derive causal/distractor flags of a bank (e.g. one loaded from disk) from the scene.
pub fn label_bank(bank: &mut ConceptBank, spec: &SceneSpec) {
    let ids: Vec<usize> = bank.class_ids().collect();
    let distractors: Vec<&str> = spec.palette().iter().map(|d| d.phrase).collect();
    for c in ids {
        let causal = if c < spec.classes { Some(spec.causal_phrase(c)) } else { None };
        for e in bank.entries_mut(c).expect("listed class") {
            e.flags = EntryFlags {
                causal: Some(e.text.as_str()) == causal,
                distractor: distractors.contains(&e.text.as_str()),
            };
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    path: String,
    label: usize,
    labels: Vec<usize>,
    causal: String,
    distractors: Vec<String>,
    captions: Vec<String>,
}

/// Writes `manifest.jsonl` plus one P6 image per sample under `dir/images`.
pub fn export(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.ppm");
        s.image.write_ppm(&dir.join(&rel))?;
        let line = ManifestLine {
            path: rel,
            label: s.label,
            labels: s.labels.clone(),
            causal: s.causal.clone(),
            distractors: vec![s.distractor.clone()],
            captions: s.captions.clone(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Reads a directory written by [`export`]. Marker placements are not stored.
pub fn import(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join("manifest.jsonl");
    let f = std::fs::File::open(&path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let image = Image::read_ppm(&dir.join(&m.path))?;
        out.push(Sample {
            image,
            label: m.label,
            labels: m.labels,
            causal: m.causal,
            distractor: m.distractors.into_iter().next().unwrap_or_default(),
            captions: m.captions,
            markers: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no samples", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 20, 3).unwrap();
        let b = generate(&spec, 20, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&spec, 20, 4).unwrap());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let spec = SceneSpec { classes: 1, ..Default::default() };
        assert!(generate(&spec, 5, 0).is_err());
        let spec = SceneSpec { side: 7, marker_side: 2, ..Default::default() };
        assert!(generate(&spec, 5, 0).is_err());
        assert!(generate(&SceneSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn causal_region_stays_small() {
        let spec = SceneSpec::default();
        let area = (spec.side * spec.side) as f64;
        for s in generate(&spec, 1000, 9).unwrap() {
            let fraction = s.causal_pixel_count() as f64 / area;
            assert!(fraction > 0.0 && fraction <= 0.10, "causal fraction {fraction}");
        }
    }

    #[test]
    fn labels_are_balanced() {
        let spec = SceneSpec::default();
        let samples = generate(&spec, 400, 1).unwrap();
        for c in 0..spec.classes {
            let n = samples.iter().filter(|s| s.label == c).count() as f64;
            assert!((n - 100.0).abs() <= 20.0);
        }
    }

    #[test]
    fn noiseless_single_palette_differs_only_in_marker_boxes() {
        let spec = SceneSpec { noise: 0.0, distractors: 1, ..Default::default() };
        let samples = generate(&spec, 12, 9).unwrap();
        for a in &samples {
            for b in &samples {
                for y in 0..spec.side {
                    for x in 0..spec.side {
                        let in_box = |s: &Sample| s.markers.iter().any(|m| y >= m.top && y < m.top + m.side && x >= m.left && x < m.left + m.side);
                        if !in_box(a) && !in_box(b) {
                            assert_eq!(a.image.pixel(y, x), b.image.pixel(y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn captions_hold_one_causal_and_a_distractor() {
        let spec = SceneSpec::default();
        for s in generate(&spec, 30, 2).unwrap() {
            let causal: Vec<_> = s.captions.iter().filter(|c| (0..spec.classes).any(|k| spec.causal_phrase(k) == c.as_str())).collect();
            assert_eq!(causal, vec![&s.causal]);
            assert!(s.captions.contains(&s.distractor));
            assert!(s.captions.iter().all(|c| (1..=3).contains(&c.split_whitespace().count())));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn multilabel_boxes_do_not_overlap() {
        let spec = SceneSpec::default();
        let samples = generate_multilabel(&spec, 60, 1.0, 5).unwrap();
        for s in &samples {
            assert_eq!(s.labels.len(), 2);
            assert_ne!(s.labels[0], s.labels[1]);
            assert!(!s.markers[0].overlaps(&s.markers[1]));
        }
    }

    #[test]
    fn bank_has_single_causal_entry_per_class() {
        let spec = SceneSpec::default();
        let bank = attribute_bank(&spec, BankSizes::DESK).unwrap();
        for c in 0..spec.classes {
            let es = bank.entries(c).unwrap();
            assert_eq!(es.len(), 26);
            assert_eq!(es.iter().filter(|e| e.flags.causal).count(), 1);
            assert_eq!(es.iter().filter(|e| e.flags.distractor).count(), spec.distractors);
        }
    }

    #[test]
    fn full_scale_bank_has_130_descriptions() {
        let spec = SceneSpec::default();
        let bank = attribute_bank(&spec, BankSizes::FULL).unwrap();
        for c in 0..spec.classes {
            let es = bank.entries(c).unwrap();
            assert_eq!(es.len(), 130);
            assert_eq!(es.iter().filter(|e| e.source == Source::Llm).count(), 100);
            assert_eq!(es.iter().filter(|e| e.source == Source::Vlm).count(), 30);
        }
    }

    #[test]
    fn duplicated_filler_is_kept_once() {
        let spec = SceneSpec::default();
        let mut bank = attribute_bank(&spec, BankSizes::DESK).unwrap();
        let filler = bank.entries(0).unwrap().iter().find(|e| !e.flags.causal && !e.flags.distractor).unwrap().text.clone();
        assert!(!bank.insert(0, &filler, Source::Llm).unwrap());
        assert_eq!(bank.texts(0).iter().filter(|t| **t == filler).count(), 1);
    }

    #[test]
    fn label_bank_restores_flags_after_reload() {
        let spec = SceneSpec::default();
        let bank = attribute_bank(&spec, BankSizes::DESK).unwrap();
        let mut back = ConceptBank::parse(bank.to_jsonl().as_bytes(), "mem").unwrap();
        assert_ne!(back.entries(0), bank.entries(0));
        label_bank(&mut back, &spec);
        for c in 0..spec.classes {
            assert_eq!(back.entries(c), bank.entries(c));
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let samples = generate(&spec, 5, 8).unwrap();
        export(dir.path(), &samples).unwrap();
        let back = import(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.captions, b.captions);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}
