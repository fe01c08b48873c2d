//! Per-class banks of candidate description phrases.
//!
//! A bank file is UTF-8 JSON lines, one description per line:
//! `{"class": 0, "source": "llm", "text": "long tail"}`. Texts are
//! normalized (trimmed, lowercased, internal whitespace collapsed) and
//! deduplicated per class on load.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PHRASE_TOKENS: usize = 5;
pub const MAX_GENERATED_TOKENS: usize = 3;
pub const MAX_PHRASES_PER_CALL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Vlm,
    Synthetic,
}

/// Ground-truth role of a phrase, known only for synthetic banks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EntryFlags {
    pub causal: bool,
    pub distractor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub text: String,
    pub source: Source,
    pub flags: EntryFlags,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: String,
    pub duplicates_removed: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptBank {
    classes: BTreeMap<usize, Vec<BankEntry>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BankLine {
    class: usize,
    source: Source,
    text: String,
}

/// Trim, lowercase and collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl ConceptBank {
    pub fn new(origin: impl Into<String>) -> Self {
        Self { classes: BTreeMap::new(), provenance: Provenance { origin: origin.into(), duplicates_removed: 0 } }
    }

    /// Adds a phrase; returns `false` (and counts a duplicate) if the normalized
    /// text is already present for `class`.
    pub fn insert(&mut self, class: usize, text: &str, source: Source) -> Result<bool> {
        self.insert_flagged(class, text, source, EntryFlags::default())
    }

    pub fn insert_flagged(
        &mut self,
        class: usize,
        text: &str,
        source: Source,
        flags: EntryFlags,
    ) -> Result<bool> {
        let text = normalize(text);
        let n = token_count(&text);
        if n == 0 || n > MAX_PHRASE_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "phrase {text:?} has {n} tokens (allowed 1..={MAX_PHRASE_TOKENS})"
            )));
        }
        let entries = self.classes.entry(class).or_default();
        if entries.iter().any(|e| e.text == text) {
            self.provenance.duplicates_removed += 1;
            return Ok(false);
        }
        entries.push(BankEntry { text, source, flags });
        Ok(true)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn entries(&self, class: usize) -> Option<&[BankEntry]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn entries_mut(&mut self, class: usize) -> Option<&mut Vec<BankEntry>> {
        self.classes.get_mut(&class)
    }

    pub fn texts(&self, class: usize) -> Vec<&str> {
        self.entries(class).map(|es| es.iter().map(|e| e.text.as_str()).collect()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(reader: impl BufRead, origin: &str) -> Result<Self> {
        let mut bank = Self::new(origin);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: origin.to_string(), line: i + 1, message };
            let rec: BankLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            bank.insert(rec.class, &rec.text, rec.source).map_err(|e| parse_err(e.to_string()))?;
        }
        if bank.classes.is_empty() {
            return Err(Error::Parse { path: origin.to_string(), line: 0, message: "bank has no classes".into() });
        }
        Ok(bank)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (&class, entries) in &self.classes {
            for e in entries {
                let line = BankLine { class, source: e.source, text: e.text.clone() };
                out.push_str(&serde_json::to_string(&line).expect("bank line serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Union of the listed classes' descriptions. Classes are visited in
    /// ascending id order, entries in insertion order; a phrase shared by
    /// several classes appears once, carrying the union of its flags.
    pub fn compose(&self, classes: &[usize]) -> Result<Vec<BankEntry>> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("compose needs at least one class".into()));
        }
        let mut ids: Vec<usize> = classes.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut out: Vec<BankEntry> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for id in ids {
            let entries = self
                .classes
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("class {id} not in bank")))?;
            for e in entries {
                match seen.get(&e.text) {
                    Some(&pos) => {
                        out[pos].flags.causal |= e.flags.causal;
                        out[pos].flags.distractor |= e.flags.distractor;
                    }
                    None => {
                        seen.insert(e.text.clone(), out.len());
                        out.push(e.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn load_bank(path: &Path) -> Result<ConceptBank> {
    let f = std::fs::File::open(path)?;
    ConceptBank::parse(BufReader::new(f), &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Llm,
    Vlm,
}

/// Text-generation prompt with `{class_name}` and `{existing_concepts}` placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    text: String,
}

const CLASS_SLOT: &str = "{class_name}";
const EXISTING_SLOT: &str = "{existing_concepts}";

impl PromptTemplate {
    pub fn new(role: PromptRole, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for slot in [CLASS_SLOT, EXISTING_SLOT] {
            let n = text.matches(slot).count();
            if n != 1 {
                return Err(Error::InvalidArgument(format!(
                    "template must contain {slot} exactly once, found {n}"
                )));
            }
        }
        Ok(Self { role, text })
    }

    pub fn builtin(role: PromptRole) -> Self {
        let text = match role {
            PromptRole::Llm => include_str!("../assets/prompts/llm.txt"),
            PromptRole::Vlm => include_str!("../assets/prompts/vlm.txt"),
        };
        Self::new(role, text).expect("bundled templates are valid")
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, class_name: &str, existing: &[String]) -> String {
        let existing = if existing.is_empty() { "none".to_string() } else { existing.join(", ") };
        self.text.replace(CLASS_SLOT, class_name).replace(EXISTING_SLOT, &existing)
    }
}

/// Pluggable text generator (an LLM, or a VLM with the image bound in).
pub trait TextClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String>;
}

/// Split a completion into candidate phrases (lines, `/`, `,` or `;` separated,
/// with list bullets and numbering stripped).
fn split_completion(raw: &str) -> Vec<String> {
    raw.split(['\n', '/', ',', ';'])
        .map(|s| {
            s.trim()
                .trim_start_matches(|c: char| c == '-' || c == '*' || c == '•' || c.is_ascii_digit() || c == '.' || c == ')')
                .trim()
                .to_string()
        })
        .map(|s| normalize(&s))
        .filter(|s| !s.is_empty())
        .collect()
}

fn mentions_class(phrase: &str, class_name: &str) -> bool {
    let class = normalize(class_name);
    if class.is_empty() {
        return false;
    }
    let padded = format!(" {phrase} ");
    padded.contains(&format!(" {class} "))
}

/// One generation round: render, call the client, and keep at most ten new
/// phrases of one to three words that neither name the class nor repeat `existing`.
pub fn generate_via_client(
    template: &PromptTemplate,
    class_name: &str,
    existing: &[String],
    client: &dyn TextClient,
) -> Result<Vec<String>> {
    let prompt = template.render(class_name, existing);
    let raw = client.complete(&prompt).map_err(Error::Client)?;
    let mut seen: HashSet<String> = existing.iter().map(|e| normalize(e)).collect();
    let mut out = Vec::new();
    for phrase in split_completion(&raw) {
        let n = token_count(&phrase);
        if n == 0 || n > MAX_GENERATED_TOKENS || mentions_class(&phrase, class_name) {
            continue;
        }
        if seen.insert(phrase.clone()) {
            out.push(phrase);
            if out.len() == MAX_PHRASES_PER_CALL {
                break;
            }
        }
    }
    Ok(out)
}

/// Repeats [`generate_via_client`] until `target` phrases exist or `max_rounds` pass.
pub fn grow_phrases(
    template: &PromptTemplate,
    class_name: &str,
    mut existing: Vec<String>,
    target: usize,
    max_rounds: usize,
    client: &dyn TextClient,
) -> Result<Vec<String>> {
    for _ in 0..max_rounds {
        if existing.len() >= target {
            break;
        }
        let fresh = generate_via_client(template, class_name, &existing, client)?;
        let room = target - existing.len();
        existing.extend(fresh.into_iter().take(room));
    }
    Ok(existing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Echo(&'static str);

    impl TextClient for Echo {
        fn complete(&self, _: &str) -> std::result::Result<String, String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn duplicate_and_case_variants_collapse() {
        let jsonl = r#"{"class":0,"source":"llm","text":"long tail"}
{"class":0,"source":"llm","text":"long tail"}
{"class":0,"source":"vlm","text":"  Long   Tail "}
{"class":1,"source":"llm","text":"long tail"}
"#;
        let bank = ConceptBank::parse(jsonl.as_bytes(), "mem").unwrap();
        assert_eq!(bank.texts(0), vec!["long tail"]);
        assert_eq!(bank.texts(1), vec!["long tail"]);
        assert_eq!(bank.provenance.duplicates_removed, 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let jsonl = "{\"class\":0,\"source\":\"llm\",\"text\":\"a\"}\n{oops}\n";
        match ConceptBank::parse(jsonl.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_source = "{\"class\":0,\"source\":\"gpt\",\"text\":\"a\"}\n";
        assert!(matches!(ConceptBank::parse(bad_source.as_bytes(), "mem"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(ConceptBank::parse("\n\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn overlong_phrase_is_rejected() {
        let mut bank = ConceptBank::new("t");
        assert!(bank.insert(0, "one two three four five six", Source::Llm).is_err());
        assert!(bank.insert(0, "one two three four five", Source::Llm).unwrap());
    }

    #[test]
    fn compose_union_dedups_and_orders_by_class() {
        let mut bank = ConceptBank::new("t");
        for t in ["a b", "shared"] {
            bank.insert(2, t, Source::Llm).unwrap();
        }
        for t in ["c", "shared", "d"] {
            bank.insert(1, t, Source::Vlm).unwrap();
        }
        let texts = |v: Vec<BankEntry>| v.into_iter().map(|e| e.text).collect::<Vec<_>>();
        assert_eq!(texts(bank.compose(&[1]).unwrap()), vec!["c", "shared", "d"]);
        let both = texts(bank.compose(&[2, 1]).unwrap());
        assert_eq!(both, vec!["c", "shared", "d", "a b"]);
        assert_eq!(both, texts(bank.compose(&[1, 2]).unwrap()));
        assert_eq!(both, texts(bank.compose(&[1, 2, 1]).unwrap()));
        assert!(bank.compose(&[]).is_err());
        assert!(bank.compose(&[7]).is_err());
    }

    #[test]
    fn save_load_is_semantically_identical() {
        let mut bank = ConceptBank::new("t");
        bank.insert(0, "Red Cross", Source::Llm).unwrap();
        bank.insert(3, "blue stripes", Source::Vlm).unwrap();
        bank.insert(3, "x y z", Source::Synthetic).unwrap();
        let back = ConceptBank::parse(bank.to_jsonl().as_bytes(), "mem").unwrap();
        assert_eq!(back.classes, bank.classes);
    }

    #[test]
    fn stub_client_output_is_filtered() {
        let t = PromptTemplate::builtin(PromptRole::Llm);
        let out = generate_via_client(&t, "cat", &[], &Echo("long tail / long tail / cat")).unwrap();
        assert_eq!(out, vec!["long tail"]);
        let out = generate_via_client(&t, "cat", &[], &Echo("- very long striped tail\n- whiskers")).unwrap();
        assert_eq!(out, vec!["whiskers"]);
        let out = generate_via_client(&t, "cat", &["whiskers".into()], &Echo("- Whiskers\n- fur")).unwrap();
        assert_eq!(out, vec!["fur"]);
    }

    #[test]
    fn at_most_ten_phrases_per_call() {
        let many = (0..25).map(|i| format!("- concept{i}")).collect::<Vec<_>>().join("\n");
        let leaked: &'static str = Box::leak(many.into_boxed_str());
        let out = generate_via_client(&PromptTemplate::builtin(PromptRole::Vlm), "dog", &[], &Echo(leaked)).unwrap();
        assert_eq!(out.len(), MAX_PHRASES_PER_CALL);
    }

    #[test]
    fn client_failure_is_retryable_error() {
        struct Fail;
        impl TextClient for Fail {
            fn complete(&self, _: &str) -> std::result::Result<String, String> {
                Err("timeout".into())
            }
        }
        let t = PromptTemplate::builtin(PromptRole::Llm);
        assert!(matches!(generate_via_client(&t, "cat", &[], &Fail), Err(Error::Client(_))));
    }

    #[test]
    fn repeated_rounds_accumulate_without_duplicates() {
        // Each call proposes four phrases, two of which repeat earlier rounds.
        struct Counter(Cell<usize>);
        impl TextClient for Counter {
            fn complete(&self, _: &str) -> std::result::Result<String, String> {
                let k = self.0.get();
                self.0.set(k + 1);
                let base = 2 * k;
                Ok(format!("- p{}\n- p{}\n- p{}\n- p{}", base.saturating_sub(2), base.saturating_sub(1), base, base + 1))
            }
        }
        let t = PromptTemplate::builtin(PromptRole::Llm);
        let out = grow_phrases(&t, "cat", Vec::new(), 12, 50, &Counter(Cell::new(0))).unwrap();
        assert_eq!(out.len(), 12);
        let unique: HashSet<_> = out.iter().collect();
        assert_eq!(unique.len(), 12);
    }

    #[test]
    fn templates_have_each_slot_once() {
        for role in [PromptRole::Llm, PromptRole::Vlm] {
            let t = PromptTemplate::builtin(role);
            let r = t.render("koala", &["grey fur".into()]);
            assert!(r.contains("koala") && r.contains("grey fur") && !r.contains('{'));
        }
        assert!(PromptTemplate::new(PromptRole::Llm, "{class_name} {class_name} {existing_concepts}").is_err());
    }
}
