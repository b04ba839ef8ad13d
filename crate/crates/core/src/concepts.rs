//! Image-level concept sets: labels with confidences produced by a generative
//! vision-language model (scripted, oracle, or a live subprocess), and their
//! nearest-neighbour mapping onto a target vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::data_synth::{PanopticSegmentation, Vocabulary};
use crate::embedding::{encode_text, CategoryEmbeddingTable, TextEncoderSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_PROMPT: &str = "Identify all nonredundant classes of objects you can see";
pub const CONCEPT_SCHEMA_VERSION: u32 = 1;

/// Case-fold, trim and collapse internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Mean of the token probabilities that make up one concept.
pub fn aggregate_confidence(token_probs: &[f64]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::invalid("token probability list is empty"));
    }
    if let Some(p) = token_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("token probability {p} outside [0, 1]")));
    }
    Ok(token_probs.iter().sum::<f64>() / token_probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub image_id: String,
    pub concepts: Vec<Concept>,
    pub prompt: String,
}

impl ConceptSet {
    pub fn new(image_id: impl Into<String>, concepts: Vec<Concept>, prompt: impl Into<String>) -> Result<Self> {
        let set = ConceptSet { image_id: image_id.into(), concepts, prompt: prompt.into() };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.concepts {
            let key = normalize_label(&c.label);
            if key.is_empty() {
                return Err(Error::invalid(format!("blank concept label for {}", self.image_id)));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::invalid(format!("duplicate concept `{key}` for {}", self.image_id)));
            }
            if !(0.0..=1.0).contains(&c.confidence) {
                return Err(Error::invalid(format!("confidence {} of `{key}` outside [0, 1]", c.confidence)));
            }
            if let Some(tp) = &c.token_probs {
                let mean = aggregate_confidence(tp)?;
                if (mean - c.confidence).abs() > 1e-9 {
                    return Err(Error::invalid(format!("confidence of `{key}` disagrees with its token probabilities")));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.label.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConcept {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
}

/// On-disk concept file as written by a concept generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFile {
    pub schema_version: u32,
    pub prompt: String,
    pub results: BTreeMap<String, Vec<RawConcept>>,
}

impl ConceptFile {
    pub fn new(prompt: impl Into<String>) -> Self {
        ConceptFile { schema_version: CONCEPT_SCHEMA_VERSION, prompt: prompt.into(), results: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let f: ConceptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if f.schema_version != CONCEPT_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", f.schema_version));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Resolve one image's entry into a validated set. Token probabilities,
    /// when present, override any explicit confidence.
    pub fn concept_set(&self, image_id: &str) -> Result<ConceptSet> {
        let raw = self.results.get(image_id).ok_or_else(|| Error::Lookup(image_id.to_string()))?;
        let mut concepts = Vec::with_capacity(raw.len());
        for r in raw {
            let confidence = match (&r.token_probs, r.confidence) {
                (Some(tp), explicit) => {
                    let mean = aggregate_confidence(tp)?;
                    if explicit.is_some_and(|c| (c - mean).abs() > 1e-9) {
                        log::warn!("{image_id}: `{}` has both confidence and token_probs; using token_probs", r.label);
                    }
                    mean
                }
                (None, Some(c)) => c,
                (None, None) => return Err(Error::invalid(format!("{image_id}: `{}` has neither confidence nor token_probs", r.label))),
            };
            concepts.push(Concept { label: r.label.clone(), confidence, token_probs: r.token_probs.clone() });
        }
        ConceptSet::new(image_id, concepts, self.prompt.clone())
    }
}

/// Ground-truth category labels per image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleConcepts {
    labels: BTreeMap<String, Vec<String>>,
}

impl OracleConcepts {
    pub fn from_annotations<'a>(annotations: impl IntoIterator<Item = &'a PanopticSegmentation>, vocab: &Vocabulary) -> Self {
        let labels = annotations
            .into_iter()
            .map(|seg| {
                let ls = seg.categories_present().into_iter().map(|c| vocab.categories()[c].label.clone()).collect();
                (seg.image_id.clone(), ls)
            })
            .collect();
        OracleConcepts { labels }
    }
}

/// A subprocess that prints a concept file for the image given as its last
/// argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveAdapter {
    pub command: Vec<String>,
    pub image_dir: PathBuf,
}

impl LiveAdapter {
    fn run(&self, image_id: &str, prompt: &str) -> Result<ConceptFile> {
        let (prog, args) = self.command.split_first().ok_or_else(|| Error::Provider("live adapter command is empty".into()))?;
        let image = self.image_dir.join(format!("{image_id}.png"));
        let out = Command::new(prog)
            .args(args)
            .arg("--prompt")
            .arg(prompt)
            .arg(&image)
            .output()
            .map_err(|e| Error::Provider(format!("cannot start `{prog}`: {e}")))?;
        if !out.status.success() {
            return Err(Error::Provider(format!("`{prog}` exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        ConceptFile::parse(&String::from_utf8_lossy(&out.stdout)).map_err(|m| Error::Provider(format!("`{prog}` printed an invalid concept file: {m}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConceptSource {
    Scripted(ConceptFile),
    Oracle(OracleConcepts),
    Live { adapter: LiveAdapter, prompt: String },
}

pub fn provide_concepts(image_id: &str, source: &ConceptSource) -> Result<ConceptSet> {
    match source {
        ConceptSource::Scripted(file) => file.concept_set(image_id),
        ConceptSource::Oracle(oracle) => {
            let labels = oracle.labels.get(image_id).ok_or_else(|| Error::Lookup(image_id.to_string()))?;
            let concepts = labels.iter().map(|l| Concept { label: l.clone(), confidence: 1.0, token_probs: None }).collect();
            ConceptSet::new(image_id, concepts, DEFAULT_PROMPT)
        }
        ConceptSource::Live { adapter, prompt } => adapter.run(image_id, prompt)?.concept_set(image_id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedConcept {
    pub source_label: String,
    pub target_category_id: usize,
    pub similarity: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MappedConceptSet {
    pub entries: Vec<MappedConcept>,
}

impl MappedConceptSet {
    /// Category id to confidence, keeping the maximum when several concepts
    /// land on the same category.
    pub fn merged(&self) -> BTreeMap<usize, f64> {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(e.target_category_id).or_insert(e.confidence);
            *slot = slot.max(e.confidence);
        }
        out
    }

    pub fn category_ids(&self) -> Vec<usize> {
        self.merged().into_keys().collect()
    }
}

/// Assign every concept to the vocabulary category with the highest cosine
/// similarity; ties go to the lowest category id.
pub fn map_to_vocabulary<T: Scalar>(
    concepts: &ConceptSet,
    vocab: &Vocabulary,
    table: &CategoryEmbeddingTable<T>,
    encoder: &TextEncoderSpec,
) -> Result<MappedConceptSet> {
    if vocab.is_empty() || table.is_empty() {
        return Err(Error::invalid("cannot map concepts onto an empty vocabulary"));
    }
    if table.len() != vocab.len() {
        return Err(Error::invalid(format!("embedding table has {} rows for {} categories", table.len(), vocab.len())));
    }
    if concepts.is_empty() {
        return Ok(MappedConceptSet::default());
    }
    let encoded: CategoryEmbeddingTable<T> = encode_text(&concepts.labels(), encoder)?;
    let sims = encoded.vectors.matmul_t(&table.vectors);
    let entries = concepts
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row = sims.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            MappedConcept {
                source_label: c.label.clone(),
                target_category_id: best,
                similarity: row[best].as_f64().clamp(-1.0, 1.0),
                confidence: c.confidence,
            }
        })
        .collect();
    Ok(MappedConceptSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::Category;

    #[test]
    fn confidence_is_the_token_mean() {
        assert!((aggregate_confidence(&[0.8, 0.6]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(aggregate_confidence(&[1.0]).unwrap(), 1.0);
        assert_eq!(aggregate_confidence(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(aggregate_confidence(&[]).is_err());
        assert!(aggregate_confidence(&[0.5, 1.5]).is_err());
    }

    #[test]
    fn labels_are_normalised() {
        assert_eq!(normalize_label("  Red   Disc\t"), "red disc");
        let dup = ConceptSet::new("x", vec![
            Concept { label: "Cat".into(), confidence: 0.5, token_probs: None },
            Concept { label: " cat ".into(), confidence: 0.5, token_probs: None },
        ], DEFAULT_PROMPT);
        assert!(dup.is_err());
    }

    fn file() -> ConceptFile {
        let mut f = ConceptFile::new(DEFAULT_PROMPT);
        f.results.insert("img_001".into(), vec![
            RawConcept { label: "cat".into(), confidence: None, token_probs: Some(vec![0.9, 0.7]) },
            RawConcept { label: "dog".into(), confidence: Some(0.3), token_probs: Some(vec![0.5]) },
            RawConcept { label: "car".into(), confidence: Some(0.25), token_probs: None },
        ]);
        f
    }

    #[test]
    fn scripted_source_resolves_confidences() {
        let src = ConceptSource::Scripted(file());
        let set = provide_concepts("img_001", &src).unwrap();
        assert!((set.concepts[0].confidence - 0.8).abs() < 1e-12);
        assert_eq!(set.concepts[1].confidence, 0.5);
        assert_eq!(set.concepts[2].confidence, 0.25);
        assert_eq!(set, provide_concepts("img_001", &src).unwrap());
        let err = provide_concepts("img_042", &src).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)) && err.to_string().contains("img_042"));
    }

    #[test]
    fn concept_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        file().save(&p).unwrap();
        assert_eq!(ConceptFile::load(&p).unwrap(), file());
        std::fs::write(&p, "{\"schema_version\": 7, \"prompt\": \"\", \"results\": {}}").unwrap();
        assert!(matches!(ConceptFile::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn oracle_reports_ground_truth_labels() {
        let vocab = Vocabulary::new(vec![
            Category { id: 0, label: "circle".into(), is_thing: true, is_seen: true },
            Category { id: 1, label: "background".into(), is_thing: false, is_seen: true },
        ])
        .unwrap();
        let mut seg = PanopticSegmentation::empty("s", 2, 2);
        seg.id_map = vec![1, 1, 2, 1];
        seg.segments = vec![
            crate::data_synth::Segment { id: 1, category_id: 1, score: None },
            crate::data_synth::Segment { id: 2, category_id: 0, score: None },
        ];
        let src = ConceptSource::Oracle(OracleConcepts::from_annotations([&seg], &vocab));
        let set = provide_concepts("s", &src).unwrap();
        let got: Vec<(String, f64)> = set.concepts.iter().map(|c| (c.label.clone(), c.confidence)).collect();
        assert_eq!(got, vec![("circle".to_string(), 1.0), ("background".to_string(), 1.0)]);
    }

    #[test]
    fn live_adapter_failure_is_a_provider_error() {
        let adapter = LiveAdapter { command: vec!["/nonexistent/concept-generator".into()], image_dir: PathBuf::from(".") };
        let src = ConceptSource::Live { adapter, prompt: DEFAULT_PROMPT.into() };
        assert!(matches!(provide_concepts("x", &src), Err(Error::Provider(_))));
    }

    fn vocab_of(labels: &[&str]) -> Vocabulary {
        Vocabulary::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| Category { id: i, label: l.to_string(), is_thing: i != 0, is_seen: true })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_labels_map_to_themselves_and_duplicates_keep_max() {
        let vocab = vocab_of(&["sky", "cat", "dog", "fox"]);
        let spec = TextEncoderSpec::synthetic(16, 9);
        let table: CategoryEmbeddingTable<f64> = encode_text(&vocab.labels(), &spec).unwrap();
        let set = ConceptSet::new("i", vec![
            Concept { label: "Fox".into(), confidence: 0.4, token_probs: None },
            Concept { label: "fox ".into(), confidence: 0.9, token_probs: None },
        ], DEFAULT_PROMPT);
        assert!(set.is_err());
        let mut v = BTreeMap::new();
        v.insert("vixen".to_string(), table.vectors.row(3).to_vec());
        v.insert("fox".to_string(), table.vectors.row(3).to_vec());
        let pinned = TextEncoderSpec::lookup(v, 16, 9, true);
        let set = ConceptSet::new("i", vec![
            Concept { label: "Fox".into(), confidence: 0.4, token_probs: None },
            Concept { label: "vixen".into(), confidence: 0.9, token_probs: None },
        ], DEFAULT_PROMPT)
        .unwrap();
        let mapped = map_to_vocabulary(&set, &vocab, &table, &pinned).unwrap();
        assert_eq!(mapped.entries[0].target_category_id, 3);
        assert!((mapped.entries[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(mapped.entries[0].confidence, 0.4);
        assert_eq!(mapped.merged(), BTreeMap::from([(3, 0.9)]));
    }

    #[test]
    fn mapping_matches_brute_force_argmax() {
        let labels: Vec<String> = (0..10).map(|i| format!("category {i}")).collect();
        let vocab = Vocabulary::new(
            labels.iter().enumerate().map(|(i, l)| Category { id: i, label: l.clone(), is_thing: i % 2 == 0, is_seen: true }).collect(),
        )
        .unwrap();
        let spec = TextEncoderSpec::synthetic(8, 5);
        let table: CategoryEmbeddingTable<f64> = encode_text(&labels, &spec).unwrap();
        let concepts: Vec<Concept> = (0..5).map(|i| Concept { label: format!("free form {i}"), confidence: 0.5, token_probs: None }).collect();
        let set = ConceptSet::new("r", concepts, DEFAULT_PROMPT).unwrap();
        let mapped = map_to_vocabulary(&set, &vocab, &table, &spec).unwrap();
        let enc: CategoryEmbeddingTable<f64> = encode_text(&set.labels(), &spec).unwrap();
        for (i, e) in mapped.entries.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..10 {
                let dot: f64 = (0..8).map(|d| enc.vectors.get(i, d) * table.vectors.get(j, d)).sum();
                if dot > best.0 {
                    best = (dot, j);
                }
            }
            assert_eq!(e.target_category_id, best.1);
        }
    }
}
