//! Run configuration: named profile defaults, a TOML file layered on top,
//! then dotted `a.b=value` overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::DEFAULT_PROMPT;
use crate::data_synth::{default_palette, SceneConfig, SceneSplit, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::training::{LrSchedule, TrainConfig};

/// Environment variable that relocates every relative output directory.
pub const OUTPUT_ROOT_ENV: &str = "CONSEG_OUTPUT_ROOT";

/// Largest scene count per split; keeps the seed ranges of the two splits apart.
const SPLIT_SEED_STRIDE: u64 = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Full-size network and the published optimiser settings.
    #[default]
    Paper,
    /// Small network that trains on one CPU core in minutes.
    Desk,
}

impl Profile {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::config("profile", format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directories, relative to the output directory unless absolute.
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub max_objects: usize,
    pub noise_std: f64,
    pub train_split: SceneSplit,
    pub eval_split: SceneSplit,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: "data/train".into(),
            eval_dir: "data/eval".into(),
            height: 64,
            width: 64,
            num_train: 20,
            num_eval: 10,
            max_objects: 3,
            noise_std: 0.02,
            train_split: SceneSplit::Train,
            eval_split: SceneSplit::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextEncoderKind {
    /// Label vectors taken from the backbone's response to each category's swatch.
    #[default]
    Prototype,
    SyntheticHash,
    /// A JSON `{label: [f64]}` file; unknown labels optionally hash.
    Lookup,
    /// A JSON file dumped by an external encoder; must cover every label.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub encoder: TextEncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub hash_fallback: bool,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { encoder: TextEncoderKind::Prototype, path: None, hash_fallback: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptSourceKind {
    #[default]
    Oracle,
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptsConfig {
    pub source: ConceptSourceKind,
    /// Concept file for the scripted source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Program and leading arguments for the live source.
    #[serde(default)]
    pub command: Vec<String>,
    pub prompt: String,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        ConceptsConfig { source: ConceptSourceKind::Oracle, file: None, command: Vec::new(), prompt: DEFAULT_PROMPT.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub text: TextConfig,
    pub concepts: ConceptsConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// Defaults of `profile`, with every per-component seed tied to `seed`.
    pub fn preset(profile: Profile, seed: u64) -> Self {
        let (model, train) = match profile {
            Profile::Paper => (ModelConfig::default(), TrainConfig::default()),
            Profile::Desk => (
                ModelConfig { init_temperature: 0.01, ..ModelConfig::desk() },
                TrainConfig { lr: 1e-3, lr_schedule: LrSchedule::Poly, grad_clip_norm: 1.0, max_steps: 2000, epochs: 400, ..Default::default() },
            ),
        };
        RunConfig {
            profile,
            seed,
            output_dir: "runs/default".into(),
            model: ModelConfig { init_seed: seed, ..model },
            data: DataConfig::default(),
            text: TextConfig { seed, ..Default::default() },
            concepts: ConceptsConfig::default(),
            train: TrainConfig { seed, ..train },
            inference: InferenceConfig::default(),
        }
    }

    /// Read `path` (if any), apply `overrides`, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::parse(p, e.message()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        Self::from_table(user)
    }

    /// Layer `user` over the defaults of the profile and seed it names.
    pub fn from_table(user: toml::Table) -> Result<Self> {
        let profile = match user.get("profile") {
            None => Profile::default(),
            Some(toml::Value::String(s)) => Profile::parse(s)?,
            Some(v) => return Err(Error::config("profile", format!("expected a string, got {}", v.type_str()))),
        };
        let seed = match user.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => return Err(Error::config("seed", format!("expected a non-negative integer, got {v}"))),
        };
        let defaults = toml::Table::try_from(Self::preset(profile, seed)).map_err(|e| Error::config("profile", e.to_string()))?;
        let mut merged = defaults;
        merge(&mut merged, user, "")?;
        let config = RunConfig {
            profile,
            seed,
            output_dir: section(&mut merged, "output_dir")?,
            model: section(&mut merged, "model")?,
            data: section(&mut merged, "data")?,
            text: section(&mut merged, "text")?,
            concepts: section(&mut merged, "concepts")?,
            train: section(&mut merged, "train")?,
            inference: section(&mut merged, "inference")?,
        };
        merged.remove("profile");
        merged.remove("seed");
        if let Some(k) = merged.keys().next() {
            return Err(Error::config(k.clone(), "unknown configuration key"));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        let d = &self.data;
        if d.height < 8 || d.width < 8 {
            return Err(Error::config("data.height", format!("images must be at least 8x8, got {}x{}", d.height, d.width)));
        }
        for (field, n) in [("data.num_train", d.num_train), ("data.num_eval", d.num_eval)] {
            if n as u64 > SPLIT_SEED_STRIDE {
                return Err(Error::config(field, format!("at most {SPLIT_SEED_STRIDE} scenes per split")));
            }
        }
        if self.seed > u64::MAX / (2 * SPLIT_SEED_STRIDE) {
            return Err(Error::config("seed", "too large"));
        }
        if matches!(self.text.encoder, TextEncoderKind::Lookup | TextEncoderKind::External) && self.text.path.is_none() {
            return Err(Error::config("text.path", "required by the lookup and external encoders"));
        }
        match self.concepts.source {
            ConceptSourceKind::Scripted if self.concepts.file.is_none() => Err(Error::config("concepts.file", "required by the scripted source")),
            ConceptSourceKind::Live if self.concepts.command.is_empty() => Err(Error::config("concepts.command", "required by the live source")),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("run config serialises");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The output directory, under `$CONSEG_OUTPUT_ROOT` when that is set and
    /// the configured directory is relative.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Resolve a path that is relative to the output directory.
    pub fn under_output(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_path().join(p)
        }
    }

    pub fn scene_config(&self, vocab: &Vocabulary, split: DatasetSplit) -> SceneConfig {
        let d = &self.data;
        let base = self.seed * 2 * SPLIT_SEED_STRIDE;
        let (seed, scene_split) = match split {
            DatasetSplit::Train => (base, d.train_split),
            DatasetSplit::Eval => (base + SPLIT_SEED_STRIDE, d.eval_split),
        };
        let mut c = SceneConfig::new(d.height, d.width, default_palette(vocab), seed);
        c.max_objects = d.max_objects;
        c.noise_std = d.noise_std;
        c.split = scene_split;
        c
    }

    pub fn dataset_dir(&self, split: DatasetSplit) -> PathBuf {
        match split {
            DatasetSplit::Train => self.under_output(&self.data.train_dir),
            DatasetSplit::Eval => self.under_output(&self.data.eval_dir),
        }
    }

    pub fn scene_count(&self, split: DatasetSplit) -> usize {
        match split {
            DatasetSplit::Train => self.data.num_train,
            DatasetSplit::Eval => self.data.num_eval,
        }
    }
}

/// Which of the two synthesised datasets a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSplit {
    Train,
    Eval,
}

impl DatasetSplit {
    pub fn name(self) -> &'static str {
        match self {
            DatasetSplit::Train => "train",
            DatasetSplit::Eval => "eval",
        }
    }
}

fn section<T: DeserializeOwned>(table: &mut toml::Table, key: &str) -> Result<T> {
    let value = table.remove(key).ok_or_else(|| Error::config(key, "missing"))?;
    value.try_into().map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))
}

/// Deep-merge `src` into `dst`; tables merge key by key, anything else replaces.
fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s, &path)?,
            (Some(toml::Value::Table(_)), other) => {
                return Err(Error::config(path, format!("expected a table, got {}", other.type_str())));
            }
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
    Ok(())
}

/// Apply `a.b.c=value`. The value is read as a TOML literal when it parses as
/// one and taken as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, k) in parents.iter().enumerate() {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(keys[..=i].join("."), "is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
