//! Command-line front end. Every command reads a [`RunConfig`], writes its
//! artifacts under the configured output directory and records a run
//! manifest next to them.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autograd::Graph;
use crate::concepts::{map_to_vocabulary, provide_concepts, ConceptFile, ConceptSource, LiveAdapter, OracleConcepts};
use crate::config::{ConceptSourceKind, DatasetSplit, RunConfig, TextEncoderKind};
use crate::data_synth::{default_palette, generate_scenes, read_dataset, write_dataset, Image, PanopticSegmentation, SceneSplit, Vocabulary};
use crate::embedding::{appearance_vectors, encode_text, load_embedding_file, CategoryEmbeddingTable, FeatureGrid, TextEncoderSpec};
use crate::error::{Error, Result};
use crate::inference::{cluster_features, evaluate, write_clusterings, EvalReport, InferenceConfig, InferenceMode, Predictor, ReweightVariant};
use crate::metrics::concept_pr_report;
use crate::model::{Features, ImageRequest, Model};
use crate::scalar::{Precision, Scalar};
use crate::training::{fit, load_checkpoint, prepare_items, read_checkpoint_header, save_checkpoint, TrainTables};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(name = "conseg", version, about = "Concept-first open-vocabulary panoptic segmentation on synthetic scenes")]
pub struct Cli {
    /// TOML run configuration; profile defaults are used when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the train and eval datasets.
    Synth,
    /// Fit the model on the train dataset; writes a checkpoint and loss log.
    Train,
    /// Score predictions; writes one metric JSON per reweight variant.
    Eval(EvalArgs),
    /// Write predicted panoptic segmentations as a dataset directory.
    Infer(EvalArgs),
    /// Precision and recall of the concept provider against annotations.
    ConceptsEval(SplitArgs),
    /// k-means of the global and the concept-enhanced features of one image.
    ClusterFeatures(ClusterArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum, default_value = "eval")]
    pub split: DatasetSplit,
    /// Checkpoint to load; defaults to the one `train` writes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: SplitArgs,
    /// `vocabulary-free` or `open-vocabulary`; defaults to `inference.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// A reweight variant name, or `all` for the four-way comparison.
    #[arg(long)]
    pub reweight: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: SplitArgs,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Image id; defaults to the first image of the split.
    #[arg(long)]
    pub image: Option<String>,
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    arguments: Vec<String>,
    config_hash: String,
    seed: u64,
    /// Paths relative to the output directory.
    artifacts: Vec<String>,
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out = config.output_path();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (name, arguments, artifacts) = match &cli.command {
        Command::Synth => ("synth", Vec::new(), synth(&config)?),
        Command::Train => ("train", Vec::new(), match config.train.precision {
            Precision::F32 => train::<f32>(&config)?,
            Precision::F64 => train::<f64>(&config)?,
        }),
        Command::Eval(a) => ("eval", eval_arguments(a), with_checkpoint(&config, &a.common, |c, p| eval_dispatch(c, a, p))?),
        Command::Infer(a) => ("infer", eval_arguments(a), with_checkpoint(&config, &a.common, |c, p| infer_dispatch(c, a, p))?),
        Command::ConceptsEval(a) => ("concepts-eval", split_arguments(a), with_checkpoint(&config, a, |c, p| concepts_dispatch(c, a, p))?),
        Command::ClusterFeatures(a) => {
            let mut args = split_arguments(&a.common);
            args.push(format!("--k={}", a.k));
            if let Some(i) = &a.image {
                args.push(format!("--image={i}"));
            }
            ("cluster-features", args, with_checkpoint(&config, &a.common, |c, p| cluster_dispatch(c, a, p))?)
        }
    };
    let manifest = RunManifest {
        command: name,
        arguments,
        config_hash: config.hash(),
        seed: config.seed,
        artifacts: artifacts.iter().map(|p| relative(&out, p)).collect(),
    };
    write_json(&out.join(format!("run-{name}.json")), &manifest)
}

fn split_arguments(a: &SplitArgs) -> Vec<String> {
    let mut v = vec![format!("--split={}", a.split.name())];
    if let Some(c) = &a.checkpoint {
        v.push(format!("--checkpoint={}", c.display()));
    }
    v
}

fn eval_arguments(a: &EvalArgs) -> Vec<String> {
    let mut v = split_arguments(&a.common);
    v.extend(a.mode.iter().map(|m| format!("--mode={m}")));
    v.extend(a.reweight.iter().map(|r| format!("--reweight={r}")));
    v
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let vocab = Vocabulary::demo();
    let mut written = Vec::new();
    for split in [DatasetSplit::Train, DatasetSplit::Eval] {
        let scenes = generate_scenes(&config.scene_config(&vocab, split), &vocab, config.scene_count(split))?;
        let dir = config.dataset_dir(split);
        let summary = write_dataset(&scenes, &vocab, &dir)?;
        println!("{}: {} images, {} categories", split.name(), summary.num_images, summary.num_categories);
        written.push(dir);
    }
    Ok(written)
}

fn load_split(config: &RunConfig, split: DatasetSplit) -> Result<(Vec<(Image, PanopticSegmentation)>, Vocabulary)> {
    let dir = config.dataset_dir(split);
    if !dir.join("manifest.json").exists() {
        return Err(Error::invalid(format!("no {} dataset at {}; run `conseg synth` first", split.name(), dir.display())));
    }
    read_dataset(&dir)
}

/// The label encoder described by `config`. The prototype encoder reads the
/// category swatches through the model's own backbone.
fn text_encoder<T: Scalar>(config: &RunConfig, vocab: &Vocabulary, model: &Model<T>) -> Result<TextEncoderSpec> {
    let t = &config.text;
    let dim = model.config.dim;
    let spec = match t.encoder {
        TextEncoderKind::Prototype => {
            let vectors = appearance_vectors(vocab, &default_palette(vocab), &model.backbone, &model.store)?;
            TextEncoderSpec::lookup(vectors, dim, t.seed, t.hash_fallback)
        }
        TextEncoderKind::SyntheticHash => TextEncoderSpec::synthetic(dim, t.seed),
        TextEncoderKind::Lookup => TextEncoderSpec::lookup(load_embedding_file(t.path.as_deref().expect("validated"))?, dim, t.seed, t.hash_fallback),
        TextEncoderKind::External => TextEncoderSpec::external(t.path.as_deref().expect("validated"), dim)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn concept_source(config: &RunConfig, split: DatasetSplit, scenes: &[(Image, PanopticSegmentation)], vocab: &Vocabulary) -> Result<ConceptSource> {
    let c = &config.concepts;
    Ok(match c.source {
        ConceptSourceKind::Oracle => ConceptSource::Oracle(OracleConcepts::from_annotations(scenes.iter().map(|s| &s.1), vocab)),
        ConceptSourceKind::Scripted => ConceptSource::Scripted(ConceptFile::load(c.file.as_deref().expect("validated"))?),
        ConceptSourceKind::Live => ConceptSource::Live {
            adapter: LiveAdapter { command: c.command.clone(), image_dir: config.dataset_dir(split).join("images") },
            prompt: c.prompt.clone(),
        },
    })
}

fn train<T: Scalar>(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (scenes, vocab) = load_split(config, DatasetSplit::Train)?;
    let model_config = crate::model::ModelConfig { freeze_backbone: config.train.freeze_backbone, ..config.model.clone() };
    let mut model = Model::<T>::new(model_config)?;
    let spec = text_encoder(config, &vocab, &model)?;
    let table: CategoryEmbeddingTable<T> = encode_text(&vocab.labels(), &spec)?;
    let class_ids = match config.data.train_split {
        SceneSplit::Train => vocab.seen_ids(),
        SceneSplit::Eval => vocab.all_ids(),
    };
    let tables = TrainTables::new(table, class_ids.clone())?;
    let items = prepare_items(&model, &scenes, &class_ids, |s| s.categories_present().into_iter().collect::<BTreeSet<_>>())?;
    let report = fit(&mut model, &items, &tables, &config.train, |s| {
        if s.step % 100 == 0 {
            log::info!("step {} loss {:.5}", s.step, s.total);
        }
    })?;
    let out = config.output_path();
    let ckpt = out.join(CHECKPOINT_FILE);
    let run_config = serde_json::to_value(config).map_err(|e| Error::parse(&ckpt, e))?;
    save_checkpoint(&ckpt, &model, run_config, &vocab.digest())?;
    let mut csv = String::from("step,total,cls,pixel,dice\n");
    for s in &report.log {
        let _ = writeln!(csv, "{},{},{},{},{}", s.step, s.total, s.cls, s.pixel, s.dice);
    }
    let log_path = out.join(LOSS_LOG_FILE);
    write_text(&log_path, &csv)?;
    if let Some(last) = report.log.last() {
        println!("trained {} steps, final loss {:.5}", report.steps, last.total);
    }
    Ok(vec![ckpt, log_path])
}

/// Everything a prediction command needs, loaded once.
struct Loaded<T> {
    model: Model<T>,
    scenes: Vec<(Image, PanopticSegmentation)>,
    vocab: Vocabulary,
    spec: TextEncoderSpec,
    table: CategoryEmbeddingTable<T>,
    source: ConceptSource,
    split: DatasetSplit,
}

fn checkpoint_path(config: &RunConfig, args: &SplitArgs) -> PathBuf {
    args.checkpoint.clone().unwrap_or_else(|| config.output_path().join(CHECKPOINT_FILE))
}

fn with_checkpoint(config: &RunConfig, args: &SplitArgs, f: impl FnOnce(&RunConfig, &Path) -> Result<Vec<PathBuf>>) -> Result<Vec<PathBuf>> {
    let path = checkpoint_path(config, args);
    if !path.exists() {
        return Err(Error::invalid(format!("no checkpoint at {}; run `conseg train` first", path.display())));
    }
    f(config, &path)
}

fn load<T: Scalar>(config: &RunConfig, args: &SplitArgs, ckpt: &Path) -> Result<Loaded<T>> {
    let (model, header) = load_checkpoint::<T>(ckpt)?;
    let (scenes, vocab) = load_split(config, args.split)?;
    if header.vocabulary_digest != vocab.digest() {
        return Err(Error::invalid(format!("checkpoint {} was trained on a different vocabulary", ckpt.display())));
    }
    let spec = text_encoder(config, &vocab, &model)?;
    let table = encode_text(&vocab.labels(), &spec)?;
    let source = concept_source(config, args.split, &scenes, &vocab)?;
    Ok(Loaded { model, scenes, vocab, spec, table, source, split: args.split })
}

macro_rules! by_dtype {
    ($ckpt:expr, $f:ident ( $($arg:expr),* )) => {
        match read_checkpoint_header($ckpt)?.dtype.as_str() {
            "f32" => $f::<f32>($($arg),*),
            _ => $f::<f64>($($arg),*),
        }
    };
}

fn eval_dispatch(config: &RunConfig, args: &EvalArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    by_dtype!(ckpt, eval_cmd(config, args, ckpt))
}

fn infer_dispatch(config: &RunConfig, args: &EvalArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    by_dtype!(ckpt, infer_cmd(config, args, ckpt))
}

fn concepts_dispatch(config: &RunConfig, args: &SplitArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    by_dtype!(ckpt, concepts_cmd(config, args, ckpt))
}

fn cluster_dispatch(config: &RunConfig, args: &ClusterArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    by_dtype!(ckpt, cluster_cmd(config, args, ckpt))
}

/// The inference settings and reweight variants selected by the flags.
fn eval_plan(config: &RunConfig, args: &EvalArgs) -> Result<(InferenceConfig, Vec<ReweightVariant>)> {
    let mut ic = config.inference.clone();
    if let Some(m) = &args.mode {
        ic.mode = m.parse()?;
    }
    let variants = match args.reweight.as_deref() {
        Some("all") if ic.mode == InferenceMode::VocabularyFree => {
            return Err(Error::config("inference.reweight", "`all` compares open-vocabulary variants; vocabulary-free mode does not reweight"));
        }
        Some("all") => ReweightVariant::COMPARED.to_vec(),
        Some(r) => vec![r.parse()?],
        None => vec![ic.reweight],
    };
    ic.validate()?;
    Ok((ic, variants))
}

fn eval_cmd<T: Scalar>(config: &RunConfig, args: &EvalArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let (base, variants) = eval_plan(config, args)?;
    let l = load::<T>(config, &args.common, ckpt)?;
    let dir = config.output_path().join("eval").join(l.split.name());
    let test_ids = l.vocab.all_ids();
    let mut written = Vec::new();
    let mut reports = Vec::new();
    for v in &variants {
        let ic = InferenceConfig { reweight: *v, ..base.clone() };
        let predictor = Predictor { model: &l.model, vocab: &l.vocab, table: &l.table, encoder: &l.spec, config: &ic };
        let outcome = evaluate(&predictor, &l.scenes, &l.source, &test_ids)?;
        let report = outcome.report;
        let path = dir.join(format!("metrics-{}-{}.json", report.mode, report.reweight));
        write_json(&path, &report)?;
        println!("{} {}: PQ {:.4} mIoU {:.4} mAP {:.4}", report.mode, report.reweight, report.metrics.pq, report.metrics.miou, report.metrics.map);
        written.push(path);
        reports.push(report);
    }
    if args.reweight.as_deref() == Some("all") {
        let cmp = Comparison::new(&reports);
        let json = dir.join("reweight-comparison.json");
        let table = dir.join("reweight-comparison.txt");
        write_json(&json, &cmp)?;
        let text = cmp.table();
        write_text(&table, &text)?;
        print!("{text}");
        written.push(json);
        written.push(table);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    reweight: ReweightVariant,
    pq: f64,
    sq: f64,
    rq: f64,
    miou: f64,
    map: f64,
    seen_miou: Option<f64>,
    unseen_miou: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    mode: InferenceMode,
    /// True when every variant produced bitwise-identical mask logits.
    masks_identical: bool,
    mask_digest: String,
    variants: Vec<ComparisonRow>,
}

impl Comparison {
    fn new(reports: &[EvalReport]) -> Self {
        let first = &reports[0];
        Comparison {
            mode: first.mode,
            masks_identical: reports.iter().all(|r| r.mask_digest == first.mask_digest),
            mask_digest: first.mask_digest.clone(),
            variants: reports
                .iter()
                .map(|r| ComparisonRow {
                    reweight: r.reweight,
                    pq: r.metrics.pq,
                    sq: r.metrics.sq,
                    rq: r.metrics.rq,
                    miou: r.metrics.miou,
                    map: r.metrics.map,
                    seen_miou: r.seen_miou,
                    unseen_miou: r.unseen_miou,
                })
                .collect(),
        }
    }

    fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = format!("{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "reweight", "PQ", "SQ", "RQ", "mIoU", "mAP", "seen", "unseen");
        for r in &self.variants {
            let _ = writeln!(
                s,
                "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7}",
                r.reweight.name(),
                100.0 * r.pq,
                100.0 * r.sq,
                100.0 * r.rq,
                100.0 * r.miou,
                100.0 * r.map,
                opt(r.seen_miou),
                opt(r.unseen_miou)
            );
        }
        let _ = writeln!(s, "masks identical across variants: {}", self.masks_identical);
        s
    }
}

fn infer_cmd<T: Scalar>(config: &RunConfig, args: &EvalArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let (base, variants) = eval_plan(config, args)?;
    let l = load::<T>(config, &args.common, ckpt)?;
    let test_ids = l.vocab.all_ids();
    let mut written = Vec::new();
    for v in variants {
        let ic = InferenceConfig { reweight: v, ..base.clone() };
        let predictor = Predictor { model: &l.model, vocab: &l.vocab, table: &l.table, encoder: &l.spec, config: &ic };
        let outcome = evaluate(&predictor, &l.scenes, &l.source, &test_ids)?;
        let pairs: Vec<(Image, PanopticSegmentation)> = l.scenes.iter().map(|s| s.0.clone()).zip(outcome.predictions).collect();
        let dir = config.output_path().join("predictions").join(format!("{}-{}-{}", l.split.name(), outcome.report.mode, outcome.report.reweight));
        write_dataset(&pairs, &l.vocab, &dir)?;
        println!("wrote {} predictions to {}", pairs.len(), dir.display());
        written.push(dir);
    }
    Ok(written)
}

fn concepts_cmd<T: Scalar>(config: &RunConfig, args: &SplitArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let l = load::<T>(config, args, ckpt)?;
    let mut found = Vec::with_capacity(l.scenes.len());
    let mut actual = Vec::with_capacity(l.scenes.len());
    for (img, seg) in &l.scenes {
        let concepts = provide_concepts(&img.image_id, &l.source)?;
        let mapped = map_to_vocabulary(&concepts, &l.vocab, &l.table, &l.spec)?;
        found.push(mapped.category_ids().into_iter().collect::<BTreeSet<_>>());
        actual.push(seg.categories_present().into_iter().collect::<BTreeSet<_>>());
    }
    let report = concept_pr_report(l.scenes.iter().zip(found.iter().zip(&actual)).map(|(s, (f, a))| (s.0.image_id.as_str(), f, a)));
    let path = config.output_path().join("concepts").join(format!("{}.json", l.split.name()));
    write_json(&path, &report)?;
    let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{:.4}", x));
    println!("concept precision {} recall {}", pct(report.precision), pct(report.recall));
    Ok(vec![path])
}

fn cluster_cmd<T: Scalar>(config: &RunConfig, args: &ClusterArgs, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let l = load::<T>(config, &args.common, ckpt)?;
    let (img, _) = match &args.image {
        Some(id) => l.scenes.iter().find(|s| &s.0.image_id == id).ok_or_else(|| Error::Lookup(id.clone()))?,
        None => l.scenes.first().ok_or_else(|| Error::invalid("dataset is empty"))?,
    };
    let concepts = provide_concepts(&img.image_id, &l.source)?;
    let mapped = map_to_vocabulary(&concepts, &l.vocab, &l.table, &l.spec)?;
    let mut members: BTreeSet<usize> = mapped.category_ids().into_iter().collect();
    if members.is_empty() {
        members = l.vocab.all_ids().into_iter().collect();
    }
    let mut g = Graph::new();
    let req = ImageRequest { features: Features::Image(img), concept_table: &l.table, members: &members, class_table: &l.table.vectors, weights: None };
    let out = l.model.forward(&mut g, &req)?;
    let stride = l.model.backbone.config.stride();
    let global = FeatureGrid::new(out.height, out.width, stride, g.value(out.global).clone())?;
    let enhanced = FeatureGrid::new(out.height, out.width, stride, g.value(out.enhanced).clone())?;
    let a = cluster_features(&global, args.k, config.seed)?;
    let b = cluster_features(&enhanced, args.k, config.seed)?;
    let dir = config.output_path().join("clusters");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let png = dir.join(format!("{}.png", img.image_id));
    let json = dir.join(format!("{}.json", img.image_id));
    write_clusterings(&png, &json, &[("global", &a), ("enhanced", &b)])?;
    println!("inertia global {:.4} enhanced {:.4}", a.inertia, b.inertia);
    Ok(vec![png, json])
}
