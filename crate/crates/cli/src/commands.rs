use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};

use kgprobe::descgen::{DescGenConfig, DescMode, DescriptionGenerator};
use kgprobe::eval::{
    pca_project, peak_memory, write_layers_csv, write_pca_csv, EvalReport, StageTimer,
};
use kgprobe::extraction::{
    extract_records, read_prompts, read_store, validate_store as check_store, write_prompts,
    write_store, ExtractOptions, ExtractionBackend, HttpBackend, MockLm, SignalShape, StoreBackend,
    StoreHeader, TaskTag,
};
use kgprobe::kg::{
    load_triples, parse_descriptions, DescriptionFiles, EntityId, KnowledgeGraph, LabeledTriple,
    Split, Vocab,
};
use kgprobe::pipeline::{self, label_names, LlmConfig, RunConfig};
use kgprobe::probe::{self, sweep_layers, ModelKind, ProbeModel, SweepOptions, TrainConfig};
use kgprobe::prompts::TemplateSet;
use kgprobe::sampling::{build_balanced_set_from, build_relation_set, SamplerConfig};

use crate::overrides;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    Tc,
    Rp,
}

impl From<Task> for TaskTag {
    fn from(t: Task) -> Self {
        match t {
            Task::Tc => TaskTag::TripleClassification,
            Task::Rp => TaskTag::RelationPrediction,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
    Store,
}

fn buffered(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Entity description TSV (name, text).
    #[arg(long)]
    desc: Option<PathBuf>,
    /// Relation description TSV (name, text).
    #[arg(long)]
    relation_desc: Option<PathBuf>,
    /// The training file has a label column.
    #[arg(long)]
    train_labeled: bool,
    /// The validation and test files have no label column.
    #[arg(long)]
    eval_unlabeled: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let mut vocab = Vocab::default();
    let train = load_triples(&a.train, a.train_labeled, &mut vocab)?;
    let valid = load_triples(&a.valid, !a.eval_unlabeled, &mut vocab)?;
    let test = load_triples(&a.test, !a.eval_unlabeled, &mut vocab)?;
    let desc = DescriptionFiles {
        entities: a.desc,
        relations: a.relation_desc,
    };
    let g = KnowledgeGraph::build(vocab, train, valid, test, &desc)?;
    for w in g.warnings() {
        log::warn!("{w}");
    }
    g.save_bundle(&a.out)?;
    eprintln!(
        "{} entities, {} relations, {} train / {} valid / {} test records",
        g.num_entities(),
        g.num_relations(),
        g.split(Split::Train).len(),
        g.split(Split::Valid).len(),
        g.split(Split::Test).len()
    );
    Ok(())
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Positives to draw; triple classification writes twice as many lines.
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, value_enum, default_value = "tc")]
    task: Task,
    #[arg(long, default_value_t = 0.5)]
    head_corrupt_prob: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let g = KnowledgeGraph::load_bundle(&a.graph)?;
    let examples = match a.task {
        Task::Tc => {
            let cfg = SamplerConfig {
                seed: a.seed,
                head_corrupt_prob: a.head_corrupt_prob,
                ..Default::default()
            };
            let n = a.n_pairs.unwrap_or_else(|| g.positives(a.split).len());
            build_balanced_set_from(&g, a.split, n, &cfg)?
        }
        Task::Rp => build_relation_set(&g, a.split, a.n_pairs, a.seed)?,
    };
    let mut w = buffered(&a.out)?;
    for lt in &examples {
        writeln!(w, "{}", g.format_labeled(lt))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DescribeMode {
    Concat,
    Llm,
}

#[derive(Args)]
pub struct DescribeArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "concat")]
    mode: DescribeMode,
    /// Maximum training triples per entity subgraph.
    #[arg(long, default_value_t = 16)]
    cap: usize,
    /// Description cache (TSV); reused across runs.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Text-generation endpoint for `--mode llm`.
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long, default_value = "llm")]
    llm_model: String,
    /// JSONL of canned {"prompt", "text"} responses for `--mode llm`.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Generation settings (TOML with the description config keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only describe the entities of this pairs file.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn describe(a: DescribeArgs) -> Result<()> {
    let g = KnowledgeGraph::load_bundle(&a.graph)?;
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<DescGenConfig>(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => DescGenConfig::default(),
    };
    cfg.mode = match a.mode {
        DescribeMode::Concat => DescMode::Concat,
        DescribeMode::Llm => DescMode::LlmRephrase,
    };
    cfg.max_subgraph_triples = a.cap;
    cfg.seed = a.seed;
    cfg.concurrency = a.concurrency;
    if a.cache.is_some() {
        cfg.cache_path = a.cache.clone();
    }
    let client = match a.mode {
        DescribeMode::Concat => None,
        DescribeMode::Llm => pipeline::llm_client(&Some(LlmConfig {
            url: a.llm_url.clone(),
            model: a.llm_model.clone(),
            replay: a.replay.clone(),
        }))?,
    };
    let entities: Vec<EntityId> = match &a.pairs {
        Some(p) => {
            let mut es: Vec<EntityId> = read_pairs(&g, p)?
                .iter()
                .flat_map(|lt| [lt.triple.head, lt.triple.tail])
                .collect();
            es.sort_unstable();
            es.dedup();
            es
        }
        None => g.entities().collect(),
    };
    let generator = DescriptionGenerator::new(cfg)?;
    let outcome = generator.describe_all(&g, &entities, client.as_deref())?;
    let mut w = buffered(&a.out)?;
    for (e, text) in &outcome.descriptions {
        writeln!(
            w,
            "{}\t{}",
            g.entity_name(*e),
            text.replace(['\t', '\n'], " ")
        )?;
    }
    w.flush()?;
    eprintln!(
        "{} descriptions, {} failures, {} client calls",
        outcome.descriptions.len(),
        outcome.failures.len(),
        outcome.client_calls
    );
    if let Some((e, err)) = outcome.failures.first() {
        bail!("describing {}: {err}", g.entity_name(*e));
    }
    Ok(())
}

/// Reads `head \t relation \t tail \t label` lines against the graph vocabulary.
fn read_pairs(g: &KnowledgeGraph, path: &Path) -> Result<Vec<LabeledTriple>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            bail!(
                "{}:{}: expected 4 fields, found {}",
                path.display(),
                i + 1,
                f.len()
            );
        }
        let triple = g
            .resolve(f[0], f[1], f[2])
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let label: i32 = f[3]
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad label {:?}", path.display(), i + 1, f[3]))?;
        out.push(LabeledTriple { triple, label });
    }
    Ok(out)
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// TOML file of [[template]] entries; built-in PT1-PT4 otherwise.
    #[arg(long)]
    template_file: Option<PathBuf>,
    #[arg(long, default_value = "PT1")]
    template_id: String,
    /// Entity description TSV for templates with description slots.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn render(a: RenderArgs) -> Result<()> {
    let g = KnowledgeGraph::load_bundle(&a.graph)?;
    let set = match &a.template_file {
        Some(p) => TemplateSet::load(p)?,
        None => TemplateSet::default(),
    };
    let template = set.get(&a.template_id)?;
    let examples = read_pairs(&g, &a.pairs)?;
    let descriptions: Option<HashMap<EntityId, String>> = match &a.descriptions {
        Some(p) => {
            let mut warnings = Vec::new();
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let map = parse_descriptions(&text, &mut warnings)
                .into_iter()
                .filter_map(|(name, d)| g.entity_id(&name).map(|e| (e, d)))
                .collect();
            for w in warnings {
                log::warn!("{w}");
            }
            Some(map)
        }
        None => None,
    };
    let prompts = pipeline::render_examples(&g, template, &examples, descriptions.as_ref(), 0)?;
    write_prompts(&a.out, &prompts)?;
    Ok(())
}

/// Parses `1..8` (end exclusive), `1..=7` or `1,3,5`.
pub fn parse_layers(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once("..=") {
        return Ok((lo.trim().parse()?..=hi.trim().parse()?).collect());
    }
    if let Some((lo, hi)) = spec.split_once("..") {
        return Ok((lo.trim().parse()?..hi.trim().parse()?).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| anyhow!("bad layer {s:?}: {e}"))
        })
        .collect()
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// Layer list: `1..8`, `1..=7` or `1,3,5`; every interior layer if omitted.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum, default_value = "tc")]
    task: Task,
    /// Graph bundle supplying relation names for `--task rp`.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Server root for `--backend http`.
    #[arg(long)]
    url: Option<String>,
    /// Model depth for `--backend http` (enables layer checks).
    #[arg(long)]
    num_layers: Option<usize>,
    /// Store replayed by `--backend store`.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    mock_seed: u64,
    #[arg(long, default_value_t = 64)]
    mock_dim: usize,
    #[arg(long, default_value_t = 8)]
    mock_layers: usize,
    /// Layers carrying the planted signal, e.g. `5` or `3,5`.
    #[arg(long, default_value = "5")]
    planted: String,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let prompts = read_prompts(&a.prompts)?;
    let task: TaskTag = a.task.into();
    let labels = match task {
        TaskTag::TripleClassification => StoreHeader::binary_labels(),
        TaskTag::RelationPrediction => {
            let graph = a
                .graph
                .as_ref()
                .context("--task rp needs --graph for relation names")?;
            label_names(&KnowledgeGraph::load_bundle(graph)?, task)
        }
    };
    let backend: Box<dyn ExtractionBackend> = match a.backend {
        BackendKind::Mock => {
            let lookup = prompts
                .iter()
                .rev()
                .map(|p| (p.text.clone(), p.label))
                .collect();
            let shape = match task {
                TaskTag::TripleClassification => SignalShape::Binary,
                TaskTag::RelationPrediction => SignalShape::MultiClass(labels.len()),
            };
            Box::new(MockLm::with_lookup(
                a.mock_seed,
                a.mock_dim,
                a.mock_layers,
                parse_layers(&a.planted)?,
                a.margin,
                shape,
                lookup,
            ))
        }
        BackendKind::Http => Box::new(HttpBackend::new(
            a.url.as_deref().context("--backend http needs --url")?,
            a.num_layers,
        )),
        BackendKind::Store => Box::new(StoreBackend::new(read_store(
            a.store.as_ref().context("--backend store needs --store")?,
        )?)),
    };
    let layers = match &a.layers {
        Some(s) => parse_layers(s)?,
        None => pipeline::resolve_layers(&[], backend.as_ref())?,
    };
    let opts = ExtractOptions {
        batch_size: a.batch_size,
        task,
        labels,
        ..Default::default()
    };
    let store = extract_records(backend.as_ref(), &prompts, &layers, &opts)?;
    write_store(&store, &a.out)?;
    eprintln!(
        "{} records, {} layers, dim {}",
        store.len(),
        store.header.layers.len(),
        store.header.dim
    );
    Ok(())
}

#[derive(Args, Clone)]
pub struct ProbeArgs {
    #[arg(long, value_parser = clap::value_parser!(ModelKind), default_value = "logreg")]
    model: ModelKind,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_standardize: bool,
}

impl ProbeArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            model_kind: self.model,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            hidden_width: self.hidden,
            seed: self.seed,
            standardize: !self.no_standardize,
            ..Default::default()
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    states: PathBuf,
    /// A layer index, or `auto` to pick the best layer on `--states-valid`.
    #[arg(long, default_value = "auto")]
    layer: String,
    #[arg(long)]
    states_valid: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let store = read_store(&a.states)?;
    let cfg = a.probe.config();
    let model = if a.layer == "auto" {
        let valid_path = a
            .states_valid
            .as_ref()
            .context("--layer auto needs --states-valid")?;
        let valid = read_store(valid_path)?;
        let outcome = sweep_layers(&store, &valid, None, &cfg, &SweepOptions::default())?;
        eprintln!(
            "selected layer {} (validation accuracy {:.4})",
            outcome.report.selected_layer,
            outcome.report.selected().valid_accuracy
        );
        outcome.selected_model().clone()
    } else {
        let layer: usize = a
            .layer
            .parse()
            .context("--layer takes an index or `auto`")?;
        probe::train(&store, layer, &cfg)?
    };
    model.save(&a.out)?;
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    states_train: PathBuf,
    #[arg(long)]
    states_valid: PathBuf,
    #[arg(long)]
    states_test: Option<PathBuf>,
    /// Report test accuracy at every layer, not just the selected one.
    #[arg(long)]
    test_all_layers: bool,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    probe: ProbeArgs,
    /// Full sweep report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Save the selected layer's probe.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let train = read_store(&a.states_train)?;
    let valid = read_store(&a.states_valid)?;
    let test = a.states_test.as_ref().map(read_store).transpose()?;
    let opts = SweepOptions {
        layers: a
            .layers
            .as_deref()
            .map(parse_layers)
            .transpose()?
            .unwrap_or_default(),
        threads: a.threads,
        test_all_layers: a.test_all_layers,
    };
    let outcome = sweep_layers(&train, &valid, test.as_ref(), &a.probe.config(), &opts)?;
    write_layers_csv(buffered(&a.out)?, &outcome.report.entries)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    }
    if let Some(p) = &a.model_out {
        outcome.selected_model().save(p)?;
    }
    eprintln!("selected layer {}", outcome.report.selected_layer);
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    states_test: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Also write a 3-d PCA projection of the test states at the model's layer.
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut timer = StageTimer::new();
    let store = timer.time("load", || read_store(&a.states_test))?;
    let model = ProbeModel::load(&a.model)?;
    let metrics = timer.time("evaluate", || pipeline::score(&model, &store))?;
    if let Some(p) = &a.pca {
        let (rows, labels) = store
            .layer_matrix(model.layer)
            .with_context(|| format!("layer {} not in the test store", model.layer))?;
        let proj = timer.time("pca", || pca_project(&rows, 3))?;
        let ids: Vec<u64> = store.records.iter().map(|r| r.example_id).collect();
        write_pca_csv(buffered(p)?, &ids, &labels, &proj)?;
    }
    let config = serde_json::json!({
        "states_test": a.states_test,
        "model": a.model,
        "probe": model.config,
        "layer": model.layer,
    });
    let mut report = EvalReport::new(store.header.task, config);
    report.metrics = metrics;
    report.selected_layer = Some(model.layer);
    report.selection_rule = Some("model file".into());
    report.sample_counts.insert("test".into(), store.len());
    report.stages = timer.finish();
    report.peak_memory = peak_memory();
    report.save(&a.out)?;
    for (k, v) in &report.metrics {
        eprintln!("{k}: {v:.4}");
    }
    Ok(())
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

pub fn validate_store(a: ValidateArgs) -> Result<()> {
    let h = check_store(&a.input)
        .with_context(|| format!("{} is not a valid store", a.input.display()))?;
    println!(
        "ok: model={} dim={} layers={:?} count={} task={:?} classes={}",
        h.model,
        h.dim,
        h.layers,
        h.count,
        h.task,
        h.labels.len()
    );
    Ok(())
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config overrides, e.g. `--set probe.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for report.json, CSV tables and the selected model.
    #[arg(long)]
    out: PathBuf,
    /// Also save the train/valid/test stores.
    #[arg(long)]
    save_states: bool,
}

pub fn run(a: RunArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", a.config.display()))?;
    overrides::apply(&mut table, &a.set)?;
    let cfg: RunConfig = table
        .try_into()
        .with_context(|| format!("invalid config {}", a.config.display()))?;
    let outcome = pipeline::run_experiment(&cfg, Some(&a.out))?;
    outcome.model.save(a.out.join("model.bin"))?;
    if a.save_states {
        write_store(&outcome.train, a.out.join("train.kgph"))?;
        write_store(&outcome.valid, a.out.join("valid.kgph"))?;
        write_store(&outcome.test, a.out.join("test.kgph"))?;
    }
    let r = &outcome.report;
    eprintln!(
        "selected layer {}; {}",
        r.selected_layer.unwrap_or_default(),
        r.metrics
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}
