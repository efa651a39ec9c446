//! End-to-end experiment driver: ingest, sample, describe, render, extract,
//! sweep, evaluate.

use std::collections::{BTreeMap, HashMap};
use std::error::Error as StdError;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descgen::{
    DescGenConfig, DescriptionGenerator, HttpGenerationClient, ReplayClient, TextGenerationClient,
};
use crate::eval::{
    self, hits_at_1, pca_project, peak_memory, write_layers_csv, write_pca_csv, write_sizes_csv,
    EvalReport, SizePoint, StageTimer,
};
use crate::extraction::{
    extract_records, ExtractOptions, ExtractionBackend, HiddenStateStore, HttpBackend, MockLm,
    PromptRecord, SignalShape, StoreBackend, StoreHeader, TaskTag,
};
use crate::kg::{
    load_triples, DescriptionFiles, EntityId, KnowledgeGraph, LabeledTriple, Split, Vocab,
};
use crate::probe::{self, store_accuracy, sweep_layers, ProbeModel, SweepOptions, TrainConfig};
use crate::prompts::{entity_surface, PromptSubject, PromptTemplate, TemplateSet};
use crate::sampling::{
    build_balanced_set_from, build_relation_set, derive_seed, subsample, subsample_indices,
    SamplerConfig, SubsampleMode,
};
use crate::synthetic::{synthetic_graph, SyntheticGraphConfig};

/// A failed pipeline stage.
#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct RunError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

fn at<E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str) -> impl FnOnce(E) -> RunError {
    move |e| RunError {
        stage,
        source: e.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    /// Whether the training file carries a fourth label column.
    #[serde(default)]
    pub train_labeled: bool,
    /// Whether the validation and test files carry a label column.
    #[serde(default = "yes")]
    pub eval_labeled: bool,
    #[serde(default)]
    pub entity_descriptions: Option<PathBuf>,
    #[serde(default)]
    pub relation_descriptions: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Files(FileData),
    Synthetic(SyntheticGraphConfig),
}

/// Example counts per split; 0 takes everything available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for ExampleCounts {
    fn default() -> Self {
        ExampleCounts {
            train: 2000,
            valid: 1000,
            test: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    /// Defaults to PT1 for triple classification and PT3 for relation prediction.
    pub id: Option<String>,
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// Generation endpoint; exclusive with `replay`.
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default = "default_llm_model")]
    pub model: String,
    /// JSONL file of canned `{"prompt", "text"}` responses.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

fn default_llm_model() -> String {
    "llm".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub seed: u64,
    pub dim: usize,
    pub num_layers: usize,
    pub planted: Vec<usize>,
    pub margin: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            dim: 64,
            num_layers: 8,
            planted: vec![5],
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock(MockConfig),
    Http {
        url: String,
        #[serde(default)]
        num_layers: Option<usize>,
    },
    /// Replays a store holding every example id of the run.
    Store {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Layers to extract; empty means every interior layer the backend reports.
    pub layers: Vec<usize>,
    pub batch_size: usize,
    pub max_retries: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            layers: Vec::new(),
            batch_size: 16,
            max_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Fixed layer; absent means sweep and select on validation accuracy.
    pub layer: Option<usize>,
    pub test_all_layers: bool,
    pub threads: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            layer: None,
            test_all_layers: true,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeCurveConfig {
    pub n: Vec<usize>,
    /// Seeds `0..seeds` are used for subsampling and training.
    pub seeds: u64,
}

impl Default for SizeCurveConfig {
    fn default() -> Self {
        SizeCurveConfig {
            n: vec![100, 400, 2000],
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub k: usize,
    pub max_points: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            k: 3,
            max_points: 2000,
        }
    }
}

fn default_task() -> TaskTag {
    TaskTag::TripleClassification
}

/// Full configuration of one experiment, usually read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: TaskTag,
    pub data: DataConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub examples: ExampleCounts,
    #[serde(default)]
    pub template: TemplateConfig,
    #[serde(default)]
    pub descriptions: DescGenConfig,
    #[serde(default)]
    pub llm: Option<LlmConfig>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub probe: TrainConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub sizes: Option<SizeCurveConfig>,
    #[serde(default)]
    pub pca: Option<PcaConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let text = fs::read_to_string(path.as_ref()).map_err(at("config"))?;
        Self::from_toml(&text).map_err(at("config"))
    }

    /// A synthetic-graph run against the mock model.
    pub fn mock_default() -> Self {
        RunConfig {
            task: TaskTag::TripleClassification,
            data: DataConfig::Synthetic(SyntheticGraphConfig::default()),
            sampler: SamplerConfig::default(),
            examples: ExampleCounts::default(),
            template: TemplateConfig::default(),
            descriptions: DescGenConfig::default(),
            llm: None,
            backend: BackendConfig::Mock(MockConfig::default()),
            extract: ExtractConfig::default(),
            probe: TrainConfig::default(),
            selection: SelectionConfig::default(),
            sizes: None,
            pca: None,
        }
    }
}

/// The labelled examples of one split.
#[derive(Clone, Debug)]
pub struct SplitExamples {
    pub split: Split,
    pub examples: Vec<LabeledTriple>,
}

pub fn load_graph(data: &DataConfig) -> Result<KnowledgeGraph, RunError> {
    match data {
        DataConfig::Synthetic(cfg) => Ok(synthetic_graph(cfg)),
        DataConfig::Files(f) => {
            let mut vocab = Vocab::default();
            let train =
                load_triples(&f.train, f.train_labeled, &mut vocab).map_err(at("ingest"))?;
            let valid = load_triples(&f.valid, f.eval_labeled, &mut vocab).map_err(at("ingest"))?;
            let test = load_triples(&f.test, f.eval_labeled, &mut vocab).map_err(at("ingest"))?;
            let desc = DescriptionFiles {
                entities: f.entity_descriptions.clone(),
                relations: f.relation_descriptions.clone(),
            };
            KnowledgeGraph::build(vocab, train, valid, test, &desc).map_err(at("ingest"))
        }
    }
}

/// Draws the examples of one split for `task`.
///
/// Triple classification uses the split's own negatives when the file has
/// any, and filtered corruptions of its positives otherwise.
pub fn sample_split(
    g: &KnowledgeGraph,
    task: TaskTag,
    split: Split,
    count: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<LabeledTriple>, RunError> {
    let seed = if split == Split::Train {
        sampler.seed
    } else {
        derive_seed(sampler.seed, split as u64 + 1)
    };
    let want = (count > 0).then_some(count);
    match task {
        TaskTag::RelationPrediction => {
            build_relation_set(g, split, want, seed).map_err(at("sample"))
        }
        TaskTag::TripleClassification => {
            let records = g.split(split);
            if records.iter().any(|lt| lt.label == 0) {
                return match want {
                    Some(k) if k < records.len() => {
                        subsample(records, k, seed, SubsampleMode::Uniform).map_err(at("sample"))
                    }
                    _ => Ok(records.to_vec()),
                };
            }
            let pairs = want.map_or(g.positives(split).len(), |k| k / 2);
            let cfg = SamplerConfig {
                seed,
                ..sampler.clone()
            };
            build_balanced_set_from(g, split, pairs, &cfg).map_err(at("sample"))
        }
    }
}

/// Class names stored in state headers for `task`.
pub fn label_names(g: &KnowledgeGraph, task: TaskTag) -> Vec<String> {
    match task {
        TaskTag::TripleClassification => StoreHeader::binary_labels(),
        TaskTag::RelationPrediction => (0..g.num_relations())
            .map(|r| g.relation_name(crate::kg::RelationId(r as u32)).to_owned())
            .collect(),
    }
}

pub fn resolve_template(cfg: &RunConfig) -> Result<PromptTemplate, RunError> {
    let set = match &cfg.template.file {
        Some(p) => TemplateSet::load(p).map_err(at("render"))?,
        None => TemplateSet::default(),
    };
    let id = cfg.template.id.clone().unwrap_or_else(|| {
        match cfg.task {
            TaskTag::TripleClassification => "PT1",
            TaskTag::RelationPrediction => "PT3",
        }
        .to_owned()
    });
    set.get(&id).cloned().map_err(at("render"))
}

pub fn llm_client(
    cfg: &Option<LlmConfig>,
) -> Result<Option<Box<dyn TextGenerationClient>>, RunError> {
    let Some(c) = cfg else { return Ok(None) };
    match (&c.url, &c.replay) {
        (Some(url), None) => Ok(Some(Box::new(HttpGenerationClient::new(
            url.clone(),
            c.model.clone(),
        )))),
        (None, Some(path)) => Ok(Some(Box::new(
            ReplayClient::from_jsonl(c.model.clone(), path).map_err(at("describe"))?,
        ))),
        _ => Err(at("describe")("llm needs exactly one of `url` or `replay`")),
    }
}

/// Descriptions for every entity in `entities`.
///
/// Entities with no training triples get the graph's file description when
/// one exists, and their surface name otherwise.
pub fn describe_entities(
    g: &KnowledgeGraph,
    entities: &[EntityId],
    cfg: &DescGenConfig,
    client: Option<&dyn TextGenerationClient>,
) -> Result<HashMap<EntityId, String>, RunError> {
    let generator = DescriptionGenerator::new(cfg.clone()).map_err(at("describe"))?;
    let mut outcome = generator
        .describe_all(g, entities, client)
        .map_err(at("describe"))?;
    if let Some((_, e)) = outcome.failures.pop() {
        return Err(at("describe")(e));
    }
    let mut fallbacks = 0usize;
    let map = entities
        .iter()
        .map(|&e| {
            let text = outcome.descriptions.remove(&e).unwrap_or_else(|| {
                fallbacks += 1;
                g.entity_description(e)
                    .filter(|d| !d.is_empty())
                    .map(str::to_owned)
                    .unwrap_or_else(|| entity_surface(g.entity_name(e)))
            });
            (e, text)
        })
        .collect();
    if fallbacks > 0 {
        log::info!("{fallbacks} entities have no training triples; using fallback descriptions");
    }
    Ok(map)
}

/// Renders examples with consecutive ids starting at `first_id`.
pub fn render_examples(
    g: &KnowledgeGraph,
    template: &PromptTemplate,
    examples: &[LabeledTriple],
    descriptions: Option<&HashMap<EntityId, String>>,
    first_id: u64,
) -> Result<Vec<PromptRecord>, RunError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, lt)| {
            let d = descriptions.map(|m| m as &dyn crate::prompts::Descriptions);
            let p = template
                .render(g, PromptSubject::Triple(lt.triple), d)
                .map_err(at("render"))?;
            Ok(PromptRecord {
                id: first_id + i as u64,
                text: p.text,
                label: lt.label,
            })
        })
        .collect()
}

/// Builds the configured backend. Mock backends read each prompt's class
/// from `prompts` (the first record wins for repeated texts).
pub fn make_backend(
    cfg: &BackendConfig,
    task: TaskTag,
    num_classes: usize,
    prompts: &[PromptRecord],
) -> Result<Box<dyn ExtractionBackend>, RunError> {
    Ok(match cfg {
        BackendConfig::Mock(m) => {
            let mut lookup = HashMap::with_capacity(prompts.len());
            for p in prompts {
                lookup.entry(p.text.clone()).or_insert(p.label);
            }
            let shape = match task {
                TaskTag::TripleClassification => SignalShape::Binary,
                TaskTag::RelationPrediction => SignalShape::MultiClass(num_classes),
            };
            Box::new(MockLm::with_lookup(
                m.seed,
                m.dim,
                m.num_layers,
                m.planted.iter().copied(),
                m.margin,
                shape,
                lookup,
            ))
        }
        BackendConfig::Http { url, num_layers } => Box::new(HttpBackend::new(url, *num_layers)),
        BackendConfig::Store { path } => Box::new(StoreBackend::new(
            crate::extraction::read_store(path).map_err(at("extract"))?,
        )),
    })
}

/// Requested layers, or every interior layer of the backend.
pub fn resolve_layers(
    requested: &[usize],
    backend: &dyn ExtractionBackend,
) -> Result<Vec<usize>, RunError> {
    if !requested.is_empty() {
        return Ok(requested.to_vec());
    }
    match backend.num_layers() {
        Some(l) if l >= 2 => Ok((1..l).collect()),
        _ => Err(at("extract")(
            "backend does not report its depth; list the layers explicitly",
        )),
    }
}

/// Accuracy (and Hits@1 for relation prediction) of `model` on `store`.
pub fn score(
    model: &ProbeModel,
    store: &HiddenStateStore,
) -> Result<BTreeMap<String, f64>, RunError> {
    let pred = model.predict_store(store).map_err(at("evaluate"))?;
    let gold = store.labels();
    let mut m = BTreeMap::new();
    m.insert(
        "accuracy".into(),
        eval::accuracy(&pred, &gold).map_err(at("evaluate"))?,
    );
    if store.header.task == TaskTag::RelationPrediction {
        m.insert(
            "hits_at_1".into(),
            hits_at_1(&pred, &gold, store.header.num_classes()).map_err(at("evaluate"))?,
        );
    }
    Ok(m)
}

/// Test accuracy at `layer` after training on `n` subsampled training
/// examples, for each seed.
pub fn size_curve(
    train: &HiddenStateStore,
    test: &HiddenStateStore,
    layer: usize,
    probe_cfg: &TrainConfig,
    curve: &SizeCurveConfig,
) -> Result<Vec<SizePoint>, RunError> {
    let labels = train.labels();
    let mode = match train.header.task {
        TaskTag::TripleClassification => SubsampleMode::Balanced,
        TaskTag::RelationPrediction => SubsampleMode::Uniform,
    };
    let mut out = Vec::new();
    for &n in &curve.n {
        for seed in 0..curve.seeds {
            let idx = subsample_indices(&labels, n, seed, mode).map_err(at("sizes"))?;
            let sub = train.select(&idx);
            let cfg = TrainConfig {
                seed,
                ..probe_cfg.clone()
            };
            let model = probe::train(&sub, layer, &cfg).map_err(at("sizes"))?;
            let accuracy = store_accuracy(&model, test).map_err(at("sizes"))?;
            out.push(SizePoint { n, seed, accuracy });
        }
    }
    Ok(out)
}

/// What [`run_experiment`] produced.
pub struct RunOutcome {
    pub report: EvalReport,
    pub model: ProbeModel,
    pub train: HiddenStateStore,
    pub valid: HiddenStateStore,
    pub test: HiddenStateStore,
}

/// Runs the whole pipeline and, when `out_dir` is given, writes
/// `report.json`, `layers.csv`, `sizes.csv` and `pca.csv` there.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome, RunError> {
    let mut timer = StageTimer::new();
    let task = cfg.task;

    let g = timer.time("ingest", || load_graph(&cfg.data))?;
    for w in g.warnings() {
        log::warn!("{w}");
    }

    let splits = timer.time("sample", || -> Result<Vec<SplitExamples>, RunError> {
        [
            (Split::Train, cfg.examples.train),
            (Split::Valid, cfg.examples.valid),
            (Split::Test, cfg.examples.test),
        ]
        .into_iter()
        .map(|(split, n)| {
            Ok(SplitExamples {
                split,
                examples: sample_split(&g, task, split, n, &cfg.sampler)?,
            })
        })
        .collect()
    })?;

    let template = resolve_template(cfg)?;
    let descriptions = if template.uses_descriptions() {
        let client = llm_client(&cfg.llm)?;
        let mut entities: Vec<EntityId> = splits
            .iter()
            .flat_map(|s| {
                s.examples
                    .iter()
                    .flat_map(|lt| [lt.triple.head, lt.triple.tail])
            })
            .collect();
        entities.sort_unstable();
        entities.dedup();
        Some(timer.time("describe", || {
            describe_entities(&g, &entities, &cfg.descriptions, client.as_deref())
        })?)
    } else {
        None
    };

    let prompts = timer.time("render", || -> Result<Vec<Vec<PromptRecord>>, RunError> {
        let mut next = 0u64;
        splits
            .iter()
            .map(|s| {
                let r = render_examples(&g, &template, &s.examples, descriptions.as_ref(), next)?;
                next += r.len() as u64;
                Ok(r)
            })
            .collect()
    })?;

    let labels = label_names(&g, task);
    let all_prompts: Vec<PromptRecord> = prompts.iter().flatten().cloned().collect();
    let backend = make_backend(&cfg.backend, task, labels.len(), &all_prompts)?;
    let layers = resolve_layers(&cfg.extract.layers, backend.as_ref())?;
    let opts = ExtractOptions {
        batch_size: cfg.extract.batch_size,
        max_retries: cfg.extract.max_retries,
        task,
        labels,
    };
    let mut stores = timer.time("extract", || -> Result<Vec<HiddenStateStore>, RunError> {
        prompts
            .iter()
            .map(|p| extract_records(backend.as_ref(), p, &layers, &opts).map_err(at("extract")))
            .collect()
    })?;
    let test = stores.pop().unwrap();
    let valid = stores.pop().unwrap();
    let train = stores.pop().unwrap();

    let mut report = EvalReport::new(task, serde_json::to_value(cfg).expect("config serializes"));
    for (name, s) in [("train", &train), ("valid", &valid), ("test", &test)] {
        report.sample_counts.insert(name.into(), s.len());
    }

    let sweep_opts = SweepOptions {
        layers: match cfg.selection.layer {
            Some(l) => vec![l],
            None => layers.clone(),
        },
        threads: cfg.selection.threads,
        test_all_layers: cfg.selection.test_all_layers,
    };
    let outcome = timer.time("sweep", || {
        sweep_layers(&train, &valid, Some(&test), &cfg.probe, &sweep_opts).map_err(at("sweep"))
    })?;
    let model = outcome.selected_model().clone();
    report.selected_layer = Some(outcome.report.selected_layer);
    report.selection_rule = Some(match cfg.selection.layer {
        Some(_) => "fixed layer".to_owned(),
        None => outcome.report.rule.clone(),
    });
    report.layers = outcome.report.entries.clone();

    report.metrics = timer.time("evaluate", || score(&model, &test))?;

    if let Some(curve) = &cfg.sizes {
        report.sizes = timer.time("sizes", || {
            size_curve(&train, &test, model.layer, &cfg.probe, curve)
        })?;
    }

    let pca = match &cfg.pca {
        Some(p) => Some(timer.time("pca", || -> Result<_, RunError> {
            let keep = test.len().min(p.max_points);
            let sub = test.select(&(0..keep).collect::<Vec<_>>());
            let (rows, _) = sub
                .layer_matrix(model.layer)
                .expect("selected layer is stored");
            Ok((sub.clone(), pca_project(&rows, p.k).map_err(at("pca"))?))
        })?),
        None => None,
    };

    report.stages = timer.finish();
    report.peak_memory = peak_memory();

    if let Some(dir) = out_dir {
        write_artifacts(dir, &report, pca.as_ref().map(|(s, p)| (s, p)))?;
    }
    Ok(RunOutcome {
        report,
        model,
        train,
        valid,
        test,
    })
}

fn write_artifacts(
    dir: &Path,
    report: &EvalReport,
    pca: Option<(&HiddenStateStore, &eval::PcaResult)>,
) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(at("write"))?;
    report.save(dir.join("report.json")).map_err(at("write"))?;
    let create = |name: &str| fs::File::create(dir.join(name)).map(BufWriter::new);
    write_layers_csv(create("layers.csv").map_err(at("write"))?, &report.layers)
        .map_err(at("write"))?;
    if !report.sizes.is_empty() {
        write_sizes_csv(create("sizes.csv").map_err(at("write"))?, &report.sizes)
            .map_err(at("write"))?;
    }
    if let Some((store, p)) = pca {
        let ids: Vec<u64> = store.records.iter().map(|r| r.example_id).collect();
        write_pca_csv(
            create("pca.csv").map_err(at("write"))?,
            &ids,
            &store.labels(),
            p,
        )
        .map_err(at("write"))?;
    }
    Ok(())
}
