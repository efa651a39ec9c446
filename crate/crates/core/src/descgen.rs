//! Entity descriptions generated from one-hop training subgraphs.
//!
//! Two modes: `concat` joins the sentence form of every incident training
//! triple; `llm_rephrase` sends those sentences to a text-generation client
//! and keeps its answer. Only training triples ever reach a prompt.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kg::{parse_descriptions, EntityId, KnowledgeGraph, Triple};
use crate::prompts::{entity_surface, transform_triple};
use crate::sampling::derive_seed;

#[derive(Debug, Error)]
pub enum DescError {
    #[error("entity {entity}: generation client failed: {message}")]
    Client { entity: String, message: String },
    #[error("entity {entity}: generation client returned empty text")]
    EmptyOutput { entity: String },
    #[error("llm_rephrase mode needs a generation client")]
    NoClient,
    #[error("invalid description config: {0}")]
    Config(String),
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescMode {
    Concat,
    #[serde(alias = "llm")]
    LlmRephrase,
}

/// One in-context example for the generation prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub entity: String,
    pub facts: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescGenConfig {
    pub mode: DescMode,
    pub max_subgraph_triples: usize,
    pub separator: String,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    /// Leading instruction of the generation prompt.
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
    /// Maximum number of concurrent client calls.
    pub concurrency: usize,
}

impl Default for DescGenConfig {
    fn default() -> Self {
        DescGenConfig {
            mode: DescMode::Concat,
            max_subgraph_triples: 16,
            separator: "; ".into(),
            seed: 0,
            cache_path: None,
            instruction: "Write a short description of the entity in natural language, \
                          using only the facts listed."
                .into(),
            exemplars: Vec::new(),
            concurrency: 1,
        }
    }
}

impl DescGenConfig {
    pub fn validate(&self) -> Result<(), DescError> {
        if self.max_subgraph_triples == 0 {
            return Err(DescError::Config(
                "max_subgraph_triples must be >= 1".into(),
            ));
        }
        if self.concurrency == 0 {
            return Err(DescError::Config("concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

/// A text-generation model used to rephrase subgraph facts.
pub trait TextGenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, String>;
    /// Model name; part of the cache key.
    fn identity(&self) -> &str;
}

/// Test double answering from canned text and logging every prompt.
pub struct ReplayClient {
    identity: String,
    by_prompt: HashMap<String, String>,
    default: Option<String>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl ReplayClient {
    /// Answers every prompt with `text`.
    pub fn fixed(identity: impl Into<String>, text: impl Into<String>) -> Self {
        ReplayClient {
            identity: identity.into(),
            by_prompt: HashMap::new(),
            default: Some(text.into()),
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Answers prompts found in `responses`; anything else is a client error.
    pub fn by_prompt(identity: impl Into<String>, responses: HashMap<String, String>) -> Self {
        ReplayClient {
            identity: identity.into(),
            by_prompt: responses,
            default: None,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Reads `{"prompt": .., "text": ..}` JSON lines.
    pub fn from_jsonl(
        identity: impl Into<String>,
        path: impl AsRef<Path>,
    ) -> Result<Self, DescError> {
        #[derive(Deserialize)]
        struct Line {
            prompt: String,
            text: String,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DescError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut responses = HashMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let l: Line = serde_json::from_str(line)
                .map_err(|e| DescError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            responses.insert(l.prompt, l.text);
        }
        Ok(Self::by_prompt(identity, responses))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl TextGenerationClient for ReplayClient {
    fn generate(&self, prompt: &str) -> Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(prompt.to_owned());
        self.by_prompt
            .get(prompt)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| "no canned response for prompt".to_owned())
    }

    fn identity(&self) -> &str {
        &self.identity
    }
}

/// Minimal JSON-over-HTTP generation client.
///
/// Sends `{"model": .., "prompt": ..}` and reads `{"text": ..}` back.
pub struct HttpGenerationClient {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpGenerationClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpGenerationClient {
            url: url.into(),
            model: model.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl TextGenerationClient for HttpGenerationClient {
    fn generate(&self, prompt: &str) -> Result<String, String> {
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let body = serde_json::json!({ "model": self.model, "prompt": prompt });
        let reply: Reply = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        Ok(reply.text)
    }

    fn identity(&self) -> &str {
        &self.model
    }
}

/// The incident training triples used for `e`'s description: the full
/// one-hop subgraph, or a seeded uniform sample of `max_subgraph_triples`
/// of them kept in file order.
pub fn sampled_subgraph(g: &KnowledgeGraph, e: EntityId, cfg: &DescGenConfig) -> Vec<Triple> {
    let sub = g.one_hop_subgraph(e);
    if sub.len() <= cfg.max_subgraph_triples {
        return sub;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, e.0 as u64));
    let mut picked = index::sample(&mut rng, sub.len(), cfg.max_subgraph_triples).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| sub[i]).collect()
}

/// Sentence forms of the sampled subgraph joined by the separator.
pub fn concat_subgraph(g: &KnowledgeGraph, e: EntityId, cfg: &DescGenConfig) -> String {
    sampled_subgraph(g, e, cfg)
        .iter()
        .map(|t| transform_triple(t, g))
        .collect::<Vec<_>>()
        .join(&cfg.separator)
}

/// Concat-mode description. Empty for entities with no training triples.
pub fn concat_description(g: &KnowledgeGraph, e: EntityId, cfg: &DescGenConfig) -> String {
    concat_subgraph(g, e, cfg)
}

/// The prompt sent to the generation client for entity `e`.
pub fn generation_prompt(g: &KnowledgeGraph, e: EntityId, cfg: &DescGenConfig) -> String {
    let mut p = String::new();
    p.push_str(&cfg.instruction);
    p.push_str("\n\n");
    for ex in &cfg.exemplars {
        p.push_str(&format!(
            "Entity: {}\nFacts: {}\nDescription: {}\n\n",
            ex.entity, ex.facts, ex.description
        ));
    }
    p.push_str(&format!(
        "Entity: {}\nFacts: {}\nDescription:",
        entity_surface(g.entity_name(e)),
        concat_subgraph(g, e, cfg)
    ));
    p
}

/// Hex SHA-256 over the surface names of the sampled subgraph.
pub fn subgraph_hash(g: &KnowledgeGraph, e: EntityId, cfg: &DescGenConfig) -> String {
    let mut h = Sha256::new();
    for t in sampled_subgraph(g, e, cfg) {
        h.update(g.entity_name(t.head).as_bytes());
        h.update(b"\t");
        h.update(g.relation_name(t.relation).as_bytes());
        h.update(b"\t");
        h.update(g.entity_name(t.tail).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sanitize(text: &str) -> String {
    text.split(['\t', '\n', '\r'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
struct CacheEntry {
    model: String,
    subgraph_hash: String,
    text: String,
}

/// Descriptions keyed by entity name, valid only for the model identity and
/// subgraph hash they were produced from.
///
/// Persisted as `name<TAB>description` (loadable as a description file) plus
/// a `<path>.meta` sidecar with `name<TAB>model<TAB>hash` lines.
#[derive(Clone, Debug, Default)]
pub struct DescriptionCache {
    entries: BTreeMap<String, CacheEntry>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

impl DescriptionCache {
    pub fn get(&self, name: &str, model: &str, subgraph_hash: &str) -> Option<&str> {
        self.entries
            .get(name)
            .filter(|c| c.model == model && c.subgraph_hash == subgraph_hash)
            .map(|c| c.text.as_str())
    }

    pub fn insert(&mut self, name: &str, model: &str, subgraph_hash: &str, text: &str) {
        self.entries.insert(
            name.to_owned(),
            CacheEntry {
                model: model.to_owned(),
                subgraph_hash: subgraph_hash.to_owned(),
                text: text.to_owned(),
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a persisted cache. A missing file gives an empty cache; entries
    /// absent from the sidecar are dropped since their key is unknown.
    pub fn load(path: &Path) -> Result<Self, DescError> {
        let io = |source| DescError::Io {
            path: path.to_owned(),
            source,
        };
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(io)?;
        let meta_text = match fs::read_to_string(meta_path(path)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let mut keys: HashMap<&str, (&str, &str)> = HashMap::new();
        for line in meta_text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() == 3 {
                keys.insert(f[0], (f[1], f[2]));
            }
        }
        let mut warnings = Vec::new();
        let mut cache = Self::default();
        for (name, desc) in parse_descriptions(&text, &mut warnings) {
            if let Some((model, hash)) = keys.get(name.as_str()) {
                cache.insert(&name, model, hash, &desc);
            }
        }
        Ok(cache)
    }

    /// Writes both files via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), DescError> {
        let write = |target: &Path, body: String| -> Result<(), DescError> {
            let io = |source| DescError::Io {
                path: target.to_owned(),
                source,
            };
            let mut tmp = target.as_os_str().to_owned();
            tmp.push(".tmp");
            let tmp = PathBuf::from(tmp);
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(body.as_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
            fs::rename(&tmp, target).map_err(io)
        };
        let mut descs = String::new();
        let mut meta = String::new();
        for (name, c) in &self.entries {
            descs.push_str(&format!("{name}\t{}\n", c.text));
            meta.push_str(&format!("{name}\t{}\t{}\n", c.model, c.subgraph_hash));
        }
        write(&meta_path(path), meta)?;
        write(path, descs)
    }
}

/// Result of a batch run over many entities.
#[derive(Debug, Default)]
pub struct DescribeOutcome {
    /// Non-empty descriptions only; entities without training triples are absent.
    pub descriptions: BTreeMap<EntityId, String>,
    pub failures: Vec<(EntityId, DescError)>,
    pub client_calls: usize,
}

const CONCAT_IDENTITY: &str = "concat";

/// Description generator with a shared cache.
pub struct DescriptionGenerator {
    cfg: DescGenConfig,
    cache: Mutex<DescriptionCache>,
    client_calls: AtomicUsize,
}

impl DescriptionGenerator {
    /// Creates a generator, loading `cfg.cache_path` when it exists.
    pub fn new(cfg: DescGenConfig) -> Result<Self, DescError> {
        cfg.validate()?;
        let cache = match &cfg.cache_path {
            Some(p) => DescriptionCache::load(p)?,
            None => DescriptionCache::default(),
        };
        Ok(DescriptionGenerator {
            cfg,
            cache: Mutex::new(cache),
            client_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &DescGenConfig {
        &self.cfg
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn client_calls(&self) -> usize {
        self.client_calls.load(Ordering::SeqCst)
    }

    /// Rephrased description of `e`, served from cache when the entity,
    /// client identity and subgraph hash all match.
    pub fn rephrase_description(
        &self,
        g: &KnowledgeGraph,
        e: EntityId,
        client: &dyn TextGenerationClient,
    ) -> Result<String, DescError> {
        let name = g.entity_name(e);
        if g.degree(e) == 0 {
            return Ok(String::new());
        }
        let hash = subgraph_hash(g, e, &self.cfg);
        if let Some(hit) = self
            .cache
            .lock()
            .unwrap()
            .get(name, client.identity(), &hash)
        {
            return Ok(hit.to_owned());
        }
        let prompt = generation_prompt(g, e, &self.cfg);
        self.client_calls.fetch_add(1, Ordering::SeqCst);
        let raw = client
            .generate(&prompt)
            .map_err(|message| DescError::Client {
                entity: name.to_owned(),
                message,
            })?;
        let text = sanitize(&raw);
        if text.is_empty() {
            return Err(DescError::EmptyOutput {
                entity: name.to_owned(),
            });
        }
        self.cache
            .lock()
            .unwrap()
            .insert(name, client.identity(), &hash, &text);
        Ok(text)
    }

    fn describe_one(
        &self,
        g: &KnowledgeGraph,
        e: EntityId,
        client: Option<&dyn TextGenerationClient>,
    ) -> Result<String, DescError> {
        match self.cfg.mode {
            DescMode::Concat => {
                let text = sanitize(&concat_description(g, e, &self.cfg));
                if !text.is_empty() {
                    let hash = subgraph_hash(g, e, &self.cfg);
                    self.cache.lock().unwrap().insert(
                        g.entity_name(e),
                        CONCAT_IDENTITY,
                        &hash,
                        &text,
                    );
                }
                Ok(text)
            }
            DescMode::LlmRephrase => {
                self.rephrase_description(g, e, client.ok_or(DescError::NoClient)?)
            }
        }
    }

    /// Describes every entity in `entities`, then persists the cache.
    ///
    /// Failures are collected per entity; successful entries are still
    /// persisted. Client calls run on up to `cfg.concurrency` threads.
    pub fn describe_all(
        &self,
        g: &KnowledgeGraph,
        entities: &[EntityId],
        client: Option<&dyn TextGenerationClient>,
    ) -> Result<DescribeOutcome, DescError> {
        if self.cfg.mode == DescMode::LlmRephrase && client.is_none() {
            return Err(DescError::NoClient);
        }
        let calls_before = self.client_calls();
        let results: Mutex<Vec<(usize, Result<String, DescError>)>> = Mutex::new(Vec::new());
        let next = AtomicUsize::new(0);
        let workers = self.cfg.concurrency.min(entities.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= entities.len() {
                        break;
                    }
                    let r = self.describe_one(g, entities[i], client);
                    results.lock().unwrap().push((i, r));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(i, _)| *i);
        let mut out = DescribeOutcome::default();
        for (i, r) in results {
            match r {
                Ok(text) if text.is_empty() => {}
                Ok(text) => {
                    out.descriptions.insert(entities[i], text);
                }
                Err(e) => out.failures.push((entities[i], e)),
            }
        }
        out.client_calls = self.client_calls() - calls_before;
        if let Some(p) = &self.cfg.cache_path {
            self.cache.lock().unwrap().save(p)?;
        }
        Ok(out)
    }
}
