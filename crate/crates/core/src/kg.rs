//! Knowledge graph loading, interning and indexing.
//!
//! Triples are read from benchmark-style TSV files (`head<TAB>relation<TAB>tail`
//! with an optional fourth label column) and interned into dense integer ids.
//! A [`KnowledgeGraph`] keeps the three splits, a membership set over all of
//! them (used for filtered negative sampling) and a per-entity adjacency index
//! over the training split (used for one-hop description generation).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file contains no records")]
    Empty { path: PathBuf },
    #[error("{path}:{line}: expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: invalid label {value:?} (expected 1, 0 or -1)")]
    BadLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: empty name field")]
    EmptyName { path: PathBuf, line: usize },
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("invalid graph bundle: {0}")]
    Bundle(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// A triple with its class label.
///
/// For triple classification the label is 1 (plausible) or 0 (implausible);
/// for relation prediction it is the gold relation id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub label: i32,
}

impl LabeledTriple {
    pub fn positive(triple: Triple) -> Self {
        LabeledTriple { triple, label: 1 }
    }

    pub fn negative(triple: Triple) -> Self {
        LabeledTriple { triple, label: 0 }
    }
}

/// Bijective name <-> dense id table.
#[derive(Clone, Debug, Default)]
pub struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn from_names(names: Vec<String>) -> Result<Self, KgError> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if ids.insert(n.clone(), i as u32).is_some() {
                return Err(KgError::Bundle(format!("duplicate name {n:?}")));
            }
        }
        Ok(Interner { names, ids })
    }
}

/// Entity and relation interning tables shared by every split of a dataset.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    pub entities: Interner,
    pub relations: Interner,
}

impl Vocab {
    pub fn entity(&mut self, name: &str) -> EntityId {
        EntityId(self.entities.intern(name))
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        RelationId(self.relations.intern(name))
    }

    /// Interns a triple given by surface names.
    pub fn triple(&mut self, head: &str, relation: &str, tail: &str) -> Triple {
        Triple::new(
            self.entity(head),
            self.relation(relation),
            self.entity(tail),
        )
    }
}

fn read_text(path: &Path) -> Result<String, KgError> {
    fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads a triple file, interning names into `vocab` on first sight.
///
/// Records come back in file order with duplicates preserved. On-disk labels
/// `-1` are normalized to `0`; unlabeled files yield label 1 for every record.
pub fn load_triples(
    path: impl AsRef<Path>,
    labeled: bool,
    vocab: &mut Vocab,
) -> Result<Vec<LabeledTriple>, KgError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse_triples(&text, path, labeled, vocab)
}

pub fn parse_triples(
    text: &str,
    path: &Path,
    labeled: bool,
    vocab: &mut Vocab,
) -> Result<Vec<LabeledTriple>, KgError> {
    let expected = if labeled { 4 } else { 3 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expected {
            return Err(KgError::FieldCount {
                path: path.to_owned(),
                line: lineno,
                expected,
                found: fields.len(),
            });
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(KgError::EmptyName {
                path: path.to_owned(),
                line: lineno,
            });
        }
        let label = if labeled {
            match fields[3].trim() {
                "1" | "+1" => 1,
                "0" | "-1" => 0,
                other => {
                    return Err(KgError::BadLabel {
                        path: path.to_owned(),
                        line: lineno,
                        value: other.to_owned(),
                    })
                }
            }
        } else {
            1
        };
        let triple = vocab.triple(fields[0], fields[1], fields[2]);
        out.push(LabeledTriple { triple, label });
    }
    if out.is_empty() {
        return Err(KgError::Empty {
            path: path.to_owned(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Optional description files for [`KnowledgeGraph::build`].
#[derive(Clone, Debug, Default)]
pub struct DescriptionFiles {
    pub entities: Option<PathBuf>,
    pub relations: Option<PathBuf>,
}

/// Parses a `name<TAB>description` file into pairs, in file order.
///
/// Lines without a tab are reported through `warnings` and skipped.
pub fn parse_descriptions(text: &str, warnings: &mut Vec<String>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((name, desc)) => out.push((name.to_owned(), desc.to_owned())),
            None => warnings.push(format!("line {}: missing tab separator", i + 1)),
        }
    }
    out
}

pub fn load_descriptions(
    path: impl AsRef<Path>,
    warnings: &mut Vec<String>,
) -> Result<Vec<(String, String)>, KgError> {
    let text = read_text(path.as_ref())?;
    Ok(parse_descriptions(&text, warnings))
}

/// An interned knowledge graph with split membership and adjacency indexes.
///
/// Immutable once built.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    vocab: Vocab,
    train: Vec<LabeledTriple>,
    valid: Vec<LabeledTriple>,
    test: Vec<LabeledTriple>,
    membership: HashSet<Triple>,
    // indices into `train`, file order
    by_entity: Vec<Vec<usize>>,
    entity_desc: HashMap<EntityId, String>,
    relation_desc: HashMap<RelationId, String>,
    warnings: Vec<String>,
}

impl KnowledgeGraph {
    /// Builds the graph from loaded splits.
    ///
    /// The membership set covers every record of every split. Adjacency only
    /// covers positive training records. Descriptions naming unknown entities
    /// or relations are collected as warnings.
    pub fn build(
        vocab: Vocab,
        train: Vec<LabeledTriple>,
        valid: Vec<LabeledTriple>,
        test: Vec<LabeledTriple>,
        desc: &DescriptionFiles,
    ) -> Result<Self, KgError> {
        let mut warnings = Vec::new();
        let mut entity_pairs = Vec::new();
        let mut relation_pairs = Vec::new();
        if let Some(p) = &desc.entities {
            entity_pairs = load_descriptions(p, &mut warnings)?;
        }
        if let Some(p) = &desc.relations {
            relation_pairs = load_descriptions(p, &mut warnings)?;
        }
        let mut g = Self::from_parts(vocab, train, valid, test);
        g.warnings = warnings;
        g.set_entity_descriptions(entity_pairs);
        for (name, text) in relation_pairs {
            match g.vocab.relations.get(&name) {
                Some(id) => {
                    g.relation_desc.insert(RelationId(id), text);
                }
                None => g.warnings.push(format!(
                    "relation description for unknown relation {name:?}"
                )),
            }
        }
        Ok(g)
    }

    /// Builds a graph without description files.
    pub fn from_parts(
        vocab: Vocab,
        train: Vec<LabeledTriple>,
        valid: Vec<LabeledTriple>,
        test: Vec<LabeledTriple>,
    ) -> Self {
        let membership: HashSet<Triple> = train
            .iter()
            .chain(&valid)
            .chain(&test)
            .map(|lt| lt.triple)
            .collect();
        let mut by_entity = vec![Vec::new(); vocab.entities.len()];
        for (i, lt) in train.iter().enumerate() {
            if lt.label != 1 {
                continue;
            }
            let t = lt.triple;
            by_entity[t.head.index()].push(i);
            if t.tail != t.head {
                by_entity[t.tail.index()].push(i);
            }
        }
        KnowledgeGraph {
            vocab,
            train,
            valid,
            test,
            membership,
            by_entity,
            entity_desc: HashMap::new(),
            relation_desc: HashMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Attaches entity descriptions given as `(name, text)` pairs.
    pub fn set_entity_descriptions(&mut self, pairs: impl IntoIterator<Item = (String, String)>) {
        for (name, text) in pairs {
            match self.vocab.entities.get(&name) {
                Some(id) => {
                    self.entity_desc.insert(EntityId(id), text);
                }
                None => self
                    .warnings
                    .push(format!("entity description for unknown entity {name:?}")),
            }
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.relations.len()
    }

    pub fn split(&self, split: Split) -> &[LabeledTriple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[LabeledTriple] {
        &self.train
    }

    /// Positive records of a split, in file order.
    pub fn positives(&self, split: Split) -> Vec<Triple> {
        self.split(split)
            .iter()
            .filter(|lt| lt.label == 1)
            .map(|lt| lt.triple)
            .collect()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.membership.contains(t)
    }

    pub fn membership_len(&self) -> usize {
        self.membership.len()
    }

    /// Every positive training triple with `e` as head or tail, in file order.
    pub fn one_hop_subgraph(&self, e: EntityId) -> Vec<Triple> {
        self.by_entity
            .get(e.index())
            .map(|idx| idx.iter().map(|&i| self.train[i].triple).collect())
            .unwrap_or_default()
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.by_entity.get(e.index()).map_or(0, Vec::len)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.vocab.entities.name(e.0).unwrap_or("")
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.vocab.relations.name(r.0).unwrap_or("")
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.vocab.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.vocab.relations.get(name).map(RelationId)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn entity_description(&self, e: EntityId) -> Option<&str> {
        self.entity_desc.get(&e).map(String::as_str)
    }

    /// Stored for completeness; no default prompt reads it.
    pub fn relation_description(&self, r: RelationId) -> Option<&str> {
        self.relation_desc.get(&r).map(String::as_str)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Resolves a triple given by names against the existing tables.
    pub fn resolve(&self, head: &str, relation: &str, tail: &str) -> Result<Triple, KgError> {
        let h = self
            .entity_id(head)
            .ok_or_else(|| KgError::UnknownEntity(head.to_owned()))?;
        let r = self
            .relation_id(relation)
            .ok_or_else(|| KgError::UnknownRelation(relation.to_owned()))?;
        let t = self
            .entity_id(tail)
            .ok_or_else(|| KgError::UnknownEntity(tail.to_owned()))?;
        Ok(Triple::new(h, r, t))
    }

    /// Formats a labeled triple as a `head<TAB>relation<TAB>tail<TAB>label` line.
    pub fn format_labeled(&self, lt: &LabeledTriple) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.entity_name(lt.triple.head),
            self.relation_name(lt.triple.relation),
            self.entity_name(lt.triple.tail),
            lt.label
        )
    }
}

const BUNDLE_MAGIC: &[u8; 4] = b"KGGB";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Bundle {
    entities: Vec<String>,
    relations: Vec<String>,
    train: Vec<LabeledTriple>,
    valid: Vec<LabeledTriple>,
    test: Vec<LabeledTriple>,
    entity_desc: Vec<(u32, String)>,
    relation_desc: Vec<(u32, String)>,
}

impl KnowledgeGraph {
    /// Serializes the graph as a bundle: magic `KGGB`, u32 LE version, JSON body.
    pub fn to_bundle_bytes(&self) -> Vec<u8> {
        let mut entity_desc: Vec<(u32, String)> = self
            .entity_desc
            .iter()
            .map(|(k, v)| (k.0, v.clone()))
            .collect();
        entity_desc.sort_by_key(|(k, _)| *k);
        let mut relation_desc: Vec<(u32, String)> = self
            .relation_desc
            .iter()
            .map(|(k, v)| (k.0, v.clone()))
            .collect();
        relation_desc.sort_by_key(|(k, _)| *k);
        let bundle = Bundle {
            entities: self.vocab.entities.names().to_vec(),
            relations: self.vocab.relations.names().to_vec(),
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
            entity_desc,
            relation_desc,
        };
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend(serde_json::to_vec(&bundle).expect("bundle serializes"));
        out
    }

    pub fn from_bundle_bytes(bytes: &[u8]) -> Result<Self, KgError> {
        if bytes.len() < 8 || &bytes[..4] != BUNDLE_MAGIC {
            return Err(KgError::Bundle("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BUNDLE_VERSION {
            return Err(KgError::Bundle(format!("unsupported version {version}")));
        }
        let b: Bundle =
            serde_json::from_slice(&bytes[8..]).map_err(|e| KgError::Bundle(e.to_string()))?;
        let vocab = Vocab {
            entities: Interner::from_names(b.entities)?,
            relations: Interner::from_names(b.relations)?,
        };
        let ne = vocab.entities.len() as u32;
        let nr = vocab.relations.len() as u32;
        for lt in b.train.iter().chain(&b.valid).chain(&b.test) {
            let t = lt.triple;
            if t.head.0 >= ne || t.tail.0 >= ne || t.relation.0 >= nr {
                return Err(KgError::Bundle("triple id out of range".into()));
            }
        }
        let mut g = Self::from_parts(vocab, b.train, b.valid, b.test);
        for (id, text) in b.entity_desc {
            if id >= ne {
                return Err(KgError::Bundle("description id out of range".into()));
            }
            g.entity_desc.insert(EntityId(id), text);
        }
        for (id, text) in b.relation_desc {
            if id >= nr {
                return Err(KgError::Bundle("description id out of range".into()));
            }
            g.relation_desc.insert(RelationId(id), text);
        }
        Ok(g)
    }

    pub fn save_bundle(&self, path: impl AsRef<Path>) -> Result<(), KgError> {
        let path = path.as_ref();
        fs::write(path, self.to_bundle_bytes()).map_err(|source| KgError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load_bundle(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| KgError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bundle_bytes(&bytes)
    }
}
