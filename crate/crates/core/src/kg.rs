//! Triple loading, vocabularies, the inverse-augmented training graph and
//! query splits.
//!
//! Edge ids `0..n` are the training facts in file order. After
//! [`KnowledgeGraph::augment_inverse`], edge `i + n` is the inverse of edge
//! `i` with relation `r + R`. The self-loop relation `2R` is never stored as
//! an edge; propagation adds it per frontier entity.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }
}

/// A link-prediction query `(entity, relation, ?)` with its known answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub entity: EntityId,
    pub relation: RelationId,
    pub answer: EntityId,
}

/// Name to dense-id maps for entities and relations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
}

fn intern(names: &mut Vec<String>, ids: &mut HashMap<String, u32>, name: &str) -> u32 {
    if let Some(&id) = ids.get(name) {
        return id;
    }
    let id = names.len() as u32;
    names.push(name.to_string());
    ids.insert(name.to_string(), id);
    id
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        intern(&mut self.entities, &mut self.entity_ids, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        intern(&mut self.relations, &mut self.relation_ids, name)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entities.get(id as usize).map(String::as_str)
    }

    pub fn relation_name(&self, id: RelationId) -> Option<&str> {
        self.relations.get(id as usize).map(String::as_str)
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    /// Writes `entities.tsv` and `relations.tsv` (`id TAB name`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        for (file, names) in [
            ("entities.tsv", &self.entities),
            ("relations.tsv", &self.relations),
        ] {
            let path = dir.join(file);
            let mut out = Vec::new();
            for (i, n) in names.iter().enumerate() {
                writeln!(out, "{i}\t{n}").expect("write to Vec");
            }
            fs::write(&path, out).map_err(|e| CoreError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        for (file, is_entity) in [("entities.tsv", true), ("relations.tsv", false)] {
            let path = dir.join(file);
            let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let parse_err = |message: &str| CoreError::Parse {
                    path: path.clone(),
                    line: lineno + 1,
                    message: message.to_string(),
                };
                let (id, name) = line
                    .split_once('\t')
                    .ok_or_else(|| parse_err("expected `id<TAB>name`"))?;
                let id: usize = id.parse().map_err(|_| parse_err("id is not an integer"))?;
                let got = if is_entity {
                    vocab.intern_entity(name)
                } else {
                    vocab.intern_relation(name)
                };
                if got as usize != id {
                    return Err(parse_err("ids must be contiguous and unique"));
                }
            }
        }
        Ok(vocab)
    }
}

/// Compressed adjacency: `ids[offsets[e]..offsets[e + 1]]` are the edge ids
/// incident to entity `e`.
#[derive(Clone, Debug, Default, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    ids: Vec<u32>,
}

impl Csr {
    fn build(n: usize, edges: &[Triple], key: impl Fn(&Triple) -> EntityId) -> Self {
        let mut offsets = vec![0usize; n + 1];
        for e in edges {
            offsets[key(e) as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut ids = vec![0u32; edges.len()];
        for (i, e) in edges.iter().enumerate() {
            let k = key(e) as usize;
            ids[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Self { offsets, ids }
    }

    fn bucket(&self, e: EntityId) -> &[u32] {
        let e = e as usize;
        &self.ids[self.offsets[e]..self.offsets[e + 1]]
    }
}

/// Directed multigraph over a fixed entity id space.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_relations_base: usize,
    edges: Vec<Triple>,
    raw_facts: usize,
    augmented: bool,
    out_index: Csr,
    in_index: Csr,
}

impl KnowledgeGraph {
    /// Builds a graph from raw facts. Relation ids must be `< n_relations_base`.
    pub fn from_facts(
        n_entities: usize,
        n_relations_base: usize,
        facts: Vec<Triple>,
    ) -> Result<Self> {
        for t in &facts {
            if t.head as usize >= n_entities || t.tail as usize >= n_entities {
                return Err(CoreError::Invalid(format!(
                    "fact {t:?} references an entity >= {n_entities}"
                )));
            }
            if t.rel as usize >= n_relations_base {
                return Err(CoreError::Invalid(format!(
                    "fact {t:?} references a relation >= {n_relations_base}"
                )));
            }
        }
        let raw_facts = facts.len();
        let mut g = Self {
            n_entities,
            n_relations_base,
            edges: facts,
            raw_facts,
            augmented: false,
            out_index: Csr::default(),
            in_index: Csr::default(),
        };
        g.reindex();
        Ok(g)
    }

    /// Like [`from_facts`](Self::from_facts) followed by inverse augmentation.
    pub fn augmented(
        n_entities: usize,
        n_relations_base: usize,
        facts: Vec<Triple>,
    ) -> Result<Self> {
        let mut g = Self::from_facts(n_entities, n_relations_base, facts)?;
        g.augment_inverse()?;
        Ok(g)
    }

    fn reindex(&mut self) {
        self.out_index = Csr::build(self.n_entities, &self.edges, |t| t.head);
        self.in_index = Csr::build(self.n_entities, &self.edges, |t| t.tail);
    }

    /// Appends `(y, r + R, x)` for every raw edge `(x, r, y)`. A second call
    /// is rejected.
    pub fn augment_inverse(&mut self) -> Result<()> {
        if self.augmented {
            return Err(CoreError::AlreadyAugmented);
        }
        let r = self.n_relations_base as u32;
        let inverse: Vec<Triple> = self
            .edges
            .iter()
            .map(|t| Triple::new(t.tail, t.rel + r, t.head))
            .collect();
        self.edges.extend(inverse);
        self.augmented = true;
        self.reindex();
        Ok(())
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    /// Number of relations in the source data (`R`).
    pub fn n_relations_base(&self) -> usize {
        self.n_relations_base
    }

    /// Relations a query may ask about: base plus inverse (`2R`).
    pub fn n_query_relations(&self) -> usize {
        2 * self.n_relations_base
    }

    /// Relation ids that carry messages: base, inverse and self-loop (`2R + 1`).
    pub fn n_edge_relations(&self) -> usize {
        2 * self.n_relations_base + 1
    }

    pub fn self_loop_relation(&self) -> RelationId {
        2 * self.n_relations_base as u32
    }

    /// Maps a base relation to its inverse and back.
    pub fn inverse_relation(&self, r: RelationId) -> RelationId {
        let base = self.n_relations_base as u32;
        if r < base {
            r + base
        } else {
            r - base
        }
    }

    pub fn raw_fact_count(&self) -> usize {
        self.raw_facts
    }

    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    pub fn edge(&self, id: u32) -> Triple {
        self.edges[id as usize]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge ids leaving `e`, in edge-id order.
    pub fn out_edges(&self, e: EntityId) -> &[u32] {
        self.out_index.bucket(e)
    }

    /// Edge ids entering `e`, in edge-id order.
    pub fn incoming(&self, e: EntityId) -> &[u32] {
        self.in_index.bucket(e)
    }

    /// Sum of in-index bucket sizes. Equals [`num_edges`](Self::num_edges).
    pub fn in_index_len(&self) -> usize {
        self.in_index.ids.len()
    }

    /// Edges whose source lies in `frontier`, grouped by tail (ascending),
    /// edge-id order within a group.
    pub fn in_edges(&self, frontier: &[EntityId]) -> Vec<Triple> {
        let mut out: Vec<(u32, Triple)> = Vec::new();
        for &x in frontier {
            for &id in self.out_edges(x) {
                out.push((id, self.edge(id)));
            }
        }
        out.sort_by_key(|(id, t)| (t.tail, *id));
        out.dedup_by_key(|(id, _)| *id);
        out.into_iter().map(|(_, t)| t).collect()
    }

    /// The view that keeps every edge with both endpoints in `keep`. Entity
    /// ids are unchanged; edge order follows the parent graph.
    pub fn induced(&self, keep: &[bool]) -> KnowledgeGraph {
        let edges: Vec<Triple> = self
            .edges
            .iter()
            .filter(|t| keep[t.head as usize] && keep[t.tail as usize])
            .copied()
            .collect();
        let raw_facts = if self.augmented {
            edges.len() / 2
        } else {
            edges.len()
        };
        let mut g = KnowledgeGraph {
            n_entities: self.n_entities,
            n_relations_base: self.n_relations_base,
            edges,
            raw_facts,
            augmented: self.augmented,
            out_index: Csr::default(),
            in_index: Csr::default(),
        };
        g.reindex();
        g
    }
}

/// Train/valid/test queries in both directions plus the filter map.
#[derive(Clone, Debug, Default)]
pub struct QuerySplit {
    pub train: Vec<Query>,
    pub valid: Vec<Query>,
    pub test: Vec<Query>,
    filter: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
}

static EMPTY: BTreeSet<EntityId> = BTreeSet::new();

impl QuerySplit {
    /// Builds both query directions from the triples of each split. Duplicate
    /// triples inside a split are dropped.
    pub fn from_triples(
        n_relations_base: usize,
        train: &[Triple],
        valid: &[Triple],
        test: &[Triple],
    ) -> Self {
        let r = n_relations_base as u32;
        let mut filter: HashMap<(EntityId, RelationId), BTreeSet<EntityId>> = HashMap::new();
        let mut expand = |triples: &[Triple]| -> Vec<Query> {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(triples.len() * 2);
            for t in triples {
                if !seen.insert(*t) {
                    continue;
                }
                for q in [
                    Query {
                        entity: t.head,
                        relation: t.rel,
                        answer: t.tail,
                    },
                    Query {
                        entity: t.tail,
                        relation: t.rel + r,
                        answer: t.head,
                    },
                ] {
                    filter
                        .entry((q.entity, q.relation))
                        .or_default()
                        .insert(q.answer);
                    out.push(q);
                }
            }
            out
        };
        let train = expand(train);
        let valid = expand(valid);
        let test = expand(test);
        Self {
            train,
            valid,
            test,
            filter,
        }
    }

    /// Every known answer of `(entity, relation, ?)` across all splits.
    pub fn filter_mask(&self, entity: EntityId, relation: RelationId) -> &BTreeSet<EntityId> {
        self.filter.get(&(entity, relation)).unwrap_or(&EMPTY)
    }

    pub fn split(&self, which: SplitName) -> &[Query] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(CoreError::Config(format!(
                "unknown split `{other}` (train, valid, test)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Drop repeated training facts before building edges.
    pub dedup: bool,
    /// Reject valid/test entities that never occur in a training fact.
    pub transductive: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            dedup: true,
            transductive: true,
        }
    }
}

pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub queries: QuerySplit,
    pub vocab: Vocabulary,
}

struct RawLine {
    line: usize,
    head: String,
    rel: String,
    tail: String,
}

fn read_triples(path: &Path) -> Result<Vec<RawLine>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "expected `head<TAB>relation<TAB>tail`, found {} field(s)",
                    fields.len()
                ),
            });
        }
        out.push(RawLine {
            line: i + 1,
            head: fields[0].to_string(),
            rel: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CoreError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let files: Vec<PathBuf> = ["train.txt", "valid.txt", "test.txt"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let raw: Vec<Vec<RawLine>> = files
        .iter()
        .map(|p| read_triples(p))
        .collect::<Result<_>>()?;

    let mut vocab = Vocabulary::new();
    let mut triples: Vec<Vec<Triple>> = Vec::with_capacity(3);
    for lines in &raw {
        triples.push(
            lines
                .iter()
                .map(|l| {
                    let h = vocab.intern_entity(&l.head);
                    let r = vocab.intern_relation(&l.rel);
                    let t = vocab.intern_entity(&l.tail);
                    Triple::new(h, r, t)
                })
                .collect(),
        );
    }

    if opts.transductive {
        let mut in_train = vec![false; vocab.n_entities()];
        for t in &triples[0] {
            in_train[t.head as usize] = true;
            in_train[t.tail as usize] = true;
        }
        for split in 1..3 {
            for l in &raw[split] {
                for name in [&l.head, &l.tail] {
                    let id = vocab.entity_id(name).expect("interned above");
                    if !in_train[id as usize] {
                        return Err(CoreError::UnknownEntity {
                            path: files[split].clone(),
                            line: l.line,
                            name: name.clone(),
                        });
                    }
                }
            }
        }
    }

    let mut facts = triples[0].clone();
    if opts.dedup {
        let mut seen = HashSet::new();
        facts.retain(|t| seen.insert(*t));
    }
    let n_rel = vocab.n_relations();
    let graph = KnowledgeGraph::augmented(vocab.n_entities(), n_rel, facts)?;
    let queries = QuerySplit::from_triples(n_rel, &triples[0], &triples[1], &triples[2]);
    Ok(Dataset {
        graph,
        queries,
        vocab,
    })
}
