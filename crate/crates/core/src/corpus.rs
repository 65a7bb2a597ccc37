//! Documents, queries and relevance labels.
//!
//! Covers loading and saving the on-disk formats (TSV/JSONL corpora, TSV
//! queries, TREC-style qrels), the tokenizer every other module relies on,
//! and a seeded generator for synthetic corpora with planted distractor
//! groups. In a synthetic instance each query is the union of disjoint
//! aspect-token sets; its positive carries every aspect while each
//! distractor group carries exactly one, so a model that only learns one
//! aspect ranks that group's distractors below the positive and the other
//! group's above it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group tag carried by synthetic positives.
pub const TAG_POSITIVE: &str = "positive";
/// Group tag carried by synthetic filler documents.
pub const TAG_FILLER: &str = "filler";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            group_tag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Lowercase and split on whitespace and punctuation.
///
/// Any character that is not alphanumeric acts as a separator, so
/// `"Hello, World"` becomes `["hello", "world"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// On-disk corpus format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl CorpusFormat {
    /// Guess from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(CorpusFormat::Tsv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// An ordered document collection with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.text.trim().is_empty() {
                return Err(Error::InvalidInput(format!(
                    "document `{}` has empty text",
                    d.id
                )));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }
}

/// Query set with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    queries: Vec<Query>,
    by_id: HashMap<String, usize>,
}

impl QuerySet {
    pub fn from_queries(queries: Vec<Query>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.text.trim().is_empty() {
                return Err(Error::InvalidInput(format!(
                    "query `{}` has empty text",
                    q.id
                )));
            }
            if by_id.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        Ok(Self { queries, by_id })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn get(&self, id: &str) -> Option<&Query> {
        self.by_id.get(id).map(|&i| &self.queries[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }
}

/// Query id to the set of relevant document ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels(pub BTreeMap<String, BTreeSet<String>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>) {
        self.0
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into());
    }

    pub fn positives(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query_id)
    }

    pub fn is_positive(&self, query_id: &str, doc_id: &str) -> bool {
        self.0.get(query_id).is_some_and(|s| s.contains(doc_id))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.0.iter()
    }

    /// Check that every referenced id exists and positive sets are non-empty.
    pub fn validate(&self, corpus: &Corpus, queries: &QuerySet) -> Result<()> {
        for (qid, docs) in &self.0 {
            if queries.get(qid).is_none() {
                return Err(Error::UnknownId(qid.clone()));
            }
            if docs.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "query `{qid}` has no positives"
                )));
            }
            if let Some(missing) = docs.iter().find(|d| !corpus.contains(d)) {
                return Err(Error::UnknownId(missing.clone()));
            }
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parse `id<TAB>text` lines. Line numbers in errors are 1-based.
fn parse_id_text_tsv(path: &Path, content: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let Some((id, text)) = line.split_once('\t') else {
            return Err(parse_err(path, lineno, "expected `id<TAB>text`"));
        };
        if id.is_empty() {
            return Err(parse_err(path, lineno, "empty id"));
        }
        if text.trim().is_empty() {
            return Err(parse_err(path, lineno, format!("empty text for `{id}`")));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Load a corpus, preserving file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let content = read_to_string(path)?;
    let docs = match format {
        CorpusFormat::Tsv => parse_id_text_tsv(path, &content)?
            .into_iter()
            .map(|(id, text)| Document::new(id, text))
            .collect::<Vec<_>>(),
        CorpusFormat::Jsonl => {
            let mut docs = Vec::new();
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let doc: Document = serde_json::from_str(line)
                    .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
                if doc.text.trim().is_empty() {
                    return Err(parse_err(
                        path,
                        i + 1,
                        format!("empty text for `{}`", doc.id),
                    ));
                }
                docs.push(doc);
            }
            docs
        }
    };
    check_unique(docs.iter().map(|d| d.id.as_str()))?;
    Corpus::from_documents(docs)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn check_tsv_field(kind: &str, id: &str, field: &str) -> Result<()> {
    if field.contains('\n') || field.contains('\r') {
        return Err(Error::InvalidInput(format!(
            "{kind} `{id}` contains a newline"
        )));
    }
    Ok(())
}

/// Write a corpus. TSV drops group tags; JSONL keeps them.
pub fn save_corpus(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<()> {
    let mut out = String::new();
    for d in corpus.iter() {
        match format {
            CorpusFormat::Tsv => {
                check_tsv_field("document", &d.id, &d.text)?;
                if d.id.contains('\t') {
                    return Err(Error::InvalidInput(format!(
                        "document id `{}` has a tab",
                        d.id
                    )));
                }
                out.push_str(&d.id);
                out.push('\t');
                out.push_str(&d.text);
            }
            CorpusFormat::Jsonl => {
                out.push_str(&serde_json::to_string(d).expect("document serializes"));
            }
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Load queries from `id<TAB>text` lines.
pub fn load_queries(path: &Path) -> Result<QuerySet> {
    let content = read_to_string(path)?;
    let queries: Vec<Query> = parse_id_text_tsv(path, &content)?
        .into_iter()
        .map(|(id, text)| Query { id, text })
        .collect();
    check_unique(queries.iter().map(|q| q.id.as_str()))?;
    QuerySet::from_queries(queries)
}

pub fn save_queries(queries: &QuerySet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for q in queries.iter() {
        check_tsv_field("query", &q.id, &q.text)?;
        out.push_str(&q.id);
        out.push('\t');
        out.push_str(&q.text);
        out.push('\n');
    }
    write_file(path, &out)
}

/// Load TREC-style qrels: `query_id 0 doc_id relevance`, tab or space
/// separated. Rows with relevance below 1 are not positives and are dropped.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let content = read_to_string(path)?;
    let mut qrels = Qrels::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                i + 1,
                "expected `query_id 0 doc_id relevance`",
            ));
        }
        let rel: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad relevance `{}`", fields[3])))?;
        if rel >= 1 {
            qrels.insert(fields[0], fields[2]);
        }
    }
    Ok(qrels)
}

pub fn save_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, docs) in qrels.iter() {
        for d in docs {
            out.push_str(&format!("{qid}\t0\t{d}\t1\n"));
        }
    }
    write_file(path, &out)
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_queries: usize,
    /// Number of distractor groups (aspects) per query.
    pub groups_per_query: usize,
    pub docs_per_group: usize,
    pub n_filler_docs: usize,
    pub vocab_size: usize,
    /// Total query length; split into `groups_per_query` near-equal aspect sets.
    pub aspect_tokens_per_query: usize,
    /// Per-token probability of replacement by a uniformly random vocabulary token.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_queries: 50,
            groups_per_query: 2,
            docs_per_group: 5,
            n_filler_docs: 500,
            vocab_size: 4000,
            aspect_tokens_per_query: 6,
            noise_rate: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_queries", self.n_queries),
            ("groups_per_query", self.groups_per_query),
            ("docs_per_group", self.docs_per_group),
            ("n_filler_docs", self.n_filler_docs),
            ("vocab_size", self.vocab_size),
            ("aspect_tokens_per_query", self.aspect_tokens_per_query),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        if self.aspect_tokens_per_query < self.groups_per_query {
            return Err(Error::Config(format!(
                "aspect_tokens_per_query ({}) must be at least groups_per_query ({})",
                self.aspect_tokens_per_query, self.groups_per_query
            )));
        }
        let reserved = self.n_queries * self.aspect_tokens_per_query;
        if self.vocab_size <= reserved {
            return Err(Error::Config(format!(
                "vocab_size {} too small: {} aspect tokens plus at least one noise token required",
                self.vocab_size, reserved
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
}

/// Build the group tag for distractor group `group` of `query_id`.
pub fn group_tag(query_id: &str, group: usize) -> String {
    format!("{query_id}#g{group}")
}

/// Split a distractor group tag into `(query_id, group_label)`.
pub fn parse_group_tag(tag: &str) -> Option<(&str, &str)> {
    tag.rsplit_once('#')
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Generate a synthetic corpus with planted distractor groups.
///
/// Every document has length `2 * aspect_tokens_per_query`: its aspect
/// tokens padded with noise tokens drawn from the non-aspect vocabulary.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    vocab.shuffle(&mut rng);
    let a = spec.aspect_tokens_per_query;
    let g = spec.groups_per_query;
    let noise_vocab = &vocab[spec.n_queries * a..];
    let doc_len = 2 * a;

    let qw = width(spec.n_queries);
    let dw = width(spec.docs_per_group);
    let fw = width(spec.n_filler_docs);

    let noise_token =
        |rng: &mut ChaCha8Rng| noise_vocab[rng.gen_range(0..noise_vocab.len())].clone();
    let render = |rng: &mut ChaCha8Rng, mut tokens: Vec<String>| -> String {
        while tokens.len() < doc_len {
            tokens.push(noise_token(rng));
        }
        if spec.noise_rate > 0.0 {
            for t in tokens.iter_mut() {
                if rng.gen_bool(spec.noise_rate) {
                    *t = vocab[rng.gen_range(0..vocab.len())].clone();
                }
            }
        }
        tokens.shuffle(rng);
        tokens.join(" ")
    };

    let mut docs = Vec::new();
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Qrels::new();

    for qi in 0..spec.n_queries {
        let qid = format!("q{qi:0qw$}");
        let own = &vocab[qi * a..(qi + 1) * a];
        // Near-equal split: the first `a % g` aspects get one extra token.
        let mut aspects: Vec<&[String]> = Vec::with_capacity(g);
        let mut start = 0;
        for gi in 0..g {
            let len = a / g + usize::from(gi < a % g);
            aspects.push(&own[start..start + len]);
            start += len;
        }

        let mut qtokens = own.to_vec();
        qtokens.shuffle(&mut rng);
        queries.push(Query::new(&qid, qtokens.join(" ")));

        let pos_id = format!("{qid}-pos");
        let text = render(&mut rng, own.to_vec());
        docs.push(Document {
            id: pos_id.clone(),
            text,
            group_tag: Some(TAG_POSITIVE.to_string()),
        });
        qrels.insert(&qid, pos_id);

        for (gi, aspect) in aspects.iter().enumerate() {
            for j in 0..spec.docs_per_group {
                let text = render(&mut rng, aspect.to_vec());
                docs.push(Document {
                    id: format!("{qid}-g{gi}-{j:0dw$}"),
                    text,
                    group_tag: Some(group_tag(&qid, gi)),
                });
            }
        }
    }

    for k in 0..spec.n_filler_docs {
        let text = render(&mut rng, Vec::new());
        docs.push(Document {
            id: format!("f{k:0fw$}"),
            text,
            group_tag: Some(TAG_FILLER.to_string()),
        });
    }

    Ok(SyntheticData {
        corpus: Corpus::from_documents(docs)?,
        queries: QuerySet::from_queries(queries)?,
        qrels,
    })
}
