//! Canonical ingredient vocabulary.
//!
//! Pipeline: normalize raw strings, rank raw strings by frequency and keep
//! the `top_k` most frequent, merge everything sharing a stem, then apply the
//! accepted merge decisions from a reviewed decision file.

mod embed;
mod normalize;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embed::{propose_merges, train_embeddings, EmbeddingConfig, IngredientEmbeddingTable};
pub use normalize::{normalize_ingredient, STEMMER_ID};

/// Reference scale of the canonical vocabulary: 1989 entries covering more
/// than 95% of recipes. Informational only.
pub const REFERENCE_VOCAB_SIZE: usize = 1989;
pub const REFERENCE_COVERAGE: f64 = 0.95;

/// Marker written to map files for raw strings without a canonical id.
pub const SENTINEL_UNKNOWN: i64 = -1;

/// Settings for building a vocabulary and proposing merges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub top_k: usize,
    /// Minimum embedding cosine for a merge proposal.
    pub threshold: f64,
    pub embedding: EmbeddingConfig,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            top_k: 4000,
            threshold: 0.8,
            embedding: EmbeddingConfig::default(),
        }
    }
}

/// Normalized tokens with their corpus counts, most frequent first, ties by
/// token. Unusable strings are skipped.
pub fn token_frequencies(corpus: &RawCorpus) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for raw in corpus.recipes.iter().flat_map(|r| &r.ingredients) {
        if let Ok(tok) = normalize_ingredient(raw) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecipe {
    pub id: String,
    pub ingredients: Vec<String>,
    pub n_instructions: usize,
    pub image_paths: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawCorpus {
    pub recipes: Vec<RawRecipe>,
}

impl RawCorpus {
    pub fn new(recipes: Vec<RawRecipe>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &recipes {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate recipe id {:?}", r.id)));
            }
        }
        Ok(Self { recipes })
    }

    /// One JSON object per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        let mut recipes = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RawRecipe = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            recipes.push(r);
        }
        Self::new(recipes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.recipes {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(Error::io(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStatus {
    Proposed,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub source: String,
    pub target: String,
    pub similarity: f64,
    pub status: MergeStatus,
}

impl MergeProposal {
    pub fn accepted(source: &str, target: &str) -> Self {
        Self {
            source: source.to_string(),
            target: target.to_string(),
            similarity: 1.0,
            status: MergeStatus::Accepted,
        }
    }
}

/// Reads `source<TAB>target<TAB>accept|reject|proposed[<TAB>similarity]`.
pub fn read_decisions(path: &Path) -> Result<Vec<MergeProposal>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_decisions(&text, &path.display().to_string())
}

pub fn parse_decisions(text: &str, origin: &str) -> Result<Vec<MergeProposal>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let status = match fields[2].trim() {
            "accept" => MergeStatus::Accepted,
            "reject" => MergeStatus::Rejected,
            "proposed" => MergeStatus::Proposed,
            other => return Err(err(format!("unknown decision {other:?}"))),
        };
        let similarity = match fields.get(3) {
            Some(s) => s.trim().parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            None => f64::NAN,
        };
        if fields[0] == fields[1] {
            return Err(err(format!("self-merge of {:?}", fields[0])));
        }
        out.push(MergeProposal {
            source: fields[0].to_string(),
            target: fields[1].to_string(),
            similarity,
            status,
        });
    }
    Ok(out)
}

pub fn write_decisions(path: &Path, proposals: &[MergeProposal]) -> Result<()> {
    let mut out = Vec::new();
    for p in proposals {
        let status = match p.status {
            MergeStatus::Accepted => "accept",
            MergeStatus::Rejected => "reject",
            MergeStatus::Proposed => "proposed",
        };
        if p.similarity.is_nan() {
            writeln!(out, "{}\t{}\t{status}", p.source, p.target).expect("write to vec");
        } else {
            writeln!(out, "{}\t{}\t{status}\t{:.6}", p.source, p.target, p.similarity).expect("write to vec");
        }
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalVocabulary {
    entries: Vec<String>,
    raw_to_canonical: BTreeMap<String, Option<usize>>,
    token_to_id: HashMap<String, usize>,
    coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedRecipe {
    pub ids: Vec<usize>,
    pub dropped: usize,
}

impl CanonicalVocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Exact raw-string lookup; `None` for unknown or unmapped strings.
    pub fn lookup_raw(&self, raw: &str) -> Option<usize> {
        self.raw_to_canonical.get(raw).copied().flatten()
    }

    pub fn raw_map(&self) -> &BTreeMap<String, Option<usize>> {
        &self.raw_to_canonical
    }

    /// Resolves one ingredient string: exact raw match first, then by
    /// normalized token.
    pub fn resolve(&self, raw: &str) -> Option<usize> {
        if let Some(id) = self.lookup_raw(raw) {
            return Some(id);
        }
        normalize_ingredient(raw).ok().and_then(|t| self.id_of(&t))
    }

    /// Writes `entries.txt` (line number = id), `raw_map.tsv` and `stats.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut entries = String::new();
        for e in &self.entries {
            entries.push_str(e);
            entries.push('\n');
        }
        let p = dir.join("entries.txt");
        std::fs::write(&p, entries).map_err(Error::io(&p))?;
        let mut map = String::new();
        for (raw, id) in &self.raw_to_canonical {
            let id = id.map(|i| i as i64).unwrap_or(SENTINEL_UNKNOWN);
            map.push_str(&format!("{}\t{id}\n", escape(raw)));
        }
        let p = dir.join("raw_map.tsv");
        std::fs::write(&p, map).map_err(Error::io(&p))?;
        let stats = serde_json::json!({
            "entries": self.entries.len(),
            "raw_strings": self.raw_to_canonical.len(),
            "coverage": self.coverage,
            "stemmer": STEMMER_ID,
        });
        let p = dir.join("stats.json");
        std::fs::write(&p, serde_json::to_string_pretty(&stats)? + "\n").map_err(Error::io(&p))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("entries.txt");
        let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
        let entries: Vec<String> = text.lines().map(str::to_string).collect();
        let p = dir.join("raw_map.tsv");
        let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
        let mut raw_to_canonical = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: p.display().to_string(),
                line: n + 1,
                message,
            };
            let (raw, id) = line.rsplit_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let id: i64 = id.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            let id = if id == SENTINEL_UNKNOWN {
                None
            } else if id >= 0 && (id as usize) < entries.len() {
                Some(id as usize)
            } else {
                return Err(err(format!("id {id} out of range")));
            };
            raw_to_canonical.insert(unescape(raw), id);
        }
        let p = dir.join("stats.json");
        let stats: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(Error::io(&p))?)?;
        let coverage = stats["coverage"].as_f64().unwrap_or(0.0);
        Ok(Self::assemble(entries, raw_to_canonical, coverage))
    }

    fn assemble(entries: Vec<String>, raw_to_canonical: BTreeMap<String, Option<usize>>, coverage: f64) -> Self {
        let mut token_to_id: HashMap<String, usize> =
            entries.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        for (raw, id) in &raw_to_canonical {
            if let (Some(id), Ok(tok)) = (id, normalize_ingredient(raw)) {
                token_to_id.entry(tok).or_insert(*id);
            }
        }
        Self {
            entries,
            raw_to_canonical,
            token_to_id,
            coverage,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Builds the canonical vocabulary.
///
/// Raw strings are ranked by occurrence count (ties by string) and the
/// `top_k` most frequent are kept; their stems form the candidate set.
/// Accepted decisions then merge a source token into a target token,
/// following chains (`a -> b -> c`). Any raw string in the corpus whose stem
/// resolves to a surviving candidate maps to it, so unranked spellings of a
/// kept ingredient are covered too.
///
/// Coverage is recipe-level: the fraction of recipes with at least one
/// ingredient whose every ingredient maps to a canonical id.
pub fn build_vocabulary(corpus: &RawCorpus, top_k: usize, decisions: &[MergeProposal]) -> Result<CanonicalVocabulary> {
    let mut raw_counts: HashMap<&str, usize> = HashMap::new();
    for r in &corpus.recipes {
        for raw in &r.ingredients {
            *raw_counts.entry(raw.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = raw_counts.iter().map(|(k, v)| (*k, *v)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let stems: HashMap<&str, Option<String>> = raw_counts
        .keys()
        .map(|raw| (*raw, normalize_ingredient(raw).ok()))
        .collect();
    let mut token_counts: HashMap<&str, usize> = HashMap::new();
    for (raw, count) in &raw_counts {
        if let Some(Some(tok)) = stems.get(raw) {
            *token_counts.entry(tok.as_str()).or_default() += count;
        }
    }

    let mut kept: HashSet<&str> = HashSet::new();
    for (raw, _) in ranked.iter().take(top_k) {
        if let Some(Some(tok)) = stems.get(raw) {
            kept.insert(tok.as_str());
        }
    }

    // Accepted merges as a source -> target map over normalized tokens.
    let mut redirect: HashMap<String, String> = HashMap::new();
    for d in decisions.iter().filter(|d| d.status == MergeStatus::Accepted) {
        let source = normalize_ingredient(&d.source).map_err(|_| Error::InvalidDecision(d.source.clone()))?;
        let target = normalize_ingredient(&d.target).map_err(|_| Error::InvalidDecision(d.target.clone()))?;
        for (name, tok) in [(&d.source, &source), (&d.target, &target)] {
            if !token_counts.contains_key(tok.as_str()) {
                return Err(Error::InvalidDecision(name.clone()));
            }
        }
        if source == target {
            continue;
        }
        if let Some(prev) = redirect.get(&source) {
            if *prev != target {
                return Err(Error::InvalidDecision(d.source.clone()));
            }
        }
        redirect.insert(source, target);
    }
    let resolve = |tok: &str| -> Result<String> {
        let mut current = tok.to_string();
        let mut hops = 0;
        while let Some(next) = redirect.get(&current) {
            current = next.clone();
            hops += 1;
            if hops > redirect.len() {
                return Err(Error::InvalidDecision(tok.to_string()));
            }
        }
        Ok(current)
    };

    let mut canonical_counts: HashMap<String, usize> = HashMap::new();
    for tok in &kept {
        let root = resolve(tok)?;
        if kept.contains(root.as_str()) {
            *canonical_counts.entry(root).or_default() += token_counts[tok];
        }
    }
    let mut entries: Vec<(String, usize)> = canonical_counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let entries: Vec<String> = entries.into_iter().map(|(t, _)| t).collect();
    let ids: HashMap<&str, usize> = entries.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let mut raw_to_canonical = BTreeMap::new();
    for (raw, stem) in &stems {
        let id = match stem {
            Some(tok) => ids.get(resolve(tok)?.as_str()).copied(),
            None => None,
        };
        raw_to_canonical.insert(raw.to_string(), id);
    }

    let mut eligible = 0usize;
    let mut covered = 0usize;
    for r in &corpus.recipes {
        if r.ingredients.is_empty() {
            continue;
        }
        eligible += 1;
        if r.ingredients.iter().all(|raw| raw_to_canonical[raw.as_str()].is_some()) {
            covered += 1;
        }
    }
    let coverage = if eligible == 0 { 0.0 } else { covered as f64 / eligible as f64 };
    Ok(CanonicalVocabulary::assemble(entries, raw_to_canonical, coverage))
}

/// Maps a recipe's ingredient strings to canonical ids in order, dropping
/// unknown ones. Duplicates are preserved.
pub fn encode_recipe(ingredients: &[String], vocab: &CanonicalVocabulary) -> Result<EncodedRecipe> {
    let mut out = EncodedRecipe::default();
    for raw in ingredients {
        match vocab.resolve(raw) {
            Some(id) => out.ids.push(id),
            None => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::debug!("dropped {} unknown ingredients", out.dropped);
    }
    if out.ids.is_empty() {
        return Err(Error::EmptyEncoding);
    }
    Ok(out)
}
