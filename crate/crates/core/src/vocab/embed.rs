//! Distributional ingredient embeddings (skip-gram with negative sampling,
//! recipe-level context) and embedding-proximity merge proposals.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_ingredient, MergeProposal, MergeStatus, RawCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 25,
            negatives: 5,
            learning_rate: 0.025,
            min_count: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngredientEmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl IngredientEmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (token, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding for {token:?} has {} components, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidFeatures(format!("non-finite embedding for {token:?}")));
            }
            if index.insert(token.clone(), tokens.len()).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate token {token:?}")));
            }
            tokens.push(token);
            vectors.push(v);
        }
        Ok(Self { dim, tokens, vectors, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    /// Cosine similarity; `None` if either token is missing or has zero norm.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        cosine_f32(self.get(a)?, self.get(b)?)
    }

    /// One `token<TAB>v1 v2 ...` line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            let values: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{t}\t{}", values.join(" ")).expect("write to vec");
        }
        std::fs::write(path, out).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut entries = Vec::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message,
            };
            let (token, values) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("missing tab".into()))?;
            let v = values
                .split(' ')
                .map(|x| x.parse::<f32>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            dim.get_or_insert(v.len());
            entries.push((token.to_string(), v));
        }
        Self::new(dim.unwrap_or(0), entries)
    }
}

pub(crate) fn cosine_f32(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Skip-gram with negative sampling where every other ingredient of the same
/// recipe is a context word.
pub fn train_embeddings(corpus: &RawCorpus, config: &EmbeddingConfig) -> Result<IngredientEmbeddingTable> {
    if config.dim < 2 {
        return Err(Error::InvalidParameter(format!("embedding dim {} < 2", config.dim)));
    }
    if corpus.recipes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sentences: Vec<Vec<String>> = corpus
        .recipes
        .iter()
        .map(|r| r.ingredients.iter().filter_map(|s| normalize_ingredient(s).ok()).collect())
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &sentences {
        for t in s {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().collect();
    let before = vocab.len();
    vocab.retain(|&(_, c)| c >= config.min_count);
    if before > vocab.len() {
        log::info!(
            "excluded {} tokens seen fewer than {} times",
            before - vocab.len(),
            config.min_count
        );
    }
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, &(t, _))| (t, i)).collect();
    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| index.get(t.as_str()).copied()).collect())
        .collect();

    let n = vocab.len();
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f32> = (0..n * dim)
        .map(|_| (rng.random::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut output = vec![0f32; n * dim];

    // Unigram^0.75 noise distribution.
    let weights: Vec<f64> = vocab.iter().map(|&(_, c)| (c as f64).powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let sample_noise = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        cumulative.partition_point(|&c| c < u).min(n - 1)
    };

    let total_steps = (config.epochs * encoded.len()).max(1) as f64;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0usize;
    let mut grad = vec![0f32; dim];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            let lr = (config.learning_rate * (1.0 - step as f64 / total_steps)).max(config.learning_rate * 1e-4) as f32;
            step += 1;
            let sentence = &encoded[r];
            for (i, &center) in sentence.iter().enumerate() {
                for (j, &context) in sentence.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let targets = std::iter::once((context, 1f32))
                        .chain((0..config.negatives).map(|_| (sample_noise(&mut rng), 0f32)));
                    let targets: Vec<(usize, f32)> = targets.collect();
                    let center_vec = center * dim..(center + 1) * dim;
                    for (target, label) in targets {
                        if label == 0.0 && target == context {
                            continue;
                        }
                        let out_range = target * dim..(target + 1) * dim;
                        let dot: f32 = input[center_vec.clone()]
                            .iter()
                            .zip(&output[out_range.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        let sig = 1.0 / (1.0 + (-dot).exp());
                        let g = (label - sig) * lr;
                        for k in 0..dim {
                            grad[k] += g * output[target * dim + k];
                            output[target * dim + k] += g * input[center * dim + k];
                        }
                    }
                    for k in 0..dim {
                        input[center * dim + k] += grad[k];
                    }
                }
            }
        }
    }

    let entries = vocab
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (t.to_string(), input[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    IngredientEmbeddingTable::new(dim, entries)
}

/// All candidate pairs whose embedding cosine is at least `threshold`.
///
/// `candidates` is ordered by priority (typically descending frequency); in
/// each proposal the lower-priority token is the source and is merged into
/// the higher-priority target. Output is sorted by descending similarity,
/// ties by target then source priority.
pub fn propose_merges(
    table: &IngredientEmbeddingTable,
    candidates: &[String],
    threshold: f64,
) -> Result<Vec<MergeProposal>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} outside (0, 1]")));
    }
    let mut seen = std::collections::HashSet::new();
    let present: Vec<&String> = candidates
        .iter()
        .filter(|c| table.get(c).is_some() && seen.insert(c.as_str()))
        .collect();
    let mut found = Vec::new();
    for (i, target) in present.iter().enumerate() {
        for (j, source) in present.iter().enumerate().skip(i + 1) {
            if let Some(sim) = table.cosine(target, source) {
                if sim >= threshold {
                    found.push((sim, i, j));
                }
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(found
        .into_iter()
        .map(|(similarity, i, j)| MergeProposal {
            source: present[j].clone(),
            target: present[i].clone(),
            similarity,
            status: MergeStatus::Proposed,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::RawRecipe;
    use proptest::prelude::*;

    fn corpus(recipes: &[&[&str]]) -> RawCorpus {
        RawCorpus {
            recipes: recipes
                .iter()
                .enumerate()
                .map(|(i, ings)| RawRecipe {
                    id: format!("r{i}"),
                    ingredients: ings.iter().map(|s| s.to_string()).collect(),
                    n_instructions: 1,
                    image_paths: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn tokens_sharing_contexts_are_closer() {
        let mut recipes: Vec<Vec<&str>> = Vec::new();
        let sweet = ["flour", "sugar", "cream"];
        let savory = ["rice", "lime", "bean"];
        for k in 0..60 {
            let (a, b) = (sweet[k % 3], sweet[(k + 1) % 3]);
            let (c, d) = (savory[k % 3], savory[(k + 1) % 3]);
            recipes.push(vec!["apple", a, b]);
            recipes.push(vec!["pear", a, b]);
            recipes.push(vec!["cumin", c, d]);
        }
        let refs: Vec<&[&str]> = recipes.iter().map(|r| r.as_slice()).collect();
        let table = train_embeddings(&corpus(&refs), &EmbeddingConfig { dim: 16, ..Default::default() }).unwrap();
        let ap = table.cosine("appl", "pear").unwrap();
        let ac = table.cosine("appl", "cumin").unwrap();
        assert!(ap > ac + 0.2, "cos(apple,pear)={ap} cos(apple,cumin)={ac}");
    }

    #[test]
    fn vectors_have_requested_dim() {
        let c = corpus(&[&["a", "b"], &["b", "c"]]);
        let table = train_embeddings(&c, &EmbeddingConfig { dim: 8, ..Default::default() }).unwrap();
        assert_eq!(table.dim(), 8);
        assert!(table.tokens().iter().all(|t| table.get(t).unwrap().len() == 8));
    }

    #[test]
    fn min_count_can_empty_the_vocabulary() {
        let c = corpus(&[&["a", "b"]]);
        let err = train_embeddings(&c, &EmbeddingConfig { min_count: 5, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::EmptyVocabulary));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let c = corpus(&[&["a", "b", "c"], &["b", "d"], &["a", "d"]]);
        let cfg = EmbeddingConfig { dim: 8, seed: 3, ..Default::default() };
        assert_eq!(train_embeddings(&c, &cfg).unwrap(), train_embeddings(&c, &cfg).unwrap());
    }

    fn table(entries: &[(&str, &[f32])]) -> IngredientEmbeddingTable {
        let dim = entries[0].1.len();
        IngredientEmbeddingTable::new(dim, entries.iter().map(|(t, v)| (t.to_string(), v.to_vec())).collect()).unwrap()
    }

    #[test]
    fn identical_vectors_are_proposed_orthogonal_are_not() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[1.0, 0.0]), ("c", &[0.0, 1.0])]);
        let cands: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let p = propose_merges(&t, &cands, 0.8).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].source.as_str(), p[0].target.as_str()), ("b", "a"));
        assert!((p[0].similarity - 1.0).abs() < 1e-12);
    }

    /// Brute-force oracle: every unordered pair, cosine by the textbook
    /// formula, filtered and sorted independently of the implementation.
    fn brute_force(entries: &[(String, Vec<f32>)], threshold: f64) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for i in 0..entries.len() {
            for j in 0..entries.len() {
                if i >= j {
                    continue;
                }
                let (a, b) = (&entries[i].1, &entries[j].1);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let c = dot / (na * nb);
                if c >= threshold {
                    out.push((entries[j].0.clone(), entries[i].0.clone(), c));
                }
            }
        }
        out.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap());
        out
    }

    #[test]
    fn five_token_hand_set_table() {
        let entries: Vec<(String, Vec<f32>)> = vec![
            ("onion".into(), vec![1.0, 0.0, 0.0]),
            ("red onion".into(), vec![0.9, 0.1, 0.0]),
            ("shallot".into(), vec![0.8, 0.3, 0.1]),
            ("sugar".into(), vec![0.0, 0.0, 1.0]),
            ("brown sugar".into(), vec![0.1, 0.0, 0.95]),
        ];
        let t = IngredientEmbeddingTable::new(3, entries.clone()).unwrap();
        let cands: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        let got = propose_merges(&t, &cands, 0.9).unwrap();
        let want = brute_force(&entries, 0.9);
        assert_eq!(got.len(), want.len());
        assert_eq!(got.len(), 4);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((&g.source, &g.target), (&w.0, &w.1));
            assert!((g.similarity - w.2).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_outside_range_is_rejected() {
        let t = table(&[("a", &[1.0, 0.0])]);
        assert!(propose_merges(&t, &[], 0.0).is_err());
        assert!(propose_merges(&t, &[], 1.5).is_err());
    }

    #[test]
    fn table_round_trips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[("olive oil", &[0.25, -1.5e-3]), ("salt", &[3.0, 7.125])]);
        let p = dir.path().join("emb.tsv");
        t.save(&p).unwrap();
        assert_eq!(IngredientEmbeddingTable::load(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 2..50),
            threshold in 0.05f64..1.0,
        ) {
            let entries: Vec<(String, Vec<f32>)> =
                vecs.into_iter().enumerate().map(|(i, v)| (format!("t{i}"), v)).collect();
            let t = IngredientEmbeddingTable::new(4, entries.clone()).unwrap();
            let cands: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
            let got = propose_merges(&t, &cands, threshold).unwrap();
            let want = brute_force(&entries, threshold);
            // Compare as sets: pairs whose similarity differs only in the last
            // ulp may sort differently.
            let mut g: Vec<(String, String)> = got.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
            let mut w: Vec<(String, String)> = want.iter().map(|p| (p.0.clone(), p.1.clone())).collect();
            g.sort();
            w.sort();
            prop_assert_eq!(g, w);
            prop_assert!(got.windows(2).all(|p| p[0].similarity >= p[1].similarity));
            prop_assert!(got.iter().all(|p| p.source != p.target && p.similarity >= threshold));
        }
    }
}
