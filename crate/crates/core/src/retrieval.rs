//! Cross-modal retrieval evaluation: median rank and recall@K over sampled
//! candidate pools.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
/// Full-scale median ranks for random embeddings on 1K pools. Informational.
pub const REFERENCE_RANDOM_MEDR_1K: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image queries against recipe candidates.
    Im2Recipe,
    /// Recipe queries against image candidates.
    Recipe2Im,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Im2Recipe, Direction::Recipe2Im];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Im2Recipe => "im2recipe",
            Direction::Recipe2Im => "recipe2im",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "im2recipe" => Ok(Direction::Im2Recipe),
            "recipe2im" => Ok(Direction::Recipe2Im),
            other => Err(Error::InvalidParameter(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    pub direction: Direction,
    pub n_repeats: usize,
    pub med_r: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

fn normalized(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1 + the number of other candidates at least as similar to the query as
/// the true target (ties count against the target).
pub fn rank_true_target(query: &[f32], candidates: &[Vec<f32>], true_index: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InsufficientData("no candidates".into()));
    }
    if true_index >= candidates.len() {
        return Err(Error::InvalidParameter(format!(
            "true index {true_index} outside {} candidates",
            candidates.len()
        )));
    }
    let q = normalized(query)?;
    let sims = candidates
        .iter()
        .map(|c| Ok(dot(&q, &normalized(c)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(rank_from_sims(&sims, true_index))
}

fn rank_from_sims(sims: &[f64], t: usize) -> usize {
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != t && s >= sims[t])
        .count()
}

/// Median, averaging the two middle values for even counts.
pub fn median_rank(ranks: &[usize]) -> f64 {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    }
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Ranks of every query's aligned candidate (query i's truth is candidate
/// i) within one pool.
fn pool_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<usize> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let sims: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
            rank_from_sims(&sims, i)
        })
        .collect()
}

/// Samples `n_repeats` pools of `pool_size` aligned (recipe, image) pairs,
/// ranks every pool member's counterpart and summarizes all ranks.
pub fn evaluate_retrieval(
    recipes: &[Vec<f32>],
    images: &[Vec<f32>],
    pool_size: usize,
    n_repeats: usize,
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<RetrievalReport> {
    if recipes.len() != images.len() {
        return Err(Error::Shape(format!("{} recipe vs {} image embeddings", recipes.len(), images.len())));
    }
    if pool_size == 0 || n_repeats == 0 {
        return Err(Error::InvalidParameter("pool size and repeats must be positive".into()));
    }
    if pool_size > recipes.len() {
        return Err(Error::InsufficientData(format!(
            "pool of {pool_size} exceeds {} available items",
            recipes.len()
        )));
    }
    let p = recipes.iter().map(|v| normalized(v)).collect::<Result<Vec<_>>>()?;
    let q = images.iter().map(|v| normalized(v)).collect::<Result<Vec<_>>>()?;
    let (queries, candidates) = match direction {
        Direction::Im2Recipe => (&q, &p),
        Direction::Recipe2Im => (&p, &q),
    };
    let seeds: Vec<u64> = (0..n_repeats).map(|_| rng.random()).collect();
    let per_repeat: Vec<Vec<usize>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let pool = index::sample(&mut r, recipes.len(), pool_size).into_vec();
            let qs: Vec<Vec<f64>> = pool.iter().map(|&i| queries[i].clone()).collect();
            let cs: Vec<Vec<f64>> = pool.iter().map(|&i| candidates[i].clone()).collect();
            pool_ranks(&qs, &cs)
        })
        .collect();
    let ranks: Vec<usize> = per_repeat.concat();
    Ok(RetrievalReport {
        pool_size,
        direction,
        n_repeats,
        med_r: median_rank(&ranks),
        recall_at: RECALL_KS.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect(),
    })
}

/// Plain-text table of retrieval reports.
pub fn format_reports(rows: &[(String, RetrievalReport)]) -> String {
    let mut out = format!(
        "{:<16} {:>10} {:>6} {:>8} {:>7} {:>7} {:>7}\n",
        "method", "direction", "pool", "MedR", "R@1", "R@5", "R@10"
    );
    for (name, r) in rows {
        let recall = |k| r.recall_at.get(&k).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{:<16} {:>10} {:>6} {:>8.1} {:>7.3} {:>7.3} {:>7.3}\n",
            name,
            r.direction.to_string(),
            r.pool_size,
            r.med_r,
            recall(1),
            recall(5),
            recall(10)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub partition: Partition,
    pub recipe: Vec<f32>,
    pub image: Vec<f32>,
}

/// Per-recipe FoodSpace embeddings, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecipeEmbeddings {
    pub records: Vec<EmbeddingRecord>,
}

impl RecipeEmbeddings {
    pub fn partition(&self, p: Partition) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        self.records
            .iter()
            .filter(|r| r.partition == p)
            .map(|r| (r.recipe.clone(), r.image.clone()))
            .unzip()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io(path))?);
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(Error::io(path))?;
        }
        f.flush().map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_vecs(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            .collect()
    }

    fn one_hot(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identical_target_ranks_first() {
        let cands = vec![one_hot(0, 3), one_hot(1, 3), one_hot(2, 3)];
        assert_eq!(rank_true_target(&one_hot(1, 3), &cands, 1).unwrap(), 1);
    }

    #[test]
    fn orthogonal_target_behind_exact_match() {
        let cands = vec![one_hot(1, 3), one_hot(0, 3)];
        assert_eq!(rank_true_target(&one_hot(0, 3), &cands, 0).unwrap(), 2);
    }

    #[test]
    fn ties_count_against_the_target() {
        let cands = vec![one_hot(1, 2), one_hot(1, 2), one_hot(1, 2)];
        assert_eq!(rank_true_target(&one_hot(1, 2), &cands, 0).unwrap(), 3);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q = random_vecs(&mut rng, 1, 6).remove(0);
            let cands = random_vecs(&mut rng, 10, 6);
            let t = rng.random_range(0..10);
            let c64 = |a: &[f32], b: &[f32]| crate::assoc::cosine(a, b).unwrap();
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| c64(&q, &cands[b]).total_cmp(&c64(&q, &cands[a])));
            let want = order.iter().position(|&i| i == t).unwrap() + 1;
            assert_eq!(rank_true_target(&q, &cands, t).unwrap(), want);
        }
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        assert!(matches!(
            rank_true_target(&[0.0, 0.0], &[vec![1.0, 0.0]], 0),
            Err(Error::DegenerateEmbedding)
        ));
        assert!(rank_true_target(&[1.0], &[], 0).is_err());
        let v = vec![vec![1.0f32, 0.0]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            evaluate_retrieval(&v, &v, 4, 1, Direction::Im2Recipe, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn perfect_embeddings() {
        let p: Vec<Vec<f32>> = (0..20).map(|i| one_hot(i, 20)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dir in Direction::ALL {
            let r = evaluate_retrieval(&p, &p, 10, 3, dir, &mut rng).unwrap();
            assert_eq!(r.med_r, 1.0);
            assert_eq!(r.recall_at[&1], 1.0);
        }
    }

    #[test]
    fn hand_set_pool_of_five() {
        // Images are rotated copies of recipes so each rank is known.
        let p: Vec<Vec<f32>> = (0..5).map(|i| one_hot(i, 5)).collect();
        let q: Vec<Vec<f32>> = vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.5, 0.4, 0.45, 0.3, 0.0],
            vec![0.3, 0.2, 0.1, 0.05, 0.01],
        ];
        // Ranks: 1, 2, 1, 4, 5 -> median 2.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = evaluate_retrieval(&p, &q, 5, 1, Direction::Im2Recipe, &mut rng).unwrap();
        assert_eq!(r.med_r, 2.0);
        assert_eq!(r.recall_at[&1], 0.4);
        assert_eq!(r.recall_at[&5], 1.0);
    }

    #[test]
    fn random_pool_of_900_has_median_near_450() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_vecs(&mut rng, 900, 32);
        let q = random_vecs(&mut rng, 900, 32);
        let r = evaluate_retrieval(&p, &q, 900, 1, Direction::Im2Recipe, &mut rng).unwrap();
        assert!((r.med_r - 450.0).abs() <= 45.0, "MedR {}", r.med_r);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median_rank(&[3, 1, 2]), 2.0);
        assert_eq!(median_rank(&[4, 1, 2, 3]), 2.5);
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = RecipeEmbeddings {
            records: vec![EmbeddingRecord {
                id: "a".into(),
                partition: Partition::Test,
                recipe: vec![0.1, -0.25],
                image: vec![1.0, 3.5e-8],
            }],
        };
        let path = dir.path().join("e.jsonl");
        e.save(&path).unwrap();
        assert_eq!(RecipeEmbeddings::load(&path).unwrap(), e);
    }

    proptest! {
        #[test]
        fn rank_is_scale_invariant(seed in 0u64..1000, s in 0.01f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_vecs(&mut rng, 1, 4).remove(0);
            let c = random_vecs(&mut rng, 6, 4);
            let scale = |v: &Vec<f32>| v.iter().map(|x| x * s).collect::<Vec<f32>>();
            let cs: Vec<Vec<f32>> = c.iter().map(scale).collect();
            prop_assert_eq!(rank_true_target(&q, &c, 2).unwrap(), rank_true_target(&scale(&q), &cs, 2).unwrap());
        }

        #[test]
        fn recall_monotone_and_full_at_pool(seed in 0u64..200, pool in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_vecs(&mut rng, 12, 3);
            let q = random_vecs(&mut rng, 12, 3);
            let r = evaluate_retrieval(&p, &q, pool, 2, Direction::Recipe2Im, &mut rng).unwrap();
            let vals: Vec<f64> = r.recall_at.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.med_r >= 1.0 && r.med_r <= pool as f64);
            let ranks: Vec<usize> = (0..pool).map(|i| {
                rank_true_target(&q[i], &p[..pool], i).unwrap()
            }).collect();
            prop_assert_eq!(recall_at_k(&ranks, pool), 1.0);
        }

        #[test]
        fn identity_mapping_has_median_one(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_vecs(&mut rng, 15, 8);
            let r = evaluate_retrieval(&p, &p, 15, 1, Direction::Im2Recipe, &mut rng).unwrap();
            prop_assert_eq!(r.med_r, 1.0);
        }

        #[test]
        fn small_pools_match_enumeration(seed in 0u64..100, pool in 1usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_vecs(&mut rng, 10, 4);
            let q = random_vecs(&mut rng, 10, 4);
            let mut rng_a = ChaCha8Rng::seed_from_u64(seed + 1);
            let r = evaluate_retrieval(&p, &q, pool, 1, Direction::Im2Recipe, &mut rng_a).unwrap();
            // Replay the pool draw and rank by brute-force sorting.
            let mut rng_b = ChaCha8Rng::seed_from_u64(seed + 1);
            let repeat_seed: u64 = rng_b.random();
            let idx = index::sample(&mut ChaCha8Rng::seed_from_u64(repeat_seed), 10, pool).into_vec();
            let ranks: Vec<usize> = idx.iter().map(|&i| {
                let sims: Vec<f64> = idx.iter().map(|&j| crate::assoc::cosine(&q[i], &p[j]).unwrap()).collect();
                let own = crate::assoc::cosine(&q[i], &p[i]).unwrap();
                let mut sorted = sims.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                // Pessimistic: last position among ties.
                sorted.iter().rposition(|&s| s >= own - 1e-12).unwrap() + 1
            }).collect();
            prop_assert_eq!(r.med_r, median_rank(&ranks));
        }
    }
}
