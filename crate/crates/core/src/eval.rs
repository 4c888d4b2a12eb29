//! Dataset manifests, pair selection and dataset-level aggregation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{binned_bhattacharyya, spearman_rho};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Gallery,
    Train,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub identity: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parses JSON-lines text; blank lines are ignored.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::InvalidArgument(format!("manifest line {}: {e}", lineno + 1))
            })?;
            if !seen.insert(entry.image_path.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "manifest line {}: duplicate image {:?}",
                    lineno + 1,
                    entry.image_path
                )));
            }
            entries.push(entry);
        }
        Ok(Manifest {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.split == split)
    }
}

/// An image reduced to what pair selection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedImage {
    pub id: String,
    pub identity: String,
    /// Unit-normalized embedding.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub k_init: usize,
    pub k_cap: usize,
    /// Pairs wanted per class.
    pub target: usize,
    /// When either class falls short, sample both classes down to the
    /// smaller class's size instead of keeping every available pair.
    pub balanced: bool,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            k_init: 5,
            k_cap: 20,
            target: 1000,
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub query_id: String,
    pub gallery_id: String,
    pub cosine_similarity: f64,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSelection {
    pub pairs: Vec<CandidatePair>,
    pub k_used: usize,
    pub correct_available: usize,
    pub incorrect_available: usize,
    /// True when either class fell short of the target.
    pub short: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the candidate pool from each query's top-k gallery neighbours
/// (by cosine), growing k from `k_init` by one until both classes reach
/// `target` or k hits `k_cap`, then samples `target` pairs of each class with
/// a seeded generator. A gallery image with the same id as the query is never
/// paired with it, and when the same images appear on both sides only one
/// orientation of each pair is kept. If either class falls short of `target`,
/// every available pair of that class is used and, with `balanced`, the other
/// class is sampled down to the same size (unless that class is empty). Output is sorted by
/// (query_id, gallery_id).
pub fn select_pairs(
    queries: &[EmbeddedImage],
    gallery: &[EmbeddedImage],
    params: SelectionParams,
    rng_seed: u64,
) -> Result<PairSelection> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    if params.k_init == 0 || params.k_cap < params.k_init {
        return Err(Error::InvalidArgument(format!(
            "k_init {} / k_cap {} are inconsistent",
            params.k_init, params.k_cap
        )));
    }
    // Every query's gallery ranking, computed once.
    let rankings: Vec<Vec<(usize, f64)>> = queries
        .iter()
        .map(|q| {
            let mut r: Vec<(usize, f64)> = gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| g.id != q.id)
                .map(|(gi, g)| (gi, dot(&q.embedding, &g.embedding).clamp(-1.0, 1.0)))
                .collect();
            r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            r
        })
        .collect();

    let pool_at = |k: usize| -> (Vec<CandidatePair>, Vec<CandidatePair>) {
        let mut correct = Vec::new();
        let mut incorrect = Vec::new();
        let mut seen = BTreeSet::new();
        for (q, ranking) in queries.iter().zip(&rankings) {
            for &(gi, cos) in ranking.iter().take(k) {
                let g = &gallery[gi];
                let key = if q.id <= g.id {
                    (q.id.as_str(), g.id.as_str())
                } else {
                    (g.id.as_str(), q.id.as_str())
                };
                if !seen.insert(key) {
                    continue;
                }
                let pair = CandidatePair {
                    query_id: q.id.clone(),
                    gallery_id: g.id.clone(),
                    cosine_similarity: cos,
                    is_correct: q.identity == g.identity,
                };
                if pair.is_correct {
                    correct.push(pair);
                } else {
                    incorrect.push(pair);
                }
            }
        }
        (correct, incorrect)
    };

    let mut k = params.k_init;
    let (mut correct, mut incorrect) = pool_at(k);
    while (correct.len() < params.target || incorrect.len() < params.target) && k < params.k_cap {
        k += 1;
        (correct, incorrect) = pool_at(k);
    }
    let short = correct.len() < params.target || incorrect.len() < params.target;
    if short {
        log::warn!(
            "pair pool at k = {k} has {} correct and {} incorrect pairs (wanted {} each); using what is available",
            correct.len(),
            incorrect.len(),
            params.target
        );
    }
    let (correct_available, incorrect_available) = (correct.len(), incorrect.len());
    // Balancing against an empty class would discard everything; a
    // single-class pool is kept whole and its Δ reported as undefined.
    let per_class = if short && params.balanced && correct_available.min(incorrect_available) > 0 {
        correct_available.min(incorrect_available)
    } else {
        params.target
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |pool: Vec<CandidatePair>| -> Vec<CandidatePair> {
        if pool.len() <= per_class {
            return pool;
        }
        let mut idx = sample(&mut rng, pool.len(), per_class).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    let mut pairs = draw(correct);
    pairs.extend(draw(incorrect));
    pairs.sort_by(|a, b| {
        a.query_id
            .cmp(&b.query_id)
            .then_with(|| a.gallery_id.cmp(&b.gallery_id))
    });
    Ok(PairSelection {
        pairs,
        k_used: k,
        correct_available,
        incorrect_available,
        short,
    })
}

/// Per-pair evaluation outcome. Undefined metrics are `None`, with the reason
/// in `diagnostics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    pub gallery_id: String,
    pub cosine_similarity: f64,
    pub is_correct: bool,
    pub layer_index: usize,
    pub inverted_residual_mean: Option<f64>,
    pub match_coverage: Option<f64>,
    pub num_matches: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub bins_used: usize,
    /// Pairs whose metric was undefined and therefore excluded.
    pub missing: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    pub rho_res: Option<f64>,
    pub delta_res: Option<f64>,
    pub rho_mc: Option<f64>,
    pub delta_mc: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub layer_index: usize,
    pub residual: MetricAggregate,
    pub coverage: MetricAggregate,
}

/// ρ and Δ for one metric, excluding pairs where it is missing.
pub fn aggregate_metric(records: &[PairRecord], metric: impl Fn(&PairRecord) -> Option<f64>) -> MetricAggregate {
    let present: Vec<(&PairRecord, f64)> = records
        .iter()
        .filter_map(|r| metric(r).map(|m| (r, m)))
        .collect();
    let missing = records.len() - present.len();
    let mut diagnostics = Vec::new();
    let cos: Vec<f64> = present.iter().map(|(r, _)| r.cosine_similarity).collect();
    let vals: Vec<f64> = present.iter().map(|(_, m)| *m).collect();
    let rho = match spearman_rho(&vals, &cos) {
        Ok(v) => Some(v),
        Err(e) => {
            diagnostics.push(format!("rho: {e}"));
            None
        }
    };
    let split = |correct: bool| -> Vec<(f64, f64)> {
        present
            .iter()
            .filter(|(r, _)| r.is_correct == correct)
            .map(|(r, m)| (r.cosine_similarity, *m))
            .collect()
    };
    let (delta, bins_used) = match binned_bhattacharyya(&split(true), &split(false)) {
        Ok(d) => (Some(d.value), d.bins_used),
        Err(e) => {
            diagnostics.push(format!("delta: {e}"));
            (None, 0)
        }
    };
    MetricAggregate {
        rho,
        delta,
        bins_used,
        missing,
        diagnostics,
    }
}

pub fn aggregate(records: &[PairRecord], layer_index: usize) -> DatasetAggregate {
    let residual = aggregate_metric(records, |r| r.inverted_residual_mean);
    let coverage = aggregate_metric(records, |r| r.match_coverage);
    DatasetAggregate {
        rho_res: residual.rho,
        delta_res: residual.delta,
        rho_mc: coverage.rho,
        delta_mc: coverage.delta,
        n_correct: records.iter().filter(|r| r.is_correct).count(),
        n_incorrect: records.iter().filter(|r| !r.is_correct).count(),
        layer_index,
        residual,
        coverage,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub rho_res: Option<f64>,
    pub pairs_used: usize,
    pub selected: bool,
}

/// Index into `scores` of the best ρ_res; ties go to the shallower layer.
pub fn pick_layer(scores: &[LayerScore]) -> Result<usize> {
    let mut best: Option<(usize, f64, usize)> = None;
    for (k, s) in scores.iter().enumerate() {
        let Some(rho) = s.rho_res else { continue };
        let better = match best {
            None => true,
            Some((_, br, bl)) => rho > br || (rho == br && s.layer_index < bl),
        };
        if better {
            best = Some((k, rho, s.layer_index));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::MetricUndefined("rho_res is undefined at every tap".into()))
}
