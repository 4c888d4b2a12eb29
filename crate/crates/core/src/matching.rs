//! Spatial keypoint/descriptor decomposition of tapped activations and
//! cross-checked brute-force matching.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::RelevanceMap;
use crate::tensor::Tensor;

/// Grid cell `(i, j)` = (column, row) of a tapped feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Keypoint {
    pub i: usize,
    pub j: usize,
}

impl Keypoint {
    pub fn new(i: usize, j: usize) -> Self {
        Keypoint { i, j }
    }

    /// Row-major position on a grid of the given width.
    pub fn index(&self, width: usize) -> usize {
        self.j * width + self.i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorMetric {
    #[default]
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDescriptorSet {
    pub layer_index: usize,
    pub width: usize,
    pub height: usize,
    /// Full grid in row-major order.
    pub keypoints: Vec<Keypoint>,
    /// Channel vectors, index-aligned with `keypoints`.
    pub descriptors: Vec<Vec<f32>>,
}

impl KeypointDescriptorSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_len(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub kp_a: Keypoint,
    pub kp_b: Keypoint,
    pub descriptor_distance: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub layer_index: usize,
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn keypoints_a(&self) -> Vec<Keypoint> {
        self.matches.iter().map(|m| m.kp_a).collect()
    }

    pub fn keypoints_b(&self) -> Vec<Keypoint> {
        self.matches.iter().map(|m| m.kp_b).collect()
    }
}

/// One descriptor per spatial cell of a `c × h × w` activation.
pub fn decompose(activation: &Tensor, layer_index: usize) -> Result<KeypointDescriptorSet> {
    let (c, h, w) = activation.chw()?;
    let mut keypoints = Vec::with_capacity(h * w);
    let mut descriptors = Vec::with_capacity(h * w);
    for j in 0..h {
        for i in 0..w {
            keypoints.push(Keypoint { i, j });
            descriptors.push((0..c).map(|ch| activation.at3(ch, j, i)).collect());
        }
    }
    Ok(KeypointDescriptorSet {
        layer_index,
        width: w,
        height: h,
        keypoints,
        descriptors,
    })
}

fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Rows of A handled by one parallel task.
const ROW_BLOCK: usize = 64;

/// `(index, squared distance)` of the nearest candidate, per row or column.
type Nearest = Vec<(usize, f64)>;

/// Nearest neighbours in both directions from a single pass over the distance
/// table. Rows are processed in parallel blocks; the per-block column minima
/// are folded in block order, so ties resolve to the first index exactly as a
/// sequential scan would.
fn nearest_both_ways(a: &[Vec<f32>], b: &[Vec<f32>]) -> (Nearest, Vec<usize>) {
    let blocks: Vec<(Nearest, Nearest)> = a
        .par_chunks(ROW_BLOCK)
        .enumerate()
        .map(|(block, rows)| {
            let mut row_best = Vec::with_capacity(rows.len());
            let mut col_best = vec![(usize::MAX, f64::INFINITY); b.len()];
            for (r, da) in rows.iter().enumerate() {
                let x = block * ROW_BLOCK + r;
                let mut best = (0, f64::INFINITY);
                for (y, db) in b.iter().enumerate() {
                    let d = squared_l2(da, db);
                    if d < best.1 {
                        best = (y, d);
                    }
                    if d < col_best[y].1 {
                        col_best[y] = (x, d);
                    }
                }
                row_best.push(best);
            }
            (row_best, col_best)
        })
        .collect();
    let mut a_to_b = Vec::with_capacity(a.len());
    let mut b_to_a = vec![(0usize, f64::INFINITY); b.len()];
    for (rows, cols) in blocks {
        a_to_b.extend(rows);
        for (acc, c) in b_to_a.iter_mut().zip(cols) {
            if c.1 < acc.1 {
                *acc = c;
            }
        }
    }
    (a_to_b, b_to_a.into_iter().map(|c| c.0).collect())
}

/// Cross-checked brute-force matching: `(x, y)` is kept only when `y` is the
/// nearest neighbour of `x` in B and `x` is the nearest neighbour of `y` in A.
/// Output is ordered by the A keypoint's row-major index.
pub fn mutual_match(
    set_a: &KeypointDescriptorSet,
    set_b: &KeypointDescriptorSet,
    metric: DescriptorMetric,
) -> Result<MatchSet> {
    let DescriptorMetric::L2 = metric;
    if set_a.descriptor_len() != set_b.descriptor_len() {
        return Err(Error::Shape(format!(
            "descriptor lengths differ: {} vs {}",
            set_a.descriptor_len(),
            set_b.descriptor_len()
        )));
    }
    if set_a.is_empty() || set_b.is_empty() {
        return Ok(MatchSet {
            layer_index: set_a.layer_index,
            matches: Vec::new(),
        });
    }
    let (a_to_b, b_to_a) = nearest_both_ways(&set_a.descriptors, &set_b.descriptors);
    let matches = a_to_b
        .iter()
        .enumerate()
        .filter(|(x, (y, _))| b_to_a[*y] == *x)
        .map(|(x, &(y, d2))| Match {
            kp_a: set_a.keypoints[x],
            kp_b: set_b.keypoints[y],
            descriptor_distance: d2.sqrt(),
            relevance: 0.0,
        })
        .collect();
    Ok(MatchSet {
        layer_index: set_a.layer_index,
        matches,
    })
}

/// Scores each match by the product of the two endpoints' channel-summed relevance.
pub fn score_matches(matches: &MatchSet, rel_a: &RelevanceMap, rel_b: &RelevanceMap) -> Result<MatchSet> {
    let (wa, ha) = rel_a.grid();
    let (wb, hb) = rel_b.grid();
    let sum_a = rel_a.channel_sum();
    let sum_b = rel_b.channel_sum();
    let mut out = matches.clone();
    for m in &mut out.matches {
        if m.kp_a.i >= wa || m.kp_a.j >= ha || m.kp_b.i >= wb || m.kp_b.j >= hb {
            return Err(Error::Shape(format!(
                "match {:?} -> {:?} outside relevance grids {wa}x{ha} / {wb}x{hb}",
                m.kp_a, m.kp_b
            )));
        }
        m.relevance = sum_a[m.kp_a.index(wa)] * sum_b[m.kp_b.index(wb)];
    }
    Ok(out)
}

/// Ranking order: relevance descending, then distance ascending, then the A
/// keypoint in row-major order.
pub fn rank_order(x: &Match, y: &Match) -> Ordering {
    y.relevance
        .total_cmp(&x.relevance)
        .then(x.descriptor_distance.total_cmp(&y.descriptor_distance))
        .then((x.kp_a.j, x.kp_a.i).cmp(&(y.kp_a.j, y.kp_a.i)))
}

/// Keeps the `n` highest-relevance matches, best first.
pub fn top_n(matches: &MatchSet, n: usize) -> Result<MatchSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut sorted = matches.matches.clone();
    sorted.sort_by(rank_order);
    sorted.truncate(n);
    Ok(MatchSet {
        layer_index: matches.layer_index,
        matches: sorted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn set_1d(values: &[f32]) -> KeypointDescriptorSet {
        KeypointDescriptorSet {
            layer_index: 0,
            width: values.len(),
            height: 1,
            keypoints: (0..values.len()).map(|i| Keypoint::new(i, 0)).collect(),
            descriptors: values.iter().map(|&v| vec![v]).collect(),
        }
    }

    fn random_set(n: usize, c: usize, rng: &mut ChaCha8Rng) -> KeypointDescriptorSet {
        KeypointDescriptorSet {
            layer_index: 0,
            width: n,
            height: 1,
            keypoints: (0..n).map(|i| Keypoint::new(i, 0)).collect(),
            descriptors: (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        }
    }

    fn oracle(a: &KeypointDescriptorSet, b: &KeypointDescriptorSet) -> BTreeSet<(usize, usize)> {
        let dist = |x: &[f32], y: &[f32]| -> f64 {
            x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum()
        };
        let mut out = BTreeSet::new();
        for x in 0..a.len() {
            for y in 0..b.len() {
                let dxy = dist(&a.descriptors[x], &b.descriptors[y]);
                let best_for_x = (0..b.len()).all(|y2| {
                    let d = dist(&a.descriptors[x], &b.descriptors[y2]);
                    d > dxy || (d == dxy && y2 >= y)
                });
                let best_for_y = (0..a.len()).all(|x2| {
                    let d = dist(&a.descriptors[x2], &b.descriptors[y]);
                    d > dxy || (d == dxy && x2 >= x)
                });
                if best_for_x && best_for_y {
                    out.insert((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn decompose_cases() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let s = decompose(&t, 3).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.descriptors[1], vec![1.0, 5.0]);
        assert_eq!(s.keypoints[1], Keypoint::new(1, 0));

        let t = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = decompose(&t, 0).unwrap();
        assert_eq!(s.keypoints, vec![Keypoint::new(0, 0)]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::new(vec![8, 5, 7], (0..280).map(|_| rng.gen()).collect()).unwrap();
        let s = decompose(&t, 0).unwrap();
        let idx = s.keypoints.iter().position(|k| *k == Keypoint::new(2, 3)).unwrap();
        let expected: Vec<f32> = (0..8).map(|c| t.data()[(c * 5 + 3) * 7 + 2]).collect();
        assert_eq!(s.descriptors[idx], expected);
    }

    #[test]
    fn one_dimensional_example() {
        let a = set_1d(&[0.0, 1.0]);
        let b = set_1d(&[0.1, 0.9, 5.0]);
        let m = mutual_match(&a, &b, DescriptorMetric::L2).unwrap();
        let pairs: Vec<_> = m.matches.iter().map(|m| (m.kp_a.i, m.kp_b.i)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn identical_distinct_sets_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(25, 6, &mut rng);
        let m = mutual_match(&a, &a, DescriptorMetric::L2).unwrap();
        assert_eq!(m.len(), 25);
        assert!(m.matches.iter().all(|m| m.kp_a == m.kp_b && m.descriptor_distance == 0.0));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = random_set(30, 4, &mut rng);
            let b = random_set(30, 4, &mut rng);
            let m = mutual_match(&a, &b, DescriptorMetric::L2).unwrap();
            let got: BTreeSet<_> = m.matches.iter().map(|m| (m.kp_a.i, m.kp_b.i)).collect();
            assert_eq!(got, oracle(&a, &b));
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = set_1d(&[0.0]);
        let mut b = set_1d(&[0.0]);
        b.descriptors[0].push(1.0);
        assert!(mutual_match(&a, &b, DescriptorMetric::L2).is_err());
    }

    fn rel(values: Vec<f32>, c: usize, h: usize, w: usize) -> RelevanceMap {
        RelevanceMap {
            layer_index: 0,
            values: Tensor::new(vec![c, h, w], values).unwrap(),
        }
    }

    #[test]
    fn score_is_product_of_channel_sums() {
        // 2 channels, 1x2 grid. A cell (1,0) sums to 2.0; B cell (0,0) sums to 3.0.
        let ra = rel(vec![0.0, 1.5, 0.0, 0.5], 2, 1, 2);
        let rb = rel(vec![1.0, 0.0, 2.0, 0.0], 2, 1, 2);
        let ms = MatchSet {
            layer_index: 0,
            matches: vec![
                Match {
                    kp_a: Keypoint::new(1, 0),
                    kp_b: Keypoint::new(0, 0),
                    descriptor_distance: 0.0,
                    relevance: 0.0,
                },
                Match {
                    kp_a: Keypoint::new(0, 0),
                    kp_b: Keypoint::new(1, 0),
                    descriptor_distance: 0.0,
                    relevance: 0.0,
                },
            ],
        };
        let s = score_matches(&ms, &ra, &rb).unwrap();
        assert_eq!(s.matches[0].relevance, 6.0);
        assert_eq!(s.matches[1].relevance, 0.0);
        let small = rel(vec![1.0], 1, 1, 1);
        assert!(score_matches(&ms, &small, &rb).is_err());
    }

    #[test]
    fn score_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, h, w) = (5, 4, 6);
        let ra = rel((0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), c, h, w);
        let rb = rel((0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), c, h, w);
        let ms = MatchSet {
            layer_index: 0,
            matches: (0..10)
                .map(|_| Match {
                    kp_a: Keypoint::new(rng.gen_range(0..w), rng.gen_range(0..h)),
                    kp_b: Keypoint::new(rng.gen_range(0..w), rng.gen_range(0..h)),
                    descriptor_distance: 0.0,
                    relevance: 0.0,
                })
                .collect(),
        };
        let s = score_matches(&ms, &ra, &rb).unwrap();
        for m in &s.matches {
            let mut sa = 0.0f64;
            let mut sb = 0.0f64;
            for k in 0..c {
                sa += ra.values.at3(k, m.kp_a.j, m.kp_a.i) as f64;
                sb += rb.values.at3(k, m.kp_b.j, m.kp_b.i) as f64;
            }
            assert!((m.relevance - sa * sb).abs() < 1e-6);
        }
    }

    fn scored(rels: &[f64], dists: &[f64]) -> MatchSet {
        MatchSet {
            layer_index: 0,
            matches: rels
                .iter()
                .zip(dists)
                .enumerate()
                .map(|(k, (&r, &d))| Match {
                    kp_a: Keypoint::new(k % 7, k / 7),
                    kp_b: Keypoint::new(k % 7, k / 7),
                    descriptor_distance: d,
                    relevance: r,
                })
                .collect(),
        }
    }

    #[test]
    fn top_n_keeps_best_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rels: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..5.0)).collect();
        let m = scored(&rels, &vec![0.0; 50]);
        let t = top_n(&m, 20).unwrap();
        assert_eq!(t.len(), 20);
        assert!(t.matches.windows(2).all(|w| w[0].relevance >= w[1].relevance));
        let mut sorted = rels.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(t.matches[19].relevance, sorted[19]);
        assert_eq!(top_n(&m, 80).unwrap().len(), 50);
        assert!(top_n(&m, 0).is_err());
    }

    #[test]
    fn top_n_tie_break() {
        // all equal relevance; distances decide, then row-major kp_a
        let m = scored(&[1.0; 9], &[0.5, 0.1, 0.5, 0.1, 0.3, 0.5, 0.5, 0.1, 0.3]);
        let t = top_n(&m, 5).unwrap();
        let order: Vec<usize> = t.matches.iter().map(|m| m.kp_a.j * 7 + m.kp_a.i).collect();
        assert_eq!(order, vec![1, 3, 7, 4, 8]);
    }

    proptest::proptest! {
        #[test]
        fn mutual_match_is_symmetric_and_one_to_one(seed in 0u64..500, n in 1usize..25, m in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values force plenty of ties
            let mk = |n: usize, rng: &mut ChaCha8Rng| KeypointDescriptorSet {
                layer_index: 0, width: n, height: 1,
                keypoints: (0..n).map(|i| Keypoint::new(i, 0)).collect(),
                descriptors: (0..n).map(|_| (0..3).map(|_| rng.gen_range(0..3) as f32).collect()).collect(),
            };
            let a = mk(n, &mut rng);
            let b = mk(m, &mut rng);
            let ab = mutual_match(&a, &b, DescriptorMetric::L2).unwrap();
            let ba = mutual_match(&b, &a, DescriptorMetric::L2).unwrap();
            let x: BTreeSet<_> = ab.matches.iter().map(|m| (m.kp_a, m.kp_b)).collect();
            let y: BTreeSet<_> = ba.matches.iter().map(|m| (m.kp_b, m.kp_a)).collect();
            proptest::prop_assert_eq!(&x, &y);
            let ua: BTreeSet<_> = ab.matches.iter().map(|m| m.kp_a).collect();
            let ub: BTreeSet<_> = ab.matches.iter().map(|m| m.kp_b).collect();
            proptest::prop_assert_eq!(ua.len(), ab.len());
            proptest::prop_assert_eq!(ub.len(), ab.len());
            let xi: BTreeSet<(usize, usize)> = x.iter().map(|(p, q)| (p.i, q.i)).collect();
            proptest::prop_assert_eq!(xi, oracle(&a, &b));
        }

        #[test]
        fn scaling_relevance_keeps_top_n_selection(seed in 0u64..200, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rels: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
            let dists: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
            let base = top_n(&scored(&rels, &dists), 10).unwrap();
            let scaled: Vec<f64> = rels.iter().map(|r| r * alpha).collect();
            let other = top_n(&scored(&scaled, &dists), 10).unwrap();
            proptest::prop_assert_eq!(base.keypoints_a(), other.keypoints_a());
        }
    }
}
