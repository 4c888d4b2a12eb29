//! Reference homographies and the per-pair plausibility metrics.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::RelevanceMap;
use crate::matching::{Keypoint, MatchSet};

/// S₁ value used when the summed residual is (numerically) zero.
pub const RESIDUAL_CLAMP: f64 = 1e9;
const MIN_RESIDUAL_SUM: f64 = 1e-9;
const MIN_W: f64 = 1e-12;
const MIN_DET: f64 = 1e-12;

pub type Point = (f64, f64);
pub type Correspondence = (Point, Point);

#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    /// Normalized so `matrix[(2, 2)] == 1` whenever that entry is nonzero.
    pub matrix: Matrix3<f64>,
    pub inlier_count: usize,
    pub inlier_threshold: f64,
}

impl Homography {
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        let matrix = normalize_scale(matrix);
        if matrix.determinant().abs() <= MIN_DET || !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::HomographyUnavailable("matrix is singular".into()));
        }
        Ok(Homography {
            matrix,
            inlier_count: 0,
            inlier_threshold: 0.0,
        })
    }

    pub fn identity() -> Self {
        Homography::from_matrix(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::HomographyUnavailable("matrix is singular".into()))?;
        Homography::from_matrix(inv)
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

fn normalize_scale(m: Matrix3<f64>) -> Matrix3<f64> {
    let s = m[(2, 2)];
    if s != 0.0 {
        m / s
    } else {
        m
    }
}

/// Perspective-divided image of `p`. Points mapped to infinity are rejected.
pub fn project(h: &Homography, p: Point) -> Result<Point> {
    project_matrix(&h.matrix, p)
}

fn project_matrix(m: &Matrix3<f64>, p: Point) -> Result<Point> {
    let v = m * Vector3::new(p.0, p.1, 1.0);
    if v[2].abs() < MIN_W {
        return Err(Error::OutOfBounds(format!(
            "point ({}, {}) maps to infinity",
            p.0, p.1
        )));
    }
    Ok((v[0] / v[2], v[1] / v[2]))
}

fn residual(m: &Matrix3<f64>, c: &Correspondence) -> f64 {
    match project_matrix(m, c.0) {
        Ok(q) => ((q.0 - c.1 .0).powi(2) + (q.1 - c.1 .1).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// Translate to the centroid and scale the mean distance to √2.
fn hartley(points: &[Point]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform on ≥ 4 correspondences.
pub fn dlt(correspondences: &[Correspondence]) -> Result<Matrix3<f64>> {
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::HomographyUnavailable(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let src: Vec<Point> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<Point> = correspondences.iter().map(|c| c.1).collect();
    let (ts, td) = (hartley(&src), hartley(&dst));
    // At least 9 rows so the full right singular basis is available.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let ps = ts * Vector3::new(s.0, s.1, 1.0);
        let pd = td * Vector3::new(d.0, d.1, 1.0);
        let (x, y, u, v) = (ps[0], ps[1], pd[0], pd[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::HomographyUnavailable("svd failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::HomographyUnavailable("degenerate normalization".into()))?;
    let m = normalize_scale(td_inv * hn * ts);
    if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() <= MIN_DET {
        return Err(Error::HomographyUnavailable("degenerate solution".into()));
    }
    Ok(m)
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = ((b.0 - a.0).hypot(b.1 - a.1)) * ((c.0 - a.0).hypot(c.1 - a.1));
    cross.abs() <= 1e-9 * scale.max(1e-12)
}

fn degenerate_sample(pts: &[Point]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<Point> = (0..4).filter(|&k| k != skip).map(|k| pts[k]).collect();
        collinear(t[0], t[1], t[2])
    })
}

/// RANSAC over minimal 4-point samples, each solved by normalized DLT, then
/// refit on the consensus set. Deterministic for a given `rng_seed`.
pub fn estimate_homography(
    correspondences: &[Correspondence],
    threshold: f64,
    max_iters: usize,
    rng_seed: u64,
) -> Result<Homography> {
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::HomographyUnavailable(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let inliers_of = |m: &Matrix3<f64>| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut total = 0.0;
        for (k, c) in correspondences.iter().enumerate() {
            let r = residual(m, c);
            if r <= threshold {
                idx.push(k);
                total += r;
            }
        }
        (idx, total)
    };

    let mut best: Option<(Matrix3<f64>, Vec<usize>, f64)> = None;
    let mut attempts = 0usize;
    let max_attempts = max_iters.max(1) * 10;
    let mut iters = 0usize;
    while iters < max_iters.max(1) && attempts < max_attempts {
        attempts += 1;
        let picked: Vec<usize> = sample(&mut rng, n, 4).into_vec();
        let sample_pts: Vec<Correspondence> = picked.iter().map(|&k| correspondences[k]).collect();
        let src: Vec<Point> = sample_pts.iter().map(|c| c.0).collect();
        let dst: Vec<Point> = sample_pts.iter().map(|c| c.1).collect();
        if degenerate_sample(&src) || degenerate_sample(&dst) {
            continue;
        }
        iters += 1;
        let Ok(m) = dlt(&sample_pts) else { continue };
        let (idx, total) = inliers_of(&m);
        let better = match &best {
            None => true,
            Some((_, bi, bt)) => idx.len() > bi.len() || (idx.len() == bi.len() && total < *bt),
        };
        if better {
            let all = idx.len() == n;
            best = Some((m, idx, total));
            if all {
                break;
            }
        }
    }
    let (mut m, mut idx, _) = best.ok_or_else(|| {
        Error::HomographyUnavailable("all samples were degenerate".into())
    })?;
    if idx.len() < 4 {
        return Err(Error::HomographyUnavailable(format!(
            "only {} inliers",
            idx.len()
        )));
    }
    // Refit on the consensus set until it stops growing.
    for _ in 0..3 {
        let subset: Vec<Correspondence> = idx.iter().map(|&k| correspondences[k]).collect();
        let Ok(refit) = dlt(&subset) else { break };
        let (ridx, _) = inliers_of(&refit);
        if ridx.len() < idx.len() {
            break;
        }
        let grew = ridx.len() > idx.len();
        m = refit;
        idx = ridx;
        if !grew {
            break;
        }
    }
    let mut h = Homography::from_matrix(m)?;
    h.inlier_count = idx.len();
    h.inlier_threshold = threshold;
    Ok(h)
}

/// Maps grid cells of a tapped layer to pixel centres of the model input:
/// `pixel = (grid + 0.5) * stride`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridToPixel {
    pub stride_x: f64,
    pub stride_y: f64,
}

impl GridToPixel {
    pub fn uniform(stride: usize) -> Self {
        GridToPixel {
            stride_x: stride as f64,
            stride_y: stride as f64,
        }
    }

    pub fn map(&self, k: Keypoint) -> Point {
        ((k.i as f64 + 0.5) * self.stride_x, (k.j as f64 + 0.5) * self.stride_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualScore {
    /// Inverted residual mean S₁.
    pub value: f64,
    pub residual_sum: f64,
    pub matches_used: usize,
    /// Matches whose projection went to infinity and were left out.
    pub at_infinity: usize,
    pub clamped: bool,
}

/// `S₁ = |M| / Σ ‖H(p₁) − p₂‖` over the unfiltered match set, in pixels.
pub fn inverted_residual_mean(matches: &MatchSet, h: &Homography, grid: &GridToPixel) -> Result<ResidualScore> {
    if matches.is_empty() {
        return Err(Error::MetricUndefined("empty match set".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut at_infinity = 0usize;
    for m in &matches.matches {
        match project(h, grid.map(m.kp_a)) {
            Ok(q) => {
                let p2 = grid.map(m.kp_b);
                sum += ((q.0 - p2.0).powi(2) + (q.1 - p2.1).powi(2)).sqrt();
                used += 1;
            }
            Err(_) => at_infinity += 1,
        }
    }
    if used == 0 {
        return Err(Error::MetricUndefined("every match projects to infinity".into()));
    }
    let clamped = sum < MIN_RESIDUAL_SUM;
    Ok(ResidualScore {
        value: if clamped { RESIDUAL_CLAMP } else { used as f64 / sum },
        residual_sum: sum,
        matches_used: used,
        at_infinity,
        clamped,
    })
}

/// Share of (clamped-nonnegative) channel-summed relevance that sits on
/// matched keypoints, over both images.
pub fn match_coverage(
    matched_a: &[Keypoint],
    matched_b: &[Keypoint],
    rel_a: &RelevanceMap,
    rel_b: &RelevanceMap,
) -> Result<f64> {
    let side = |kps: &[Keypoint], rel: &RelevanceMap| -> Result<(f64, f64)> {
        let (w, h) = rel.grid();
        let sums: Vec<f64> = rel.channel_sum().into_iter().map(|v| v.max(0.0)).collect();
        let mut seen = vec![false; sums.len()];
        let mut matched = 0.0;
        for k in kps {
            if k.i >= w || k.j >= h {
                return Err(Error::Shape(format!(
                    "keypoint ({}, {}) outside {w}x{h} relevance grid",
                    k.i, k.j
                )));
            }
            let idx = k.index(w);
            if !seen[idx] {
                seen[idx] = true;
                matched += sums[idx];
            }
        }
        Ok((matched, sums.iter().sum()))
    };
    let (ma, ta) = side(matched_a, rel_a)?;
    let (mb, tb) = side(matched_b, rel_b)?;
    let total = ta + tb;
    if !(total > 0.0) {
        return Err(Error::MetricUndefined("total relevance is zero".into()));
    }
    Ok(((ma + mb) / total).clamp(0.0, 1.0))
}
