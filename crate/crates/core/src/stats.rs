//! Rank correlation and binned separability statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of equal-width cosine-similarity bins.
pub const BINS: usize = 10;
/// Minimum points per class for a bin to count.
pub const MIN_BIN_POINTS: usize = 3;
/// Resolution of the shared density grid inside a bin.
pub const KDE_GRID: usize = 256;
/// Lower bound on the Bhattacharyya coefficient so the distance stays finite
/// for fully disjoint densities.
pub const MIN_COEFFICIENT: f64 = 1e-12;

/// Percentile `q` ∈ [0, 100] with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = mean;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::MetricUndefined(format!("{} observations", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::MetricUndefined("zero rank variance".into()))
}

/// Gaussian KDE with Scott's bandwidth (`σ̂ · n^(-1/5)`, σ̂ with ddof = 1),
/// evaluated on `KDE_GRID` points spanning `[lo, hi]` and renormalized to sum
/// to one. A zero sample deviation falls back to one grid step.
pub fn kde_on_grid(samples: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument("kde needs at least two samples".into()));
    }
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty kde range [{lo}, {hi}]")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let step = (hi - lo) / (KDE_GRID - 1) as f64;
    let mut bw = var.sqrt() * (n as f64).powf(-0.2);
    if !(bw > 0.0) {
        bw = step;
    }
    let mut grid: Vec<f64> = (0..KDE_GRID)
        .map(|g| {
            let x = lo + g as f64 * step;
            samples
                .iter()
                .map(|s| (-0.5 * ((x - s) / bw).powi(2)).exp())
                .sum()
        })
        .collect();
    let total: f64 = grid.iter().sum();
    if !(total > 0.0) {
        return Err(Error::MetricUndefined("kde vanished on its grid".into()));
    }
    for v in &mut grid {
        *v /= total;
    }
    Ok(grid)
}

/// `−ln Σ √(pᵢ nᵢ)` for two discrete distributions on a common support.
pub fn bhattacharyya(p: &[f64], n: &[f64]) -> Result<f64> {
    if p.len() != n.len() || p.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distribution lengths {} and {}",
            p.len(),
            n.len()
        )));
    }
    let bc: f64 = p.iter().zip(n).map(|(a, b)| (a * b).max(0.0).sqrt()).sum();
    Ok((-bc.max(MIN_COEFFICIENT).ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinnedDistance {
    pub value: f64,
    pub bins_used: usize,
    pub points_counted: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Separability of correct vs incorrect pairs by a score, controlling for
/// cosine similarity. Each input is a list of `(cosine, score)`.
///
/// The window is the overlap of the middle 95% of each class's cosine
/// similarities, split into `BINS` equal bins (membership strictly inside the
/// bin edges). Bins with fewer than `MIN_BIN_POINTS` of either class are
/// skipped. In each remaining bin the two score densities are compared with
/// the Bhattacharyya distance, negated when the correct-class mean score is
/// lower, and the result is the point-count-weighted mean over bins.
pub fn binned_bhattacharyya(correct: &[(f64, f64)], incorrect: &[(f64, f64)]) -> Result<BinnedDistance> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::MetricUndefined("both classes need at least one pair".into()));
    }
    if correct.iter().chain(incorrect).any(|(c, s)| !c.is_finite() || !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let cos = |v: &[(f64, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
    let (cc, ic) = (cos(correct), cos(incorrect));
    let left = percentile(&cc, 2.5)?.max(percentile(&ic, 2.5)?);
    let right = percentile(&cc, 97.5)?.min(percentile(&ic, 97.5)?);
    if !(right > left) {
        return Err(Error::MetricUndefined(format!(
            "cosine windows do not overlap ([{left}, {right}])"
        )));
    }
    let bin_size = (right - left) / BINS as f64;

    let mut weighted_sum = 0.0;
    let mut points = 0usize;
    let mut bins_used = 0usize;
    for i in 0..BINS {
        let start = left + i as f64 * bin_size;
        let end = start + bin_size;
        let select = |v: &[(f64, f64)]| {
            v.iter()
                .filter(|p| start < p.0 && p.0 < end)
                .map(|p| p.1)
                .collect::<Vec<_>>()
        };
        let (cs, is) = (select(correct), select(incorrect));
        if cs.len() < MIN_BIN_POINTS || is.len() < MIN_BIN_POINTS {
            continue;
        }
        let hi = cs.iter().chain(&is).copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = cs.iter().chain(&is).copied().fold(f64::INFINITY, f64::min);
        let mut bd = if hi > lo {
            bhattacharyya(&kde_on_grid(&cs, lo, hi)?, &kde_on_grid(&is, lo, hi)?)?
        } else {
            // every score in the bin is identical: the densities coincide
            0.0
        };
        if mean(&cs) < mean(&is) {
            bd = -bd;
        }
        let count = cs.len() + is.len();
        weighted_sum += bd * count as f64;
        points += count;
        bins_used += 1;
    }
    if points == 0 {
        return Err(Error::MetricUndefined("every bin was skipped".into()));
    }
    Ok(BinnedDistance {
        value: weighted_sum / points as f64,
        bins_used,
        points_counted: points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr_free::normal;

    /// Box–Muller, to keep the test free of extra distribution crates.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            mean + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
        assert!((percentile(&v, 50.0).unwrap() - 2.5).abs() < 1e-12);
        assert!((percentile(&v, 2.5).unwrap() - 1.075).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&xs, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-9);
        assert!((spearman_rho(&xs, &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&xs, &[5.0, 3.0, 0.0, -9.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            spearman_rho(&xs, &[1.0; 4]),
            Err(Error::MetricUndefined(_))
        ));
        assert!(spearman_rho(&[1.0], &[2.0]).is_err());
        assert!(spearman_rho(&xs, &[1.0]).is_err());
    }

    #[test]
    fn bhattacharyya_hand_example() {
        let d = bhattacharyya(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let expected = -((0.45f64).sqrt() + (0.05f64).sqrt()).ln();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 0.1116).abs() < 1e-4);
        assert_eq!(bhattacharyya(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(bhattacharyya(&[1.0, 0.0], &[0.0, 1.0]).unwrap() > 20.0);
    }

    #[test]
    fn kde_is_normalized_and_peaks_at_the_data() {
        let k = kde_on_grid(&[0.0, 0.1, -0.1, 0.05], -1.0, 1.0).unwrap();
        assert_eq!(k.len(), KDE_GRID);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let argmax = k.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let x = -1.0 + 2.0 * argmax as f64 / (KDE_GRID - 1) as f64;
        assert!(x.abs() < 0.05, "{x}");
        // constant samples use the grid-step fallback
        let c = kde_on_grid(&[0.5, 0.5, 0.5], 0.0, 1.0).unwrap();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let c: f64 = rng.gen_range(0.0..1.0);
                (c, normal(rng, c + shift, 1.0))
            })
            .collect()
    }

    #[test]
    fn identical_classes_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 400, 0.0);
        let d = binned_bhattacharyya(&a, &a).unwrap();
        assert!(d.value.abs() < 1e-6, "{d:?}");
        assert_eq!(d.bins_used, BINS);
    }

    #[test]
    fn separated_classes_are_positive_and_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let good = cloud(&mut rng, 600, 2.0);
        let bad = cloud(&mut rng, 600, 0.0);
        let d = binned_bhattacharyya(&good, &bad).unwrap();
        assert!(d.value >= 0.4, "{d:?}");
        let swapped = binned_bhattacharyya(&bad, &good).unwrap();
        assert_eq!(swapped.value, -d.value);
    }

    #[test]
    fn undefined_cases() {
        let a = vec![(0.1, 1.0), (0.2, 1.0), (0.3, 1.0)];
        let b = vec![(0.7, 1.0), (0.8, 1.0), (0.9, 1.0)];
        assert!(matches!(binned_bhattacharyya(&a, &b), Err(Error::MetricUndefined(_))));
        assert!(matches!(binned_bhattacharyya(&a, &[]), Err(Error::MetricUndefined(_))));
        // overlapping window but too few points per bin
        let c = vec![(0.1, 1.0), (0.5, 2.0), (0.9, 3.0)];
        assert!(matches!(binned_bhattacharyya(&c, &c), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn constant_scores_in_a_bin_count_as_zero() {
        let a: Vec<(f64, f64)> = (0..200).map(|k| (k as f64 / 200.0, 1.0)).collect();
        let d = binned_bhattacharyya(&a, &a).unwrap();
        assert_eq!(d.value, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn spearman_is_invariant_under_monotone_maps(seed in 0u64..300, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            if let Ok(r) = spearman_rho(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y * y * y + 2.0 * y).collect();
                let r2 = spearman_rho(&tx, &ty).unwrap();
                proptest::prop_assert!((r - r2).abs() < 1e-12);
                proptest::prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn delta_ignores_a_common_cosine_shift(seed in 0u64..50, shift in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let good = cloud(&mut rng, 300, 1.0);
            let bad = cloud(&mut rng, 300, 0.0);
            let moved = |v: &[(f64, f64)]| v.iter().map(|&(c, s)| (c + shift, s)).collect::<Vec<_>>();
            let a = binned_bhattacharyya(&good, &bad).unwrap();
            let b = binned_bhattacharyya(&moved(&good), &moved(&bad)).unwrap();
            proptest::prop_assert!((a.value - b.value).abs() < 1e-9);
            proptest::prop_assert_eq!(a.bins_used, b.bins_used);
        }
    }
}
