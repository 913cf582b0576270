//! Snapshot-ensemble aggregation: weighted mean, order-statistic intervals and
//! coverage calibration of the interval half-widths.

use crate::error::{Error, Result};

/// Parameter states captured along one optimization trajectory.
#[derive(Debug, Clone)]
pub struct SnapshotEnsemble<S> {
    snapshots: Vec<S>,
    weights: Vec<f64>,
}

impl<S> SnapshotEnsemble<S> {
    /// Equal-weight ensemble.
    pub fn uniform(snapshots: Vec<S>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::DegenerateInput("ensemble needs at least one snapshot".into()));
        }
        let w = 1.0 / snapshots.len() as f64;
        let weights = vec![w; snapshots.len()];
        Ok(Self { snapshots, weights })
    }

    pub fn with_weights(snapshots: Vec<S>, weights: Vec<f64>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::DegenerateInput("ensemble needs at least one snapshot".into()));
        }
        if weights.len() != snapshots.len() {
            return Err(Error::Config(format!(
                "{} weights for {} snapshots",
                weights.len(),
                snapshots.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("ensemble weights must be non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {sum}, not 1")));
        }
        Ok(Self { snapshots, weights })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[S] {
        &self.snapshots
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_parts(self) -> (Vec<S>, Vec<f64>) {
        (self.snapshots, self.weights)
    }
}

/// Weighted mean of one point's snapshot predictions.
pub fn ensemble_mean(predictions: &[f64], weights: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("no predictions".into()));
    }
    if predictions.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} predictions but {} weights",
            predictions.len(),
            weights.len()
        )));
    }
    Ok(predictions.iter().zip(weights).map(|(p, w)| p * w).sum())
}

/// Rank window and calibration factor for order-statistic intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalCalibration {
    pub lambda: f64,
    /// 1-based rank of the lower order statistic.
    pub lower_rank: usize,
    /// 1-based rank of the upper order statistic.
    pub upper_rank: usize,
    pub target_coverage: f64,
}

impl Default for IntervalCalibration {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lower_rank: 5,
            upper_rank: 195,
            target_coverage: 0.95,
        }
    }
}

impl IntervalCalibration {
    /// Ranks at the 2.5% / 97.5% positions of a `k`-member ensemble
    /// (5 and 195 for 200 snapshots).
    pub fn for_ensemble_size(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("interval needs at least 2 snapshots, got {k}")));
        }
        let lower = ((0.025 * k as f64).round() as usize).max(1);
        let upper = (k - lower).max(lower + 1).min(k);
        let c = Self {
            lower_rank: lower,
            upper_rank: upper,
            ..Self::default()
        };
        c.validate(k)?;
        Ok(c)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.lower_rank < 1 || self.lower_rank >= self.upper_rank || self.upper_rank > k {
            return Err(Error::Config(format!(
                "rank window {}..{} invalid for {k} snapshots",
                self.lower_rank, self.upper_rank
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `(d_L, d_U)` = distances from the mean down to the lower order statistic and
/// up to the upper one, clamped at zero. `predictions` is reordered in place.
pub fn raw_interval_in_place(predictions: &mut [f64], mean: f64, lower_rank: usize, upper_rank: usize) -> Result<(f64, f64)> {
    let k = predictions.len();
    if upper_rank > k || lower_rank < 1 || lower_rank >= upper_rank {
        return Err(Error::Config(format!(
            "rank window {lower_rank}..{upper_rank} needs at least {upper_rank} predictions, got {k}"
        )));
    }
    let (_, &mut upper, _) = predictions.select_nth_unstable_by(upper_rank - 1, f64::total_cmp);
    // Everything before index upper_rank-1 is now <= upper; the lower statistic is among them.
    let (_, &mut lower, _) = predictions[..upper_rank - 1].select_nth_unstable_by(lower_rank - 1, f64::total_cmp);
    Ok(((mean - lower).max(0.0), (upper - mean).max(0.0)))
}

pub fn raw_interval(predictions: &[f64], mean: f64, calib: &IntervalCalibration) -> Result<(f64, f64)> {
    let mut buf = predictions.to_vec();
    raw_interval_in_place(&mut buf, mean, calib.lower_rank, calib.upper_rank)
}

/// One calibration point: ensemble mean, raw half-widths and the observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalPoint {
    pub mean: f64,
    pub d_lower: f64,
    pub d_upper: f64,
    pub obs: f64,
}

impl IntervalPoint {
    pub fn covered(&self, lambda: f64) -> bool {
        self.obs >= self.mean - lambda * self.d_lower && self.obs <= self.mean + lambda * self.d_upper
    }

    /// Smallest scale factor at which this point is covered.
    pub fn critical_ratio(&self) -> f64 {
        let r = self.obs - self.mean;
        let d = if r > 0.0 { self.d_upper } else { self.d_lower };
        if r == 0.0 {
            0.0
        } else if d > 0.0 {
            r.abs() / d
        } else {
            f64::INFINITY
        }
    }
}

pub const MIN_CALIBRATION_POINTS: usize = 100;

/// Fraction of points inside `[mean − λ·d_L, mean + λ·d_U]`.
pub fn coverage(points: &[IntervalPoint], lambda: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().filter(|p| p.covered(lambda)).count() as f64 / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOutcome {
    pub lambda: f64,
    pub raw_coverage: f64,
    pub calibrated_coverage: f64,
    pub n_points: usize,
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// Smallest λ > 0 whose scaled intervals cover at least `target` of the points.
///
/// Each point's critical ratio is the scale at which its observation enters the
/// interval; λ is the ⌈target·N⌉-th smallest ratio.
pub fn calibrate_lambda(points: &[IntervalPoint], target: f64) -> Result<CalibrationOutcome> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("target coverage must be in (0, 1], got {target}")));
    }
    let n = points.len();
    if n < MIN_CALIBRATION_POINTS {
        return Err(Error::DegenerateInput(format!(
            "calibration needs at least {MIN_CALIBRATION_POINTS} points, got {n}"
        )));
    }
    if points
        .iter()
        .any(|p| !(p.mean.is_finite() && p.obs.is_finite() && p.d_lower >= 0.0 && p.d_upper >= 0.0))
    {
        return Err(Error::Data("calibration points must be finite with non-negative half-widths".into()));
    }
    let needed = ((target * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut ratios: Vec<f64> = points.iter().map(IntervalPoint::critical_ratio).collect();
    let (_, &mut crit, _) = ratios.select_nth_unstable_by(needed - 1, f64::total_cmp);
    if crit.is_infinite() {
        let finite = points.iter().filter(|p| p.critical_ratio().is_finite()).count();
        return Err(Error::Calibration {
            target,
            achievable: finite as f64 / n as f64,
        });
    }
    let mut lambda = if crit > 0.0 { crit } else { f64::MIN_POSITIVE };
    // Guard against the ratio landing one ulp short of the interval edge.
    let count = |l: f64| points.iter().filter(|p| p.covered(l)).count();
    while count(lambda) < needed {
        lambda = next_up(lambda);
    }
    Ok(CalibrationOutcome {
        lambda,
        raw_coverage: coverage(points, 1.0),
        calibrated_coverage: count(lambda) as f64 / n as f64,
        n_points: n,
    })
}

/// Push a calibrated surface interval through a surface→air transform.
/// The result is ordered even where the transform is decreasing.
pub fn propagate_interval(transform: impl Fn(f64) -> f64, mean: f64, d_lower: f64, d_upper: f64, lambda: f64) -> (f64, f64) {
    let low = transform(mean - lambda * d_lower);
    let upp = transform(mean + lambda * d_upper);
    if low <= upp {
        (low, upp)
    } else {
        (upp, low)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted_oracle(preds: &[f64], mean: f64, lo: usize, hi: usize) -> (f64, f64) {
        let mut s = preds.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ((mean - s[lo - 1]).max(0.0), (s[hi - 1] - mean).max(0.0))
    }

    #[test]
    fn constant_and_arithmetic_means() {
        let w = vec![1.0 / 200.0; 200];
        assert!((ensemble_mean(&vec![5.0; 200], &w).unwrap() - 5.0).abs() < 1e-12);
        let seq: Vec<f64> = (1..=200).map(|v| v as f64).collect();
        assert!((ensemble_mean(&seq, &w).unwrap() - 100.5).abs() < 1e-9);
        assert!(ensemble_mean(&seq, &w[..10]).is_err());
    }

    #[test]
    fn sequence_interval() {
        let seq: Vec<f64> = (1..=200).rev().map(|v| v as f64).collect();
        let (dl, du) = raw_interval(&seq, 100.5, &IntervalCalibration::default()).unwrap();
        assert_eq!((dl, du), (95.5, 94.5));
    }

    #[test]
    fn identical_predictions_have_zero_spread() {
        let (dl, du) = raw_interval(&[3.25; 200], 3.25, &IntervalCalibration::default()).unwrap();
        assert_eq!((dl, du), (0.0, 0.0));
    }

    #[test]
    fn too_few_predictions_is_config_error() {
        assert!(matches!(
            raw_interval(&[1.0; 100], 1.0, &IntervalCalibration::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_ranks_for_200() {
        let c = IntervalCalibration::for_ensemble_size(200).unwrap();
        assert_eq!((c.lower_rank, c.upper_rank), (5, 195));
        assert!(IntervalCalibration::for_ensemble_size(1).is_err());
        let small = IntervalCalibration::for_ensemble_size(2).unwrap();
        assert_eq!((small.lower_rank, small.upper_rank), (1, 2));
    }

    #[test]
    fn random_intervals_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.random_range(195..260);
            let preds: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mean = preds.iter().sum::<f64>() / k as f64;
            let got = raw_interval(&preds, mean, &IntervalCalibration::default()).unwrap();
            assert_eq!(got, sorted_oracle(&preds, mean, 5, 195));
        }
    }

    fn symmetric_points(n: usize, seed: u64) -> Vec<IntervalPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| IntervalPoint {
                mean: 0.0,
                d_lower: 1.0,
                d_upper: 1.0,
                obs: rng.random_range(-2.0..2.0),
            })
            .collect()
    }

    #[test]
    fn covered_points_need_lambda_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..500)
            .map(|_| {
                let (dl, du) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
                IntervalPoint {
                    mean: 10.0,
                    d_lower: dl,
                    d_upper: du,
                    obs: 10.0 + rng.random_range(-dl..du),
                }
            })
            .collect();
        let out = calibrate_lambda(&pts, 0.95).unwrap();
        assert!(out.lambda <= 1.0);
        assert_eq!(out.raw_coverage, 1.0);
    }

    #[test]
    fn calibrated_coverage_is_tight_and_minimal() {
        let pts = symmetric_points(1000, 5);
        let out = calibrate_lambda(&pts, 0.95).unwrap();
        let n = pts.len() as f64;
        let cov = coverage(&pts, out.lambda);
        assert!(cov >= 0.95 && cov <= 0.95 + 1.0 / n, "{cov}");
        assert!(coverage(&pts, out.lambda * (1.0 - 1e-6)) < 0.95);
    }

    #[test]
    fn infinite_ratios_make_target_unreachable() {
        let mut pts = symmetric_points(200, 9);
        for p in pts.iter_mut().take(20) {
            p.d_lower = 0.0;
            p.d_upper = 0.0;
            p.obs = 1.0;
        }
        match calibrate_lambda(&pts, 0.95) {
            Err(Error::Calibration { achievable, .. }) => assert!((achievable - 0.9).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(calibrate_lambda(&pts[..50], 0.95), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn propagation_through_identity_and_decreasing_maps() {
        assert_eq!(propagate_interval(|t| t, 10.0, 2.0, 3.0, 1.0), (8.0, 13.0));
        assert_eq!(propagate_interval(|t| -t, 10.0, 2.0, 3.0, 1.0), (-13.0, -8.0));
        let (lo, hi) = propagate_interval(|t| 0.7 * t + 2.0, 10.0, 0.0, 0.0, 1.7);
        assert_eq!(lo, hi);
        assert_eq!(lo, 0.7 * 10.0 + 2.0);
    }

    #[test]
    fn interval_width_grows_with_lambda() {
        let f = |t: f64| 0.7 * t + 0.01 * t * t;
        let mut last = -1.0;
        for i in 1..20 {
            let (lo, hi) = propagate_interval(f, 12.0, 1.5, 2.5, i as f64 * 0.1);
            assert!(hi - lo > last);
            last = hi - lo;
        }
    }

    proptest! {
        #[test]
        fn mean_is_affine(vals in prop::collection::vec(-50.0f64..50.0, 1..64), a in -3.0f64..3.0, b in -10.0f64..10.0) {
            let w = vec![1.0 / vals.len() as f64; vals.len()];
            let m = ensemble_mean(&vals, &w).unwrap();
            let t: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
            prop_assert!((ensemble_mean(&t, &w).unwrap() - (a * m + b)).abs() < 1e-6);
        }
    }
}
