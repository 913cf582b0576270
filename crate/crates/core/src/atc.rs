//! Annual temperature cycle: `T0 + A·sin(2πt/N + φ)` per pixel.

use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::grid::GridStack;
use crate::par;

/// Per-pixel annual-cycle parameters plus the coarse-field amplifier coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct AtcParamField {
    pub height: usize,
    pub width: usize,
    /// Annual mean temperature (°C).
    pub t0: Vec<f32>,
    /// Amplitude (°C).
    pub amplitude: Vec<f32>,
    /// Phase shift (radians).
    pub phase: Vec<f32>,
    /// Amplifier coefficient applied to the coarse field.
    pub rho: Vec<f32>,
    pub n_doy: usize,
}

/// Days in `year` (365 or 366).
pub fn days_in_year(year: i32) -> usize {
    if chrono::NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

impl AtcParamField {
    pub fn new(
        height: usize,
        width: usize,
        t0: Vec<f32>,
        amplitude: Vec<f32>,
        phase: Vec<f32>,
        rho: Vec<f32>,
        n_doy: usize,
    ) -> Result<Self> {
        if n_doy != 365 && n_doy != 366 {
            return Err(Error::Config(format!("n_doy must be 365 or 366, got {n_doy}")));
        }
        let n = height * width;
        if n == 0 {
            return Err(dim_err!("empty ATC field"));
        }
        for (name, v) in [("T0", &t0), ("A", &amplitude), ("phi", &phase), ("rho", &rho)] {
            if v.len() != n {
                return Err(dim_err!("{name} grid has {} cells, expected {n}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("{name} grid has non-finite values")));
            }
        }
        Ok(Self {
            height,
            width,
            t0,
            amplitude,
            phase,
            rho,
            n_doy,
        })
    }

    /// Uniform field.
    pub fn constant(height: usize, width: usize, t0: f32, amplitude: f32, phase: f32, rho: f32, n_doy: usize) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, vec![t0; n], vec![amplitude; n], vec![phase; n], vec![rho; n], n_doy)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn pixel_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.height || col >= self.width {
            return Err(Error::Index(format!(
                "pixel ({row},{col}) outside {}×{}",
                self.height, self.width
            )));
        }
        Ok(row * self.width + col)
    }

    /// Angular position of day `t` in the cycle.
    pub fn day_angle(&self, t: f64) -> f64 {
        2.0 * PI * t / self.n_doy as f64
    }

    pub(crate) fn eval_index(&self, i: usize, t: f64) -> f32 {
        let angle = self.day_angle(t) + self.phase[i] as f64;
        (self.t0[i] as f64 + self.amplitude[i] as f64 * angle.sin()) as f32
    }

    /// Evaluate the cycle at one pixel on day `t` (0-based).
    pub fn eval(&self, (row, col): (usize, usize), t: usize) -> Result<f32> {
        if t >= self.n_doy {
            return Err(Error::Index(format!("day {t} outside [0, {})", self.n_doy)));
        }
        Ok(self.eval_index(self.pixel_index(row, col)?, t as f64))
    }

    /// One channel per day of `days`.
    pub fn eval_stack(&self, days: Range<usize>) -> Result<GridStack> {
        let list: Vec<usize> = days.collect();
        self.eval_days(&list)
    }

    /// One channel per listed day.
    pub fn eval_days(&self, days: &[usize]) -> Result<GridStack> {
        if days.is_empty() {
            return Err(dim_err!("empty day list"));
        }
        if let Some(&d) = days.iter().find(|&&d| d >= self.n_doy) {
            return Err(Error::Index(format!("day {d} outside [0, {})", self.n_doy)));
        }
        let n = self.pixels();
        let mut data = vec![0.0f32; days.len() * n];
        par::for_each_chunk_mut(&mut data, n, |k, plane| {
            let t = days[k] as f64;
            for (i, v) in plane.iter_mut().enumerate() {
                *v = self.eval_index(i, t);
            }
        });
        GridStack::new(days.len(), self.height, self.width, data)
    }

    /// Rewrite negative amplitudes as positive ones with the phase shifted by π
    /// and wrap every phase into (−π, π]. The cycle itself is unchanged.
    pub fn canonicalize(&mut self) {
        for (a, p) in self.amplitude.iter_mut().zip(self.phase.iter_mut()) {
            let mut phase = *p as f64;
            if *a < 0.0 {
                *a = -*a;
                phase += PI;
            }
            *p = wrap_phase(phase) as f32;
        }
    }

    /// Stack the four parameter grids as channels `[T0, A, φ, ρ]`.
    pub fn to_grid(&self) -> GridStack {
        let mut data = Vec::with_capacity(4 * self.pixels());
        for g in [&self.t0, &self.amplitude, &self.phase, &self.rho] {
            data.extend_from_slice(g);
        }
        GridStack::new(4, self.height, self.width, data).expect("non-empty field")
    }

    pub fn from_grid(grid: &GridStack, n_doy: usize) -> Result<Self> {
        if grid.channels() != 4 {
            return Err(dim_err!("ATC grid needs 4 channels, got {}", grid.channels()));
        }
        let ch = |c| grid.channel(c).to_vec();
        Self::new(grid.height(), grid.width(), ch(0), ch(1), ch(2), ch(3), n_doy)
    }
}

/// Wrap an angle into (−π, π].
pub fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Smallest absolute angular distance between two phases.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    wrap_phase(a - b).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_day_is_mean_plus_phase_term() {
        let f = AtcParamField::constant(2, 2, 10.0, 15.0, 0.0, 0.0, 365).unwrap();
        assert_eq!(f.eval((1, 1), 0).unwrap(), 10.0);
    }

    #[test]
    fn quarter_period_hits_peak() {
        let f = AtcParamField::constant(1, 1, 10.0, 15.0, 0.0, 0.0, 365).unwrap();
        let v = f.eval_index(0, 365.0 / 4.0);
        assert!((v - 25.0).abs() < 1e-5);
    }

    #[test]
    fn leap_year_value_matches_direct_formula() {
        let f = AtcParamField::constant(1, 1, 2.5, 7.0, 1.2, 0.0, 366).unwrap();
        let expected = 2.5f64 + 7.0 * (2.0 * std::f64::consts::PI * 100.0 / 366.0 + 1.2).sin();
        assert!((f.eval((0, 0), 100).unwrap() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = AtcParamField::constant(2, 3, 0.0, 1.0, 0.0, 0.0, 365).unwrap();
        assert!(matches!(f.eval((2, 0), 0), Err(Error::Index(_))));
        assert!(matches!(f.eval((0, 3), 0), Err(Error::Index(_))));
        assert!(AtcParamField::constant(1, 1, 0.0, 0.0, 0.0, 0.0, 360).is_err());
        assert!(f.eval_days(&[365]).is_err());
    }

    #[test]
    fn flat_cycle_stack_is_t0_everywhere() {
        let mut f = AtcParamField::constant(3, 4, 0.0, 0.0, 0.3, 0.0, 365).unwrap();
        f.t0 = (0..12).map(|i| i as f32).collect();
        let s = f.eval_stack(0..365).unwrap();
        for d in 0..365 {
            assert_eq!(s.channel(d), &f.t0[..]);
        }
    }

    #[test]
    fn stack_matches_pointwise_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (6, 5);
        let n = h * w;
        let mut draw = |lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let f = AtcParamField::new(h, w, draw(-5.0, 25.0), draw(0.0, 20.0), draw(-3.0, 3.0), draw(0.0, 1.0), 366).unwrap();
        let s = f.eval_stack(0..366).unwrap();
        let single = f.eval_stack(40..41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (y, x, d) = (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..366));
            let i = y * w + x;
            let oracle = f.t0[i] as f64
                + f.amplitude[i] as f64 * (2.0 * std::f64::consts::PI * d as f64 / 366.0 + f.phase[i] as f64).sin();
            assert!((s.get(d, y, x) as f64 - oracle).abs() < 1e-5);
            assert_eq!(single.get(0, y, x), f.eval((y, x), 40).unwrap());
        }
    }

    #[test]
    fn canonical_form_preserves_values() {
        let mut f = AtcParamField::constant(1, 1, 4.0, -6.0, 2.9, 0.0, 365).unwrap();
        let before = f.eval_stack(0..365).unwrap();
        f.canonicalize();
        assert!(f.amplitude[0] > 0.0);
        assert!(f.phase[0] > -std::f32::consts::PI && f.phase[0] <= std::f32::consts::PI);
        let after = f.eval_stack(0..365).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn periodic_bounded_and_mean_preserving(
            t0 in -30.0f32..40.0, a in -25.0f32..25.0, phi in -3.2f32..3.2, leap in any::<bool>(), t in 0usize..365,
        ) {
            let n = if leap { 366 } else { 365 };
            let f = AtcParamField::constant(1, 1, t0, a, phi, 0.0, n).unwrap();
            let v = f.eval_index(0, t as f64);
            let v_next = f.eval_index(0, (t + n) as f64);
            prop_assert!((v - v_next).abs() <= 1e-5);
            prop_assert!((v - t0).abs() <= a.abs() + 1e-4);
            let mean: f64 = f.eval_stack(0..n).unwrap().data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            prop_assert!((mean - t0 as f64).abs() < 1e-3);
        }
    }
}
