//! Synthetic scenes with known ground truth for every pipeline stage.
//!
//! A scene is built from smooth random fields: per-pixel annual-cycle
//! parameters, a large-scale daily weather anomaly that plays the role of the
//! coarse reanalysis, reflectance-linked spatial texture, blob-shaped cloud
//! masks, and stations whose air temperature is a closed-form function of the
//! true surface temperature and covariates.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::atc::{days_in_year, AtcParamField};
use crate::error::{Error, Result};
use crate::features::{build_features, AuxGrids, FeatureVector, StationRecord, N_REFL_BANDS};
use crate::grid::GridStack;
use crate::metrics::{self, ErrorStats};
use crate::par;

/// Closed-form surface→air relation used to synthesize station observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AirTransformTruth {
    /// `0.7·t_surf − 0.002·elevation + 1.5·sin(2π·hour/24) + 2`.
    Default,
    /// `slope·t_surf + intercept`.
    Affine { slope: f32, intercept: f32 },
    /// Boundary-layer mixing: the air follows the surface more closely when the
    /// boundary layer is deep, and relaxes toward 12 °C when it is shallow.
    Mixing,
}

impl AirTransformTruth {
    pub fn apply(&self, f: &FeatureVector) -> f32 {
        let t = f.t_surf as f64;
        let diurnal = 1.5 * (2.0 * PI * f.hour as f64 / 24.0).sin();
        let v = match *self {
            AirTransformTruth::Default => 0.7 * t - 0.002 * f.elevation as f64 + diurnal + 2.0,
            AirTransformTruth::Affine { slope, intercept } => slope as f64 * t + intercept as f64,
            AirTransformTruth::Mixing => {
                let coupling = 0.5 + 0.35 * ((f.blh as f64 - 1000.0) / 350.0).tanh();
                2.0 + coupling * t + (1.0 - coupling) * 12.0 - 0.002 * f.elevation as f64 + diurnal
            }
        };
        v as f32
    }

    pub fn name(&self) -> String {
        match self {
            AirTransformTruth::Default => "default".into(),
            AirTransformTruth::Affine { slope, intercept } => format!("affine:{slope}:{intercept}"),
            AirTransformTruth::Mixing => "mixing".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "default" => Ok(Self::Default),
            "mixing" => Ok(Self::Mixing),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["affine", a, b] => Ok(Self::Affine {
                        slope: a.parse().map_err(|_| Error::Spec(format!("bad affine slope {a}")))?,
                        intercept: b.parse().map_err(|_| Error::Spec(format!("bad affine intercept {b}")))?,
                    }),
                    _ => Err(Error::Spec(format!("unknown air transform {s:?}"))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub year: i32,
    /// First simulated day-of-year (0-based).
    pub first_day: usize,
    /// Number of consecutive simulated days.
    pub n_days: usize,
    pub hour: u32,
    pub t0_range: (f32, f32),
    pub amplitude_range: (f32, f32),
    pub phase_range: (f32, f32),
    pub rho_range: (f32, f32),
    /// Standard deviation of the coarse daily weather anomaly (°C).
    pub weather_sigma: f32,
    /// Amplitude of the reflectance-linked daily residual (°C).
    pub texture_amplitude: f32,
    /// Observation noise (°C).
    pub noise_sigma: f32,
    pub cloud_fraction: f32,
    /// Characteristic cloud blob diameter (pixels).
    pub cloud_blob_scale: usize,
    /// Block size of the coarse grid relative to the fine grid.
    pub coarse_factor: usize,
    pub n_stations: usize,
    /// Station measurement noise (°C).
    pub station_noise: f32,
    pub air_transform_truth: AirTransformTruth,
    /// Latitude/longitude of the north-west pixel center and pixel spacing (degrees).
    pub origin: (f64, f64),
    pub pixel_deg: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            year: 2018,
            first_day: 0,
            n_days: 365,
            hour: 12,
            t0_range: (5.0, 20.0),
            amplitude_range: (8.0, 16.0),
            phase_range: (-2.2, -1.0),
            rho_range: (0.6, 1.0),
            weather_sigma: 3.0,
            texture_amplitude: 1.5,
            noise_sigma: 0.0,
            cloud_fraction: 0.3,
            cloud_blob_scale: 6,
            coarse_factor: 8,
            n_stations: 24,
            station_noise: 0.5,
            air_transform_truth: AirTransformTruth::Default,
            origin: (40.0, -100.0),
            pixel_deg: 0.02,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn n_doy(&self) -> usize {
        days_in_year(self.year)
    }

    pub fn days(&self) -> Vec<usize> {
        (self.first_day..self.first_day + self.n_days).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 {
            return fail("scene must have positive height and width".into());
        }
        if self.n_days == 0 || self.first_day + self.n_days > self.n_doy() {
            return fail(format!(
                "days {}..{} exceed the {}-day year",
                self.first_day,
                self.first_day + self.n_days,
                self.n_doy()
            ));
        }
        if self.hour >= 24 {
            return fail(format!("hour {} outside [0, 24)", self.hour));
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return fail(format!("cloud fraction {} unreachable (must be in [0, 1))", self.cloud_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.station_noise >= 0.0 && self.texture_amplitude >= 0.0) {
            return fail("noise and texture amplitudes must be non-negative".into());
        }
        for (name, (lo, hi)) in [
            ("t0", self.t0_range),
            ("amplitude", self.amplitude_range),
            ("phase", self.phase_range),
            ("rho", self.rho_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return fail(format!("{name} range must be finite and ordered"));
            }
        }
        if self.cloud_blob_scale == 0 || self.coarse_factor == 0 {
            return fail("cloud blob scale and coarse factor must be positive".into());
        }
        if self.n_stations > self.height * self.width {
            return fail(format!(
                "{} stations do not fit on {} pixels",
                self.n_stations,
                self.height * self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StationSite {
    pub id: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub days: Vec<usize>,
    pub truth_atc: AtcParamField,
    /// Gap-free true surface temperature, one channel per simulated day.
    pub truth_surf: GridStack,
    /// Reflectance-linked residual component of `truth_surf`.
    pub texture: GridStack,
    /// Noisy truth at cloud-free cells; invalid under clouds.
    pub observed_surf: GridStack,
    /// Block-averaged then nearest-upsampled weather field.
    pub coarse: GridStack,
    /// Five-band static reflectance in [0, 1].
    pub reflectance: GridStack,
    /// Reflectance, lat/lon, elevation, slope and daily reanalysis layers.
    pub aux: AuxGrids,
    pub sites: Vec<StationSite>,
    pub stations: Vec<StationRecord>,
    /// Noise-free air temperature for each entry of `stations`.
    pub stations_truth: Vec<f32>,
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Separable box blur with clamped edges.
fn box_blur(field: &mut [f32], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let mut tmp = vec![0.0f32; h * w];
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += field[y * w + xx] as f64;
            }
            tmp[y * w + x] = (acc / (2 * radius + 1) as f64) as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc += tmp[yy * w + x] as f64;
            }
            field[y * w + x] = (acc / (2 * radius + 1) as f64) as f32;
        }
    }
}

fn standardize(field: &mut [f32]) {
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    field.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
}

/// Zero-mean, unit-variance random field with correlation length ~`scale` pixels.
pub fn smooth_field(h: usize, w: usize, scale: usize, rng: &mut impl Rng) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut f: Vec<f32> = (0..h * w).map(|_| normal.sample(rng)).collect();
    let radius = scale / 2;
    for _ in 0..3 {
        box_blur(&mut f, h, w, radius);
    }
    standardize(&mut f);
    f
}

fn rescale(field: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    let min = field.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = field.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if max > min { max - min } else { 1.0 };
    field.iter().map(|&v| lo + (hi - lo) * (v - min) / span).collect()
}

/// Average over `factor`×`factor` blocks, then copy each block mean back to its pixels.
pub fn block_average(field: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let (ey, ex) = ((by + factor).min(h), (bx + factor).min(w));
            let mut acc = 0.0f64;
            for y in by..ey {
                for x in bx..ex {
                    acc += field[y * w + x] as f64;
                }
            }
            let mean = (acc / ((ey - by) * (ex - bx)) as f64) as f32;
            for y in by..ey {
                for x in bx..ex {
                    out[y * w + x] = mean;
                }
            }
        }
    }
    out
}

/// Daily coarse fields: AR(1) in time, smooth in space, block-averaged.
fn coarse_series(spec: &SceneSpec, rng: &mut ChaCha8Rng, sigma: f32, mean: f32, scale: usize) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let phi = 0.7f32;
    let innov = (1.0 - phi * phi).sqrt();
    let mut state = smooth_field(h, w, scale, rng);
    let mut out = Vec::with_capacity(spec.n_days * n);
    for _ in 0..spec.n_days {
        let fresh = smooth_field(h, w, scale, rng);
        for (s, f) in state.iter_mut().zip(&fresh) {
            *s = phi * *s + innov * f;
        }
        let scaled: Vec<f32> = state.iter().map(|&v| mean + sigma * v).collect();
        out.extend(block_average(&scaled, h, w, spec.coarse_factor));
    }
    out
}

/// Per-day cloud masks: the `cloud_fraction` highest cells of a smooth field.
fn cloud_masks(spec: &SceneSpec, seed: u64) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let n_cloudy = (spec.cloud_fraction as f64 * n as f64).round() as usize;
    let planes = par::map_range(spec.n_days, |d| {
        let mut rng = stream(seed, 1000 + d as u64);
        let field = smooth_field(h, w, spec.cloud_blob_scale, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        let mut valid = vec![true; n];
        for &i in &order[..n_cloudy] {
            valid[i] = false;
        }
        valid
    });
    planes.concat()
}

/// Slope in degrees from central differences of an elevation grid (meters).
pub fn slope_degrees(elev: &[f32], h: usize, w: usize, spacing_m: f64) -> Vec<f32> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        elev[yy * w + xx] as f64
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dzdx = (at(y, x + 1) - at(y, x - 1)) / (2.0 * spacing_m);
            let dzdy = (at(y + 1, x) - at(y - 1, x)) / (2.0 * spacing_m);
            out[y as usize * w + x as usize] = (dzdx.hypot(dzdy)).atan().to_degrees() as f32;
        }
    }
    out
}

pub fn timestamp_for(year: i32, day: usize, hour: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        + Duration::days(day as i64)
        + Duration::hours(hour as i64)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let days = spec.days();
    let n_doy = spec.n_doy();
    let d_count = days.len();

    let mut rng = stream(spec.seed, 1);
    let field_scale = (h.max(w) / 3).max(2);
    let t0 = rescale(&smooth_field(h, w, field_scale, &mut rng), spec.t0_range.0, spec.t0_range.1);
    let amp = rescale(&smooth_field(h, w, field_scale, &mut rng), spec.amplitude_range.0, spec.amplitude_range.1);
    let phase = rescale(&smooth_field(h, w, field_scale, &mut rng), spec.phase_range.0, spec.phase_range.1);
    let rho = rescale(&smooth_field(h, w, field_scale, &mut rng), spec.rho_range.0, spec.rho_range.1);
    let truth_atc = AtcParamField::new(h, w, t0, amp, phase, rho, n_doy)?;

    // Reflectance: fine-grained land-cover pattern per band.
    let mut rng = stream(spec.seed, 2);
    let mut refl = Vec::with_capacity(N_REFL_BANDS * n);
    let bands: Vec<Vec<f32>> = (0..N_REFL_BANDS).map(|_| smooth_field(h, w, 3, &mut rng)).collect();
    let band_ranges = [(0.02, 0.15), (0.03, 0.2), (0.1, 0.45), (0.08, 0.35), (0.04, 0.25)];
    for (b, (lo, hi)) in bands.iter().zip(band_ranges) {
        refl.extend(rescale(b, lo, hi));
    }
    let reflectance = GridStack::new(N_REFL_BANDS, h, w, refl)?;

    // Two texture patterns that are fixed linear mixes of the reflectance bands.
    let mixes = [[1.0f32, -0.5, 0.8, 0.0, -0.6], [-0.3, 0.9, 0.0, -1.0, 0.4]];
    let patterns: Vec<Vec<f32>> = mixes
        .iter()
        .map(|mix| {
            let mut p = vec![0.0f32; n];
            for (b, &c) in mix.iter().enumerate() {
                p.iter_mut().zip(&bands[b]).for_each(|(v, &x)| *v += c * x);
            }
            standardize(&mut p);
            p
        })
        .collect();
    let mut rng = stream(spec.seed, 3);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let coefs: Vec<[f32; 2]> = (0..d_count).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let amp_tex = spec.texture_amplitude / std::f32::consts::SQRT_2;
    let mut texture = vec![0.0f32; d_count * n];
    for (k, plane) in texture.chunks_mut(n).enumerate() {
        for (i, v) in plane.iter_mut().enumerate() {
            *v = amp_tex * (coefs[k][0] * patterns[0][i] + coefs[k][1] * patterns[1][i]);
        }
    }

    // Coarse weather anomaly.
    let mut rng = stream(spec.seed, 4);
    let coarse_data = coarse_series(spec, &mut rng, spec.weather_sigma, 0.0, (h.max(w) / 2).max(4));
    let coarse = GridStack::new(d_count, h, w, coarse_data)?;

    let atc_stack = truth_atc.eval_days(&days)?;
    let mut truth = vec![0.0f32; d_count * n];
    for (k, plane) in truth.chunks_mut(n).enumerate() {
        for (i, v) in plane.iter_mut().enumerate() {
            let j = k * n + i;
            *v = atc_stack.data()[j] + truth_atc.rho[i] * coarse.data()[j] + texture[j];
        }
    }
    let truth_surf = GridStack::new(d_count, h, w, truth.clone())?;
    let texture = GridStack::new(d_count, h, w, texture)?;

    let valid = cloud_masks(spec, spec.seed ^ 0x5EED);
    let mut rng = stream(spec.seed, 5);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let observed: Vec<f32> = truth
        .iter()
        .map(|&t| if spec.noise_sigma > 0.0 { t + noise.sample(&mut rng) } else { t })
        .collect();
    let observed_surf = GridStack::with_mask(d_count, h, w, observed, valid)?;

    // Static auxiliary grids.
    let mut rng = stream(spec.seed, 6);
    let elevation = rescale(&smooth_field(h, w, (h.max(w) / 4).max(2), &mut rng), 50.0, 1500.0);
    let spacing_m = spec.pixel_deg * 111_000.0;
    let slope = slope_degrees(&elevation, h, w, spacing_m);
    let lat: Vec<f32> = (0..n).map(|i| (spec.origin.0 - (i / w) as f64 * spec.pixel_deg) as f32).collect();
    let lon: Vec<f32> = (0..n).map(|i| (spec.origin.1 + (i % w) as f64 * spec.pixel_deg) as f32).collect();
    let mut aux = AuxGrids::new(h, w);
    aux.insert("reflectance", reflectance.clone())?;
    aux.insert("lat", GridStack::new(1, h, w, lat)?)?;
    aux.insert("lon", GridStack::new(1, h, w, lon)?)?;
    aux.insert("elevation", GridStack::new(1, h, w, elevation)?)?;
    aux.insert("slope", GridStack::new(1, h, w, slope)?)?;

    let mut rng = stream(spec.seed, 7);
    let scale = (h.max(w) / 2).max(4);
    let blh = coarse_series(spec, &mut rng, 350.0, 1000.0, scale);
    let tcw = coarse_series(spec, &mut rng, 8.0, 25.0, scale);
    let shf = coarse_series(spec, &mut rng, 60.0, 120.0, scale);
    let u10 = coarse_series(spec, &mut rng, 3.0, 1.0, scale);
    let v10 = coarse_series(spec, &mut rng, 3.0, -0.5, scale);
    for (name, values) in [
        ("blh", blh.into_iter().map(|v| v.max(50.0)).collect::<Vec<_>>()),
        ("tcw", tcw.into_iter().map(|v| v.max(0.5)).collect()),
        ("shf", shf),
        ("u10", u10),
        ("v10", v10),
    ] {
        aux.insert(name, GridStack::new(d_count, h, w, values)?)?;
    }

    // Stations on distinct pixels.
    let mut rng = stream(spec.seed, 8);
    let picks = rand::seq::index::sample(&mut rng, n, spec.n_stations);
    let mut sites: Vec<StationSite> = picks
        .iter()
        .enumerate()
        .map(|(k, i)| StationSite {
            id: format!("SYN{:04}", k + 1),
            row: i / w,
            col: i % w,
        })
        .collect();
    sites.sort_by(|a, b| a.id.cmp(&b.id));
    let station_noise = Normal::new(0.0f32, spec.station_noise.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let mut stations = Vec::with_capacity(sites.len() * d_count);
    let mut stations_truth = Vec::with_capacity(sites.len() * d_count);
    for site in &sites {
        for (k, &day) in days.iter().enumerate() {
            let i = site.row * w + site.col;
            let t_surf = truth_surf.data()[k * n + i];
            let fv = build_features(t_surf, &aux, k, spec.hour, site.row, site.col)?;
            let truth_air = spec.air_transform_truth.apply(&fv);
            let noisy = if spec.station_noise > 0.0 {
                truth_air + station_noise.sample(&mut rng)
            } else {
                truth_air
            };
            stations.push(StationRecord {
                station_id: site.id.clone(),
                lat: aux.layer("lat")?.data()[i] as f64,
                lon: aux.layer("lon")?.data()[i] as f64,
                elevation: aux.layer("elevation")?.data()[i] as f64,
                timestamp: timestamp_for(spec.year, day, spec.hour),
                t_air: noisy as f64,
            });
            stations_truth.push(truth_air);
        }
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        days,
        truth_atc,
        truth_surf,
        texture,
        observed_surf,
        coarse,
        reflectance,
        aux,
        sites,
        stations,
        stations_truth,
    })
}

/// Errors of a surface-temperature product against the scene truth, split by
/// whether the cell was observed or under cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStats {
    pub observed: Option<ErrorStats>,
    pub masked: Option<ErrorStats>,
}

pub fn oracle_eval(scene: &SyntheticScene, output: &GridStack) -> Result<OracleStats> {
    if output.dims() != scene.truth_surf.dims() {
        return Err(Error::Dimension(format!(
            "output {:?} vs truth {:?}",
            output.dims(),
            scene.truth_surf.dims()
        )));
    }
    let mask = scene.observed_surf.mask();
    let mut split = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for ((&p, &t), &obs) in output.data().iter().zip(scene.truth_surf.data()).zip(mask) {
        let slot = if obs { 0 } else { 1 };
        split[slot].0.push(p as f64);
        split[slot].1.push(t as f64);
    }
    let stats = |(p, t): &(Vec<f64>, Vec<f64>)| -> Result<Option<ErrorStats>> {
        if p.is_empty() {
            Ok(None)
        } else {
            metrics::error_stats(p, t).map(Some)
        }
    };
    Ok(OracleStats {
        observed: stats(&split[0])?,
        masked: stats(&split[1])?,
    })
}

/// Errors of air-temperature predictions (one per `scene.stations` entry)
/// against the noise-free station truth.
pub fn oracle_eval_air(scene: &SyntheticScene, predictions: &[f64]) -> Result<ErrorStats> {
    if predictions.len() != scene.stations_truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} station records",
            predictions.len(),
            scene.stations_truth.len()
        )));
    }
    let truth: Vec<f64> = scene.stations_truth.iter().map(|&v| v as f64).collect();
    metrics::error_stats(predictions, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 20,
            n_days: 20,
            n_stations: 6,
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn noiseless_scene_is_exact_composition() {
        let spec = SceneSpec {
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
            cloud_fraction: 0.0,
            ..small(3)
        };
        let s = generate_scene(&spec).unwrap();
        let atc = s.truth_atc.eval_days(&s.days).unwrap();
        let n = spec.height * spec.width;
        assert!(s.observed_surf.is_gap_free());
        for (j, &o) in s.observed_surf.data().iter().enumerate() {
            let expected = atc.data()[j] + s.truth_atc.rho[j % n] * s.coarse.data()[j];
            assert_eq!(o, expected);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small(9)).unwrap();
        let b = generate_scene(&small(9)).unwrap();
        assert_eq!(a.observed_surf, b.observed_surf);
        assert_eq!(a.truth_surf, b.truth_surf);
        assert_eq!(a.stations, b.stations);
        let c = generate_scene(&small(10)).unwrap();
        assert_ne!(a.truth_surf, c.truth_surf);
    }

    #[test]
    fn cloud_fraction_is_met_per_day() {
        let s = generate_scene(&small(4)).unwrap();
        let n = (s.spec.height * s.spec.width) as f64;
        for d in 0..s.days.len() {
            let cloudy = s.observed_surf.channel_mask(d).iter().filter(|&&v| !v).count() as f64 / n;
            assert!((0.28..=0.32).contains(&cloudy), "{cloudy}");
        }
    }

    #[test]
    fn observations_equal_truth_plus_noise_under_clear_sky() {
        let spec = SceneSpec { noise_sigma: 0.0, ..small(5) };
        let s = generate_scene(&spec).unwrap();
        for ((&o, &t), &v) in s.observed_surf.data().iter().zip(s.truth_surf.data()).zip(s.observed_surf.mask()) {
            if v {
                assert_eq!(o, t);
            }
        }
        assert!(s.coarse.is_gap_free());
    }

    #[test]
    fn stations_on_distinct_pixels() {
        let s = generate_scene(&small(6)).unwrap();
        let mut px: Vec<_> = s.sites.iter().map(|s| (s.row, s.col)).collect();
        px.sort();
        px.dedup();
        assert_eq!(px.len(), 6);
        assert_eq!(s.stations.len(), 6 * 20);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SceneSpec { cloud_fraction: 1.0, ..small(1) },
            SceneSpec { cloud_fraction: -0.1, ..small(1) },
            SceneSpec { noise_sigma: -1.0, ..small(1) },
            SceneSpec { n_days: 400, ..small(1) },
            SceneSpec { hour: 24, ..small(1) },
        ] {
            assert!(matches!(generate_scene(&spec), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn oracle_on_truth_and_offset() {
        let s = generate_scene(&small(2)).unwrap();
        let exact = oracle_eval(&s, &s.truth_surf).unwrap();
        assert_eq!(exact.observed.unwrap().mae, 0.0);
        assert_eq!(exact.masked.unwrap().rmse, 0.0);
        let mut shifted = s.truth_surf.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let off = oracle_eval(&s, &shifted).unwrap();
        assert!((off.observed.unwrap().mae - 1.0).abs() < 1e-5);
        assert!((off.masked.unwrap().mae - 1.0).abs() < 1e-5);
    }

    #[test]
    fn truth_names_round_trip() {
        for t in [
            AirTransformTruth::Default,
            AirTransformTruth::Mixing,
            AirTransformTruth::Affine { slope: 0.8, intercept: -1.5 },
        ] {
            assert_eq!(AirTransformTruth::parse(&t.name()).unwrap(), t);
        }
        assert!(AirTransformTruth::parse("cubic").is_err());
    }
}
