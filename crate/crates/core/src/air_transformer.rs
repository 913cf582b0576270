//! Surface→air temperature network trained per (month, year) on station
//! records, plus the ordinary-least-squares comparator.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDateTime, Timelike};
use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{build_features, nearest_pixel, AuxGrids, FeatureVector, StationRecord, N_FEATURES};
use crate::grid::GridStack;
use crate::nn::{Affine, ParamStore, ResidualBlock, SelfAttention, Tape, Var};
use crate::par;
use crate::tensor::Tensor;

pub const HIDDEN: usize = 64;
pub const WIDE: usize = 128;
const EVAL_CHUNK: usize = 4096;

/// Per-feature z-score parameters and the target's.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorms {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    pub target_mean: f64,
    pub target_std: f64,
}

impl FeatureNorms {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Fits on rows and targets; zero-variance columns get std 1.
    pub fn fit(rows: &[FeatureVector], targets: &[f64]) -> Result<Self> {
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(Error::Data(format!(
                "cannot fit normalization on {} rows and {} targets",
                rows.len(),
                targets.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0f64; N_FEATURES];
        let mut var = [0.0f64; N_FEATURES];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.to_array()) {
                *m += v as f64 / n;
            }
        }
        for r in rows {
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(r.to_array()) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        let std = var.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        let tm = targets.iter().sum::<f64>() / n;
        let tv = targets.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std,
            target_mean: tm,
            target_std: if tv > 1e-12 { tv.sqrt() } else { 1.0 },
        })
    }

    pub fn normalize(&self, f: &FeatureVector) -> [f32; N_FEATURES] {
        let a = f.to_array();
        std::array::from_fn(|i| ((a[i] as f64 - self.mean[i]) / self.std[i]) as f32)
    }

    pub fn denormalize(&self, z: &[f32; N_FEATURES]) -> FeatureVector {
        let a: [f32; N_FEATURES] = std::array::from_fn(|i| (z[i] as f64 * self.std[i] + self.mean[i]) as f32);
        FeatureVector::from_array(&a)
    }

    pub fn normalize_target(&self, t: f64) -> f64 {
        (t - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().chain([&self.target_std]).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Data("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// One station observation with its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AirSample {
    pub station_id: String,
    pub timestamp: NaiveDateTime,
    pub features: FeatureVector,
    pub t_air: f64,
}

/// Disjoint station-id sets for training and held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTestSplit {
    pub train_stations: BTreeSet<String>,
    pub test_stations: BTreeSet<String>,
}

impl TrainTestSplit {
    pub fn new(train_stations: BTreeSet<String>, test_stations: BTreeSet<String>) -> Result<Self> {
        if let Some(id) = train_stations.intersection(&test_stations).next() {
            return Err(Error::Data(format!("station {id} is in both train and test sets")));
        }
        Ok(Self {
            train_stations,
            test_stations,
        })
    }

    /// Holds out `round(test_fraction · n)` stations chosen by a seeded shuffle
    /// (at least one when there are two or more stations).
    pub fn station_level<'a>(ids: impl IntoIterator<Item = &'a str>, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let unique: BTreeSet<String> = ids.into_iter().map(str::to_string).collect();
        let mut all: Vec<String> = unique.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        let mut n_test = (test_fraction * all.len() as f64).round() as usize;
        if test_fraction > 0.0 && all.len() >= 2 {
            n_test = n_test.clamp(1, all.len() - 1);
        }
        let test = all[..n_test].iter().cloned().collect();
        let train = all[n_test..].iter().cloned().collect();
        Self::new(train, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AirTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.01,
            batch_size: 65_536,
            seed: 0,
        }
    }
}

impl AirTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    input: Affine,
    attention: SelfAttention,
    block64: ResidualBlock,
    widen: Affine,
    block128: ResidualBlock,
    output: Affine,
}

/// dense(16→64)+ReLU → self-attention(64) → residual(64) → dense(64→128)+ReLU
/// → residual(128) → dense(128→1), on z-scored inputs and target.
#[derive(Debug, Clone)]
pub struct AirTransformerModel {
    pub params: ParamStore,
    layers: Layers,
    pub month: u32,
    pub year: i32,
    pub feature_norms: FeatureNorms,
}

impl AirTransformerModel {
    pub fn new(month: u32, year: i32, feature_norms: FeatureNorms, seed: u64) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Config(format!("month {month} outside 1..=12")));
        }
        feature_norms.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let layers = Layers {
            input: Affine::dense(&mut s, "air.input", N_FEATURES, HIDDEN, &mut rng)?,
            attention: SelfAttention::new(&mut s, "air.attention", &mut rng)?,
            block64: ResidualBlock::dense(&mut s, "air.block64", HIDDEN, HIDDEN, &mut rng)?,
            widen: Affine::dense(&mut s, "air.widen", HIDDEN, WIDE, &mut rng)?,
            block128: ResidualBlock::dense(&mut s, "air.block128", WIDE, WIDE, &mut rng)?,
            output: Affine::dense(&mut s, "air.output", WIDE, 1, &mut rng)?,
        };
        Ok(Self {
            params: s,
            layers,
            month,
            year,
            feature_norms,
        })
    }

    /// Sets the output layer to a constant normalized value `bias`.
    pub fn set_constant_output(&mut self, bias: f32) {
        self.layers.output.zero(&mut self.params);
        self.params.value_mut(self.layers.output.bias).data_mut()[0] = bias;
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let l = &self.layers;
        let s = &self.params;
        let h = l.input.forward(tape, s, x)?;
        let h = tape.relu(h);
        let h = l.attention.forward(tape, s, h)?;
        let h = l.block64.forward_rows(tape, s, h, None)?;
        let h = l.widen.forward(tape, s, h)?;
        let h = tape.relu(h);
        let h = l.block128.forward_rows(tape, s, h, None)?;
        l.output.forward(tape, s, h)
    }

    fn design(&self, rows: &[FeatureVector]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * N_FEATURES);
        for r in rows {
            data.extend_from_slice(&self.feature_norms.normalize(r));
        }
        Tensor::new(vec![rows.len(), N_FEATURES], data)
    }

    fn predict_normalized(&self, rows: &[FeatureVector]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let x = tape.input(self.design(rows)?);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// Air temperature (°C) for each feature row.
pub fn transform_forward(model: &AirTransformerModel, features: &[FeatureVector]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let chunks: Vec<&[FeatureVector]> = features.chunks(EVAL_CHUNK).collect();
    let outs = par::map_slice(&chunks, |c| model.predict_normalized(c));
    let mut result = Vec::with_capacity(features.len());
    for o in outs {
        result.extend(o?.into_iter().map(|z| model.feature_norms.denormalize_target(z as f64)));
    }
    Ok(result)
}

/// Raw-width variant of [`transform_forward`] for callers holding plain arrays.
pub fn transform_rows(model: &AirTransformerModel, rows: &[[f32; N_FEATURES]]) -> Result<Vec<f64>> {
    let fv: Vec<FeatureVector> = rows.iter().map(FeatureVector::from_array).collect();
    transform_forward(model, &fv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirEpochLog {
    pub epoch: usize,
    /// Mean absolute error (°C) over the epoch's minibatches.
    pub train_l1: f64,
    /// Held-out-station MAE (°C) after the epoch.
    pub test_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AirTrainOutcome {
    pub model: AirTransformerModel,
    pub log: Vec<AirEpochLog>,
}

/// Calendar (year, month) of a timestamp.
pub fn month_key(ts: &NaiveDateTime) -> (i32, u32) {
    (ts.year(), ts.month())
}

/// Groups samples by (year, month), preserving input order within each group.
pub fn partition_by_month(samples: &[AirSample]) -> BTreeMap<(i32, u32), Vec<AirSample>> {
    let mut out: BTreeMap<(i32, u32), Vec<AirSample>> = BTreeMap::new();
    for s in samples {
        out.entry(month_key(&s.timestamp)).or_default().push(s.clone());
    }
    out
}

/// Minibatch Adam on the L1 loss of the normalized target. All samples must
/// belong to one calendar month; only `split.train_stations` are fitted.
pub fn train_air_transformer(
    samples: &[AirSample],
    split: &TrainTestSplit,
    config: &AirTrainConfig,
) -> Result<AirTrainOutcome> {
    config.validate()?;
    let Some(first) = samples.first() else {
        return Err(Error::Data("no samples for this month".into()));
    };
    let (year, month) = month_key(&first.timestamp);
    if let Some(s) = samples.iter().find(|s| month_key(&s.timestamp) != (year, month)) {
        return Err(Error::Data(format!(
            "sample at {} lies outside month {year}-{month:02}",
            s.timestamp
        )));
    }
    let train: Vec<&AirSample> = samples
        .iter()
        .filter(|s| split.train_stations.contains(&s.station_id))
        .collect();
    let test: Vec<&AirSample> = samples
        .iter()
        .filter(|s| split.test_stations.contains(&s.station_id))
        .collect();
    if train.is_empty() {
        return Err(Error::Data(format!("no training-station samples for {year}-{month:02}")));
    }
    let rows: Vec<FeatureVector> = train.iter().map(|s| s.features).collect();
    let targets: Vec<f64> = train.iter().map(|s| s.t_air).collect();
    let norms = FeatureNorms::fit(&rows, &targets)?;
    let mut model = AirTransformerModel::new(month, year, norms, config.seed)?;

    let x_all: Vec<[f32; N_FEATURES]> = rows.iter().map(|r| model.feature_norms.normalize(r)).collect();
    let y_all: Vec<f32> = targets
        .iter()
        .map(|&t| model.feature_norms.normalize_target(t) as f32)
        .collect();
    let test_rows: Vec<FeatureVector> = test.iter().map(|s| s.features).collect();
    let test_obs: Vec<f64> = test.iter().map(|s| s.t_air).collect();

    let n = rows.len();
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA1B2_C3D4);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0f64;
        for idx in order.chunks(batch) {
            let mut data = Vec::with_capacity(idx.len() * N_FEATURES);
            for &i in idx {
                data.extend_from_slice(&x_all[i]);
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![idx.len(), N_FEATURES], data)?);
            let y = model.forward(&mut tape, x)?;
            let pred = tape.value(y).data();
            let inv = 1.0 / idx.len() as f64;
            let mut seed = Vec::with_capacity(idx.len());
            for (p, &i) in pred.iter().zip(idx) {
                let r = (*p - y_all[i]) as f64;
                abs_sum += r.abs();
                seed.push(if r == 0.0 { 0.0 } else { (r.signum() * inv) as f32 });
            }
            tape.backward_from(y, Tensor::new(vec![idx.len(), 1], seed)?, &mut model.params)?;
            model.params.adam_step(config.lr)?;
        }
        let train_l1 = abs_sum / n as f64 * model.feature_norms.target_std;
        if !train_l1.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_l1 });
        }
        let test_l1 = if test_rows.is_empty() {
            None
        } else {
            let p = transform_forward(&model, &test_rows)?;
            Some(p.iter().zip(&test_obs).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
        };
        if epoch == 1 || epoch % 100 == 0 {
            debug!("air {year}-{month:02} epoch {epoch}: train L1 {train_l1:.4}");
        }
        log.push(AirEpochLog { epoch, train_l1, test_l1 });
    }
    Ok(AirTrainOutcome { model, log })
}

/// Features for every station record that falls on the stack's hour, year and
/// days. `surf` channels correspond to `days` (0-based day-of-year).
pub fn station_samples(
    stations: &[StationRecord],
    surf: &GridStack,
    aux: &AuxGrids,
    days: &[usize],
    year: i32,
    hour: u32,
) -> Result<Vec<AirSample>> {
    if surf.height() != aux.height() || surf.width() != aux.width() || surf.channels() != days.len() {
        return Err(Error::Dimension(format!(
            "surface stack {:?} vs aux {}x{} and {} days",
            surf.dims(),
            aux.height(),
            aux.width(),
            days.len()
        )));
    }
    let channel_of: BTreeMap<usize, usize> = days.iter().enumerate().map(|(c, &d)| (d, c)).collect();
    let mut pixel_cache: BTreeMap<(u64, u64), (usize, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for r in stations {
        let ts = r.timestamp;
        let channel = if ts.year() == year && ts.hour() == hour {
            channel_of.get(&(ts.ordinal0() as usize)).copied()
        } else {
            None
        };
        let Some(c) = channel else {
            skipped += 1;
            continue;
        };
        let key = (r.lat.to_bits(), r.lon.to_bits());
        let (row, col) = match pixel_cache.get(&key) {
            Some(&p) => p,
            None => {
                let p = nearest_pixel(aux, r.lat, r.lon)?;
                pixel_cache.insert(key, p);
                p
            }
        };
        if !surf.is_valid(c, row, col) {
            skipped += 1;
            continue;
        }
        let features = build_features(surf.get(c, row, col), aux, c, hour, row, col)?;
        out.push(AirSample {
            station_id: r.station_id.clone(),
            timestamp: ts,
            features,
            t_air: r.t_air,
        });
    }
    if skipped > 0 {
        warn!("{skipped} station records outside the surface stack were skipped");
    }
    Ok(out)
}

fn pixel_features(surf: &GridStack, aux: &AuxGrids, hour: u32) -> Result<Vec<FeatureVector>> {
    let (d, h, w) = surf.dims();
    if (h, w) != (aux.height(), aux.width()) {
        return Err(Error::Dimension(format!(
            "surface grid {h}x{w} vs aux {}x{}",
            aux.height(),
            aux.width()
        )));
    }
    let mut rows = Vec::with_capacity(d * h * w);
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                rows.push(build_features(surf.get(c, y, x), aux, c, hour, y, x)?);
            }
        }
    }
    Ok(rows)
}

/// Air temperature at every pixel and channel of a reconstructed surface stack.
pub fn predict_map(model: &AirTransformerModel, surf: &GridStack, aux: &AuxGrids, hour: u32) -> Result<GridStack> {
    let (d, h, w) = surf.dims();
    let rows = pixel_features(surf, aux, hour)?;
    let pred = transform_forward(model, &rows)?;
    GridStack::new(d, h, w, pred.into_iter().map(|v| v as f32).collect())
}

/// Pushes the calibrated surface interval `[mean − λ·d_L, mean + λ·d_U]`
/// through the network; bounds are swapped where the map is decreasing.
pub fn predict_interval_map(
    model: &AirTransformerModel,
    mean: &GridStack,
    d_lower: &GridStack,
    d_upper: &GridStack,
    lambda: f64,
    aux: &AuxGrids,
    hour: u32,
) -> Result<(GridStack, GridStack)> {
    if d_lower.dims() != mean.dims() || d_upper.dims() != mean.dims() {
        return Err(Error::Dimension("interval half-widths do not match the mean stack".into()));
    }
    let shift = |sign: f64, d: &GridStack| -> Result<GridStack> {
        let v: Vec<f32> = mean
            .data()
            .iter()
            .zip(d.data())
            .map(|(&m, &dd)| (m as f64 + sign * lambda * dd as f64) as f32)
            .collect();
        let (c, h, w) = mean.dims();
        GridStack::new(c, h, w, v)
    };
    let low = predict_map(model, &shift(-1.0, d_lower)?, aux, hour)?;
    let upp = predict_map(model, &shift(1.0, d_upper)?, aux, hour)?;
    let (c, h, w) = mean.dims();
    let (mut lo, mut hi) = (Vec::with_capacity(low.data().len()), Vec::with_capacity(low.data().len()));
    for (&a, &b) in low.data().iter().zip(upp.data()) {
        lo.push(a.min(b));
        hi.push(a.max(b));
    }
    Ok((GridStack::new(c, h, w, lo)?, GridStack::new(c, h, w, hi)?))
}

/// Ordinary least squares on the 16 features (z-scored for conditioning).
#[derive(Debug, Clone, PartialEq)]
pub struct MlrModel {
    pub norms: FeatureNorms,
    /// Intercept followed by one coefficient per normalized feature.
    pub coef: [f64; N_FEATURES + 1],
}

impl MlrModel {
    pub fn fit(rows: &[FeatureVector], targets: &[f64]) -> Result<Self> {
        let norms = FeatureNorms::fit(rows, targets)?;
        const P: usize = N_FEATURES + 1;
        let mut ata = [[0.0f64; P]; P];
        let mut atb = [0.0f64; P];
        for (r, &t) in rows.iter().zip(targets) {
            let z = norms.normalize(r);
            let mut x = [1.0f64; P];
            for i in 0..N_FEATURES {
                x[i + 1] = z[i] as f64;
            }
            for i in 0..P {
                atb[i] += x[i] * t;
                for j in 0..P {
                    ata[i][j] += x[i] * x[j];
                }
            }
        }
        // A tiny ridge keeps constant (all-zero after centering) columns solvable.
        for (i, row) in ata.iter_mut().enumerate() {
            row[i] += 1e-9 * rows.len() as f64;
        }
        let coef = solve(ata, atb)?;
        Ok(Self { norms, coef })
    }

    pub fn predict(&self, f: &FeatureVector) -> f64 {
        let z = self.norms.normalize(f);
        self.coef[0] + z.iter().zip(&self.coef[1..]).map(|(&a, b)| a as f64 * b).sum::<f64>()
    }
}

/// Gaussian elimination with partial pivoting.
fn solve<const P: usize>(mut a: [[f64; P]; P], mut b: [f64; P]) -> Result<[f64; P]> {
    for col in 0..P {
        let piv = (col..P)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::DegenerateInput("singular least-squares system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..P {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                let pivot_row = a[col];
                for (x, p) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = [0.0f64; P];
    for r in (0..P).rev() {
        let s: f64 = (r + 1..P).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}
