//! Surface-temperature reconstruction: annual cycle + ρ·coarse + a
//! reflectance-driven convolutional residual, trained with masked L1 loss and
//! summarized by a snapshot ensemble with calibrated intervals.

use std::f64::consts::PI;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atc::{days_in_year, AtcParamField};
use crate::ensemble::{
    calibrate_lambda, raw_interval_in_place, CalibrationOutcome, IntervalCalibration, IntervalPoint, SnapshotEnsemble,
};
use crate::error::{Error, Result};
use crate::features::N_REFL_BANDS;
use crate::grid::GridStack;
use crate::nn::{ParamId, ParamStore, ResidualBlock, Tape, Var};
use crate::par;
use crate::tensor::Tensor;

type DayPlanes<'a> = (usize, &'a mut [f32], &'a mut [f32], &'a mut [f32]);

/// Channel widths of the residual head, before the final per-day layer.
pub const HEAD_CHANNELS: [usize; 4] = [N_REFL_BANDS, 16, 64, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionDataset {
    /// Surface temperature, one channel per entry of `days`; invalid under cloud.
    pub observed: GridStack,
    /// Gap-free coarse temperature on the fine grid, aligned with `observed`.
    pub coarse: GridStack,
    /// Five-band reflectance.
    pub reflectance: GridStack,
    /// Day-of-year index (0-based) of each channel, strictly increasing.
    pub days: Vec<usize>,
    pub n_doy: usize,
    pub hour: u32,
    pub year: i32,
}

impl ReconstructionDataset {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.observed.dims();
        if self.coarse.dims() != (d, h, w) {
            return Err(Error::Dimension(format!(
                "coarse stack {:?} vs observed {:?}",
                self.coarse.dims(),
                self.observed.dims()
            )));
        }
        if self.reflectance.dims() != (N_REFL_BANDS, h, w) {
            return Err(Error::Dimension(format!(
                "reflectance {:?}, expected ({N_REFL_BANDS}, {h}, {w})",
                self.reflectance.dims()
            )));
        }
        if self.days.len() != d {
            return Err(Error::Dimension(format!("{} day indices for {d} channels", self.days.len())));
        }
        if self.n_doy != days_in_year(self.year) {
            return Err(Error::Dimension(format!("n_doy {} does not match year {}", self.n_doy, self.year)));
        }
        if self.days.windows(2).any(|p| p[0] >= p[1]) || self.days.last().is_some_and(|&l| l >= self.n_doy) {
            return Err(Error::Dimension("day indices must increase and lie inside the year".into()));
        }
        if self.hour >= 24 {
            return Err(Error::Dimension(format!("hour {} outside [0, 24)", self.hour)));
        }
        if !self.coarse.is_gap_free() {
            return Err(Error::Data("coarse stack has gaps".into()));
        }
        if !self.reflectance.is_gap_free() {
            return Err(Error::Data("reflectance has gaps".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.observed.height()
    }

    pub fn width(&self) -> usize {
        self.observed.width()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            observed: self.observed.crop(y0, x0, h, w)?,
            coarse: self.coarse.crop(y0, x0, h, w)?,
            reflectance: self.reflectance.crop(y0, x0, h, w)?,
            ..self.clone()
        })
    }

    fn reflectance_tensor(&self) -> Tensor {
        Tensor::new(
            vec![N_REFL_BANDS, self.height(), self.width()],
            self.reflectance.data().to_vec(),
        )
        .expect("validated reflectance")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the annual-cycle and ρ fields.
    pub lr: f32,
    /// Learning rate of the convolutional head.
    pub head_lr: f32,
    pub snapshot_start: usize,
    pub snapshot_every: usize,
    pub snapshot_count: usize,
    /// Fraction of valid observations withheld from the loss and reported as test L1.
    pub holdout_fraction: f64,
    /// Tile edge length for `train_tiled`.
    pub tile: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            lr: 0.1,
            head_lr: 0.01,
            snapshot_start: 201,
            snapshot_every: 2,
            snapshot_count: 200,
            holdout_fraction: 0.0,
            tile: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn snapshot_epochs(&self) -> Vec<usize> {
        (0..self.snapshot_count)
            .map(|k| self.snapshot_start + k * self.snapshot_every)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.head_lr > 0.0) {
            return Err(Error::Config("epochs and learning rates must be positive".into()));
        }
        if self.snapshot_count < 2 || self.snapshot_every == 0 || self.snapshot_start == 0 {
            return Err(Error::Config("snapshot schedule needs ≥2 snapshots at a positive interval".into()));
        }
        let last = self.snapshot_start + (self.snapshot_count - 1) * self.snapshot_every;
        if last > self.epochs {
            return Err(Error::Config(format!(
                "snapshot window unreachable: last snapshot at epoch {last} but only {} epochs",
                self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must be in [0, 1)".into()));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(())
    }
}

/// Four residual blocks widening 5→16→64→128→n_doy over the reflectance image.
#[derive(Debug, Clone)]
pub struct ConvHead {
    pub store: ParamStore,
    pub blocks: Vec<ResidualBlock>,
    pub n_doy: usize,
}

impl ConvHead {
    /// Glorot-initialized head whose last block starts at exactly zero output.
    pub fn new(n_doy: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut widths = HEAD_CHANNELS.to_vec();
        widths.push(n_doy);
        let mut blocks = Vec::with_capacity(4);
        for (k, pair) in widths.windows(2).enumerate() {
            blocks.push(ResidualBlock::conv(&mut store, &format!("head.block{}", k + 1), pair[0], pair[1], rng)?);
        }
        let last = blocks.last_mut().expect("four blocks");
        last.final_relu = false;
        last.second.zero(&mut store);
        if let Some(p) = &last.projection {
            p.zero(&mut store);
        }
        Ok(Self { store, blocks, n_doy })
    }

    /// Records the head on `tape`, computing only the output channels in `days`.
    /// Each day's residual has zero spatial mean, so spatially uniform daily
    /// signal stays with the annual cycle and coarse terms.
    pub fn forward(&self, tape: &mut Tape, input: Var, days: &[usize]) -> Result<Var> {
        let mut x = input;
        let n = self.blocks.len();
        for (k, b) in self.blocks.iter().enumerate() {
            x = b.forward_rows(tape, &self.store, x, if k + 1 == n { Some(days) } else { None })?;
        }
        Ok(tape.center_rows(x))
    }

    pub fn eval(&self, reflectance: &GridStack, days: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(
            vec![reflectance.channels(), reflectance.height(), reflectance.width()],
            reflectance.data().to_vec(),
        )?);
        let y = self.forward(&mut tape, x, days)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct AmplifierModel {
    pub atc: AtcParamField,
    pub conv_head: ConvHead,
    /// When false the head is frozen at zero output (annual cycle + ρ·coarse only).
    pub head_enabled: bool,
    pub hour: u32,
    pub year: i32,
}

impl AmplifierModel {
    pub fn new(atc: AtcParamField, conv_head: ConvHead, hour: u32, year: i32) -> Result<Self> {
        if conv_head.n_doy != atc.n_doy {
            return Err(Error::Dimension(format!(
                "head has {} outputs for a {}-day year",
                conv_head.n_doy, atc.n_doy
            )));
        }
        Ok(Self {
            atc,
            conv_head,
            head_enabled: true,
            hour,
            year,
        })
    }

    /// Head residual for the dataset's days; exactly zero when disabled.
    pub fn head_output(&self, data: &ReconstructionDataset) -> Result<Tensor> {
        let (d, h, w) = data.observed.dims();
        if !self.head_enabled {
            return Ok(Tensor::zeros(&[d, h, w]));
        }
        self.conv_head.eval(&data.reflectance, &data.days)
    }
}

/// `atc(d) + ρ·coarse[d] + residual[d]` for every channel.
fn compose(atc: &AtcParamField, data: &ReconstructionDataset, residual: Option<&[f32]>) -> Result<GridStack> {
    let (d, h, w) = data.observed.dims();
    if (atc.height, atc.width) != (h, w) {
        return Err(Error::Dimension(format!(
            "model is {}x{}, data is {h}x{w}",
            atc.height, atc.width
        )));
    }
    let mut out = atc.eval_days(&data.days)?;
    let n = h * w;
    let coarse = data.coarse.data();
    par::for_each_chunk_mut(out.data_mut(), n, |k, plane| {
        for (i, v) in plane.iter_mut().enumerate() {
            let j = k * n + i;
            *v += atc.rho[i] * coarse[j];
            if let Some(r) = residual {
                *v += r[j];
            }
        }
    });
    debug_assert_eq!(out.channels(), d);
    Ok(out)
}

pub fn amplifier_forward(model: &AmplifierModel, data: &ReconstructionDataset) -> Result<GridStack> {
    data.validate()?;
    let head = model.head_output(data)?;
    compose(&model.atc, data, Some(head.data()))
}

/// Mean absolute error over cells where `mask` is true.
pub fn masked_l1_loss(pred: &GridStack, obs: &GridStack, mask: &[bool]) -> Result<f64> {
    if pred.dims() != obs.dims() || mask.len() != pred.data().len() {
        return Err(Error::Dimension(format!(
            "prediction {:?}, observation {:?}, mask of {}",
            pred.dims(),
            obs.dims(),
            mask.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&p, &o), &m) in pred.data().iter().zip(obs.data()).zip(mask) {
        if m {
            sum += (p as f64 - o as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("loss mask selects no cells".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_l1: f64,
    pub test_l1: Option<f64>,
}

/// Annual-cycle parameters and head residual captured at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplifierSnapshot {
    pub atc: AtcParamField,
    /// Head output for the training days (`days × H × W`); `None` for a disabled head.
    pub residual: Option<Tensor>,
}

impl AmplifierSnapshot {
    pub fn predict(&self, data: &ReconstructionDataset) -> Result<GridStack> {
        if let Some(r) = &self.residual {
            r.expect_shape(&[data.days.len(), data.height(), data.width()], "snapshot residual")?;
        }
        compose(&self.atc, data, self.residual.as_ref().map(|r| r.data()))
    }
}

pub type AmplifierEnsemble = SnapshotEnsemble<AmplifierSnapshot>;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AmplifierModel,
    pub ensemble: AmplifierEnsemble,
    pub log: Vec<EpochLog>,
}

struct AtcParams {
    store: ParamStore,
    t0: ParamId,
    amplitude: ParamId,
    phase: ParamId,
    rho: ParamId,
}

impl AtcParams {
    fn init(data: &ReconstructionDataset) -> Result<Self> {
        let (d, h, w) = data.observed.dims();
        let n = h * w;
        let mut t0 = vec![0.0f32; n];
        let mut amp = vec![10.0f32; n];
        for i in 0..n {
            let (mut sum, mut cnt, mut lo, mut hi) = (0.0f64, 0usize, f32::INFINITY, f32::NEG_INFINITY);
            for k in 0..d {
                let j = k * n + i;
                if data.observed.mask()[j] {
                    let v = data.observed.data()[j];
                    sum += v as f64;
                    cnt += 1;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if cnt > 0 {
                t0[i] = (sum / cnt as f64) as f32;
                if hi > lo {
                    amp[i] = 0.5 * (hi - lo);
                }
            } else {
                t0[i] = (0..d).map(|k| data.coarse.data()[k * n + i] as f64).sum::<f64>() as f32 / d as f32;
            }
        }
        let mut store = ParamStore::new();
        let t0 = store.add("atc.t0", Tensor::new(vec![n], t0)?)?;
        let amplitude = store.add("atc.amplitude", Tensor::new(vec![n], amp)?)?;
        let phase = store.add("atc.phase", Tensor::zeros(&[n]))?;
        let rho = store.add("atc.rho", Tensor::zeros(&[n]))?;
        Ok(Self {
            store,
            t0,
            amplitude,
            phase,
            rho,
        })
    }

    fn field(&self, h: usize, w: usize, n_doy: usize) -> Result<AtcParamField> {
        let v = |id| self.store.value(id).data().to_vec();
        AtcParamField::new(h, w, v(self.t0), v(self.amplitude), v(self.phase), v(self.rho), n_doy)
    }
}

fn split_mask(data: &ReconstructionDataset, fraction: f64, seed: u64) -> (Vec<bool>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D41_534B);
    let mut train = data.observed.mask().to_vec();
    let mut test = vec![false; train.len()];
    if fraction > 0.0 {
        for (tr, te) in train.iter_mut().zip(test.iter_mut()) {
            if *tr && rng.random::<f64>() < fraction {
                *tr = false;
                *te = true;
            }
        }
    }
    (train, test)
}

fn l1_on(pred: &[f32], obs: &[f32], mask: &[bool]) -> Option<f64> {
    let (mut s, mut n) = (0.0f64, 0usize);
    for ((&p, &o), &m) in pred.iter().zip(obs).zip(mask) {
        if m {
            s += (p as f64 - o as f64).abs();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Full-batch Adam on the masked L1 loss; one epoch is one update.
pub fn train_amplifier(data: &ReconstructionDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(data, config, true)
}

/// Same training with the convolutional head frozen at zero output.
pub fn atc_only_baseline(data: &ReconstructionDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(data, config, false)
}

fn train_impl(data: &ReconstructionDataset, config: &TrainConfig, head_enabled: bool) -> Result<TrainOutcome> {
    data.validate()?;
    config.validate()?;
    let (d, h, w) = data.observed.dims();
    let n = h * w;
    let (train_mask, test_mask) = split_mask(data, config.holdout_fraction, config.seed);
    let n_train = train_mask.iter().filter(|&&m| m).count();
    if n_train == 0 {
        return Err(Error::DegenerateInput("no valid observations to train on".into()));
    }
    let has_test = test_mask.iter().any(|&m| m);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut atc = AtcParams::init(data)?;
    let mut head = ConvHead::new(data.n_doy, &mut rng)?;
    let refl = data.reflectance_tensor();
    let snapshot_epochs = config.snapshot_epochs();
    let mut next_snapshot = 0usize;
    let mut pending = false;
    let mut snapshots = Vec::with_capacity(config.snapshot_count);
    let mut log = Vec::with_capacity(config.epochs);

    let angles: Vec<f64> = data.days.iter().map(|&t| 2.0 * PI * t as f64 / data.n_doy as f64).collect();
    let obs = data.observed.data();
    let coarse = data.coarse.data();
    let inv_n = 1.0 / n_train as f64;

    for epoch in 1..=config.epochs + 1 {
        let last_pass = epoch == config.epochs + 1;
        if last_pass && !pending {
            break;
        }
        let mut tape = Tape::new();
        let head_var = if head_enabled {
            let x = tape.input(refl.clone());
            Some(head.forward(&mut tape, x, &data.days)?)
        } else {
            None
        };
        let residual = head_var.map(|v| tape.value(v).data());

        let t0 = atc.store.value(atc.t0).data();
        let amp = atc.store.value(atc.amplitude).data();
        let phase = atc.store.value(atc.phase).data();
        let rho = atc.store.value(atc.rho).data();
        let mut pred = vec![0.0f32; d * n];
        let mut sin_buf = vec![0.0f32; d * n];
        let mut cos_buf = vec![0.0f32; d * n];
        {
            let planes: Vec<DayPlanes> = pred
                .chunks_mut(n)
                .zip(sin_buf.chunks_mut(n))
                .zip(cos_buf.chunks_mut(n))
                .enumerate()
                .map(|(k, ((p, s), c))| (k, p, s, c))
                .collect();
            let work = |(k, p, s, c): (usize, &mut [f32], &mut [f32], &mut [f32])| {
                for i in 0..n {
                    let (sn, cs) = (angles[k] + phase[i] as f64).sin_cos();
                    s[i] = sn as f32;
                    c[i] = cs as f32;
                    let j = k * n + i;
                    let mut v = (t0[i] as f64 + amp[i] as f64 * sn) as f32 + rho[i] * coarse[j];
                    if let Some(r) = residual {
                        v += r[j];
                    }
                    p[i] = v;
                }
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                planes.into_par_iter().for_each(work);
            }
            #[cfg(not(feature = "parallel"))]
            planes.into_iter().for_each(work);
        }

        if pending {
            snapshots.push(AmplifierSnapshot {
                atc: atc.field(h, w, data.n_doy)?,
                residual: head_var.map(|v| tape.value(v).clone()),
            });
            pending = false;
        }
        if last_pass {
            break;
        }

        let train_l1 = l1_on(&pred, obs, &train_mask).expect("non-empty train mask");
        if !train_l1.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_l1 });
        }
        let test_l1 = if has_test { l1_on(&pred, obs, &test_mask) } else { None };
        log.push(EpochLog { epoch, train_l1, test_l1 });
        if epoch == 1 || epoch % 50 == 0 {
            debug!("epoch {epoch}: train L1 {train_l1:.4}");
        }

        // d loss / d pred, then per-pixel annual-cycle gradients.
        let seed: Vec<f32> = pred
            .iter()
            .zip(obs)
            .zip(&train_mask)
            .map(|((&p, &o), &m)| {
                if m && p != o {
                    ((p - o).signum() as f64 * inv_n) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let grads = par::map_range(n, |i| {
            let (mut g0, mut ga, mut gp, mut gr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for k in 0..d {
                let j = k * n + i;
                let g = seed[j] as f64;
                if g != 0.0 {
                    g0 += g;
                    ga += g * sin_buf[j] as f64;
                    gp += g * amp[i] as f64 * cos_buf[j] as f64;
                    gr += g * coarse[j] as f64;
                }
            }
            [g0 as f32, ga as f32, gp as f32, gr as f32]
        });
        for (slot, id) in [atc.t0, atc.amplitude, atc.phase, atc.rho].into_iter().enumerate() {
            let g: Vec<f32> = grads.iter().map(|g| g[slot]).collect();
            atc.store.set_grad(id, Tensor::new(vec![n], g)?)?;
        }
        atc.store.adam_step(config.lr)?;

        if let Some(v) = head_var {
            tape.backward_from(v, Tensor::new(vec![d, h, w], seed)?, &mut head.store)?;
            head.store.adam_step(config.head_lr)?;
        }

        if next_snapshot < snapshot_epochs.len() && snapshot_epochs[next_snapshot] == epoch {
            pending = true;
            next_snapshot += 1;
        }
    }

    let mut field = atc.field(h, w, data.n_doy)?;
    field.canonicalize();
    let mut model = AmplifierModel::new(field, head, data.hour, data.year)?;
    model.head_enabled = head_enabled;
    Ok(TrainOutcome {
        model,
        ensemble: SnapshotEnsemble::uniform(snapshots)?,
        log,
    })
}

/// A trained tile and its position in the full scene.
#[derive(Debug, Clone)]
pub struct TileOutcome {
    pub y0: usize,
    pub x0: usize,
    pub outcome: TrainOutcome,
}

/// Top-left corners and sizes of the tiles covering an `h × w` scene.
pub fn tile_layout(h: usize, w: usize, tile: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in (0..h).step_by(tile) {
        for x0 in (0..w).step_by(tile) {
            out.push((y0, x0, tile.min(h - y0), tile.min(w - x0)));
        }
    }
    out
}

/// Trains independent models on `config.tile`-sized tiles and stitches their
/// snapshots into one scene-wide ensemble.
pub fn train_tiled(
    data: &ReconstructionDataset,
    config: &TrainConfig,
    head_enabled: bool,
) -> Result<(Vec<TileOutcome>, AmplifierEnsemble)> {
    data.validate()?;
    config.validate()?;
    let layout = tile_layout(data.height(), data.width(), config.tile);
    let results = par::map_slice(&layout, |&(y0, x0, th, tw)| -> Result<TileOutcome> {
        let tile = data.crop(y0, x0, th, tw)?;
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add((y0 * data.width() + x0) as u64),
            ..config.clone()
        };
        let outcome = train_impl(&tile, &cfg, head_enabled)?;
        Ok(TileOutcome { y0, x0, outcome })
    });
    let tiles: Vec<TileOutcome> = results.into_iter().collect::<Result<_>>()?;
    let ensemble = stitch(&tiles, data)?;
    Ok((tiles, ensemble))
}

fn stitch(tiles: &[TileOutcome], data: &ReconstructionDataset) -> Result<AmplifierEnsemble> {
    if tiles.len() == 1 {
        return Ok(tiles[0].outcome.ensemble.clone());
    }
    let (d, h, w) = data.observed.dims();
    let k = tiles[0].outcome.ensemble.len();
    let mut snapshots = Vec::with_capacity(k);
    for s in 0..k {
        let mut atc_grid = GridStack::filled(4, h, w, 0.0);
        let mut residual = tiles[0].outcome.ensemble.snapshots()[s]
            .residual
            .as_ref()
            .map(|_| GridStack::filled(d, h, w, 0.0));
        for t in tiles {
            let snap = &t.outcome.ensemble.snapshots()[s];
            atc_grid.paste(&snap.atc.to_grid(), t.y0, t.x0)?;
            if let (Some(dst), Some(src)) = (residual.as_mut(), &snap.residual) {
                let sh = src.shape();
                let g = GridStack::new(sh[0], sh[1], sh[2], src.data().to_vec())?;
                dst.paste(&g, t.y0, t.x0)?;
            }
        }
        snapshots.push(AmplifierSnapshot {
            atc: AtcParamField::from_grid(&atc_grid, data.n_doy)?,
            residual: residual.map(|g| Tensor::new(vec![d, h, w], g.data().to_vec())).transpose()?,
        });
    }
    SnapshotEnsemble::uniform(snapshots)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub mean: GridStack,
    pub lower: GridStack,
    pub upper: GridStack,
    /// Raw (uncalibrated) half-widths below and above the mean.
    pub d_lower: GridStack,
    pub d_upper: GridStack,
    pub interval: IntervalCalibration,
    pub calibration: CalibrationOutcome,
}

/// Ensemble mean and calibrated interval for every cell, observed or not.
/// λ is calibrated on the dataset's valid observations.
pub fn reconstruct(ensemble: &AmplifierEnsemble, data: &ReconstructionDataset, coverage: f64) -> Result<Reconstruction> {
    data.validate()?;
    let k = ensemble.len();
    let interval = IntervalCalibration::for_ensemble_size(k)?;
    let (d, h, w) = data.observed.dims();
    let n = h * w;
    let weights = ensemble.weights();

    // Per day: mean and raw half-widths of every pixel.
    let planes = par::map_range(d, |c| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut preds = vec![0.0f64; k * n];
        for (s, snap) in ensemble.snapshots().iter().enumerate() {
            let atc = &snap.atc;
            if (atc.height, atc.width) != (h, w) {
                return Err(Error::Dimension("snapshot does not match the dataset grid".into()));
            }
            let angle = 2.0 * PI * data.days[c] as f64 / atc.n_doy as f64;
            let coarse = data.coarse.channel(c);
            let residual = match &snap.residual {
                Some(r) => {
                    r.expect_shape(&[d, h, w], "snapshot residual")?;
                    Some(&r.data()[c * n..(c + 1) * n])
                }
                None => None,
            };
            for i in 0..n {
                let mut v = (atc.t0[i] as f64 + atc.amplitude[i] as f64 * (angle + atc.phase[i] as f64).sin()) as f32
                    + atc.rho[i] * coarse[i];
                if let Some(r) = residual {
                    v += r[i];
                }
                preds[i * k + s] = v as f64;
            }
        }
        let mut mean = vec![0.0f64; n];
        let mut dl = vec![0.0f64; n];
        let mut du = vec![0.0f64; n];
        for i in 0..n {
            let row = &mut preds[i * k..(i + 1) * k];
            let m: f64 = row.iter().zip(weights).map(|(p, w)| p * w).sum();
            let (l, u) = raw_interval_in_place(row, m, interval.lower_rank, interval.upper_rank)?;
            mean[i] = m;
            dl[i] = l;
            du[i] = u;
        }
        Ok((mean, dl, du))
    });
    let planes: Vec<_> = planes.into_iter().collect::<Result<_>>()?;

    let mut points = Vec::new();
    for (c, (mean, dl, du)) in planes.iter().enumerate() {
        for i in 0..n {
            if data.observed.mask()[c * n + i] {
                points.push(IntervalPoint {
                    mean: mean[i],
                    d_lower: dl[i],
                    d_upper: du[i],
                    obs: data.observed.data()[c * n + i] as f64,
                });
            }
        }
    }
    let calibration = calibrate_lambda(&points, coverage)?;
    let lambda = calibration.lambda;
    let build = |f: &dyn Fn(f64, f64, f64) -> f64| {
        let mut v = Vec::with_capacity(d * n);
        for (mean, dl, du) in &planes {
            v.extend((0..n).map(|i| f(mean[i], dl[i], du[i]) as f32));
        }
        GridStack::new(d, h, w, v)
    };
    Ok(Reconstruction {
        mean: build(&|m, _, _| m)?,
        lower: build(&|m, l, _| m - lambda * l)?,
        upper: build(&|m, _, u| m + lambda * u)?,
        d_lower: build(&|_, l, _| l)?,
        d_upper: build(&|_, _, u| u)?,
        interval: IntervalCalibration {
            lambda,
            target_coverage: coverage,
            ..interval
        },
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(d: usize, h: usize, w: usize, seed: u64) -> ReconstructionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = GridStack::from_fn(d, h, w, |_, _, _| rng.random_range(-5.0..25.0));
        let coarse = GridStack::from_fn(d, h, w, |c, y, _| c as f32 * 0.5 - y as f32);
        let refl = GridStack::from_fn(5, h, w, |c, y, x| 0.05 * c as f32 + 0.01 * (y * w + x) as f32 % 0.3);
        ReconstructionDataset {
            observed: obs,
            coarse,
            reflectance: refl,
            days: (0..d).map(|k| 3 * k).collect(),
            n_doy: 365,
            hour: 12,
            year: 2019,
        }
    }

    #[test]
    fn zero_head_and_rho_gives_annual_cycle() {
        let data = dataset(4, 5, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let atc = AtcParamField::constant(5, 6, 12.0, 8.0, 0.3, 0.0, 365).unwrap();
        let model = AmplifierModel::new(atc.clone(), ConvHead::new(365, &mut rng).unwrap(), 12, 2019).unwrap();
        let out = amplifier_forward(&model, &data).unwrap();
        assert_eq!(out, atc.eval_days(&data.days).unwrap());
    }

    #[test]
    fn unit_rho_passes_coarse_through() {
        let data = dataset(3, 4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let atc = AtcParamField::constant(4, 4, 0.0, 0.0, 0.0, 1.0, 365).unwrap();
        let model = AmplifierModel::new(atc, ConvHead::new(365, &mut rng).unwrap(), 12, 2019).unwrap();
        assert_eq!(amplifier_forward(&model, &data).unwrap().data(), data.coarse.data());
    }

    #[test]
    fn masked_l1_cases() {
        let data = dataset(2, 3, 3, 5);
        let obs = &data.observed;
        let all = vec![true; obs.data().len()];
        assert_eq!(masked_l1_loss(obs, obs, &all).unwrap(), 0.0);
        let mut shifted = obs.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 2.0);
        assert!((masked_l1_loss(&shifted, obs, &all).unwrap() - 2.0).abs() < 1e-6);
        let none = vec![false; all.len()];
        assert!(matches!(masked_l1_loss(obs, obs, &none), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn default_config_and_window() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr), (600, 0.1));
        let e = c.snapshot_epochs();
        assert_eq!((e.len(), e[0], e[199]), (200, 201, 599));
        c.validate().unwrap();
        let short = TrainConfig { epochs: 200, ..c };
        assert!(matches!(short.validate(), Err(Error::Config(m)) if m.contains("unreachable")));
    }

    #[test]
    fn tiles_cover_scene() {
        let t = tile_layout(10, 7, 4);
        assert_eq!(t.len(), 6);
        assert_eq!(t.iter().map(|&(_, _, h, w)| h * w).sum::<usize>(), 70);
    }
}
