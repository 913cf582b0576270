//! End-to-end batch commands over scene directories. Each command validates
//! its configuration before writing, and all outputs are written atomically.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::air_transformer::{
    partition_by_month, predict_interval_map, predict_map, station_samples, train_air_transformer, transform_forward,
    AirSample, AirTrainConfig, AirTransformerModel, FeatureNorms, MlrModel, TrainTestSplit,
};
use crate::amplifier::{reconstruct, train_tiled, AmplifierEnsemble, AmplifierSnapshot, ReconstructionDataset, TrainConfig};
use crate::atc::{days_in_year, AtcParamField};
use crate::ensemble::SnapshotEnsemble;
use crate::error::{Error, Result};
use crate::features::{nearest_pixel, AuxGrids, StationRecord, DYNAMIC_LAYERS, N_FEATURES, STATIC_LAYERS};
use crate::grid::GridStack;
use crate::io::{
    config_required, config_value, encode_calibration, encode_report, encode_training_log, load_params_into,
    read_config, read_grid, read_params, read_stations, render_map, write_atomic, write_config, write_grid,
    write_params, write_stations, CalibrationRow, ColorRamp,
};
use crate::metrics::{self, breakdown_report, BinWidths, BreakdownKey, EvalRecord};
use crate::synth::{generate_scene, timestamp_for, AirTransformTruth, SceneSpec};
use crate::tensor::Tensor;

/// Training and calibration settings shared by the commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub amplifier: TrainConfig,
    pub air: AirTrainConfig,
    /// Target coverage of the calibrated intervals.
    pub coverage: f64,
    /// Fraction of stations held out from Air-Transformer training.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            amplifier: TrainConfig::default(),
            air: AirTrainConfig::default(),
            coverage: 0.95,
            test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    /// Reads `key = value` overrides on top of the defaults. Recognized keys:
    /// epochs, lr, head_lr, snapshot_start, snapshot_every, snapshot_count,
    /// holdout_fraction, tile, air_epochs, air_lr, air_batch_size, coverage,
    /// test_fraction, seed.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<(Self, Option<u64>)> {
        const KNOWN: [&str; 14] = [
            "epochs",
            "lr",
            "head_lr",
            "snapshot_start",
            "snapshot_every",
            "snapshot_count",
            "holdout_fraction",
            "tile",
            "air_epochs",
            "air_lr",
            "air_batch_size",
            "coverage",
            "test_fraction",
            "seed",
        ];
        if let Some(k) = map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let mut c = Self::default();
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = config_value(map, $key)? {
                    $field = v;
                }
            };
        }
        set!(c.amplifier.epochs, "epochs");
        set!(c.amplifier.lr, "lr");
        set!(c.amplifier.head_lr, "head_lr");
        set!(c.amplifier.snapshot_start, "snapshot_start");
        set!(c.amplifier.snapshot_every, "snapshot_every");
        set!(c.amplifier.snapshot_count, "snapshot_count");
        set!(c.amplifier.holdout_fraction, "holdout_fraction");
        set!(c.amplifier.tile, "tile");
        set!(c.air.epochs, "air_epochs");
        set!(c.air.lr, "air_lr");
        set!(c.air.batch_size, "air_batch_size");
        set!(c.coverage, "coverage");
        set!(c.test_fraction, "test_fraction");
        Ok((c, config_value(map, "seed")?))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.amplifier.seed = seed;
        self.air.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.amplifier.validate()?;
        self.air.validate()?;
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::Config(format!("coverage {} outside (0, 1)", self.coverage)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test fraction {} outside [0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

/// Parses a scene description; `seed` is mandatory (in the file or as override).
pub fn scene_spec_from_map(map: &BTreeMap<String, String>, seed: Option<u64>) -> Result<SceneSpec> {
    let mut s = SceneSpec::default();
    macro_rules! set {
        ($field:expr, $key:literal) => {
            if let Some(v) = config_value(map, $key)? {
                $field = v;
            }
        };
    }
    set!(s.height, "height");
    set!(s.width, "width");
    set!(s.year, "year");
    set!(s.first_day, "first_day");
    set!(s.n_days, "n_days");
    set!(s.hour, "hour");
    set!(s.t0_range.0, "t0_min");
    set!(s.t0_range.1, "t0_max");
    set!(s.amplitude_range.0, "amplitude_min");
    set!(s.amplitude_range.1, "amplitude_max");
    set!(s.phase_range.0, "phase_min");
    set!(s.phase_range.1, "phase_max");
    set!(s.rho_range.0, "rho_min");
    set!(s.rho_range.1, "rho_max");
    set!(s.weather_sigma, "weather_sigma");
    set!(s.texture_amplitude, "texture_amplitude");
    set!(s.noise_sigma, "noise_sigma");
    set!(s.cloud_fraction, "cloud_fraction");
    set!(s.cloud_blob_scale, "cloud_blob_scale");
    set!(s.coarse_factor, "coarse_factor");
    set!(s.n_stations, "n_stations");
    set!(s.station_noise, "station_noise");
    set!(s.origin.0, "origin_lat");
    set!(s.origin.1, "origin_lon");
    set!(s.pixel_deg, "pixel_deg");
    if let Some(t) = map.get("air_transform_truth") {
        s.air_transform_truth = AirTransformTruth::parse(t)?;
    }
    s.seed = match (seed, config_value::<u64>(map, "seed")?) {
        (Some(v), _) | (None, Some(v)) => v,
        (None, None) => return Err(Error::Config("a seed is required (config key `seed` or --seed)".into())),
    };
    s.validate()?;
    Ok(s)
}

fn scene_spec_to_map(s: &SceneSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("height", s.height.to_string());
    put("width", s.width.to_string());
    put("year", s.year.to_string());
    put("first_day", s.first_day.to_string());
    put("n_days", s.n_days.to_string());
    put("n_doy", s.n_doy().to_string());
    put("hour", s.hour.to_string());
    put("t0_min", s.t0_range.0.to_string());
    put("t0_max", s.t0_range.1.to_string());
    put("amplitude_min", s.amplitude_range.0.to_string());
    put("amplitude_max", s.amplitude_range.1.to_string());
    put("phase_min", s.phase_range.0.to_string());
    put("phase_max", s.phase_range.1.to_string());
    put("rho_min", s.rho_range.0.to_string());
    put("rho_max", s.rho_range.1.to_string());
    put("weather_sigma", s.weather_sigma.to_string());
    put("texture_amplitude", s.texture_amplitude.to_string());
    put("noise_sigma", s.noise_sigma.to_string());
    put("cloud_fraction", s.cloud_fraction.to_string());
    put("cloud_blob_scale", s.cloud_blob_scale.to_string());
    put("coarse_factor", s.coarse_factor.to_string());
    put("n_stations", s.n_stations.to_string());
    put("station_noise", s.station_noise.to_string());
    put("origin_lat", s.origin.0.to_string());
    put("origin_lon", s.origin.1.to_string());
    put("pixel_deg", s.pixel_deg.to_string());
    put("air_transform_truth", s.air_transform_truth.name());
    put("seed", s.seed.to_string());
    m
}

/// Temporal layout of a stack: which days of which year at which hour.
#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    pub year: i32,
    pub hour: u32,
    pub days: Vec<usize>,
}

impl StackMeta {
    fn insert_into(&self, m: &mut BTreeMap<String, String>) {
        m.insert("year".into(), self.year.to_string());
        m.insert("hour".into(), self.hour.to_string());
        m.insert(
            "days".into(),
            self.days.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        );
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let days = match m.get("days") {
            Some(list) => list
                .split_whitespace()
                .map(|d| d.parse().map_err(|_| Error::Config(format!("bad day index {d:?}"))))
                .collect::<Result<Vec<usize>>>()?,
            None => {
                let first: usize = config_required(m, "first_day")?;
                let n: usize = config_required(m, "n_days")?;
                (first..first + n).collect()
            }
        };
        Ok(Self {
            year: config_required(m, "year")?,
            hour: config_required(m, "hour")?,
            days,
        })
    }

    pub fn model_id(&self) -> String {
        format!("hour{:02}_year{}", self.hour, self.year)
    }
}

fn grid_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tgrd"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a synthetic scene in the same layout real inputs use.
pub fn cmd_synth(spec: &SceneSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let scene = generate_scene(spec)?;
    ensure_dir(out)?;
    write_grid(&scene.observed_surf, &grid_path(out, "observed"))?;
    write_grid(&scene.coarse, &grid_path(out, "coarse"))?;
    write_grid(&scene.reflectance, &grid_path(out, "reflectance"))?;
    write_grid(&scene.truth_surf, &grid_path(out, "truth_surf"))?;
    write_grid(&scene.truth_atc.to_grid(), &grid_path(out, "truth_atc"))?;
    for name in STATIC_LAYERS.iter().chain(DYNAMIC_LAYERS.iter()) {
        write_grid(scene.aux.layer(name)?, &grid_path(out, &format!("aux_{name}")))?;
    }
    write_stations(&scene.stations, &out.join("stations.csv"))?;
    let truth: Vec<StationRecord> = scene
        .stations
        .iter()
        .zip(&scene.stations_truth)
        .map(|(r, &t)| StationRecord {
            t_air: t as f64,
            ..r.clone()
        })
        .collect();
    write_stations(&truth, &out.join("stations_truth.csv"))?;
    let mut meta = scene_spec_to_map(spec);
    StackMeta {
        year: spec.year,
        hour: spec.hour,
        days: scene.days.clone(),
    }
    .insert_into(&mut meta);
    write_config(&meta, &out.join("scene.cfg"))?;
    info!("wrote {}x{} scene with {} days to {}", spec.height, spec.width, spec.n_days, out.display());
    Ok(())
}

pub fn load_stack_meta(dir: &Path, file: &str) -> Result<StackMeta> {
    StackMeta::from_map(&read_config(&dir.join(file))?)
}

/// Observed, coarse and reflectance stacks of a scene directory.
pub fn load_dataset(scene: &Path) -> Result<ReconstructionDataset> {
    let meta = load_stack_meta(scene, "scene.cfg")?;
    let data = ReconstructionDataset {
        observed: read_grid(&grid_path(scene, "observed"))?,
        coarse: read_grid(&grid_path(scene, "coarse"))?,
        reflectance: read_grid(&grid_path(scene, "reflectance"))?,
        n_doy: days_in_year(meta.year),
        days: meta.days,
        hour: meta.hour,
        year: meta.year,
    };
    data.validate()?;
    Ok(data)
}

/// Auxiliary layers present in a scene directory; absent layers surface later
/// as data errors naming the layer.
pub fn load_aux(scene: &Path) -> Result<AuxGrids> {
    let reflectance = read_grid(&grid_path(scene, "aux_reflectance"))
        .or_else(|_| read_grid(&grid_path(scene, "reflectance")))?;
    let mut aux = AuxGrids::new(reflectance.height(), reflectance.width());
    aux.insert("reflectance", reflectance)?;
    for name in STATIC_LAYERS.iter().chain(DYNAMIC_LAYERS.iter()).skip(1) {
        let p = grid_path(scene, &format!("aux_{name}"));
        if p.exists() {
            aux.insert(name, read_grid(&p)?)?;
        }
    }
    Ok(aux)
}

fn write_ensemble(ens: &AmplifierEnsemble, meta: &StackMeta, n_doy: usize, dir: &Path) -> Result<()> {
    let snaps = ens.snapshots();
    let first = &snaps[0];
    let (h, w) = (first.atc.height, first.atc.width);
    let d = meta.days.len();
    let has_residual = first.residual.is_some();
    let per = 4 + if has_residual { d } else { 0 };
    let mut data = Vec::with_capacity(snaps.len() * per * h * w);
    for s in snaps {
        data.extend_from_slice(s.atc.to_grid().data());
        if let Some(r) = &s.residual {
            data.extend_from_slice(r.data());
        }
    }
    write_grid(&GridStack::new(snaps.len() * per, h, w, data)?, &grid_path(dir, "ensemble"))?;
    let mut cfg = BTreeMap::new();
    meta.insert_into(&mut cfg);
    cfg.insert("snapshots".into(), snaps.len().to_string());
    cfg.insert("residual".into(), has_residual.to_string());
    cfg.insert("n_doy".into(), n_doy.to_string());
    write_config(&cfg, &dir.join("ensemble.cfg"))
}

pub fn read_ensemble(dir: &Path) -> Result<(AmplifierEnsemble, StackMeta)> {
    let cfg = read_config(&dir.join("ensemble.cfg"))?;
    let meta = StackMeta::from_map(&cfg)?;
    let k: usize = config_required(&cfg, "snapshots")?;
    let has_residual: bool = config_required(&cfg, "residual")?;
    let n_doy: usize = config_required(&cfg, "n_doy")?;
    let grid = read_grid(&grid_path(dir, "ensemble"))?;
    let d = meta.days.len();
    let per = 4 + if has_residual { d } else { 0 };
    if grid.channels() != k * per {
        return Err(Error::Dimension(format!(
            "ensemble file has {} channels, expected {}",
            grid.channels(),
            k * per
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let plane = h * w;
    let mut snaps = Vec::with_capacity(k);
    for s in 0..k {
        let base = s * per * plane;
        let atc_grid = GridStack::new(4, h, w, grid.data()[base..base + 4 * plane].to_vec())?;
        let residual = if has_residual {
            let start = base + 4 * plane;
            Some(Tensor::new(vec![d, h, w], grid.data()[start..start + d * plane].to_vec())?)
        } else {
            None
        };
        snaps.push(AmplifierSnapshot {
            atc: AtcParamField::from_grid(&atc_grid, n_doy)?,
            residual,
        });
    }
    Ok((SnapshotEnsemble::uniform(snaps)?, meta))
}

/// Trains the amplifier (or the ATC-only baseline) on every tile of a scene.
/// Writes the final fields, per-tile head parameters, the stitched snapshot
/// ensemble and a training log averaged over tiles.
pub fn cmd_train_amplifier(scene: &Path, config: &RunConfig, head_enabled: bool, out: &Path) -> Result<()> {
    config.validate()?;
    let data = load_dataset(scene)?;
    let (tiles, ensemble) = train_tiled(&data, &config.amplifier, head_enabled)?;
    ensure_dir(out)?;
    let meta = StackMeta {
        year: data.year,
        hour: data.hour,
        days: data.days.clone(),
    };
    let mut atc = GridStack::filled(4, data.height(), data.width(), 0.0);
    let mut log = tiles[0].outcome.log.clone();
    let total = (data.height() * data.width()) as f64;
    for e in log.iter_mut() {
        e.train_l1 = 0.0;
        e.test_l1 = e.test_l1.map(|_| 0.0);
    }
    for (k, t) in tiles.iter().enumerate() {
        atc.paste(&t.outcome.model.atc.to_grid(), t.y0, t.x0)?;
        if head_enabled {
            write_params(&t.outcome.model.conv_head.store, &out.join(format!("head_tile{k}.params")))?;
        }
        let share = (t.outcome.model.atc.pixels()) as f64 / total;
        for (acc, e) in log.iter_mut().zip(&t.outcome.log) {
            acc.train_l1 += share * e.train_l1;
            if let (Some(a), Some(b)) = (acc.test_l1.as_mut(), e.test_l1) {
                *a += share * b;
            }
        }
    }
    write_grid(&atc, &grid_path(out, "model_atc"))?;
    write_ensemble(&ensemble, &meta, data.n_doy, out)?;
    write_atomic(&out.join("train_log.csv"), encode_training_log(&log).as_bytes())?;
    info!("trained {} tile(s); final train L1 {:.4}", tiles.len(), log.last().map(|l| l.train_l1).unwrap_or(f64::NAN));
    Ok(())
}

/// Ensemble mean, calibrated bounds and raw half-widths for a scene.
pub fn cmd_reconstruct(model: &Path, scene: &Path, coverage: f64, out: &Path) -> Result<()> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0, 1)")));
    }
    let data = load_dataset(scene)?;
    let (ensemble, meta) = read_ensemble(model)?;
    if meta.days != data.days || meta.year != data.year || meta.hour != data.hour {
        return Err(Error::Dimension("ensemble was trained on a different hour, year or day set".into()));
    }
    let rec = reconstruct(&ensemble, &data, coverage)?;
    ensure_dir(out)?;
    write_grid(&rec.mean, &grid_path(out, "mean"))?;
    write_grid(&rec.lower, &grid_path(out, "lower"))?;
    write_grid(&rec.upper, &grid_path(out, "upper"))?;
    write_grid(&rec.d_lower, &grid_path(out, "d_lower"))?;
    write_grid(&rec.d_upper, &grid_path(out, "d_upper"))?;
    let row = CalibrationRow {
        model_id: meta.model_id(),
        lambda: rec.calibration.lambda,
        raw_coverage: rec.calibration.raw_coverage,
        calibrated_coverage: rec.calibration.calibrated_coverage,
        n_points: rec.calibration.n_points,
    };
    write_atomic(&out.join("calibration.csv"), encode_calibration(&[row]).as_bytes())?;
    let mut cfg = BTreeMap::new();
    meta.insert_into(&mut cfg);
    cfg.insert("lambda".into(), format!("{:?}", rec.calibration.lambda));
    write_config(&cfg, &out.join("recon.cfg"))?;
    info!(
        "reconstructed {:?}; lambda {:.4}, calibrated coverage {:.4}",
        rec.mean.dims(),
        rec.calibration.lambda,
        rec.calibration.calibrated_coverage
    );
    Ok(())
}

fn norms_to_map(model: &AirTransformerModel, m: &mut BTreeMap<String, String>) {
    m.insert("month".into(), model.month.to_string());
    m.insert("year".into(), model.year.to_string());
    let n = &model.feature_norms;
    for i in 0..N_FEATURES {
        m.insert(format!("feature_mean_{i:02}"), format!("{:?}", n.mean[i]));
        m.insert(format!("feature_std_{i:02}"), format!("{:?}", n.std[i]));
    }
    m.insert("target_mean".into(), format!("{:?}", n.target_mean));
    m.insert("target_std".into(), format!("{:?}", n.target_std));
}

pub fn write_air_model(model: &AirTransformerModel, dir: &Path) -> Result<()> {
    let stem = format!("air_{}_{:02}", model.year, model.month);
    write_params(&model.params, &dir.join(format!("{stem}.params")))?;
    let mut m = BTreeMap::new();
    norms_to_map(model, &mut m);
    write_config(&m, &dir.join(format!("{stem}.cfg")))
}

pub fn read_air_model(dir: &Path, year: i32, month: u32) -> Result<AirTransformerModel> {
    let stem = format!("air_{year}_{month:02}");
    let m = read_config(&dir.join(format!("{stem}.cfg")))?;
    let mut norms = FeatureNorms::identity();
    for i in 0..N_FEATURES {
        norms.mean[i] = config_required(&m, &format!("feature_mean_{i:02}"))?;
        norms.std[i] = config_required(&m, &format!("feature_std_{i:02}"))?;
    }
    norms.target_mean = config_required(&m, "target_mean")?;
    norms.target_std = config_required(&m, "target_std")?;
    let mut model = AirTransformerModel::new(config_required(&m, "month")?, config_required(&m, "year")?, norms, 0)?;
    load_params_into(&mut model.params, read_params(&dir.join(format!("{stem}.params")))?)?;
    Ok(model)
}

fn split_to_csv(split: &TrainTestSplit) -> String {
    let mut s = String::from("station_id,set\n");
    for id in &split.train_stations {
        s.push_str(&format!("{id},train\n"));
    }
    for id in &split.test_stations {
        s.push_str(&format!("{id},test\n"));
    }
    s
}

pub fn read_split(path: &Path) -> Result<TrainTestSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        match line.split_once(',') {
            Some((id, "train")) => train.insert(id.to_string()),
            Some((id, "test")) => test.insert(id.to_string()),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected `station_id,train|test`, found {line:?}"),
                })
            }
        };
    }
    TrainTestSplit::new(train, test)
}

/// One Air-Transformer per (month, year) on the reconstructed surface
/// sampled at station pixels; 20% of stations are held out by default.
pub fn cmd_train_air(recon: &Path, scene: &Path, stations: &Path, config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let meta = load_stack_meta(recon, "recon.cfg")?;
    let mean = read_grid(&grid_path(recon, "mean"))?;
    let aux = load_aux(scene)?;
    let records = read_stations(stations, false)?;
    let samples = station_samples(&records, &mean, &aux, &meta.days, meta.year, meta.hour)?;
    let split = TrainTestSplit::station_level(
        records.iter().map(|r| r.station_id.as_str()),
        config.test_fraction,
        config.air.seed,
    )?;
    let groups = partition_by_month(&samples);
    if groups.is_empty() {
        return Err(Error::Data("no station records match the reconstructed stack".into()));
    }
    let mut trained = Vec::new();
    for ((year, month), group) in &groups {
        let outcome = train_air_transformer(group, &split, &config.air)?;
        info!(
            "air model {year}-{month:02}: final train L1 {:.4}",
            outcome.log.last().map(|l| l.train_l1).unwrap_or(f64::NAN)
        );
        trained.push(outcome);
    }
    ensure_dir(out)?;
    for outcome in &trained {
        let m = &outcome.model;
        write_air_model(m, out)?;
        let mut log = String::from("epoch,train_l1,test_l1\n");
        for e in &outcome.log {
            log.push_str(&format!(
                "{},{:.6},{}\n",
                e.epoch,
                e.train_l1,
                e.test_l1.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
            ));
        }
        write_atomic(&out.join(format!("air_{}_{:02}_log.csv", m.year, m.month)), log.as_bytes())?;
    }
    write_atomic(&out.join("split.csv"), split_to_csv(&split).as_bytes())?;
    Ok(())
}

fn channels_by_month(meta: &StackMeta) -> BTreeMap<(i32, u32), Vec<usize>> {
    let mut out: BTreeMap<(i32, u32), Vec<usize>> = BTreeMap::new();
    for (c, &d) in meta.days.iter().enumerate() {
        let ts = timestamp_for(meta.year, d, meta.hour);
        out.entry(crate::air_transformer::month_key(&ts)).or_default().push(c);
    }
    out
}

/// Air temperature and propagated interval maps for every channel of a
/// reconstruction, each day handled by its month's model.
pub fn cmd_predict(air: &Path, recon: &Path, scene: &Path, out: &Path) -> Result<()> {
    let meta = load_stack_meta(recon, "recon.cfg")?;
    let rcfg = read_config(&recon.join("recon.cfg"))?;
    let lambda: f64 = config_required(&rcfg, "lambda")?;
    let mean = read_grid(&grid_path(recon, "mean"))?;
    let d_lower = read_grid(&grid_path(recon, "d_lower"))?;
    let d_upper = read_grid(&grid_path(recon, "d_upper"))?;
    d_lower.expect_dims(mean.dims(), "d_lower")?;
    d_upper.expect_dims(mean.dims(), "d_upper")?;
    let aux = load_aux(scene)?;
    aux.validate(mean.channels())?;
    let (d, h, w) = mean.dims();
    let mut point = GridStack::filled(d, h, w, 0.0);
    let mut low = point.clone();
    let mut upp = point.clone();
    for ((year, month), channels) in channels_by_month(&meta) {
        let model = read_air_model(air, year, month)?;
        let sub_aux = select_aux_channels(&aux, &channels)?;
        let m = mean.select_channels(&channels)?;
        let p = predict_map(&model, &m, &sub_aux, meta.hour)?;
        let (lo, hi) = predict_interval_map(
            &model,
            &m,
            &d_lower.select_channels(&channels)?,
            &d_upper.select_channels(&channels)?,
            lambda,
            &sub_aux,
            meta.hour,
        )?;
        for (k, &c) in channels.iter().enumerate() {
            for (dst, src) in [(&mut point, &p), (&mut low, &lo), (&mut upp, &hi)] {
                let n = h * w;
                dst.data_mut()[c * n..(c + 1) * n].copy_from_slice(src.channel(k));
            }
        }
    }
    ensure_dir(out)?;
    write_grid(&point, &grid_path(out, "air_mean"))?;
    write_grid(&low, &grid_path(out, "air_lower"))?;
    write_grid(&upp, &grid_path(out, "air_upper"))?;
    let mut cfg = BTreeMap::new();
    meta.insert_into(&mut cfg);
    write_config(&cfg, &out.join("predict.cfg"))
}

fn select_aux_channels(aux: &AuxGrids, channels: &[usize]) -> Result<AuxGrids> {
    let mut out = AuxGrids::new(aux.height(), aux.width());
    for name in aux.names() {
        let g = aux.layer(name)?;
        let g = if DYNAMIC_LAYERS.contains(&name) {
            g.select_channels(channels)?
        } else {
            g.clone()
        };
        out.insert(name, g)?;
    }
    Ok(out)
}

/// Station-level evaluation of an air-temperature stack. When `only` is given,
/// just those stations are scored.
pub fn evaluate_stack(
    pred: &GridStack,
    meta: &StackMeta,
    aux: &AuxGrids,
    stations: &[StationRecord],
    only: Option<&BTreeSet<String>>,
) -> Result<Vec<EvalRecord>> {
    let channel_of: BTreeMap<usize, usize> = meta.days.iter().enumerate().map(|(c, &d)| (d, c)).collect();
    let mut out = Vec::new();
    for r in stations {
        if only.is_some_and(|s| !s.contains(&r.station_id)) {
            continue;
        }
        use chrono::{Datelike, Timelike};
        if r.timestamp.year() != meta.year || r.timestamp.hour() != meta.hour {
            continue;
        }
        let Some(&c) = channel_of.get(&(r.timestamp.ordinal0() as usize)) else {
            continue;
        };
        let (y, x) = nearest_pixel(aux, r.lat, r.lon)?;
        out.push(EvalRecord {
            pred: pred.get(c, y, x) as f64,
            obs: r.t_air,
            timestamp: r.timestamp,
            elevation: r.elevation,
        });
    }
    if out.is_empty() {
        return Err(Error::DegenerateInput("no station records overlap the predictions".into()));
    }
    Ok(out)
}

/// Report CSV of predictions against station observations, binned by `key`.
/// Held-out stations from `split` are used when given.
pub fn cmd_evaluate(
    pred_dir: &Path,
    scene: &Path,
    stations: &Path,
    split: Option<&Path>,
    key: BreakdownKey,
    out: &Path,
) -> Result<()> {
    let meta = load_stack_meta(pred_dir, "predict.cfg")?;
    let pred = read_grid(&grid_path(pred_dir, "air_mean"))?;
    let aux = load_aux(scene)?;
    let records = read_stations(stations, false)?;
    let only = split.map(read_split).transpose()?.map(|s| s.test_stations);
    let evals = evaluate_stack(&pred, &meta, &aux, &records, only.as_ref())?;
    let report = breakdown_report(&evals, key, &BinWidths::default())?;
    write_atomic(out, encode_report(&report).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

pub fn encode_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("model,n,mae,rmse,r2\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.model,
            r.n,
            r.mae,
            r.rmse,
            r.r2.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
        ));
    }
    s
}

fn score(model: &str, pred: &[f64], obs: &[f64]) -> Result<AblationRow> {
    Ok(AblationRow {
        model: model.into(),
        n: pred.len(),
        mae: metrics::mae(pred, obs)?,
        rmse: metrics::rmse(pred, obs)?,
        r2: metrics::r2(pred, obs).ok(),
    })
}

fn held_out(samples: &[AirSample], split: &TrainTestSplit) -> (Vec<crate::features::FeatureVector>, Vec<f64>) {
    samples
        .iter()
        .filter(|s| split.test_stations.contains(&s.station_id))
        .map(|s| (s.features, s.t_air))
        .unzip()
}

/// Compares ATC-only + Air-Transformer, Amplifier + OLS and Amplifier +
/// Air-Transformer on held-out stations of one scene.
pub fn run_ablation(scene: &Path, config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let data = load_dataset(scene)?;
    let aux = load_aux(scene)?;
    let records = read_stations(&scene.join("stations.csv"), false)?;
    let split = TrainTestSplit::station_level(
        records.iter().map(|r| r.station_id.as_str()),
        config.test_fraction,
        config.air.seed,
    )?;
    if split.test_stations.is_empty() {
        return Err(Error::Data("ablation needs at least one held-out station".into()));
    }
    let recon_mean = |head: bool| -> Result<GridStack> {
        let (_, ensemble) = train_tiled(&data, &config.amplifier, head)?;
        Ok(reconstruct(&ensemble, &data, config.coverage)?.mean)
    };
    let surf_full = recon_mean(true)?;
    let surf_base = recon_mean(false)?;
    let samples_full = station_samples(&records, &surf_full, &aux, &data.days, data.year, data.hour)?;
    let samples_base = station_samples(&records, &surf_base, &aux, &data.days, data.year, data.hour)?;

    let mut preds: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut obs_all = Vec::new();
    let base_groups = partition_by_month(&samples_base);
    for (key, group) in partition_by_month(&samples_full) {
        let (rows, obs) = held_out(&group, &split);
        if rows.is_empty() {
            continue;
        }
        obs_all.extend_from_slice(&obs);
        let full = train_air_transformer(&group, &split, &config.air)?;
        preds
            .entry("amplifier_airtransformer")
            .or_default()
            .extend(transform_forward(&full.model, &rows)?);

        let train: Vec<&AirSample> = group
            .iter()
            .filter(|s| split.train_stations.contains(&s.station_id))
            .collect();
        let mlr = MlrModel::fit(
            &train.iter().map(|s| s.features).collect::<Vec<_>>(),
            &train.iter().map(|s| s.t_air).collect::<Vec<_>>(),
        )?;
        preds
            .entry("amplifier_mlr")
            .or_default()
            .extend(rows.iter().map(|r| mlr.predict(r)));

        let base_group = base_groups
            .get(&key)
            .ok_or_else(|| Error::Data("baseline reconstruction lacks a month".into()))?;
        let (base_rows, base_obs) = held_out(base_group, &split);
        if base_obs != obs {
            return Err(Error::State("baseline and amplifier station samples differ".into()));
        }
        let base = train_air_transformer(base_group, &split, &config.air)?;
        preds
            .entry("atc_only")
            .or_default()
            .extend(transform_forward(&base.model, &base_rows)?);
    }
    if obs_all.is_empty() {
        return Err(Error::Data("no held-out station samples".into()));
    }
    ["atc_only", "amplifier_mlr", "amplifier_airtransformer"]
        .iter()
        .map(|m| score(m, &preds[m], &obs_all))
        .collect()
}

pub fn cmd_ablate(scene: &Path, config: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(scene, config)?;
    write_atomic(out, encode_ablation(&rows).as_bytes())?;
    Ok(rows)
}

pub fn cmd_render(grid: &Path, channel: usize, ramp: &str, range: Option<(f32, f32)>, out: &Path) -> Result<()> {
    let ramp = ColorRamp::from_str(ramp)?;
    let g = read_grid(grid)?;
    render_map(&g, channel, ramp, range, out)
}
