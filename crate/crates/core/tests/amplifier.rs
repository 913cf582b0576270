use airtemp_core::amplifier::{
    amplifier_forward, atc_only_baseline, masked_l1_loss, reconstruct, train_amplifier, train_tiled, AmplifierSnapshot,
    ReconstructionDataset, TrainConfig,
};
use airtemp_core::atc::AtcParamField;
use airtemp_core::ensemble::SnapshotEnsemble;
use airtemp_core::synth::{generate_scene, SceneSpec, SyntheticScene};
use airtemp_core::Error;

fn scene(h: usize, w: usize, seed: u64) -> SyntheticScene {
    generate_scene(&SceneSpec {
        height: h,
        width: w,
        n_days: 12,
        first_day: 60,
        n_stations: 4,
        noise_sigma: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn dataset(s: &SyntheticScene) -> ReconstructionDataset {
    ReconstructionDataset {
        observed: s.observed_surf.clone(),
        coarse: s.coarse.clone(),
        reflectance: s.reflectance.clone(),
        days: s.days.clone(),
        n_doy: s.spec.n_doy(),
        hour: s.spec.hour,
        year: s.spec.year,
    }
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        snapshot_start: 21,
        snapshot_every: 2,
        snapshot_count: 10,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn training_reduces_loss_and_collects_snapshots() {
    let s = scene(12, 12, 1);
    let data = dataset(&s);
    let out = train_amplifier(&data, &short_config()).unwrap();
    assert_eq!(out.log.len(), 40);
    assert!(out.log[39].train_l1 < 0.5 * out.log[0].train_l1, "{:?}", (out.log[0].train_l1, out.log[39].train_l1));
    assert_eq!(out.ensemble.len(), 10);
    let pred = amplifier_forward(&out.model, &data).unwrap();
    let l1 = masked_l1_loss(&pred, &data.observed, data.observed.mask()).unwrap();
    assert!(l1.is_finite() && l1 < out.log[0].train_l1);
}

#[test]
fn training_is_deterministic() {
    let s = scene(8, 8, 2);
    let data = dataset(&s);
    let a = train_amplifier(&data, &short_config()).unwrap();
    let b = train_amplifier(&data, &short_config()).unwrap();
    assert_eq!(a.log, b.log);
    let ra = reconstruct(&a.ensemble, &data, 0.95).unwrap();
    let rb = reconstruct(&b.ensemble, &data, 0.95).unwrap();
    assert_eq!(ra.mean, rb.mean);
    assert_eq!(ra.upper, rb.upper);
}

#[test]
fn reconstruction_brackets_the_mean_and_meets_coverage() {
    let s = scene(12, 12, 3);
    let data = dataset(&s);
    let out = atc_only_baseline(&data, &short_config()).unwrap();
    let rec = reconstruct(&out.ensemble, &data, 0.9).unwrap();
    assert!(rec.mean.is_gap_free());
    for i in 0..rec.mean.data().len() {
        assert!(rec.lower.data()[i] <= rec.mean.data()[i] && rec.mean.data()[i] <= rec.upper.data()[i]);
    }
    assert!(rec.calibration.calibrated_coverage >= 0.9);
    let covered = (0..rec.mean.data().len())
        .filter(|&i| data.observed.mask()[i])
        .filter(|&i| {
            let o = data.observed.data()[i];
            rec.lower.data()[i] <= o + 1e-4 && o <= rec.upper.data()[i] + 1e-4
        })
        .count();
    assert!(covered as f64 >= 0.9 * data.observed.valid_count() as f64 - 1.0);
}

#[test]
fn identical_snapshots_collapse_the_interval() {
    let s = scene(6, 6, 4);
    let mut data = dataset(&s);
    let atc = AtcParamField::constant(6, 6, 15.0, 10.0, 0.2, 0.5, 365).unwrap();
    let snap = AmplifierSnapshot { atc, residual: None };
    data.observed = snap.predict(&data).unwrap();
    let ens = SnapshotEnsemble::uniform(vec![snap; 8]).unwrap();
    let rec = reconstruct(&ens, &data, 0.95).unwrap();
    assert_eq!(rec.lower, rec.mean);
    assert_eq!(rec.upper, rec.mean);
}

#[test]
fn tiles_match_single_model_when_one_tile_covers_the_scene() {
    let s = scene(10, 10, 5);
    let data = dataset(&s);
    let cfg = TrainConfig { tile: 16, ..short_config() };
    let (tiles, ens) = train_tiled(&data, &cfg, true).unwrap();
    assert_eq!(tiles.len(), 1);
    let single = train_amplifier(&data, &cfg).unwrap();
    let a = reconstruct(&ens, &data, 0.95).unwrap();
    let b = reconstruct(&single.ensemble, &data, 0.95).unwrap();
    assert_eq!(a.mean, b.mean);
}

#[test]
fn tiled_training_covers_every_pixel() {
    let s = scene(10, 14, 6);
    let data = dataset(&s);
    let cfg = TrainConfig { tile: 6, ..short_config() };
    let (tiles, ens) = train_tiled(&data, &cfg, false).unwrap();
    assert_eq!(tiles.len(), 2 * 3);
    let rec = reconstruct(&ens, &data, 0.95).unwrap();
    assert_eq!(rec.mean.dims(), data.observed.dims());
    assert!(rec.mean.data().iter().all(|v| v.is_finite()));
}

#[test]
fn invalid_configs_fail_before_training() {
    let s = scene(6, 6, 7);
    let data = dataset(&s);
    let cfg = TrainConfig { epochs: 30, ..short_config() };
    assert!(matches!(train_amplifier(&data, &cfg), Err(Error::Config(_))));
    let mut bad = dataset(&s);
    bad.days.pop();
    assert!(train_amplifier(&bad, &short_config()).is_err());
}
