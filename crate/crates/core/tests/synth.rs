use airtemp_core::metrics;
use airtemp_core::synth::{generate_scene, oracle_eval, AirTransformTruth, SceneSpec};
use airtemp_core::GridStack;
use proptest::prelude::*;

fn small(seed: u64) -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        n_days: 6,
        first_day: 100,
        n_stations: 10,
        seed,
        ..Default::default()
    }
}

/// Sizes of 4-connected components of `true` cells.
fn component_sizes(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut n = 0;
        while let Some(i) = stack.pop() {
            n += 1;
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        sizes.push(n);
    }
    sizes
}

#[test]
fn cloud_blobs_are_spatially_coherent() {
    for seed in 0..5 {
        let spec = SceneSpec {
            height: 64,
            width: 64,
            ..small(seed)
        };
        let scene = generate_scene(&spec).unwrap();
        let obs = &scene.observed_surf;
        let (mut area, mut blobs) = (0usize, 0usize);
        for c in 0..obs.channels() {
            let cloudy: Vec<bool> = obs.channel_mask(c).iter().map(|v| !v).collect();
            let sizes = component_sizes(&cloudy, obs.height(), obs.width());
            area += sizes.iter().sum::<usize>();
            blobs += sizes.len();
        }
        let mean_area = area as f64 / blobs as f64;
        let floor = (spec.cloud_blob_scale * spec.cloud_blob_scale) as f64 / 4.0;
        assert!(mean_area >= floor, "seed {seed}: mean blob area {mean_area:.1} < {floor}");
    }
}

#[test]
fn coarse_field_is_block_constant_and_gap_free() {
    let spec = small(3);
    let scene = generate_scene(&spec).unwrap();
    let c = &scene.coarse;
    assert!(c.is_gap_free());
    let f = spec.coarse_factor;
    for ch in 0..c.channels() {
        for y in 0..c.height() {
            for x in 0..c.width() {
                assert_eq!(c.get(ch, y, x), c.get(ch, y / f * f, x / f * f));
            }
        }
    }
}

#[test]
fn station_truth_follows_the_named_transform() {
    let spec = SceneSpec {
        station_noise: 0.0,
        air_transform_truth: AirTransformTruth::Affine {
            slope: 0.5,
            intercept: 3.0,
        },
        ..small(4)
    };
    let scene = generate_scene(&spec).unwrap();
    assert_eq!(scene.sites.len(), spec.n_stations);
    let mut k = 0;
    for site in &scene.sites {
        for (c, _) in scene.days.iter().enumerate() {
            let r = &scene.stations[k];
            let t = scene.truth_surf.get(c, site.row, site.col) as f64;
            assert!((r.t_air - (0.5 * t + 3.0)).abs() < 1e-4, "{} vs {}", r.t_air, 0.5 * t + 3.0);
            assert_eq!(r.t_air as f32, scene.stations_truth[k]);
            k += 1;
        }
    }
    assert_eq!(k, scene.stations.len());
}

#[test]
fn oracle_agrees_with_metrics_on_flattened_pairs() {
    let scene = generate_scene(&small(5)).unwrap();
    let (d, h, w) = scene.truth_surf.dims();
    let output = GridStack::from_fn(d, h, w, |c, y, x| scene.truth_surf.get(c, y, x) + ((c + 3 * y + 7 * x) % 5) as f32 * 0.3 - 0.6);
    let stats = oracle_eval(&scene, &output).unwrap();
    let (mut pm, mut om, mut po, mut oo) = (vec![], vec![], vec![], vec![]);
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (p, t) = (output.get(c, y, x) as f64, scene.truth_surf.get(c, y, x) as f64);
                if scene.observed_surf.is_valid(c, y, x) {
                    po.push(p);
                    oo.push(t);
                } else {
                    pm.push(p);
                    om.push(t);
                }
            }
        }
    }
    let observed = stats.observed.unwrap();
    let masked = stats.masked.unwrap();
    assert!((observed.mae - metrics::mae(&po, &oo).unwrap()).abs() < 1e-9);
    assert!((masked.rmse - metrics::rmse(&pm, &om).unwrap()).abs() < 1e-9);
    assert_eq!(observed.n + masked.n, d * h * w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cloud_fraction_within_two_percent(seed in 0u64..1000, fraction in 0.05f32..0.7) {
        let spec = SceneSpec { cloud_fraction: fraction, n_days: 3, ..small(seed) };
        let scene = generate_scene(&spec).unwrap();
        let obs = &scene.observed_surf;
        for c in 0..obs.channels() {
            let cloudy = obs.channel_mask(c).iter().filter(|v| !**v).count() as f64 / (obs.height() * obs.width()) as f64;
            prop_assert!((cloudy - fraction as f64).abs() <= 0.02, "day {c}: {cloudy} vs {fraction}");
        }
    }

    #[test]
    fn station_pixels_are_distinct(seed in 0u64..1000, n in 1usize..60) {
        let scene = generate_scene(&SceneSpec { n_stations: n, n_days: 1, ..small(seed) }).unwrap();
        let mut px: Vec<_> = scene.sites.iter().map(|s| (s.row, s.col)).collect();
        px.sort();
        px.dedup();
        prop_assert_eq!(px.len(), n);
    }
}
