//! Station records, auxiliary grids and the 16-element air-temperature feature vector.

use std::collections::BTreeMap;

use chrono::{NaiveDateTime, Timelike};

use crate::error::{Error, Result};
use crate::grid::GridStack;

pub const N_REFL_BANDS: usize = 5;
pub const N_FEATURES: usize = 16;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "t_surf", "refl_1", "refl_2", "refl_3", "refl_4", "refl_5", "lat", "lon", "hour", "elevation", "slope", "blh",
    "tcw", "shf", "u10", "v10",
];

/// Static layers: one channel (reflectance has five).
pub const STATIC_LAYERS: [&str; 5] = ["reflectance", "lat", "lon", "elevation", "slope"];
/// Reanalysis layers: one channel per simulated day.
pub const DYNAMIC_LAYERS: [&str; 5] = ["blh", "tcw", "shf", "u10", "v10"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    pub t_surf: f32,
    pub refl: [f32; N_REFL_BANDS],
    pub lat: f32,
    pub lon: f32,
    pub hour: f32,
    pub elevation: f32,
    pub slope: f32,
    pub blh: f32,
    pub tcw: f32,
    pub shf: f32,
    pub u10: f32,
    pub v10: f32,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f32; N_FEATURES] {
        let r = self.refl;
        [
            self.t_surf, r[0], r[1], r[2], r[3], r[4], self.lat, self.lon, self.hour, self.elevation, self.slope,
            self.blh, self.tcw, self.shf, self.u10, self.v10,
        ]
    }

    pub fn from_array(a: &[f32; N_FEATURES]) -> Self {
        Self {
            t_surf: a[0],
            refl: [a[1], a[2], a[3], a[4], a[5]],
            lat: a[6],
            lon: a[7],
            hour: a[8],
            elevation: a[9],
            slope: a[10],
            blh: a[11],
            tcw: a[12],
            shf: a[13],
            u10: a[14],
            v10: a[15],
        }
    }

    pub fn with_t_surf(mut self, t_surf: f32) -> Self {
        self.t_surf = t_surf;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..24.0).contains(&self.hour) {
            return Err(Error::Data(format!("hour {} outside [0, 24)", self.hour)));
        }
        if self.refl.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Data("reflectance outside [0, 1]".into()));
        }
        if let Some(i) = self.to_array().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature {} is not finite", FEATURE_NAMES[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub elevation: f64,
    pub timestamp: NaiveDateTime,
    pub t_air: f64,
}

impl StationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(-60.0..=60.0).contains(&self.t_air) {
            return Err(Error::Data(format!(
                "station {}: air temperature {} outside [-60, 60]",
                self.station_id, self.t_air
            )));
        }
        if self.timestamp.minute() != 0 || self.timestamp.second() != 0 || self.timestamp.nanosecond() != 0 {
            return Err(Error::Data(format!(
                "station {}: timestamp {} is not on an hour boundary",
                self.station_id, self.timestamp
            )));
        }
        Ok(())
    }
}

/// Named co-registered layers sampled when building feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxGrids {
    height: usize,
    width: usize,
    layers: BTreeMap<String, GridStack>,
}

impl AuxGrids {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            layers: BTreeMap::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn insert(&mut self, name: &str, grid: GridStack) -> Result<()> {
        if grid.height() != self.height || grid.width() != self.width {
            return Err(Error::Dimension(format!(
                "aux layer {name} is {}x{}, expected {}x{}",
                grid.height(),
                grid.width(),
                self.height,
                self.width
            )));
        }
        self.layers.insert(name.to_string(), grid);
        Ok(())
    }

    pub fn with_layer(mut self, name: &str, grid: GridStack) -> Result<Self> {
        self.insert(name, grid)?;
        Ok(self)
    }

    pub fn layer(&self, name: &str) -> Result<&GridStack> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing aux layer '{name}'")))
    }

    pub fn remove(&mut self, name: &str) -> Option<GridStack> {
        self.layers.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    /// Checks that every required layer exists with the expected channel count.
    pub fn validate(&self, n_days: usize) -> Result<()> {
        for name in STATIC_LAYERS {
            let expected = if name == "reflectance" { N_REFL_BANDS } else { 1 };
            let c = self.layer(name)?.channels();
            if c != expected {
                return Err(Error::Dimension(format!("aux layer {name} has {c} channels, expected {expected}")));
            }
        }
        for name in DYNAMIC_LAYERS {
            let c = self.layer(name)?.channels();
            if c != n_days {
                return Err(Error::Dimension(format!("aux layer {name} has {c} channels, expected {n_days}")));
            }
        }
        Ok(())
    }

    /// Copy restricted to the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<AuxGrids> {
        let mut out = AuxGrids::new(h, w);
        for (name, g) in &self.layers {
            out.insert(name, g.crop(y0, x0, h, w)?)?;
        }
        Ok(out)
    }
}

fn sample(aux: &AuxGrids, name: &str, channel: usize, row: usize, col: usize) -> Result<f32> {
    let g = aux.layer(name)?;
    if channel >= g.channels() || row >= g.height() || col >= g.width() {
        return Err(Error::Index(format!(
            "aux layer {name}: ({channel}, {row}, {col}) outside {:?}",
            g.dims()
        )));
    }
    if !g.is_valid(channel, row, col) {
        return Err(Error::Data(format!("aux layer {name} has no data at ({row}, {col})")));
    }
    Ok(g.get(channel, row, col))
}

/// Assembles the feature vector for one pixel; `channel` indexes the day within
/// the dynamic layers.
pub fn build_features(
    t_surf: f32,
    aux: &AuxGrids,
    channel: usize,
    hour: u32,
    row: usize,
    col: usize,
) -> Result<FeatureVector> {
    let mut refl = [0.0f32; N_REFL_BANDS];
    for (b, r) in refl.iter_mut().enumerate() {
        *r = sample(aux, "reflectance", b, row, col)?;
    }
    Ok(FeatureVector {
        t_surf,
        refl,
        lat: sample(aux, "lat", 0, row, col)?,
        lon: sample(aux, "lon", 0, row, col)?,
        hour: hour as f32,
        elevation: sample(aux, "elevation", 0, row, col)?,
        slope: sample(aux, "slope", 0, row, col)?,
        blh: sample(aux, "blh", channel, row, col)?,
        tcw: sample(aux, "tcw", channel, row, col)?,
        shf: sample(aux, "shf", channel, row, col)?,
        u10: sample(aux, "u10", channel, row, col)?,
        v10: sample(aux, "v10", channel, row, col)?,
    })
}

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const R: f64 = 6371.0088;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().min(1.0).asin()
}

/// Pixel whose center is closest to (lat, lon) by great-circle distance.
pub fn nearest_pixel(aux: &AuxGrids, lat: f64, lon: f64) -> Result<(usize, usize)> {
    let lats = aux.layer("lat")?;
    let lons = aux.layer("lon")?;
    let mut best = (f64::INFINITY, 0usize);
    for (i, (&la, &lo)) in lats.channel(0).iter().zip(lons.channel(0)).enumerate() {
        let d = haversine_km(lat, lon, la as f64, lo as f64);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok((best.1 / aux.width, best.1 % aux.width))
}
