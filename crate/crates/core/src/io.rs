//! File formats: binary grid stacks, parameter stores, station CSV, key=value
//! configs, report CSVs and PPM map rendering. Every writer goes through a
//! temporary file and a rename so failed runs leave no partial outputs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use log::warn;

use crate::atc::days_in_year;
use crate::error::{Error, Result};
use crate::features::StationRecord;
use crate::grid::GridStack;
use crate::metrics::EvalReport;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const GRID_MAGIC: [u8; 4] = *b"TGRD";
pub const GRID_VERSION: u32 = 1;
const GRID_HEADER: usize = 4 + 4 + 12 + 4;

pub const PARAM_MAGIC: [u8; 4] = *b"TPRM";
pub const PARAM_VERSION: u32 = 1;

pub const STATION_HEADER: &str = "station_id,lat,lon,elevation_m,timestamp_utc,t_air_c";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn encode_grid(grid: &GridStack) -> Result<Vec<u8>> {
    let nodata = grid.nodata();
    if grid
        .data()
        .iter()
        .zip(grid.mask())
        .any(|(&v, &m)| m && v.to_bits() == nodata.to_bits())
    {
        return Err(Error::Data(format!("valid cell equals the nodata sentinel {nodata}")));
    }
    let (c, h, w) = grid.dims();
    let mut out = Vec::with_capacity(GRID_HEADER + 4 * grid.data().len());
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for dim in [c, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&nodata.to_le_bytes());
    for (&v, &m) in grid.data().iter().zip(grid.mask()) {
        out.extend_from_slice(&(if m { v } else { nodata }).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GridStack> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} bytes, header needs {GRID_HEADER}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != GRID_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < GRID_HEADER {
        return Err(truncated(format!("{} bytes, header needs {GRID_HEADER}", bytes.len())));
    }
    let version = u32_at(bytes, 4);
    if version != GRID_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: GRID_VERSION,
        });
    }
    let (c, h, w) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let nodata = f32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Data(format!("{}: grid dimensions overflow", path.display())))?;
    let payload = &bytes[GRID_HEADER..];
    if payload.len() != 4 * n {
        return Err(truncated(format!(
            "payload has {} bytes, header {c}x{h}x{w} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let valid: Vec<bool> = data.iter().map(|v| v.to_bits() != nodata.to_bits()).collect();
    let mut grid = GridStack::with_mask(c, h, w, data, valid)?;
    grid.set_nodata(nodata)?;
    Ok(grid)
}

pub fn write_grid(grid: &GridStack, path: &Path) -> Result<()> {
    write_atomic(path, &encode_grid(grid)?)
}

pub fn read_grid(path: &Path) -> Result<GridStack> {
    decode_grid(&read_bytes(path)?, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Serializes every parameter (name, shape, values) of a store.
pub fn write_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = read_bytes(path)?;
    let truncated = || Error::Truncated {
        path: path.to_path_buf(),
        detail: "parameter file ends early".into(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4).ok_or_else(truncated)?.try_into().expect("4 bytes");
    if magic != PARAM_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != PARAM_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: PARAM_VERSION,
        });
    }
    let count = cur.u32().ok_or_else(truncated)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(cur.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: parameter name is not UTF-8", path.display())))?;
        let ndim = cur.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = cur
            .take(4 * n)
            .ok_or_else(truncated)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let pos = cur.pos;
    if pos != bytes.len() {
        return Err(Error::Data(format!("{}: trailing bytes after parameters", path.display())));
    }
    Ok(out)
}

/// Copies stored values into a store with the same parameter names and shapes.
pub fn load_params_into(store: &mut ParamStore, params: Vec<(String, Tensor)>) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Dimension(format!(
            "file has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        value.expect_shape(store.value(id).shape(), &name)?;
        *store.value_mut(id) = value;
    }
    Ok(())
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:00:00Z").to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim().trim_end_matches('Z');
    let ts = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDateTime::parse_from_str(&format!("{s}:00"), "%Y-%m-%dT%H:%M").ok())
        .ok_or_else(|| format!("unparseable timestamp {s:?}"))?;
    if ts.minute() != 0 || ts.second() != 0 {
        return Err(format!("timestamp {s:?} is not on an hour boundary"));
    }
    Ok(ts)
}

pub fn encode_stations(records: &[StationRecord]) -> String {
    let mut out = String::from(STATION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.station_id,
            r.lat,
            r.lon,
            r.elevation,
            format_timestamp(&r.timestamp),
            r.t_air
        ));
    }
    out
}

pub fn write_stations(records: &[StationRecord], path: &Path) -> Result<()> {
    write_atomic(path, encode_stations(records).as_bytes())
}

/// Parses station CSV text. Malformed rows fail with their 1-based line number.
pub fn decode_stations(text: &str, path: &Path) -> Result<Vec<StationRecord>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        warn!("{}: empty station file", path.display());
        return Ok(Vec::new());
    }
    if header.iter().collect::<Vec<_>>().join(",") != STATION_HEADER {
        return Err(parse_err(1, format!("expected header `{STATION_HEADER}`")));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 6 {
            return Err(parse_err(line, format!("expected 6 fields, found {}", row.len())));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad {what} {:?}", &row[i])))
        };
        if row[0].is_empty() {
            return Err(parse_err(line, "empty station id".into()));
        }
        let rec = StationRecord {
            station_id: row[0].to_string(),
            lat: num(1, "latitude")?,
            lon: num(2, "longitude")?,
            elevation: num(3, "elevation")?,
            timestamp: parse_timestamp(&row[4]).map_err(|m| parse_err(line, m))?,
            t_air: num(5, "air temperature")?,
        };
        rec.validate().map_err(|e| parse_err(line, e.to_string()))?;
        if !seen.insert((rec.station_id.clone(), rec.timestamp)) {
            return Err(Error::DuplicateRecord {
                station: rec.station_id,
                timestamp: format_timestamp(&rec.timestamp),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        warn!("{}: station file has no records", path.display());
    }
    Ok(out)
}

/// Reads station records; with `filter_valid_years` a station is dropped unless
/// every year it reports in has at least half of that year's hourly slots.
pub fn read_stations(path: &Path, filter_valid_years: bool) -> Result<Vec<StationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = decode_stations(&text, path)?;
    Ok(if filter_valid_years {
        filter_stations(records)
    } else {
        records
    })
}

pub fn filter_stations(records: Vec<StationRecord>) -> Vec<StationRecord> {
    let mut counts: HashMap<(&str, i32), usize> = HashMap::new();
    for r in &records {
        *counts.entry((r.station_id.as_str(), r.timestamp.year())).or_default() += 1;
    }
    let rejected: HashSet<String> = counts
        .iter()
        .filter(|(&(_, year), &n)| 2 * n < 24 * days_in_year(year))
        .map(|(&(id, _), _)| id.to_string())
        .collect();
    for id in &rejected {
        warn!("station {id} dropped: fewer than 50% valid hourly observations in a year");
    }
    records
        .into_iter()
        .filter(|r| !rejected.contains(&r.station_id))
        .collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() || out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("empty or repeated key {key:?}"),
            });
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn write_config(values: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in values {
        out.push_str(&format!("{k} = {v}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// Typed lookup in a parsed config.
pub fn config_value<T: std::str::FromStr>(cfg: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    cfg.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        })
        .transpose()
}

pub fn config_required<T: std::str::FromStr>(cfg: &BTreeMap<String, String>, key: &str) -> Result<T> {
    config_value(cfg, key)?.ok_or_else(|| Error::Config(format!("missing required key {key}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

pub fn encode_report(reports: &[EvalReport]) -> String {
    let mut out = String::from("bin_key,bin_value,n,rmse,mae,r2\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.key,
            r.bin_value,
            r.n,
            r.rmse,
            r.mae,
            fmt_opt(r.r2)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub model_id: String,
    pub lambda: f64,
    pub raw_coverage: f64,
    pub calibrated_coverage: f64,
    pub n_points: usize,
}

pub fn encode_calibration(rows: &[CalibrationRow]) -> String {
    let mut out = String::from("model_id,lambda,raw_coverage,calibrated_coverage,n_points\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.6},{:.6},{}\n",
            r.model_id, r.lambda, r.raw_coverage, r.calibrated_coverage, r.n_points
        ));
    }
    out
}

pub fn encode_training_log(log: &[crate::amplifier::EpochLog]) -> String {
    let mut out = String::from("epoch,train_l1,test_l1\n");
    for e in log {
        out.push_str(&format!("{},{:.6},{}\n", e.epoch, e.train_l1, fmt_opt(e.test_l1)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorRamp {
    /// Blue → cyan → yellow → red.
    Thermal,
    Gray,
}

impl std::str::FromStr for ColorRamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thermal" => Ok(Self::Thermal),
            "gray" | "grey" => Ok(Self::Gray),
            _ => Err(Error::Config(format!("unknown color ramp {s:?}"))),
        }
    }
}

pub const NODATA_RGB: [u8; 3] = [128, 128, 128];

impl ColorRamp {
    /// Color at position `t` in [0, 1].
    pub fn color(&self, t: f64) -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        match self {
            ColorRamp::Gray => {
                let v = (t * 255.0).round() as u8;
                [v, v, v]
            }
            ColorRamp::Thermal => {
                const STOPS: [[f64; 3]; 4] = [[20.0, 40.0, 160.0], [40.0, 200.0, 220.0], [250.0, 220.0, 60.0], [200.0, 30.0, 30.0]];
                let x = t * (STOPS.len() - 1) as f64;
                let i = (x.floor() as usize).min(STOPS.len() - 2);
                let f = x - i as f64;
                let mut c = [0u8; 3];
                for k in 0..3 {
                    c[k] = (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
                }
                c
            }
        }
    }
}

/// Binary PPM (P6) of one channel. Without an explicit range the valid
/// min/max are used; a constant channel maps to the ramp's midpoint.
pub fn render_ppm(grid: &GridStack, channel: usize, ramp: ColorRamp, range: Option<(f32, f32)>) -> Result<Vec<u8>> {
    if channel >= grid.channels() {
        return Err(Error::Index(format!("channel {channel} of {}", grid.channels())));
    }
    let values = grid.channel(channel);
    let mask = grid.channel_mask(channel);
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("empty value range [{lo}, {hi}]")));
            }
            (lo, hi)
        }
        None => {
            let mut it = values.iter().zip(mask).filter(|(v, &m)| m && v.is_finite()).map(|(&v, _)| v);
            let first = it
                .next()
                .ok_or_else(|| Error::Data("no valid cells to derive a color range".into()))?;
            it.fold((first, first), |(a, b), v| (a.min(v), b.max(v)))
        }
    };
    let mut out = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    for (&v, &m) in values.iter().zip(mask) {
        let rgb = if !m || !v.is_finite() {
            NODATA_RGB
        } else if hi > lo {
            ramp.color((v - lo) as f64 / (hi - lo) as f64)
        } else {
            ramp.color(0.5)
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn render_map(grid: &GridStack, channel: usize, ramp: ColorRamp, range: Option<(f32, f32)>, path: &Path) -> Result<()> {
    write_atomic(path, &render_ppm(grid, channel, ramp, range)?)
}
