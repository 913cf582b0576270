//! Validation metrics and per-bin report breakdowns.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} observations", pred.len(), obs.len())));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput("metrics need at least one pair".into()));
    }
    Ok(())
}

pub fn sse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum())
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    Ok((sse(pred, obs)? / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn r2(pred: &[f64], obs: &[f64]) -> Result<f64> {
    let sse = sse(pred, obs)?;
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let sst: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedR2);
    }
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
}

pub fn error_stats(pred: &[f64], obs: &[f64]) -> Result<ErrorStats> {
    Ok(ErrorStats {
        n: pred.len(),
        rmse: rmse(pred, obs)?,
        mae: mae(pred, obs)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BreakdownKey {
    None,
    Hour,
    Month,
    TempBin,
    ElevBin,
}

impl BreakdownKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            BreakdownKey::None => "none",
            BreakdownKey::Hour => "hour",
            BreakdownKey::Month => "month",
            BreakdownKey::TempBin => "temp_bin",
            BreakdownKey::ElevBin => "elev_bin",
        }
    }
}

impl fmt::Display for BreakdownKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BreakdownKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "hour" => Self::Hour,
            "month" => Self::Month,
            "temp_bin" => Self::TempBin,
            "elev_bin" => Self::ElevBin,
            _ => return Err(Error::Config(format!("unknown breakdown key {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinWidths {
    pub temperature: f64,
    pub elevation: f64,
}

impl Default for BinWidths {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            elevation: 250.0,
        }
    }
}

/// One prediction/observation pair with the covariates used for binning.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pred: f64,
    pub obs: f64,
    pub timestamp: NaiveDateTime,
    pub elevation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub key: BreakdownKey,
    /// Hour, month, or the lower edge of a temperature/elevation bin; 0 for `None`.
    pub bin_value: f64,
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the bin's observations have zero variance.
    pub r2: Option<f64>,
    pub sse: f64,
}

impl EvalReport {
    pub fn from_pairs(key: BreakdownKey, bin_value: f64, pred: &[f64], obs: &[f64]) -> Result<Self> {
        let sse = sse(pred, obs)?;
        let r2 = match r2(pred, obs) {
            Ok(v) => Some(v),
            Err(Error::UndefinedR2) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            key,
            bin_value,
            n: pred.len(),
            rmse: (sse / pred.len() as f64).sqrt(),
            mae: mae(pred, obs)?,
            r2,
            sse,
        })
    }
}

fn bin_of(r: &EvalRecord, key: BreakdownKey, widths: &BinWidths) -> f64 {
    match key {
        BreakdownKey::None => 0.0,
        BreakdownKey::Hour => r.timestamp.hour() as f64,
        BreakdownKey::Month => r.timestamp.month() as f64,
        BreakdownKey::TempBin => (r.obs / widths.temperature).floor() * widths.temperature,
        BreakdownKey::ElevBin => (r.elevation / widths.elevation).floor() * widths.elevation,
    }
}

/// One report per non-empty bin, ordered by bin value.
pub fn breakdown_report(records: &[EvalRecord], key: BreakdownKey, widths: &BinWidths) -> Result<Vec<EvalReport>> {
    if !(widths.temperature > 0.0 && widths.elevation > 0.0) {
        return Err(Error::Config("bin widths must be positive".into()));
    }
    let mut bins: BTreeMap<i64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let b = bin_of(r, key, widths);
        let slot = bins.entry((b * 1e6).round() as i64).or_insert_with(|| (b, Vec::new(), Vec::new()));
        slot.1.push(r.pred);
        slot.2.push(r.obs);
    }
    bins.into_values()
        .map(|(b, p, o)| EvalReport::from_pairs(key, b, &p, &o))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    #[test]
    fn perfect_prediction() {
        let v = [1.0, 2.0, 4.0];
        assert_eq!(rmse(&v, &v).unwrap(), 0.0);
        assert_eq!(mae(&v, &v).unwrap(), 0.0);
        assert_eq!(r2(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn hand_arithmetic() {
        let (obs, pred) = ([0.0, 2.0], [1.0, 1.0]);
        assert_eq!(rmse(&pred, &obs).unwrap(), 1.0);
        assert_eq!(mae(&pred, &obs).unwrap(), 1.0);
        assert_eq!(r2(&pred, &obs).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(rmse(&[], &[]), Err(Error::DegenerateInput(_))));
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedR2)));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_hour_is_global() {
        let ts = NaiveDate::from_ymd_opt(2021, 6, 3).unwrap().and_hms_opt(14, 0, 0).unwrap();
        let recs: Vec<EvalRecord> = (0..10)
            .map(|i| EvalRecord {
                pred: i as f64 * 1.1,
                obs: i as f64,
                timestamp: ts,
                elevation: 0.0,
            })
            .collect();
        let by_hour = breakdown_report(&recs, BreakdownKey::Hour, &BinWidths::default()).unwrap();
        let global = breakdown_report(&recs, BreakdownKey::None, &BinWidths::default()).unwrap();
        assert_eq!(by_hour.len(), 1);
        assert_eq!(by_hour[0].bin_value, 14.0);
        assert_eq!(by_hour[0].rmse, global[0].rmse);
        assert_eq!(by_hour[0].r2, global[0].r2);
    }

    #[test]
    fn temperature_bins_use_lower_edges() {
        let ts = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let recs: Vec<EvalRecord> = [-7.0, -2.0, 3.0, 4.9, 5.0]
            .iter()
            .map(|&o| EvalRecord {
                pred: o,
                obs: o,
                timestamp: ts,
                elevation: 260.0,
            })
            .collect();
        let bins = breakdown_report(&recs, BreakdownKey::TempBin, &BinWidths::default()).unwrap();
        let edges: Vec<f64> = bins.iter().map(|b| b.bin_value).collect();
        assert_eq!(edges, vec![-10.0, -5.0, 0.0, 5.0]);
        assert_eq!(bins[2].n, 2);
        let elev = breakdown_report(&recs, BreakdownKey::ElevBin, &BinWidths::default()).unwrap();
        assert_eq!(elev.len(), 1);
        assert_eq!(elev[0].bin_value, 250.0);
    }
}
