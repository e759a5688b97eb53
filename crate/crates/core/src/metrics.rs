//! Run-series summaries: tail-window statistics over accuracy curves,
//! cumulative means, best-so-far accuracy, and teacher/student gaps.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SliceStats {
    pub mean: f64,
    /// Population variance (divides by the slice length).
    pub var: f64,
    pub n: usize,
}

/// The tail of `series` starting at index `floor(pct * n / 100)`.
pub fn percentile_slice(series: &[f64], pct: f64) -> Result<&[f64]> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Config(format!("percentile {pct} outside [0, 100]")));
    }
    let start = (pct * series.len() as f64 / 100.0).floor() as usize;
    let slice = &series[start.min(series.len())..];
    if slice.is_empty() {
        return Err(Error::Config(format!(
            "percentile {pct} leaves an empty tail of a {}-point series",
            series.len()
        )));
    }
    Ok(slice)
}

/// Mean and population variance of the tail window.
pub fn percentile_stats(series: &[f64], pct: f64) -> Result<SliceStats> {
    let slice = percentile_slice(series, pct)?;
    let n = slice.len();
    let mean = slice.iter().sum::<f64>() / n as f64;
    let var = slice.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Ok(SliceStats { mean, var, n })
}

/// Running mean: `out[k]` is the mean of `series[..=k]`.
pub fn cumulative_mean(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (k, &x) in series.iter().enumerate() {
        sum += x;
        out.push(sum / (k + 1) as f64);
    }
    out
}

/// Best accuracy reached anywhere in the run.
pub fn acc_max(series: &[f64]) -> Result<f64> {
    series
        .iter()
        .cloned()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or_else(|| Error::Config("empty accuracy series".into()))
}

/// How far the student sits below its teacher.
pub fn teacher_student_gap(teacher_acc: f64, student_acc: f64) -> f64 {
    teacher_acc - student_acc
}
