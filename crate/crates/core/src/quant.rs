//! Affine INT8 quantization and fixed-point requantization.
//!
//! Activations use per-tensor asymmetric parameters, weights use symmetric
//! per-output-channel scales. All rounding is half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Param(format!("quantization scale {scale} must be positive and finite")));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::Param(format!("zero point {zero_point} outside [-128, 127]")));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn symmetric(scale: f32) -> Result<Self> {
        Self::new(scale, 0)
    }

    pub fn quantize(&self, x: f32) -> i8 {
        quantize(x, *self)
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        dequantize(q, *self)
    }
}

fn saturate(v: i64) -> i8 {
    v.clamp(QMIN as i64, QMAX as i64) as i8
}

pub fn quantize(x: f32, qp: QuantParams) -> i8 {
    let scaled = (x as f64 / qp.scale as f64).round_ties_even();
    if scaled.is_nan() {
        return saturate(qp.zero_point as i64);
    }
    // f64 -> i64 saturates for huge magnitudes
    saturate((scaled as i64).saturating_add(qp.zero_point as i64))
}

pub fn dequantize(q: i8, qp: QuantParams) -> f32 {
    ((q as i32 - qp.zero_point) as f64 * qp.scale as f64) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    Minmax,
    /// Clip to the given percentile (0, 100] of absolute values first.
    Percentile(f64),
}

impl Default for CalibrationMode {
    fn default() -> Self {
        CalibrationMode::Minmax
    }
}

/// Value at the `p`-th percentile (nearest rank) of `|samples|`.
fn abs_percentile(samples: &[f32], p: f64) -> f32 {
    let mut mags: Vec<f32> = samples.iter().map(|v| v.abs()).collect();
    mags.sort_by(f32::total_cmp);
    let rank = ((p / 100.0) * mags.len() as f64).ceil() as usize;
    mags[rank.clamp(1, mags.len()) - 1]
}

/// Derives activation parameters from observed values.
///
/// The observed range is widened to include zero so the zero point always
/// lands inside `[-128, 127]`; `min` then maps to -128.
pub fn calibrate(samples: &[f32], mode: CalibrationMode) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::Calibration("no samples".into()));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!("non-finite sample {bad}")));
    }
    let clip = match mode {
        CalibrationMode::Minmax => f32::INFINITY,
        CalibrationMode::Percentile(p) => {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Calibration(format!("percentile {p} outside (0, 100]")));
            }
            abs_percentile(samples, p)
        }
    };
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in samples {
        let v = v.clamp(-clip, clip);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    range_params(lo, hi)
}

/// Parameters for an observed `[lo, hi]` range.
pub fn range_params(lo: f32, hi: f32) -> Result<QuantParams> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Calibration(format!("invalid range [{lo}, {hi}]")));
    }
    if lo == hi {
        return QuantParams::new(lo.abs().max(1.0) / 127.0, 0);
    }
    let lo = lo.min(0.0) as f64;
    let hi = hi.max(0.0) as f64;
    let scale = ((hi - lo) / 255.0) as f32;
    let zp = QMIN as f64 - (lo / scale as f64).round_ties_even();
    QuantParams::new(scale, zp.clamp(QMIN as f64, QMAX as f64) as i32)
}

/// Symmetric per-channel quantization of a tensor whose innermost axis is the
/// channel axis. Returns the codes and one scale per channel.
pub fn quantize_per_channel(data: &[f32], channels: usize) -> (Vec<i8>, Vec<f32>) {
    assert!(channels > 0 && data.len() % channels == 0);
    let mut max_abs = vec![0f32; channels];
    for row in data.chunks_exact(channels) {
        for (m, v) in max_abs.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    let scales: Vec<f32> = max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / 127.0 } else { 1.0 / 127.0 })
        .collect();
    let codes = data
        .chunks_exact(channels)
        .flat_map(|row| {
            row.iter()
                .zip(&scales)
                .map(|(&v, &s)| quantize(v, QuantParams { scale: s, zero_point: 0 }))
                .collect::<Vec<_>>()
        })
        .collect();
    (codes, scales)
}

/// Fixed-point rescaling of an `i32` accumulator: `acc * multiplier / 2^shift`
/// rounded half-to-even, plus the output zero point, saturated to INT8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    multiplier: i32,
    shift: u32,
    zero_point: i32,
}

const MULT_LO: i64 = 1 << 30;
const MULT_HI: i64 = 1 << 31;
const MAX_SHIFT: i32 = 62;

impl Requantizer {
    /// Encodes a positive real `factor` (typically `s_in * s_w / s_out`).
    pub fn from_factor(factor: f64, zero_point: i32) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Param(format!("requantization factor {factor} must be positive")));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::Param(format!("zero point {zero_point} outside [-128, 127]")));
        }
        // factor = mant * 2^exp with mant in [0.5, 1)
        let mut exp = factor.log2().floor() as i32 + 1;
        let mut mant = factor / 2f64.powi(exp);
        while mant >= 1.0 {
            mant /= 2.0;
            exp += 1;
        }
        while mant < 0.5 {
            mant *= 2.0;
            exp -= 1;
        }
        let mut m = (mant * MULT_HI as f64).round_ties_even() as i64;
        if m == MULT_HI {
            m = MULT_LO;
            exp += 1;
        }
        let shift = 31 - exp;
        if !(0..=MAX_SHIFT).contains(&shift) {
            return Err(Error::Param(format!(
                "requantization factor {factor} outside the representable range [2^-32, 2^31)"
            )));
        }
        debug_assert!((MULT_LO..MULT_HI).contains(&m));
        Ok(Self {
            multiplier: m as i32,
            shift: shift as u32,
            zero_point,
        })
    }

    pub fn multiplier(&self) -> i32 {
        self.multiplier
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn factor(&self) -> f64 {
        self.multiplier as f64 / 2f64.powi(self.shift as i32)
    }

    /// Rescaled accumulator before the zero point and INT8 saturation.
    pub fn scale(&self, acc: i32) -> i32 {
        let prod = acc as i128 * self.multiplier as i128;
        let rounded = if self.shift == 0 {
            prod
        } else {
            let q = prod >> self.shift;
            let rem = prod - (q << self.shift);
            let half = 1i128 << (self.shift - 1);
            if rem > half || (rem == half && q & 1 == 1) {
                q + 1
            } else {
                q
            }
        };
        rounded.clamp(i32::MIN as i128, i32::MAX as i128) as i32
    }

    pub fn apply(&self, acc: i32) -> i8 {
        saturate(self.scale(acc) as i64 + self.zero_point as i64)
    }
}

pub fn requantize(acc: i32, r: &Requantizer) -> i8 {
    r.apply(acc)
}
