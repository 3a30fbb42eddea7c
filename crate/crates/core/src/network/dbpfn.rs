//! Dual-bound pillar encoder.
//!
//! Each point goes through a linear map with no activation; the pillar
//! feature is the channelwise maximum concatenated with the channelwise
//! minimum over its points. The hidden width is half the output width.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pillarizer::{lattice_resolution, Axis, FeatureConfig, FeatureKind, GridConfig, PillarSet};
use crate::quant::{quantize_per_channel, QuantParams, Requantizer};
use crate::reparam::BnParams;
use crate::sparse::{QuantTensor, RealTensor, SparseTensor2D};

#[derive(Debug, Clone, PartialEq)]
pub struct DbpfnParams {
    pub in_features: usize,
    pub hidden: usize,
    /// Row-major `in_features x hidden`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub bn: Option<BnParams>,
}

impl DbpfnParams {
    pub fn new(in_features: usize, hidden: usize, weight: Vec<f32>, bias: Vec<f32>, bn: Option<BnParams>) -> Result<Self> {
        if in_features == 0 || hidden == 0 {
            return Err(Error::Shape("encoder dimensions must be positive".into()));
        }
        if weight.len() != in_features * hidden || bias.len() != hidden {
            return Err(Error::Shape(format!(
                "encoder expects {in_features}x{hidden} weights and {hidden} biases, got {} and {}",
                weight.len(),
                bias.len()
            )));
        }
        if let Some(bn) = &bn {
            bn.validate()?;
            if bn.channels() != hidden {
                return Err(Error::Shape(format!("{} normalization channels for width {hidden}", bn.channels())));
            }
        }
        Ok(Self { in_features, hidden, weight, bias, bn })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.hidden
    }

    /// Equivalent parameters with normalization folded into the linear map.
    pub fn folded(&self) -> Self {
        let Some(bn) = &self.bn else {
            return self.clone();
        };
        let scales: Vec<f32> = (0..self.hidden).map(|h| bn.scale(h)).collect();
        let mut weight = self.weight.clone();
        for row in weight.chunks_exact_mut(self.hidden) {
            for (w, s) in row.iter_mut().zip(&scales) {
                *w *= s;
            }
        }
        let bias = (0..self.hidden)
            .map(|h| (self.bias[h] - bn.running_mean[h]) * scales[h] + bn.beta[h])
            .collect();
        Self {
            in_features: self.in_features,
            hidden: self.hidden,
            weight,
            bias,
            bn: None,
        }
    }

    fn point(&self, f: &[f64], out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o = b as f64;
        }
        for (k, &v) in f.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.weight[k * self.hidden..(k + 1) * self.hidden]) {
                *o += v * w as f64;
            }
        }
        if let Some(bn) = &self.bn {
            for (h, o) in out.iter_mut().enumerate() {
                *o = bn.apply(h, *o as f32) as f64;
            }
        }
    }
}

fn check_input(pillars: &PillarSet, in_features: usize) -> Result<()> {
    if pillars.num_features != in_features {
        return Err(Error::Shape(format!(
            "pillars carry {} features, encoder expects {in_features}",
            pillars.num_features
        )));
    }
    Ok(())
}

pub fn dbpfn_encode(pillars: &PillarSet, params: &DbpfnParams) -> Result<RealTensor> {
    check_input(pillars, params.in_features)?;
    let (nf, h) = (params.in_features, params.hidden);
    let mut data = vec![0f32; pillars.len() * 2 * h];
    data.par_chunks_mut(2 * h).zip(&pillars.pillars).for_each(|(out, pillar)| {
        let mut hi = vec![f64::NEG_INFINITY; h];
        let mut lo = vec![f64::INFINITY; h];
        let mut y = vec![0f64; h];
        for f in pillar.features.chunks_exact(nf) {
            params.point(f, &mut y);
            for k in 0..h {
                hi[k] = hi[k].max(y[k]);
                lo[k] = lo[k].min(y[k]);
            }
        }
        for k in 0..h {
            out[k] = hi[k] as f32;
            out[h + k] = lo[k] as f32;
        }
    });
    SparseTensor2D::new(Arc::new(pillars.active_set()), 2 * h, data)
}

/// Fixed INT8 parameters for each input feature.
///
/// Coarse values are multiples of the lattice step, so with the step as
/// scale they quantize exactly; detail values use 1/256 of the step.
pub fn input_qparams(grid: &GridConfig, features: &FeatureConfig) -> Result<Vec<QuantParams>> {
    let range = |a: Axis| match a {
        Axis::X => (grid.x_min, grid.x_max),
        Axis::Y => (grid.y_min, grid.y_max),
        Axis::Z => (grid.z_min, grid.z_max),
    };
    features
        .layout()
        .into_iter()
        .map(|kind| match kind {
            FeatureKind::Coarse(a) => {
                let (lo, hi) = range(a);
                let res = lattice_resolution(lo, hi);
                let zp = (-128.0 - (lo / res).floor()).clamp(-128.0, 127.0) as i32;
                QuantParams::new(res as f32, zp)
            }
            FeatureKind::Detail(a) => {
                let (lo, hi) = range(a);
                QuantParams::new((lattice_resolution(lo, hi) / 256.0) as f32, -128)
            }
            FeatureKind::Intensity => {
                let scale = if features.normalize_intensity { 1.0 / 255.0 } else { 1.0 };
                QuantParams::new(scale, -128)
            }
            FeatureKind::CenterOffset(a) => {
                let size = if a == Axis::X { grid.pillar_size_x } else { grid.pillar_size_y };
                QuantParams::new((size / 2.0 / 127.0) as f32, 0)
            }
        })
        .collect()
}

/// INT8 encoder. Input scales are folded into the weights, so the
/// accumulator of hidden unit `h` is in units of `weight_scales[h]`. Max and
/// min are taken on accumulators, then requantized; requantization is
/// monotone so the order does not matter.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantEncoder {
    pub input: Vec<QuantParams>,
    pub hidden: usize,
    pub weight: Vec<i8>,
    pub weight_scales: Vec<f32>,
    /// Real-valued bias, kept for serialization.
    pub bias_real: Vec<f32>,
    pub output: QuantParams,
    bias: Vec<i32>,
    requant: Vec<Requantizer>,
}

impl QuantEncoder {
    /// Quantizes (normalization-free) encoder parameters.
    pub fn new(params: &DbpfnParams, input: Vec<QuantParams>, output: QuantParams) -> Result<Self> {
        let p = params.folded();
        if input.len() != p.in_features {
            return Err(Error::Shape(format!("{} input parameters for {} features", input.len(), p.in_features)));
        }
        let mut scaled = p.weight.clone();
        for (row, qp) in scaled.chunks_exact_mut(p.hidden).zip(&input) {
            for w in row {
                *w = (*w as f64 * qp.scale as f64) as f32;
            }
        }
        let (weight, weight_scales) = quantize_per_channel(&scaled, p.hidden);
        Self::from_quantized(input, p.hidden, weight, weight_scales, p.bias, output)
    }

    pub fn from_quantized(
        input: Vec<QuantParams>,
        hidden: usize,
        weight: Vec<i8>,
        weight_scales: Vec<f32>,
        bias_real: Vec<f32>,
        output: QuantParams,
    ) -> Result<Self> {
        if weight.len() != input.len() * hidden || weight_scales.len() != hidden || bias_real.len() != hidden {
            return Err(Error::Shape("inconsistent quantized encoder".into()));
        }
        let mut bias = Vec::with_capacity(hidden);
        let mut requant = Vec::with_capacity(hidden);
        for (&b, &s) in bias_real.iter().zip(&weight_scales) {
            let q = (b as f64 / s as f64).round_ties_even();
            bias.push(q.clamp(-(1i64 << 30) as f64, (1i64 << 30) as f64) as i32);
            requant.push(Requantizer::from_factor(s as f64 / output.scale as f64, output.zero_point)?);
        }
        Ok(Self {
            input,
            hidden,
            weight,
            weight_scales,
            bias_real,
            output,
            bias,
            requant,
        })
    }

    pub fn in_features(&self) -> usize {
        self.input.len()
    }

    pub fn encode(&self, pillars: &PillarSet) -> Result<QuantTensor> {
        check_input(pillars, self.in_features())?;
        let (nf, h) = (self.in_features(), self.hidden);
        let mut data = vec![0i8; pillars.len() * 2 * h];
        data.par_chunks_mut(2 * h).zip(&pillars.pillars).for_each(|(out, pillar)| {
            let mut hi = vec![i32::MIN; h];
            let mut lo = vec![i32::MAX; h];
            let mut q = vec![0i32; nf];
            let mut acc = vec![0i32; h];
            for f in pillar.features.chunks_exact(nf) {
                for ((qv, &v), qp) in q.iter_mut().zip(f).zip(&self.input) {
                    *qv = qp.quantize(v as f32) as i32 - qp.zero_point;
                }
                acc.copy_from_slice(&self.bias);
                for (k, &xv) in q.iter().enumerate() {
                    if xv == 0 {
                        continue;
                    }
                    for (a, &w) in acc.iter_mut().zip(&self.weight[k * h..(k + 1) * h]) {
                        *a += xv * w as i32;
                    }
                }
                for k in 0..h {
                    hi[k] = hi[k].max(acc[k]);
                    lo[k] = lo[k].min(acc[k]);
                }
            }
            for k in 0..h {
                out[k] = self.requant[k].apply(hi[k]);
                out[h + k] = self.requant[k].apply(lo[k]);
            }
        });
        Ok(QuantTensor {
            values: SparseTensor2D::new(Arc::new(pillars.active_set()), 2 * h, data)?,
            qparams: self.output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pillarizer::Pillar;
    use crate::sparse::Coord;

    fn pillar_set(pillars: Vec<Pillar>, nf: usize) -> PillarSet {
        PillarSet {
            width: 8,
            height: 8,
            num_features: nf,
            pillars,
            stats: Default::default(),
        }
    }

    #[test]
    fn two_point_max_min() {
        // identity map on 2 features: points map to [1,-2] and [3,-5]
        let params = DbpfnParams::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], None).unwrap();
        let set = pillar_set(
            vec![Pillar { coord: Coord::new(1, 1), features: vec![1.0, -2.0, 3.0, -5.0] }],
            2,
        );
        let out = dbpfn_encode(&set, &params).unwrap();
        assert_eq!(out.channels(), 4);
        assert_eq!(out.feature(0), &[3.0, -2.0, 1.0, -5.0]);
    }

    #[test]
    fn single_point_halves_equal() {
        let params = DbpfnParams::new(3, 4, (0..12).map(|k| k as f32 * 0.1 - 0.5).collect(), vec![0.1; 4], None).unwrap();
        let set = pillar_set(vec![Pillar { coord: Coord::new(0, 0), features: vec![0.3, -1.0, 2.0] }], 3);
        let out = dbpfn_encode(&set, &params).unwrap();
        let f = out.feature(0);
        assert_eq!(&f[..4], &f[4..]);
    }

    #[test]
    fn folding_preserves_output() {
        let bn = BnParams {
            gamma: vec![1.5, 0.5],
            beta: vec![0.2, -0.3],
            running_mean: vec![0.1, 0.4],
            running_var: vec![0.8, 1.2],
            eps: 1e-5,
        };
        let params = DbpfnParams::new(2, 2, vec![0.5, -1.0, 2.0, 0.25], vec![0.1, -0.2], Some(bn)).unwrap();
        let set = pillar_set(vec![Pillar { coord: Coord::new(0, 0), features: vec![1.0, 2.0, -1.0, 0.5] }], 2);
        let a = dbpfn_encode(&set, &params).unwrap();
        let b = dbpfn_encode(&set, &params.folded()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn shape_errors() {
        assert!(DbpfnParams::new(2, 2, vec![0.0; 3], vec![0.0; 2], None).is_err());
        let params = DbpfnParams::new(2, 2, vec![0.0; 4], vec![0.0; 2], None).unwrap();
        assert!(dbpfn_encode(&pillar_set(vec![], 3), &params).is_err());
    }

    #[test]
    fn default_input_params() {
        let qps = input_qparams(&GridConfig::default(), &FeatureConfig::default()).unwrap();
        assert_eq!(qps.len(), 9);
        assert_eq!(qps[0], QuantParams { scale: 0.421875, zero_point: 0 });
        assert_eq!(qps[1].scale as f64, 108.0 / 65536.0);
        // z: [-5, 3) -> step 1/32, -5 / (1/32) = -160
        assert_eq!(qps[4], QuantParams { scale: 0.03125, zero_point: 32 });
        assert_eq!(qps[6], QuantParams { scale: 1.0, zero_point: -128 });
    }

    #[test]
    fn coarse_features_quantize_exactly() {
        let grid = GridConfig::default();
        let qps = input_qparams(&grid, &FeatureConfig::default()).unwrap();
        for v in [-54.0, -3.3, 0.0, 10.0, 53.99] {
            let (c, _) = crate::pillarizer::coarse_detail_split(v, -54.0, 54.0).unwrap();
            assert_eq!(qps[0].dequantize(qps[0].quantize(c as f32)) as f64, c);
        }
        for v in [-5.0, -1.234, 2.99] {
            let (c, _) = crate::pillarizer::coarse_detail_split(v, -5.0, 3.0).unwrap();
            assert_eq!(qps[4].dequantize(qps[4].quantize(c as f32)) as f64, c);
        }
    }
}
