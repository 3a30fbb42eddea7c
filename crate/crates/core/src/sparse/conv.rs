use rayon::prelude::*;

use super::rulebook::{Rulebook, NO_INPUT};
use super::tensor::{QuantTensor, RealTensor, SparseTensor2D};
use super::PAR_CHUNK;
use crate::error::{Error, Result};
use crate::quant::{quantize_per_channel, QuantParams, Requantizer};

/// Dense convolution kernel, laid out `[dy][dx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub data: Vec<f32>,
}

impl ConvKernel {
    pub fn new(size: usize, cin: usize, cout: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {size} must be odd")));
        }
        if cin == 0 || cout == 0 {
            return Err(Error::Shape("kernel channels must be positive".into()));
        }
        if data.len() != size * size * cin * cout {
            return Err(Error::Shape(format!(
                "{} weights for a {size}x{size}x{cin}x{cout} kernel",
                data.len()
            )));
        }
        Ok(Self { size, cin, cout, data })
    }

    pub fn zeros(size: usize, cin: usize, cout: usize) -> Self {
        Self::new(size, cin, cout, vec![0.0; size * size * cin * cout]).expect("valid kernel shape")
    }

    /// Kernel whose center tap is the `channels x channels` identity.
    pub fn identity(size: usize, channels: usize) -> Self {
        let mut k = Self::zeros(size, channels, channels);
        let c = size / 2;
        for ch in 0..channels {
            *k.at_mut(c, c, ch, ch) = 1.0;
        }
        k
    }

    pub fn taps(&self) -> usize {
        self.size * self.size
    }

    fn offset(&self, dy: usize, dx: usize, ci: usize, co: usize) -> usize {
        ((dy * self.size + dx) * self.cin + ci) * self.cout + co
    }

    pub fn at(&self, dy: usize, dx: usize, ci: usize, co: usize) -> f32 {
        self.data[self.offset(dy, dx, ci, co)]
    }

    pub fn at_mut(&mut self, dy: usize, dx: usize, ci: usize, co: usize) -> &mut f32 {
        let k = self.offset(dy, dx, ci, co);
        &mut self.data[k]
    }

    /// `cin x cout` weight matrix of flattened tap `d = dy * size + dx`.
    pub fn tap(&self, d: usize) -> &[f32] {
        let n = self.cin * self.cout;
        &self.data[d * n..(d + 1) * n]
    }

    /// Centers this kernel inside a larger zero kernel.
    pub fn pad_to(&self, size: usize) -> Result<Self> {
        if size < self.size || (size - self.size) % 2 != 0 {
            return Err(Error::Shape(format!("cannot pad a {0}x{0} kernel to {size}x{size}", self.size)));
        }
        let off = (size - self.size) / 2;
        let mut out = Self::zeros(size, self.cin, self.cout);
        for dy in 0..self.size {
            for dx in 0..self.size {
                let n = self.cin * self.cout;
                let dst = ((dy + off) * size + dx + off) * n;
                out.data[dst..dst + n].copy_from_slice(self.tap(dy * self.size + dx));
            }
        }
        Ok(out)
    }
}

/// Maps kernel tap `d` of a `ks`-wide kernel onto the offsets of a rulebook
/// built for a `rk`-wide window; smaller kernels sit at the window center.
fn tap_map(ks: usize, rk: usize) -> Vec<usize> {
    let off = (rk - ks) / 2;
    (0..ks * ks).map(|d| (d / ks + off) * rk + d % ks + off).collect()
}

fn check_conv(in_channels: usize, size: usize, cin: usize, cout: usize, bias: usize, rb: &Rulebook) -> Result<()> {
    if in_channels != cin {
        return Err(Error::Shape(format!("input has {in_channels} channels, kernel expects {cin}")));
    }
    if bias != cout {
        return Err(Error::Shape(format!("{bias} bias values for {cout} output channels")));
    }
    if size > rb.kernel() || (rb.kernel() - size) % 2 != 0 {
        return Err(Error::Shape(format!(
            "{size}x{size} kernel does not fit a {0}x{0} rulebook",
            rb.kernel()
        )));
    }
    Ok(())
}

/// Real-valued sparse convolution over a prepared rulebook.
///
/// Each output accumulates in `f64`, visiting taps in offset order and input
/// channels in order, so results do not depend on scheduling.
pub fn conv_real(x: &RealTensor, rb: &Rulebook, kernel: &ConvKernel, bias: &[f32], relu: bool) -> Result<RealTensor> {
    check_conv(x.channels(), kernel.size, kernel.cin, kernel.cout, bias.len(), rb)?;
    if !rb.accepts(x.active()) {
        return Err(Error::Shape("rulebook was built for a different active set".into()));
    }
    let cout = kernel.cout;
    let map = tap_map(kernel.size, rb.kernel());
    let mut out = vec![0f32; rb.output().len() * cout];
    out.par_chunks_mut(cout * PAR_CHUNK).enumerate().for_each(|(chunk, rows)| {
        let mut acc = vec![0f64; cout];
        for (r, row) in rows.chunks_exact_mut(cout).enumerate() {
            let taps = rb.taps(chunk * PAR_CHUNK + r);
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a = b as f64;
            }
            for (d, &slot) in map.iter().enumerate() {
                let t = taps[slot];
                if t == NO_INPUT {
                    continue;
                }
                let xf = x.feature(t as usize);
                let w = kernel.tap(d);
                for (ci, &xv) in xf.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let xv = xv as f64;
                    for (a, &wv) in acc.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                        *a += xv * wv as f64;
                    }
                }
            }
            for (o, &a) in row.iter_mut().zip(&acc) {
                let v = a as f32;
                *o = if relu { v.max(0.0) } else { v };
            }
        }
    });
    SparseTensor2D::new(std::sync::Arc::clone(rb.output()), cout, out)
}

/// Layer-level helpers that build their own rulebook.
pub fn submanifold_conv(x: &RealTensor, kernel: &ConvKernel, bias: &[f32]) -> Result<RealTensor> {
    let rb = Rulebook::submanifold(x.active(), kernel.size)?;
    conv_real(x, &rb, kernel, bias, false)
}

pub fn sparse_conv(x: &RealTensor, kernel: &ConvKernel, bias: &[f32]) -> Result<RealTensor> {
    let rb = Rulebook::regular(x.active(), kernel.size)?;
    conv_real(x, &rb, kernel, bias, false)
}

pub fn sparse_conv_stride2(x: &RealTensor, kernel: &ConvKernel, bias: &[f32]) -> Result<RealTensor> {
    if kernel.size != 3 {
        return Err(Error::Shape(format!("downsampling expects a 3x3 kernel, got {0}x{0}", kernel.size)));
    }
    let rb = Rulebook::downsample(x.active())?;
    conv_real(x, &rb, kernel, bias, false)
}

/// INT8 convolution layer: symmetric per-output-channel weights, `i32` bias
/// in accumulator units and one requantizer per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConv {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    /// Same layout as [`ConvKernel::data`].
    pub weight: Vec<i8>,
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    /// The real-valued bias `bias` was derived from.
    pub bias_real: Vec<f32>,
    pub input: QuantParams,
    pub output: QuantParams,
    pub relu: bool,
    requant: Vec<Requantizer>,
}

impl QuantConv {
    /// Quantizes a real kernel for the given input and output parameters.
    pub fn new(kernel: &ConvKernel, bias: &[f32], input: QuantParams, output: QuantParams, relu: bool) -> Result<Self> {
        if bias.len() != kernel.cout {
            return Err(Error::Shape(format!("{} bias values for {} output channels", bias.len(), kernel.cout)));
        }
        let (weight, weight_scales) = quantize_per_channel(&kernel.data, kernel.cout);
        Self::from_quantized(kernel.size, kernel.cin, kernel.cout, weight, weight_scales, bias, input, output, relu)
    }

    /// Assembles a layer from already quantized weights and a real bias.
    #[allow(clippy::too_many_arguments)]
    pub fn from_quantized(
        size: usize,
        cin: usize,
        cout: usize,
        weight: Vec<i8>,
        weight_scales: Vec<f32>,
        bias: &[f32],
        input: QuantParams,
        output: QuantParams,
        relu: bool,
    ) -> Result<Self> {
        if weight.len() != size * size * cin * cout || weight_scales.len() != cout || bias.len() != cout {
            return Err(Error::Shape(format!("inconsistent quantized {size}x{size}x{cin}x{cout} layer")));
        }
        let mut bias_q = Vec::with_capacity(cout);
        let mut requant = Vec::with_capacity(cout);
        for (&b, &sw) in bias.iter().zip(&weight_scales) {
            let acc_scale = input.scale as f64 * sw as f64;
            let q = (b as f64 / acc_scale).round_ties_even();
            bias_q.push(q.clamp(-(1i64 << 30) as f64, (1i64 << 30) as f64) as i32);
            requant.push(Requantizer::from_factor(acc_scale / output.scale as f64, output.zero_point)?);
        }
        Ok(Self {
            size,
            cin,
            cout,
            weight,
            weight_scales,
            bias: bias_q,
            bias_real: bias.to_vec(),
            input,
            output,
            relu,
            requant,
        })
    }

    pub fn requantizers(&self) -> &[Requantizer] {
        &self.requant
    }

    /// Turns an accumulator of output channel `c` into an output code.
    pub fn finish(&self, c: usize, acc: i32) -> i8 {
        let q = self.requant[c].apply(acc);
        if self.relu {
            q.max(self.output.zero_point as i8)
        } else {
            q
        }
    }
}

/// INT8 sparse convolution. Products of `(q - zero_point)` and weight codes
/// accumulate exactly in `i32`, so the result is schedule independent.
pub fn conv_int8(x: &QuantTensor, rb: &Rulebook, conv: &QuantConv) -> Result<QuantTensor> {
    check_conv(x.channels(), conv.size, conv.cin, conv.cout, conv.bias.len(), rb)?;
    if !rb.accepts(x.active()) {
        return Err(Error::Shape("rulebook was built for a different active set".into()));
    }
    if x.qparams != conv.input {
        return Err(Error::Shape(format!(
            "input quantization {:?} differs from the layer's {:?}",
            x.qparams, conv.input
        )));
    }
    let (cin, cout) = (conv.cin, conv.cout);
    let zp = conv.input.zero_point;
    let map = tap_map(conv.size, rb.kernel());
    let mut out = vec![0i8; rb.output().len() * cout];
    out.par_chunks_mut(cout * PAR_CHUNK).enumerate().for_each(|(chunk, rows)| {
        let mut acc = vec![0i32; cout];
        for (r, row) in rows.chunks_exact_mut(cout).enumerate() {
            let taps = rb.taps(chunk * PAR_CHUNK + r);
            acc.copy_from_slice(&conv.bias);
            for (d, &slot) in map.iter().enumerate() {
                let t = taps[slot];
                if t == NO_INPUT {
                    continue;
                }
                let xf = x.values.feature(t as usize);
                let w = &conv.weight[d * cin * cout..(d + 1) * cin * cout];
                for (ci, &q) in xf.iter().enumerate() {
                    let xv = q as i32 - zp;
                    if xv == 0 {
                        continue;
                    }
                    // Each product is at most 255 * 127 in magnitude, so the sum
                    // cannot overflow; wrapping ops just keep the loop
                    // vectorized when overflow checks are on.
                    for (a, &wv) in acc.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                        *a = a.wrapping_add(xv.wrapping_mul(wv as i32));
                    }
                }
            }
            for (c, (o, &a)) in row.iter_mut().zip(&acc).enumerate() {
                *o = conv.finish(c, a);
            }
        }
    });
    Ok(QuantTensor {
        values: SparseTensor2D::new(std::sync::Arc::clone(rb.output()), cout, out)?,
        qparams: conv.output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coord;

    fn single(c: Coord, f: Vec<f32>) -> RealTensor {
        SparseTensor2D::from_entries(8, 8, f.len(), vec![(c, f)]).unwrap()
    }

    #[test]
    fn empty_input_empty_output() {
        let x = RealTensor::empty(8, 8, 3);
        let k = ConvKernel::zeros(3, 3, 2);
        assert!(submanifold_conv(&x, &k, &[0.0; 2]).unwrap().is_empty());
        assert!(sparse_conv_stride2(&x, &k, &[0.0; 2]).unwrap().is_empty());
        assert!(sparse_conv(&x, &k, &[0.0; 2]).unwrap().is_empty());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = single(Coord::new(3, 4), vec![1.5, -2.0, 0.25]);
        let y = submanifold_conv(&x, &ConvKernel::identity(3, 3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = single(Coord::new(0, 0), vec![1.0, 2.0]);
        let err = submanifold_conv(&x, &ConvKernel::zeros(3, 3, 1), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = submanifold_conv(&x, &ConvKernel::zeros(3, 2, 1), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn smaller_kernel_uses_center_offset() {
        let x = SparseTensor2D::from_entries(
            4,
            4,
            1,
            vec![(Coord::new(1, 1), vec![2.0]), (Coord::new(2, 1), vec![3.0])],
        )
        .unwrap();
        let rb = Rulebook::submanifold(x.active(), 3).unwrap();
        let k = ConvKernel::new(1, 1, 1, vec![10.0]).unwrap();
        let y = conv_real(&x, &rb, &k, &[1.0], false).unwrap();
        assert_eq!(y.data(), &[21.0, 31.0]);
        let padded = conv_real(&x, &rb, &k.pad_to(3).unwrap(), &[1.0], false).unwrap();
        assert_eq!(padded, y);
    }

    #[test]
    fn relu_clamps_negative() {
        let x = single(Coord::new(0, 0), vec![1.0]);
        let rb = Rulebook::submanifold(x.active(), 1).unwrap();
        let k = ConvKernel::new(1, 1, 2, vec![-1.0, 1.0]).unwrap();
        let y = conv_real(&x, &rb, &k, &[0.0, 0.0], true).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn int8_identity_passthrough() {
        let x = single(Coord::new(2, 2), vec![1.0, -0.5]);
        let qp = QuantParams::new(1.0 / 64.0, 3).unwrap();
        let xq = QuantTensor::quantize(&x, qp);
        let conv = QuantConv::new(&ConvKernel::identity(3, 2), &[0.0, 0.0], qp, qp, false).unwrap();
        let rb = Rulebook::submanifold(xq.active(), 3).unwrap();
        let y = conv_int8(&xq, &rb, &conv).unwrap();
        assert_eq!(y, xq);
    }

    #[test]
    fn int8_rejects_foreign_qparams() {
        let x = single(Coord::new(2, 2), vec![1.0]);
        let xq = QuantTensor::quantize(&x, QuantParams::new(0.1, 0).unwrap());
        let conv = QuantConv::new(
            &ConvKernel::identity(1, 1),
            &[0.0],
            QuantParams::new(0.2, 0).unwrap(),
            QuantParams::new(0.2, 0).unwrap(),
            false,
        )
        .unwrap();
        let rb = Rulebook::submanifold(xq.active(), 1).unwrap();
        assert!(conv_int8(&xq, &rb, &conv).is_err());
    }
}
