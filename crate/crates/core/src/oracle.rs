//! Slow reference implementations for tests. Everything here works on dense
//! grids or brute-force loops and shares no code with the sparse kernels
//! beyond the tensor containers and the scalar requantizer.

use std::sync::Arc;

use crate::sparse::{ActiveSet, ConvKernel, Coord, QuantConv, QuantTensor, RealTensor, SparseTensor2D};

/// Output grid size of a strided window over `n` cells.
pub fn out_dim(n: u32, k: usize, stride: u32, padding: u32) -> u32 {
    ((n as i64 + 2 * padding as i64 - k as i64) / stride as i64 + 1) as u32
}

/// Output sites of a regular sparse convolution: every output whose window
/// contains at least one active input.
pub fn active_set_law(input: &ActiveSet, k: usize, stride: u32, padding: u32) -> ActiveSet {
    let (ow, oh) = (
        out_dim(input.width(), k, stride, padding),
        out_dim(input.height(), k, stride, padding),
    );
    let mut coords = Vec::new();
    for oj in 0..oh {
        for oi in 0..ow {
            let hit = (0..k).any(|dy| {
                (0..k).any(|dx| {
                    let x = (stride * oi) as i64 + dx as i64 - padding as i64;
                    let y = (stride * oj) as i64 + dy as i64 - padding as i64;
                    x >= 0
                        && y >= 0
                        && input.contains(Coord::new(x as u32, y as u32))
                })
            });
            if hit {
                coords.push(Coord::new(oi, oj));
            }
        }
    }
    ActiveSet::new(ow, oh, coords).unwrap()
}

fn dense<T: Copy + Default>(x: &SparseTensor2D<T>) -> Vec<T> {
    let (w, c) = (x.width() as usize, x.channels());
    let mut grid = vec![T::default(); w * x.height() as usize * c];
    for (site, f) in x.iter() {
        let base = (site.j as usize * w + site.i as usize) * c;
        grid[base..base + c].copy_from_slice(f);
    }
    grid
}

/// Dense real convolution evaluated at the sites of `out`, in `f64`.
pub fn dense_conv_real(
    x: &RealTensor,
    kernel: &ConvKernel,
    bias: &[f32],
    stride: u32,
    padding: u32,
    relu: bool,
    out: &Arc<ActiveSet>,
) -> Vec<f64> {
    let grid = dense(x);
    let (w, h, cin) = (x.width() as i64, x.height() as i64, x.channels());
    let mut res = Vec::with_capacity(out.len() * kernel.cout);
    for o in out.coords() {
        for co in 0..kernel.cout {
            let mut acc = bias[co] as f64;
            for dy in 0..kernel.size {
                for dx in 0..kernel.size {
                    let xi = (stride * o.i) as i64 + dx as i64 - padding as i64;
                    let yj = (stride * o.j) as i64 + dy as i64 - padding as i64;
                    if xi < 0 || yj < 0 || xi >= w || yj >= h {
                        continue;
                    }
                    let base = (yj * w + xi) as usize * cin;
                    for ci in 0..cin {
                        acc += grid[base + ci] as f64 * kernel.at(dy, dx, ci, co) as f64;
                    }
                }
            }
            res.push(if relu { acc.max(0.0) } else { acc });
        }
    }
    res
}

/// Dense integer convolution with inactive inputs holding the real value 0
/// (code = zero point), evaluated at the sites of `out`.
pub fn dense_conv_int8(x: &QuantTensor, conv: &QuantConv, stride: u32, padding: u32, out: &Arc<ActiveSet>) -> Vec<i8> {
    let zp = x.qparams.zero_point;
    let mut grid = vec![zp as i8; x.values.width() as usize * x.values.height() as usize * conv.cin];
    let w = x.values.width() as i64;
    let h = x.values.height() as i64;
    for (site, f) in x.values.iter() {
        let base = (site.j as usize * w as usize + site.i as usize) * conv.cin;
        grid[base..base + conv.cin].copy_from_slice(f);
    }
    let k = conv.size;
    let mut res = Vec::with_capacity(out.len() * conv.cout);
    for o in out.coords() {
        for co in 0..conv.cout {
            let mut acc: i64 = conv.bias[co] as i64;
            for dy in 0..k {
                for dx in 0..k {
                    let xi = (stride * o.i) as i64 + dx as i64 - padding as i64;
                    let yj = (stride * o.j) as i64 + dy as i64 - padding as i64;
                    if xi < 0 || yj < 0 || xi >= w || yj >= h {
                        continue;
                    }
                    let base = (yj * w + xi) as usize * conv.cin;
                    for ci in 0..conv.cin {
                        let wq = conv.weight[((dy * k + dx) * conv.cin + ci) * conv.cout + co] as i64;
                        acc += (grid[base + ci] as i64 - zp as i64) * wq;
                    }
                }
            }
            let acc = i32::try_from(acc).expect("accumulator fits i32");
            let mut q = conv.requantizers()[co].apply(acc);
            if conv.relu {
                q = q.max(conv.output.zero_point as i8);
            }
            res.push(q);
        }
    }
    res
}

/// Max over the active sites of each active site's `k x k` window.
pub fn brute_max_pool(x: &RealTensor, k: usize) -> Vec<f32> {
    let r = (k / 2) as i64;
    let mut res = Vec::with_capacity(x.data().len());
    for (site, f) in x.iter() {
        let mut best = f.to_vec();
        for (other, g) in x.iter() {
            if (other.i as i64 - site.i as i64).abs() <= r && (other.j as i64 - site.j as i64).abs() <= r {
                for (b, &v) in best.iter_mut().zip(g) {
                    *b = b.max(v);
                }
            }
        }
        res.extend(best);
    }
    res
}

/// Number of `(offset, active input, output)` triples, by enumeration.
pub fn brute_tap_count(input: &ActiveSet, out: &ActiveSet, k: usize, stride: u32, padding: u32) -> u64 {
    let mut n = 0;
    for o in out.coords() {
        for dy in 0..k {
            for dx in 0..k {
                let x = (stride * o.i) as i64 + dx as i64 - padding as i64;
                let y = (stride * o.j) as i64 + dy as i64 - padding as i64;
                if x >= 0 && y >= 0 && input.contains(Coord::new(x as u32, y as u32)) {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Taps along one axis of a fully dense input of `n >= 1` cells.
///
/// A 3-wide stride-1 window loses one tap at each border: `3n - 2`. For
/// `3x3 / stride 2 / pad 1` the `m = ceil(n/2)` outputs lose the left tap
/// of output 0 and, when `n` is odd, the right tap of the last output.
pub fn dense_taps_1d(n: u64, k: u64, stride: u64) -> u64 {
    match (k, stride) {
        (1, 1) => n,
        (3, 1) => 3 * n - 2,
        (3, 2) => 3 * n.div_ceil(2) - 1 - (n % 2),
        _ => panic!("no closed form for k={k} stride={stride}"),
    }
}

/// Random active set where each site is active with probability `occupancy`.
pub fn random_active_set(rng: &mut impl rand::Rng, width: u32, height: u32, occupancy: f64) -> ActiveSet {
    let mut coords = Vec::new();
    for j in 0..height {
        for i in 0..width {
            if rng.gen_bool(occupancy) {
                coords.push(Coord::new(i, j));
            }
        }
    }
    ActiveSet::from_sorted(width, height, coords).unwrap()
}

/// Tensor over a random active set with features uniform in `[-1, 1]`.
pub fn random_tensor(rng: &mut impl rand::Rng, width: u32, height: u32, occupancy: f64, channels: usize) -> RealTensor {
    let active = Arc::new(random_active_set(rng, width, height, occupancy));
    let data = (0..active.len() * channels).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    SparseTensor2D::new(active, channels, data).unwrap()
}

pub fn random_kernel(rng: &mut impl rand::Rng, size: usize, cin: usize, cout: usize) -> ConvKernel {
    let data = (0..size * size * cin * cout).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    ConvKernel::new(size, cin, cout, data).unwrap()
}

/// Random training-form layer of the given kind; identity present when the
/// shapes allow it and `with_identity` is set.
pub fn random_rep_layer(
    rng: &mut impl rand::Rng,
    cin: usize,
    cout: usize,
    kind: crate::reparam::ConvKind,
    with_identity: bool,
) -> crate::reparam::RepConvLayer {
    use crate::reparam::{BnParams, ConvKind, RepBranch, RepConvLayer};
    let mut bn = |c: usize| BnParams {
        gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        running_mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        running_var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        eps: crate::reparam::DEFAULT_BN_EPS,
    };
    let b3 = bn(cout);
    let b1 = bn(cout);
    let identity = (with_identity && cin == cout && kind != ConvKind::Downsample).then(|| bn(cout));
    RepConvLayer {
        conv3x3: RepBranch { kernel: random_kernel(rng, 3, cin, cout), bn: b3 },
        conv1x1: RepBranch { kernel: random_kernel(rng, 1, cin, cout), bn: b1 },
        identity,
        kind,
    }
}
