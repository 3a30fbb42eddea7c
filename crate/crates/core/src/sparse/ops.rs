use std::sync::Arc;

use rayon::prelude::*;

use super::rulebook::{Rulebook, NO_INPUT};
use super::tensor::{Coord, QuantTensor, RealTensor, SparseTensor2D};
use super::PAR_CHUNK;
use crate::error::{Error, Result};
use crate::quant::{QuantParams, Requantizer, QMAX, QMIN};

pub fn relu(x: &RealTensor) -> RealTensor {
    x.map(|v| v.max(0.0))
}

fn check_projection<A: Copy, B: Copy>(base: &SparseTensor2D<A>, other: &SparseTensor2D<B>, factor: u32) -> Result<()> {
    if factor == 0 {
        return Err(Error::Shape("projection factor must be positive".into()));
    }
    if base.channels() != other.channels() {
        return Err(Error::Shape(format!(
            "cannot add {} channels onto {}",
            other.channels(),
            base.channels()
        )));
    }
    let (w, h) = (base.width().div_ceil(factor), base.height().div_ceil(factor));
    if (other.width(), other.height()) != (w, h) {
        return Err(Error::Shape(format!(
            "coarse tensor is {}x{}, expected {w}x{h} for factor {factor}",
            other.width(),
            other.height()
        )));
    }
    Ok(())
}

fn projected<T: Copy>(other: &SparseTensor2D<T>, c: Coord, factor: u32) -> Option<&[T]> {
    other.get(Coord::new(c.i / factor, c.j / factor))
}

/// Adds the coarse tensor's feature at `floor(c / factor)` onto every base
/// site `c`. The output keeps exactly the base active set.
pub fn sparse_add_projected(base: &RealTensor, other: &RealTensor, factor: u32) -> Result<RealTensor> {
    check_projection(base, other, factor)?;
    let mut data = base.data().to_vec();
    for (k, &c) in base.coords().iter().enumerate() {
        if let Some(f) = projected(other, c, factor) {
            let row = &mut data[k * base.channels()..(k + 1) * base.channels()];
            for (a, &b) in row.iter_mut().zip(f) {
                *a += b;
            }
        }
    }
    base.with_data(base.channels(), data)
}

/// INT8 variant: both operands are rescaled to `out` before the sum.
pub fn sparse_add_projected_q(
    base: &QuantTensor,
    other: &QuantTensor,
    factor: u32,
    out: QuantParams,
) -> Result<QuantTensor> {
    check_projection(&base.values, &other.values, factor)?;
    let rb = Requantizer::from_factor(base.qparams.scale as f64 / out.scale as f64, 0)?;
    let ro = Requantizer::from_factor(other.qparams.scale as f64 / out.scale as f64, 0)?;
    let (zb, zo) = (base.qparams.zero_point, other.qparams.zero_point);
    let ch = base.channels();
    let mut data = vec![0i8; base.values.data().len()];
    for (k, (c, f)) in base.values.iter().enumerate() {
        let extra = projected(&other.values, c, factor);
        for (n, &q) in f.iter().enumerate() {
            let mut acc = rb.scale(q as i32 - zb) as i64 + out.zero_point as i64;
            if let Some(e) = extra {
                acc += ro.scale(e[n] as i32 - zo) as i64;
            }
            data[k * ch + n] = acc.clamp(QMIN as i64, QMAX as i64) as i8;
        }
    }
    Ok(QuantTensor {
        values: base.values.with_data(ch, data)?,
        qparams: out,
    })
}

/// Per-channel maximum over active sites in the `k x k` window around each
/// active site. Output sites equal input sites.
pub fn sparse_max_pool<T>(x: &SparseTensor2D<T>, k: usize) -> Result<SparseTensor2D<T>>
where
    T: Copy + PartialOrd + Send + Sync,
{
    let rb = Rulebook::submanifold(x.active(), k)?;
    sparse_max_pool_with(x, &rb)
}

pub fn sparse_max_pool_with<T>(x: &SparseTensor2D<T>, rb: &Rulebook) -> Result<SparseTensor2D<T>>
where
    T: Copy + PartialOrd + Send + Sync,
{
    if !Arc::ptr_eq(rb.output(), rb.input()) || !rb.accepts(x.active()) {
        return Err(Error::Shape("max pooling needs a submanifold rulebook for this tensor".into()));
    }
    let ch = x.channels();
    let mut data = x.data().to_vec();
    data.par_chunks_mut(ch * PAR_CHUNK).enumerate().for_each(|(chunk, rows)| {
        for (r, row) in rows.chunks_exact_mut(ch).enumerate() {
            for &t in rb.taps(chunk * PAR_CHUNK + r) {
                if t == NO_INPUT {
                    continue;
                }
                for (m, &v) in row.iter_mut().zip(x.feature(t as usize)) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
    });
    x.with_data(ch, data)
}
