use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::{ActiveSet, Coord};
use super::PAR_CHUNK;
use crate::error::{Error, Result};

/// Marks a kernel tap with no active input.
pub const NO_INPUT: u32 = u32::MAX;

/// Gather table for one sparse convolution.
///
/// For output site `o` and kernel offset `d = (dx, dy)` (flattened as
/// `dy * k + dx`) the tap reads input position
/// `stride * o + d - padding`; `taps` stores that input's index, or
/// [`NO_INPUT`] when the position is out of range or inactive. Grouping the
/// same entries by offset gives the classic per-offset `(in, out)` pair lists.
#[derive(Debug, Clone)]
pub struct Rulebook {
    kernel: usize,
    stride: u32,
    padding: u32,
    input: Arc<ActiveSet>,
    output: Arc<ActiveSet>,
    taps: Vec<u32>,
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Shape(format!("kernel size {kernel} must be odd")));
    }
    Ok(())
}

impl Rulebook {
    /// Output sites are exactly the input sites.
    pub fn submanifold(input: &Arc<ActiveSet>, kernel: usize) -> Result<Self> {
        check_kernel(kernel)?;
        let padding = (kernel / 2) as u32;
        let taps = fill_taps(input, input, kernel, 1, padding);
        Ok(Self {
            kernel,
            stride: 1,
            padding,
            input: Arc::clone(input),
            output: Arc::clone(input),
            taps,
        })
    }

    /// Regular sparse convolution: an output site is active whenever any tap
    /// touches an active input.
    pub fn strided(input: &Arc<ActiveSet>, kernel: usize, stride: u32, padding: u32) -> Result<Self> {
        check_kernel(kernel)?;
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let out_dim = |n: u32| -> Result<u32> {
            let span = n as i64 + 2 * padding as i64 - kernel as i64;
            if span < 0 {
                return Err(Error::Shape(format!("{n}-wide input smaller than {kernel}-wide kernel")));
            }
            Ok((span / stride as i64 + 1) as u32)
        };
        let (ow, oh) = (out_dim(input.width())?, out_dim(input.height())?);
        let k = kernel as i64;
        let (s, p) = (stride as i64, padding as i64);
        let mut coords = Vec::with_capacity(input.len() * 2);
        for c in input.coords() {
            for dy in 0..k {
                let ny = c.j as i64 + p - dy;
                if ny < 0 || ny % s != 0 || ny / s >= oh as i64 {
                    continue;
                }
                for dx in 0..k {
                    let nx = c.i as i64 + p - dx;
                    if nx < 0 || nx % s != 0 || nx / s >= ow as i64 {
                        continue;
                    }
                    coords.push(Coord::new((nx / s) as u32, (ny / s) as u32));
                }
            }
        }
        coords.sort_unstable();
        coords.dedup();
        let output = Arc::new(ActiveSet::from_sorted(ow, oh, coords)?);
        let taps = fill_taps(input, &output, kernel, stride, padding);
        Ok(Self {
            kernel,
            stride,
            padding,
            input: Arc::clone(input),
            output,
            taps,
        })
    }

    /// Same-size regular (dilating) convolution.
    pub fn regular(input: &Arc<ActiveSet>, kernel: usize) -> Result<Self> {
        Self::strided(input, kernel, 1, (kernel / 2) as u32)
    }

    /// 3x3, stride 2, padding 1 downsampling.
    pub fn downsample(input: &Arc<ActiveSet>) -> Result<Self> {
        Self::strided(input, 3, 2, 1)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn padding(&self) -> u32 {
        self.padding
    }

    pub fn input(&self) -> &Arc<ActiveSet> {
        &self.input
    }

    pub fn output(&self) -> &Arc<ActiveSet> {
        &self.output
    }

    /// Input indices for output `o`, one per kernel offset.
    pub fn taps(&self, o: usize) -> &[u32] {
        let kk = self.kernel * self.kernel;
        &self.taps[o * kk..(o + 1) * kk]
    }

    /// Number of `(offset, input, output)` triples.
    pub fn num_pairs(&self) -> u64 {
        self.taps.iter().filter(|&&t| t != NO_INPUT).count() as u64
    }

    /// `(input index, output index)` pairs for each kernel offset.
    pub fn offset_pairs(&self) -> Vec<Vec<(u32, u32)>> {
        let kk = self.kernel * self.kernel;
        let mut out = vec![Vec::new(); kk];
        for (o, row) in self.taps.chunks_exact(kk).enumerate() {
            for (d, &t) in row.iter().enumerate() {
                if t != NO_INPUT {
                    out[d].push((t, o as u32));
                }
            }
        }
        out
    }

    /// `(input site, output site)` pairs for kernel offset `(dx, dy)`.
    pub fn pairs(&self, dx: usize, dy: usize) -> Vec<(Coord, Coord)> {
        let d = dy * self.kernel + dx;
        let kk = self.kernel * self.kernel;
        self.taps
            .chunks_exact(kk)
            .enumerate()
            .filter(|(_, row)| row[d] != NO_INPUT)
            .map(|(o, row)| (self.input.coords()[row[d] as usize], self.output.coords()[o]))
            .collect()
    }

    /// Whether `input` is the set this rulebook was built for.
    pub(crate) fn accepts(&self, input: &Arc<ActiveSet>) -> bool {
        Arc::ptr_eq(&self.input, input) || *self.input == **input
    }
}

fn fill_taps(input: &ActiveSet, output: &ActiveSet, kernel: usize, stride: u32, padding: u32) -> Vec<u32> {
    let kk = kernel * kernel;
    let mut taps = vec![NO_INPUT; output.len() * kk];
    let (s, p) = (stride as i64, padding as i64);
    taps.par_chunks_mut(kk * PAR_CHUNK).enumerate().for_each(|(chunk, rows)| {
        for (r, row) in rows.chunks_exact_mut(kk).enumerate() {
            let o = output.coords()[chunk * PAR_CHUNK + r];
            let (bx, by) = (o.i as i64 * s - p, o.j as i64 * s - p);
            for dy in 0..kernel {
                for dx in 0..kernel {
                    if let Some(idx) = input.lookup(bx + dx as i64, by + dy as i64) {
                        row[dy * kernel + dx] = idx;
                    }
                }
            }
        }
    });
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn set(w: u32, h: u32, pts: &[(u32, u32)]) -> Arc<ActiveSet> {
        Arc::new(ActiveSet::new(w, h, pts.iter().map(|&(i, j)| Coord::new(i, j))).unwrap())
    }

    #[test]
    fn single_site_downsample_outputs() {
        let rb = Rulebook::downsample(&set(12, 12, &[(5, 5)])).unwrap();
        let got: BTreeSet<(u32, u32)> = rb.output().coords().iter().map(|c| (c.i, c.j)).collect();
        let want: BTreeSet<(u32, u32)> = [(2, 2), (2, 3), (3, 2), (3, 3)].into_iter().collect();
        assert_eq!(got, want);
        assert_eq!((rb.output().width(), rb.output().height()), (6, 6));
        assert_eq!(rb.num_pairs(), 4);
    }

    #[test]
    fn odd_dims_round_up() {
        let rb = Rulebook::downsample(&set(7, 5, &[(6, 4)])).unwrap();
        assert_eq!((rb.output().width(), rb.output().height()), (4, 3));
        assert_eq!(rb.output().coords(), &[Coord::new(3, 2)]);
    }

    #[test]
    fn submanifold_single_site_has_center_tap_only() {
        let rb = Rulebook::submanifold(&set(5, 5, &[(2, 2)]), 3).unwrap();
        assert_eq!(rb.num_pairs(), 1);
        assert_eq!(rb.taps(0)[4], 0);
        assert_eq!(rb.pairs(1, 1), vec![(Coord::new(2, 2), Coord::new(2, 2))]);
    }

    #[test]
    fn pairs_follow_offsets() {
        let rb = Rulebook::submanifold(&set(5, 5, &[(2, 2), (3, 2)]), 3).unwrap();
        // output (2,2) reads (3,2) through offset dx=2, dy=1
        assert_eq!(rb.pairs(2, 1), vec![(Coord::new(3, 2), Coord::new(2, 2))]);
        assert_eq!(rb.pairs(0, 1), vec![(Coord::new(2, 2), Coord::new(3, 2))]);
        let by_offset = rb.offset_pairs();
        assert_eq!(by_offset.iter().map(Vec::len).sum::<usize>() as u64, rb.num_pairs());
    }

    #[test]
    fn regular_dilates() {
        let rb = Rulebook::regular(&set(5, 5, &[(0, 0)]), 3).unwrap();
        assert_eq!(rb.output().coords(), &[Coord::new(0, 0), Coord::new(1, 0), Coord::new(0, 1), Coord::new(1, 1)]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Rulebook::submanifold(&set(3, 3, &[]), 2).is_err());
    }
}
