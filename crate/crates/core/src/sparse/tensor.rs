use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// Grid coordinate: `i` indexes x (width), `j` indexes y (height).
///
/// Ordering is row-major, `(j, i)`, which is the canonical iteration order
/// for every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coord {
    pub i: u32,
    pub j: u32,
}

impl Coord {
    pub const fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }
}

impl Ord for Coord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.j, self.i).cmp(&(other.j, other.i))
    }
}

impl PartialOrd for Coord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sorted unique set of active sites on a `width x height` grid.
#[derive(Clone)]
pub struct ActiveSet {
    width: u32,
    height: u32,
    coords: Vec<Coord>,
    index: HashMap<Coord, u32>,
}

impl std::fmt::Debug for ActiveSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActiveSet")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("coords", &self.coords.iter().map(|c| (c.i, c.j)).collect::<Vec<_>>())
            .finish()
    }
}

impl PartialEq for ActiveSet {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.coords == other.coords
    }
}

impl Eq for ActiveSet {}

impl ActiveSet {
    /// Builds a set from coordinates in any order; duplicates are an error.
    pub fn new(width: u32, height: u32, coords: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let mut coords: Vec<Coord> = coords.into_iter().collect();
        coords.sort_unstable();
        if let Some(w) = coords.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Shape(format!("duplicate active site ({}, {})", w[0].i, w[0].j)));
        }
        Self::from_sorted(width, height, coords)
    }

    /// `coords` must already be strictly increasing.
    pub fn from_sorted(width: u32, height: u32, coords: Vec<Coord>) -> Result<Self> {
        if coords.len() > u32::MAX as usize - 1 {
            return Err(Error::Shape("too many active sites".into()));
        }
        if let Some(w) = coords.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!(
                "active sites not strictly increasing at ({}, {})",
                w[1].i, w[1].j
            )));
        }
        if let Some(c) = coords.iter().find(|c| c.i >= width || c.j >= height) {
            return Err(Error::Shape(format!(
                "active site ({}, {}) outside {width}x{height} grid",
                c.i, c.j
            )));
        }
        let index = coords.iter().enumerate().map(|(k, &c)| (c, k as u32)).collect();
        Ok(Self {
            width,
            height,
            coords,
            index,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            coords: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn index_of(&self, c: Coord) -> Option<usize> {
        self.index.get(&c).map(|&k| k as usize)
    }

    /// Index of the site at signed position `(i, j)`, if it is in range and active.
    pub(crate) fn lookup(&self, i: i64, j: i64) -> Option<u32> {
        if i < 0 || j < 0 || i >= self.width as i64 || j >= self.height as i64 {
            return None;
        }
        self.index.get(&Coord::new(i as u32, j as u32)).copied()
    }
}

/// Features of length `channels` at each site of an active set.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor2D<T> {
    active: Arc<ActiveSet>,
    channels: usize,
    data: Vec<T>,
}

pub type RealTensor = SparseTensor2D<f32>;

impl<T: Copy> SparseTensor2D<T> {
    pub fn new(active: Arc<ActiveSet>, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("tensor needs at least one channel".into()));
        }
        if data.len() != active.len() * channels {
            return Err(Error::Shape(format!(
                "{} values for {} sites x {channels} channels",
                data.len(),
                active.len()
            )));
        }
        Ok(Self {
            active,
            channels,
            data,
        })
    }

    /// Builds a tensor from `(site, features)` entries in any order.
    pub fn from_entries(
        width: u32,
        height: u32,
        channels: usize,
        mut entries: Vec<(Coord, Vec<T>)>,
    ) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if let Some(e) = entries.iter().find(|e| e.1.len() != channels) {
            return Err(Error::Shape(format!(
                "site ({}, {}) has {} features, expected {channels}",
                e.0.i,
                e.0.j,
                e.1.len()
            )));
        }
        let active = ActiveSet::new(width, height, entries.iter().map(|e| e.0))?;
        let data = entries.into_iter().flat_map(|e| e.1).collect();
        Self::new(Arc::new(active), channels, data)
    }

    pub fn empty(width: u32, height: u32, channels: usize) -> Self {
        Self {
            active: Arc::new(ActiveSet::empty(width, height)),
            channels,
            data: Vec::new(),
        }
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        &self.active
    }

    pub fn width(&self) -> u32 {
        self.active.width
    }

    pub fn height(&self) -> u32 {
        self.active.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.active.coords
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn feature(&self, idx: usize) -> &[T] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn get(&self, c: Coord) -> Option<&[T]> {
        self.active.index_of(c).map(|k| self.feature(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Coord, &[T])> {
        self.active.coords.iter().copied().zip(self.data.chunks_exact(self.channels))
    }

    /// Same sites, elementwise-mapped values.
    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> SparseTensor2D<U> {
        SparseTensor2D {
            active: Arc::clone(&self.active),
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Shares this tensor's site set with new data.
    pub fn with_data<U: Copy>(&self, channels: usize, data: Vec<U>) -> Result<SparseTensor2D<U>> {
        SparseTensor2D::new(Arc::clone(&self.active), channels, data)
    }
}

/// INT8 tensor together with the parameters that give its values meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub values: SparseTensor2D<i8>,
    pub qparams: QuantParams,
}

impl QuantTensor {
    pub fn quantize(x: &RealTensor, qparams: QuantParams) -> Self {
        Self {
            values: x.map(|v| qparams.quantize(v)),
            qparams,
        }
    }

    pub fn dequantize(&self) -> RealTensor {
        let qp = self.qparams;
        self.values.map(|q| qp.dequantize(q))
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        self.values.active()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_row_major() {
        let set = ActiveSet::new(4, 4, [Coord::new(3, 0), Coord::new(0, 1), Coord::new(1, 0)]).unwrap();
        assert_eq!(set.coords(), &[Coord::new(1, 0), Coord::new(3, 0), Coord::new(0, 1)]);
        assert_eq!(set.index_of(Coord::new(0, 1)), Some(2));
        assert_eq!(set.lookup(-1, 0), None);
        assert_eq!(set.lookup(3, 0), Some(1));
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(ActiveSet::new(4, 4, [Coord::new(1, 1), Coord::new(1, 1)]).is_err());
        assert!(ActiveSet::new(4, 4, [Coord::new(4, 0)]).is_err());
        assert!(ActiveSet::from_sorted(4, 4, vec![Coord::new(1, 1), Coord::new(0, 1)]).is_err());
    }

    #[test]
    fn tensor_shape_checks() {
        let set = Arc::new(ActiveSet::new(2, 2, [Coord::new(0, 0)]).unwrap());
        assert!(SparseTensor2D::new(Arc::clone(&set), 2, vec![1.0f32]).is_err());
        assert!(SparseTensor2D::<f32>::new(Arc::clone(&set), 0, vec![]).is_err());
        let t = SparseTensor2D::new(set, 2, vec![1.0f32, 2.0]).unwrap();
        assert_eq!(t.get(Coord::new(0, 0)), Some(&[1.0, 2.0][..]));
        assert_eq!(t.get(Coord::new(1, 0)), None);
        let bad = SparseTensor2D::from_entries(2, 2, 2, vec![(Coord::new(0, 0), vec![1.0f32])]);
        assert!(bad.is_err());
    }

    #[test]
    fn quant_round_trip() {
        let t = SparseTensor2D::from_entries(3, 3, 2, vec![(Coord::new(2, 1), vec![0.5f32, -1.0])]).unwrap();
        let qp = QuantParams::new(0.5, 1).unwrap();
        let q = QuantTensor::quantize(&t, qp);
        assert_eq!(q.values.data(), &[2, -1]);
        assert_eq!(q.dequantize(), t);
    }
}
