//! Dense row-major `f64` tensors and integer voxel grids.

use crate::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Dense N-D array of `f64` stored contiguously in row-major order.
///
/// Volumetric tensors use the layout `[channels, depth, height, width]`
/// (or `[depth, height, width]` for a single channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be in 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape holds {n} elements but data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internal construction where the shape
    /// is known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Row-major flat offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for (slot, &n) in idx.iter_mut().zip(&self.shape).rev() {
            *slot = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Number of channels of a `[C, D, H, W]` tensor (1 for rank-3).
    pub fn channels(&self) -> usize {
        if self.rank() == 4 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing three extents `(D, H, W)`.
    pub fn spatial(&self) -> [usize; 3] {
        let r = self.rank();
        assert!(r >= 3, "tensor of rank {r} has no spatial extents");
        [self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]]
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Views a rank-3 `(D,H,W)` tensor as `(1,D,H,W)`; rank-4 passes through.
    pub fn into_channels_first(self) -> Self {
        if self.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.shape);
            Tensor {
                shape,
                data: self.data,
            }
        } else {
            self
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates `[C_i, D, H, W]` tensors (rank-3 inputs count as one
    /// channel) along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let spatial = first.spatial();
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.spatial() != spatial {
                return Err(Error::shape("concat spatial", &spatial, &p.spatial()));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[channels, spatial[0], spatial[1], spatial[2]], data)
    }

    /// Splits a `[C, D, H, W]` tensor into pieces with the given channel counts.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        let [d, h, w] = self.spatial();
        let n = d * h * w;
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(Tensor {
                shape: vec![c, d, h, w],
                data: self.data[start * n..(start + c) * n].to_vec(),
            });
            start += c;
        }
        assert_eq!(start, self.channels(), "split sizes must cover all channels");
        out
    }
}

/// Integer or boolean voxel grid with shape `(D, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

pub type LabelGrid = Grid<u16>;
pub type BinaryMask = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("grid holds {n} voxels but data has {}", data.len()),
            });
        }
        Ok(Grid { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        let n = check_shape(&shape).expect("valid grid shape");
        Grid {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
