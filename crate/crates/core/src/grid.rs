//! Dense row-major 3D grids. A 2D slice is a grid with `depth == 1`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims { depth, height, width }
    }

    pub const fn plane(height: usize, width: usize) -> Self {
        Dims { depth: 1, height, width }
    }

    pub const fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.width;
        let rest = idx / self.width;
        (rest / self.height, rest % self.height, x)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    dims: Dims,
    data: Vec<T>,
}

/// Binary mask, one byte per voxel holding 0 or 1.
pub type Mask = Grid<u8>;

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(dims: Dims) -> Self {
        Grid {
            dims,
            data: vec![T::default(); dims.len()],
        }
    }
}

impl<T> Grid<T> {
    /// Panics if `data.len()` does not match `dims`.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(dims.len(), data.len(), "grid data length does not match {dims}");
        Grid { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let n = self.dims.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(z, y, x);
        self.data[i] = v;
    }

    /// Copies slice `z` out as a standalone 2D grid.
    pub fn plane(&self, z: usize) -> Grid<T> {
        Grid {
            dims: Dims::plane(self.dims.height, self.dims.width),
            data: self.slice(z).to_vec(),
        }
    }
}

impl Mask {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }
}
