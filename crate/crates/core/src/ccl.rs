//! Connected-component labeling on binary grids (2D slices are grids with
//! depth 1). Two-pass scan with a union-find over provisional labels.

use serde::{Deserialize, Serialize};

use crate::grid::{Dims, Grid, Mask};

/// Neighborhood used to decide whether two foreground voxels touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// 4-neighborhood in 2D, 6-neighborhood in 3D.
    #[default]
    Face,
    /// 8-neighborhood in 2D, 26-neighborhood in 3D.
    Full,
}

impl Connectivity {
    /// Offsets `(dz, dy, dx)` that precede the current voxel in scan order.
    fn backward_offsets(self) -> &'static [(isize, isize, isize)] {
        match self {
            Connectivity::Face => &[(-1, 0, 0), (0, -1, 0), (0, 0, -1)],
            Connectivity::Full => &[
                (-1, -1, -1),
                (-1, -1, 0),
                (-1, -1, 1),
                (-1, 0, -1),
                (-1, 0, 0),
                (-1, 0, 1),
                (-1, 1, -1),
                (-1, 1, 0),
                (-1, 1, 1),
                (0, -1, -1),
                (0, -1, 0),
                (0, -1, 1),
                (0, 0, -1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    /// 0 for background, `1..=count` for components.
    pub labels: Grid<u32>,
    pub count: usize,
    /// `sizes[i]` is the voxel count of component `i + 1`.
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        DisjointSet { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels the foreground components of `mask`. Any nonzero byte is
/// foreground. Labels are numbered in order of each component's first voxel
/// in row-major scan order.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> ComponentMap {
    let dims = mask.dims();
    let src = mask.as_slice();
    let mut provisional = vec![0u32; dims.len()];
    let mut sets = DisjointSet::new();
    let offsets = connectivity.backward_offsets();

    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let idx = dims.index(z, y, x);
                if src[idx] == 0 {
                    continue;
                }
                let mut current = 0u32;
                for &(dz, dy, dx) in offsets {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if nz < 0 || ny < 0 || nx < 0 || ny as usize >= dims.height || nx as usize >= dims.width
                    {
                        continue;
                    }
                    let nl = provisional[dims.index(nz as usize, ny as usize, nx as usize)];
                    if nl == 0 {
                        continue;
                    }
                    current = if current == 0 { nl } else { sets.union(current, nl) };
                }
                provisional[idx] = if current == 0 { sets.make() } else { current };
            }
        }
    }

    // Second pass: resolve roots and renumber by first appearance.
    let mut remap = vec![0u32; sets.parent.len()];
    let mut sizes = Vec::new();
    for label in provisional.iter_mut() {
        if *label == 0 {
            continue;
        }
        let root = sets.find(*label) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *label = remap[root];
        sizes[*label as usize - 1] += 1;
    }

    ComponentMap {
        labels: Grid::from_vec(dims, provisional),
        count: sizes.len(),
        sizes,
    }
}

/// Number of components with at least `min_size` voxels.
pub fn count_components(mask: &Mask, connectivity: Connectivity, min_size: usize) -> usize {
    debug_assert!(min_size >= 1);
    label_components(mask, connectivity)
        .sizes
        .iter()
        .filter(|&&s| s >= min_size)
        .count()
}

/// Per-slice 2D component counts summed over all slices of a volume.
pub fn count_slice_components(mask: &Mask, connectivity: Connectivity, min_size: usize) -> usize {
    (0..mask.dims().depth)
        .map(|z| count_components(&mask.plane(z), connectivity, min_size))
        .sum()
}
