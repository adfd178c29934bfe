#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use fedia_core::harness::RunConfig;
use fedia_core::synth::DatasetKind;
use fedia_core::{Connectivity, Dims, Grid, Mask, Method};

/// Breadth-first flood fill, labelling components in scan order of their
/// first voxel.
pub fn flood_fill(mask: &Mask, conn: Connectivity) -> (Vec<u32>, usize) {
    let d = mask.dims();
    let src = mask.as_slice();
    let mut labels = vec![0u32; d.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..d.len() {
        if src[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = d.coords(i);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let taxi = dz.abs() + dy.abs() + dx.abs();
                        let ok = match conn {
                            Connectivity::Face => taxi == 1,
                            Connectivity::Full => taxi >= 1,
                        };
                        if !ok {
                            continue;
                        }
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz < 0 || ny < 0 || nx < 0 {
                            continue;
                        }
                        let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                        if nz >= d.depth || ny >= d.height || nx >= d.width {
                            continue;
                        }
                        let j = d.index(nz, ny, nx);
                        if src[j] != 0 && labels[j] == 0 {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Components of at least `min_size` voxels according to the flood fill.
pub fn oracle_count(mask: &Mask, conn: Connectivity, min_size: usize) -> usize {
    let (labels, n) = flood_fill(mask, conn);
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    sizes[1..].iter().filter(|&&s| s >= min_size).count()
}

pub fn mask_from(dims: Dims, bits: &[bool]) -> Mask {
    Grid::from_vec(dims, bits.iter().map(|&b| u8::from(b)).collect())
}

/// A small, fast configuration: two clients, 16×16 slices, one hidden layer.
pub fn tiny_config(method: Method, seed: u64, rounds: u32, warmup: u32) -> RunConfig {
    let mut cfg = RunConfig::defaults(DatasetKind::MsLike, fedia_core::harness::config::Profile::Desk);
    cfg.dataset.clients = 2;
    cfg.dataset.volumes = 6;
    cfg.dataset.test_fraction = 0.3;
    cfg.dataset.completeness = Some(vec![0.5, 1.0]);
    cfg.dataset.volume.depth = 3;
    cfg.dataset.volume.height = 16;
    cfg.dataset.volume.width = 16;
    cfg.dataset.volume.lesion_count_range = (2, 4);
    cfg.dataset.volume.lesion_radius_range = (1.5, 2.5);
    cfg.hidden_channels = vec![4];
    cfg.train.learning_rate = 1e-2;
    cfg.fedia.warmup_rounds = warmup;
    cfg.fedia.total_rounds = rounds;
    cfg.method = method;
    cfg.seed = seed;
    cfg.last_window = 3;
    cfg
}

pub fn with_out(mut cfg: RunConfig, dir: &Path) -> RunConfig {
    cfg.out_dir = dir.to_path_buf();
    cfg
}
