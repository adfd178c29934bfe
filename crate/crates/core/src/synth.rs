//! Synthetic multi-lesion volumes and lesion-level annotation removal.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ccl::{label_components, Connectivity};
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, Mask};
use crate::rng::{self, Domain};

/// Intensity added on lesion voxels before noise.
pub const LESION_CONTRAST: f32 = 0.5;

/// Every lesion cross-section must cover at least this many pixels, so that
/// per-slice counts survive the speckle filter applied to predictions.
pub const MIN_SECTION_VOXELS: usize = 7;

const PLACEMENT_TRIES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive `[min, max]` lesion count.
    pub lesion_count_range: (usize, usize),
    /// Inclusive `[min, max]` semi-axis length in voxels.
    pub lesion_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub background_level: f64,
}

impl Default for VolumeSpec {
    fn default() -> Self {
        VolumeSpec {
            depth: 8,
            height: 32,
            width: 32,
            lesion_count_range: (6, 10),
            lesion_radius_range: (1.2, 2.5),
            noise_sigma: 0.1,
            background_level: 0.2,
        }
    }
}

impl VolumeSpec {
    pub fn dims(&self) -> Dims {
        Dims::new(self.depth, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.lesion_count_range;
        let (rmin, rmax) = self.lesion_radius_range;
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("volume dimensions must be positive"));
        }
        if cmin > cmax {
            return Err(Error::config("volume.lesions_min exceeds volume.lesions_max"));
        }
        if !(rmin.is_finite() && rmax.is_finite()) || rmin < 1.0 || rmin > rmax {
            return Err(Error::config(
                "volume lesion radius range must satisfy 1 <= min <= max",
            ));
        }
        let span = 2.0 * rmax + 1.0;
        if span > self.height as f64 || span > self.width as f64 {
            return Err(Error::config("volume.radius_max too large for the slice size"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("volume.noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::config("volume.background must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVolume {
    pub image: Grid<f32>,
    pub gt_mask: Mask,
    pub noisy_mask: Mask,
    pub working_mask: Mask,
    pub gt_component_count: usize,
    pub kept_component_count: usize,
}

impl LabeledVolume {
    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    pub fn is_uncorrupted(&self) -> bool {
        self.noisy_mask == self.gt_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    MsLike,
    LungLike,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ms" | "ms-like" => Ok(DatasetKind::MsLike),
            "lung" | "lung-like" => Ok(DatasetKind::LungLike),
            other => Err(Error::config(format!("dataset.kind: unknown kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::MsLike => "ms-like",
            DatasetKind::LungLike => "lung-like",
        })
    }
}

/// Per-client completeness rates for setting `m`. Client indices start at 0.
pub fn completeness_schedule(kind: DatasetKind, m: u32, clients: usize) -> Result<Vec<f64>> {
    // Integer percent arithmetic keeps the table values exact.
    let (slope, shift, base) = match kind {
        DatasetKind::MsLike => (20i64, 10i64, 40i64),
        DatasetKind::LungLike => (10, 30, 70),
    };
    (0..clients as i64)
        .map(|k| {
            let pct = slope * k - shift * m as i64 + base;
            if pct <= 0 || pct > 100 {
                Err(Error::config(format!(
                    "completeness schedule ({kind}, m={m}) gives {pct}% for client {k}; rates must lie in (0, 1]"
                )))
            } else {
                Ok(pct as f64 / 100.0)
            }
        })
        .collect()
}

struct Lesion {
    voxels: Vec<(usize, usize, usize)>,
}

fn carve_lesion<R: Rng>(spec: &VolumeSpec, rng: &mut R) -> Option<Lesion> {
    let (rmin, rmax) = spec.lesion_radius_range;
    let ry = rng.gen_range(rmin..=rmax);
    let rx = rng.gen_range(rmin..=rmax);
    let rz = rng.gen_range(rmin..=rmax);
    let hz = (rz.round() as usize).min((spec.depth - 1) / 2);
    let (ey, ex) = (ry.floor() as usize, rx.floor() as usize);

    let cz = rng.gen_range(hz..spec.depth - hz);
    let cy = rng.gen_range(ey..spec.height - ey);
    let cx = rng.gen_range(ex..spec.width - ex);

    let mut voxels = Vec::new();
    for dz in -(hz as isize)..=hz as isize {
        let scale = 1.0 - (dz as f64 / (hz as f64 + 1.0)).powi(2);
        let mut section = 0;
        for dy in -(ey as isize)..=ey as isize {
            for dx in -(ex as isize)..=ex as isize {
                let r = (dy as f64 / ry).powi(2) + (dx as f64 / rx).powi(2);
                if r <= scale {
                    voxels.push((
                        (cz as isize + dz) as usize,
                        (cy as isize + dy) as usize,
                        (cx as isize + dx) as usize,
                    ));
                    section += 1;
                }
            }
        }
        if section < MIN_SECTION_VOXELS {
            return None;
        }
    }
    Some(Lesion { voxels })
}

/// Generates an uncorrupted volume: `noisy_mask == working_mask == gt_mask`.
pub fn generate_volume(spec: &VolumeSpec, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Domain::Data, 0);
    let dims = spec.dims();
    let (cmin, cmax) = spec.lesion_count_range;
    let count = rng.gen_range(cmin..=cmax);

    let mut gt = Mask::zeros(dims);
    // Foreground dilated by one voxel in every direction; new lesions may not
    // touch it, which keeps lesions separate under either connectivity.
    let mut blocked = Mask::zeros(dims);
    let mut placed = 0;
    while placed < count {
        let mut accepted = None;
        for _ in 0..PLACEMENT_TRIES {
            if let Some(lesion) = carve_lesion(spec, &mut rng) {
                if lesion.voxels.iter().all(|&(z, y, x)| blocked.get(z, y, x) == 0) {
                    accepted = Some(lesion);
                    break;
                }
            }
        }
        let lesion = accepted.ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {} of {count} in a {dims} volume after {PLACEMENT_TRIES} tries",
                placed + 1
            ))
        })?;
        for &(z, y, x) in &lesion.voxels {
            gt.set(z, y, x, 1);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz >= 0
                            && ny >= 0
                            && nx >= 0
                            && (nz as usize) < dims.depth
                            && (ny as usize) < dims.height
                            && (nx as usize) < dims.width
                        {
                            blocked.set(nz as usize, ny as usize, nx as usize, 1);
                        }
                    }
                }
            }
        }
        placed += 1;
    }

    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config(format!("volume.noise_sigma: {e}")))?;
    let image: Vec<f32> = gt
        .as_slice()
        .iter()
        .map(|&g| {
            let base = spec.background_level as f32 + if g != 0 { LESION_CONTRAST } else { 0.0 };
            (base + noise.sample(&mut rng) as f32).clamp(0.0, 1.0)
        })
        .collect();

    Ok(LabeledVolume {
        image: Grid::from_vec(dims, image),
        noisy_mask: gt.clone(),
        working_mask: gt.clone(),
        gt_mask: gt,
        gt_component_count: placed,
        kept_component_count: placed,
    })
}

/// Number of lesions kept at completeness `rate`: `c · rate` rounded half up,
/// clamped to `[1, c]` when `c >= 1`.
pub fn kept_lesion_count(total: usize, rate: f64) -> usize {
    if total == 0 {
        return 0;
    }
    let raw = (total as f64 * rate + 0.5 + 1e-9).floor() as usize;
    raw.clamp(1, total)
}

pub fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "annotation completeness rate {rate} outside (0, 1]"
        )))
    }
}

/// Removes whole 3D lesions from the annotation, keeping a uniformly random
/// subset sized by [`kept_lesion_count`].
pub fn corrupt_annotations<R: Rng>(
    mut vol: LabeledVolume,
    rate: f64,
    rng: &mut R,
) -> Result<LabeledVolume> {
    check_rate(rate)?;
    if !vol.is_uncorrupted() {
        return Err(Error::Generation(
            "volume annotation has already been corrupted".into(),
        ));
    }
    let map = label_components(&vol.gt_mask, Connectivity::Face);
    let keep_n = kept_lesion_count(map.count, rate);
    let mut keep = vec![false; map.count + 1];
    for i in index::sample(rng, map.count, keep_n) {
        keep[i + 1] = true;
    }
    for (dst, &label) in vol
        .noisy_mask
        .as_mut_slice()
        .iter_mut()
        .zip(map.labels.as_slice())
    {
        if label != 0 && !keep[label as usize] {
            *dst = 0;
        }
    }
    vol.working_mask = vol.noisy_mask.clone();
    vol.gt_component_count = map.count;
    vol.kept_component_count = keep_n;
    Ok(vol)
}

/// Shape of the simulated federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub kind: DatasetKind,
    pub m: u32,
    pub clients: usize,
    /// Total generated volumes, before the test hold-out.
    pub volumes: usize,
    pub test_fraction: f64,
    /// Explicit per-client rates; replaces the schedule when set.
    pub completeness: Option<Vec<f64>>,
    pub volume: VolumeSpec,
}

impl Default for FederationSpec {
    fn default() -> Self {
        FederationSpec {
            kind: DatasetKind::MsLike,
            m: 0,
            clients: 4,
            volumes: 20,
            test_fraction: 0.2,
            completeness: None,
            volume: VolumeSpec::default(),
        }
    }
}

impl FederationSpec {
    pub fn rates(&self) -> Result<Vec<f64>> {
        match &self.completeness {
            Some(rates) => {
                if rates.len() != self.clients {
                    return Err(Error::config(format!(
                        "dataset.completeness lists {} rates for {} clients",
                        rates.len(),
                        self.clients
                    )));
                }
                rates.iter().try_for_each(|&r| check_rate(r))?;
                Ok(rates.clone())
            }
            None => completeness_schedule(self.kind, self.m, self.clients),
        }
    }

    pub fn test_count(&self) -> usize {
        (self.volumes as f64 * self.test_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("dataset.clients must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("dataset.test_fraction must lie in [0, 1)"));
        }
        if self.volumes.saturating_sub(self.test_count()) < self.clients {
            return Err(Error::config(format!(
                "dataset.volumes: {} training volumes cannot cover {} clients",
                self.volumes.saturating_sub(self.test_count()),
                self.clients
            )));
        }
        self.volume.validate()?;
        self.rates().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<Vec<LabeledVolume>>,
    pub completeness: Vec<f64>,
    pub test_set: Vec<LabeledVolume>,
}

/// Generates, splits and corrupts a federation. Deterministic in `seed`.
pub fn build_federation(spec: &FederationSpec, seed: u64) -> Result<FederatedDataset> {
    spec.validate()?;
    let rates = spec.rates()?;
    let volumes = (0..spec.volumes)
        .map(|j| generate_volume(&spec.volume, volume_seed(seed, j)))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let test_n = spec.test_count();
    let mut slots: Vec<Option<LabeledVolume>> = volumes.into_iter().map(Some).collect();
    let test_set = order[..test_n]
        .iter()
        .map(|&j| slots[j].take().expect("each volume is assigned once"))
        .collect();

    let mut clients: Vec<Vec<LabeledVolume>> = vec![Vec::new(); spec.clients];
    for (pos, &j) in order[test_n..].iter().enumerate() {
        let k = pos % spec.clients;
        let vol = slots[j].take().expect("each volume is assigned once");
        let mut rng = rng::stream(seed, Domain::Corruption, j as u64);
        clients[k].push(corrupt_annotations(vol, rates[k], &mut rng)?);
    }

    Ok(FederatedDataset {
        clients,
        completeness: rates,
        test_set,
    })
}

fn volume_seed(master: u64, index: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
        .rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccl::count_components;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_with(count: usize, radius: f64, dims: Dims) -> VolumeSpec {
        VolumeSpec {
            depth: dims.depth,
            height: dims.height,
            width: dims.width,
            lesion_count_range: (count, count),
            lesion_radius_range: (radius, radius),
            ..VolumeSpec::default()
        }
    }

    #[test]
    fn single_lesion_flat_volume() {
        let v = generate_volume(&spec_with(1, 2.0, Dims::new(1, 16, 16)), 7).unwrap();
        assert_eq!(label_components(&v.gt_mask, Connectivity::Face).count, 1);
        assert_eq!(v.gt_component_count, 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = VolumeSpec::default();
        assert_eq!(generate_volume(&spec, 3).unwrap(), generate_volume(&spec, 3).unwrap());
        assert_ne!(
            generate_volume(&spec, 3).unwrap().image,
            generate_volume(&spec, 4).unwrap().image
        );
    }

    #[test]
    fn overcrowded_volume_fails() {
        let err = generate_volume(&spec_with(40, 3.0, Dims::new(1, 8, 8)), 1).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn image_intensities_clamped() {
        let spec = VolumeSpec {
            noise_sigma: 0.8,
            ..VolumeSpec::default()
        };
        let v = generate_volume(&spec, 11).unwrap();
        assert!(v.image.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn every_cross_section_survives_speckle_filter() {
        for seed in 0..10 {
            let v = generate_volume(&VolumeSpec::default(), seed).unwrap();
            for z in 0..v.dims().depth {
                let plane = v.gt_mask.plane(z);
                let all = count_components(&plane, Connectivity::Face, 1);
                let big = count_components(&plane, Connectivity::Face, MIN_SECTION_VOXELS);
                assert_eq!(all, big);
            }
        }
    }

    #[test]
    fn schedules_match_table_headers() {
        let ms = |m| completeness_schedule(DatasetKind::MsLike, m, 4).unwrap();
        let lung = |m| completeness_schedule(DatasetKind::LungLike, m, 4).unwrap();
        assert_eq!(ms(0), vec![0.4, 0.6, 0.8, 1.0]);
        assert_eq!(ms(1), vec![0.3, 0.5, 0.7, 0.9]);
        assert_eq!(ms(2), vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(ms(3), vec![0.1, 0.3, 0.5, 0.7]);
        assert_eq!(lung(0), vec![0.7, 0.8, 0.9, 1.0]);
        assert_eq!(lung(1), vec![0.4, 0.5, 0.6, 0.7]);
        assert_eq!(lung(2), vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn schedule_out_of_range_rejected() {
        assert!(completeness_schedule(DatasetKind::MsLike, 4, 4).is_err());
        assert!(completeness_schedule(DatasetKind::MsLike, 0, 5).is_err());
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_lesion_count(10, 0.4), 4);
        assert_eq!(kept_lesion_count(3, 0.5), 2);
        assert_eq!(kept_lesion_count(6, 0.1), 1);
        assert_eq!(kept_lesion_count(5, 0.7), 4);
        assert_eq!(kept_lesion_count(4, 1.0), 4);
        assert_eq!(kept_lesion_count(0, 0.5), 0);
    }

    #[test]
    fn corruption_rejects_bad_rate() {
        let v = generate_volume(&VolumeSpec::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(corrupt_annotations(v.clone(), 0.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(corrupt_annotations(v, 1.2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn full_rate_keeps_everything() {
        let v = generate_volume(&VolumeSpec::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_annotations(v, 1.0, &mut rng).unwrap();
        assert_eq!(c.noisy_mask, c.gt_mask);
        assert_eq!(c.working_mask, c.noisy_mask);
    }

    #[test]
    fn ten_lesions_at_forty_percent() {
        let spec = spec_with(10, 2.0, Dims::new(8, 32, 32));
        let v = generate_volume(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = corrupt_annotations(v, 0.4, &mut rng).unwrap();
        assert_eq!(c.gt_component_count, 10);
        assert_eq!(c.kept_component_count, 4);
        assert_eq!(label_components(&c.noisy_mask, Connectivity::Face).count, 4);
        assert!(c.noisy_mask.is_subset_of(&c.gt_mask));
        assert!(c.noisy_mask.is_subset_of(&c.working_mask));
    }

    #[test]
    fn double_corruption_rejected() {
        let v = generate_volume(&VolumeSpec::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_annotations(v, 0.5, &mut rng).unwrap();
        assert!(corrupt_annotations(c, 0.5, &mut rng).is_err());
    }

    #[test]
    fn federation_split_sizes() {
        let spec = FederationSpec::default();
        let fed = build_federation(&spec, 9).unwrap();
        assert_eq!(fed.test_set.len(), 4);
        assert_eq!(fed.clients.len(), 4);
        assert!(fed.clients.iter().all(|c| c.len() == 4));
        assert_eq!(fed.completeness, vec![0.4, 0.6, 0.8, 1.0]);
        assert!(fed.test_set.iter().all(LabeledVolume::is_uncorrupted));
        assert!(fed.clients[3].iter().all(LabeledVolume::is_uncorrupted));
    }

    #[test]
    fn too_few_volumes_rejected() {
        let spec = FederationSpec {
            volumes: 4,
            ..FederationSpec::default()
        };
        assert!(matches!(build_federation(&spec, 0), Err(Error::Config(_))));
    }
}
