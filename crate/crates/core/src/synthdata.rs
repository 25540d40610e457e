//! Synthetic two-group Gaussian-blob benchmark.
//!
//! Every image is split into equal blocks (quadrants in 2D, octants in 3D)
//! and carries four Gaussian blobs, one per selected block. Two of them form
//! the group-separating pattern: they share one magnitude drawn from
//! `U(1, 5)` for group 0 and `U(4, 8)` for group 1. The other two are
//! subject-specific nuisance blobs with independent `U(1, 6)` magnitudes.

use std::path::Path;

use cfsim_tensor::{numel, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;

pub const DEFAULT_BLOB_WIDTH: f64 = 3.0;
pub const DEFAULT_NOISE_SD: f64 = 0.002;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Group label. Group 1 carries the stronger pattern blobs and is the
/// positive class (`logit > 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Control,
    Case,
}

impl Group {
    pub fn label(self) -> u8 {
        match self {
            Group::Control => 0,
            Group::Case => 1,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(Group::Control),
            1 => Ok(Group::Case),
            other => Err(invalid(format!("group label must be 0 or 1, got {other}"))),
        }
    }
}

impl Serialize for Group {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.label())
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Group::from_label(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobRole {
    /// Magnitude depends on the group.
    Pattern,
    /// Subject-specific, independent of the group.
    Nuisance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Center in pixel coordinates, one entry per axis.
    pub center: Vec<f64>,
    pub magnitude: f64,
    pub width: f64,
    pub role: BlobRole,
}

impl BlobSpec {
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if self.center.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "blob center has {} coordinates for a {}-d grid",
                self.center.len(),
                shape.len()
            )));
        }
        if !(self.magnitude > 0.0) || !(self.width > 0.0) {
            return Err(invalid("blob magnitude and width must be positive"));
        }
        for (&c, &n) in self.center.iter().zip(shape) {
            if !(c >= 0.0 && c <= (n - 1) as f64) {
                return Err(invalid(format!(
                    "blob center {:?} lies outside grid {shape:?}",
                    self.center
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub group: Group,
    pub subject_id: u32,
    /// Ground-truth metadata; absent for images without a known pattern.
    pub blobs: Option<Vec<BlobSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_per_group: usize,
    pub shape: Vec<usize>,
    pub seed: u64,
    pub noise_sd: f64,
    pub blob_width: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self::default_2d(0)
    }
}

impl DatasetParams {
    pub fn default_2d(seed: u64) -> Self {
        Self {
            n_per_group: 512,
            shape: vec![32, 32],
            seed,
            noise_sd: DEFAULT_NOISE_SD,
            blob_width: DEFAULT_BLOB_WIDTH,
        }
    }

    pub fn default_3d(seed: u64) -> Self {
        Self {
            n_per_group: 128,
            shape: vec![32, 32, 32],
            ..Self::default_2d(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub params: DatasetParams,
    pub samples: Vec<ImageSample>,
    pub split: Vec<Split>,
}

/// Noise-free sum of Gaussian blobs evaluated at every grid point.
pub fn render_blobs(blobs: &[BlobSpec], shape: &[usize]) -> Tensor<f64> {
    let mut out = Tensor::zeros(shape);
    let d = shape.len();
    let mut coord = vec![0usize; d];
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let mut rem = i;
        for a in (0..d).rev() {
            coord[a] = rem % shape[a];
            rem /= shape[a];
        }
        *v = blobs
            .iter()
            .map(|b| {
                let r2: f64 = coord
                    .iter()
                    .zip(&b.center)
                    .map(|(&x, &c)| (x as f64 - c).powi(2))
                    .sum();
                b.magnitude * (-r2 / (2.0 * b.width * b.width)).exp()
            })
            .sum();
    }
    out
}

/// Renders `blobs` and adds i.i.d. `N(0, noise_sd^2)` noise drawn from `rng`
/// in row-major pixel order.
pub fn gen_gaussian_image(
    blobs: &[BlobSpec],
    noise_sd: f64,
    shape: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    if blobs.is_empty() {
        return Err(invalid("at least one blob is required"));
    }
    if !(noise_sd >= 0.0) {
        return Err(invalid("noise_sd must be non-negative"));
    }
    for b in blobs {
        b.validate(shape)?;
    }
    let mut img = render_blobs(blobs, shape);
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| invalid(e.to_string()))?;
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(img)
}

/// Block coordinates (one bit per axis) with their blob roles.
pub fn block_layout(dims: usize) -> Result<Vec<(Vec<usize>, BlobRole)>> {
    use BlobRole::*;
    match dims {
        // off-diagonal quadrants carry the pattern
        2 => Ok(vec![
            (vec![0, 0], Nuisance),
            (vec![0, 1], Pattern),
            (vec![1, 0], Pattern),
            (vec![1, 1], Nuisance),
        ]),
        // antipodal octant pairs: main diagonal is nuisance
        3 => Ok(vec![
            (vec![0, 0, 0], Nuisance),
            (vec![0, 1, 1], Pattern),
            (vec![1, 0, 0], Pattern),
            (vec![1, 1, 1], Nuisance),
        ]),
        d => Err(invalid(format!("only 2-d and 3-d grids are supported, got {d}"))),
    }
}

/// Samples the four blobs of one image.
fn sample_blobs(group: Group, shape: &[usize], width: f64, rng: &mut impl Rng) -> Result<Vec<BlobSpec>> {
    let layout = block_layout(shape.len())?;
    let pattern_mag = match group {
        Group::Control => rng.random_range(1.0..5.0),
        Group::Case => rng.random_range(4.0..8.0),
    };
    let mut blobs = Vec::with_capacity(layout.len());
    for (block, role) in layout {
        // center drawn from the central half of the block along each axis
        let center: Vec<f64> = block
            .iter()
            .zip(shape)
            .map(|(&b, &n)| {
                let size = (n / 2) as f64;
                let lo = b as f64 * size + size / 4.0;
                rng.random_range(lo..lo + size / 2.0)
            })
            .collect();
        let magnitude = match role {
            BlobRole::Pattern => pattern_mag,
            BlobRole::Nuisance => rng.random_range(1.0..6.0),
        };
        blobs.push(BlobSpec {
            center,
            magnitude,
            width,
            role,
        });
    }
    Ok(blobs)
}

fn check_shape(shape: &[usize], dims: usize) -> Result<()> {
    if shape.len() != dims {
        return Err(invalid(format!("expected a {dims}-d shape, got {shape:?}")));
    }
    if shape.iter().any(|&n| n < 8 || n % 2 != 0) {
        return Err(invalid(format!("every axis must be even and >= 8, got {shape:?}")));
    }
    Ok(())
}

/// Number of training samples per group.
pub fn train_count(n_per_group: usize) -> usize {
    (TRAIN_FRACTION * n_per_group as f64).ceil() as usize
}

fn generate(params: DatasetParams) -> Result<SyntheticDataset> {
    if params.n_per_group < 2 {
        return Err(invalid("n_per_group must be at least 2"));
    }
    if !(params.blob_width > 0.0) {
        return Err(invalid("blob_width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut samples = Vec::with_capacity(2 * params.n_per_group);
    let mut split = vec![Split::Test; 2 * params.n_per_group];
    for group in [Group::Control, Group::Case] {
        let first = samples.len();
        for _ in 0..params.n_per_group {
            let blobs = sample_blobs(group, &params.shape, params.blob_width, &mut rng)?;
            let img = gen_gaussian_image(&blobs, params.noise_sd, &params.shape, &mut rng)?;
            samples.push(ImageSample {
                pixels: img.cast(),
                group,
                subject_id: samples.len() as u32,
                blobs: Some(blobs),
            });
        }
        let mut order: Vec<usize> = (first..samples.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..train_count(params.n_per_group)] {
            split[i] = Split::Train;
        }
    }
    Ok(SyntheticDataset {
        params,
        samples,
        split,
    })
}

/// 2D dataset with quadrant blocks.
pub fn gen_dataset(n_per_group: usize, shape: &[usize], seed: u64) -> Result<SyntheticDataset> {
    check_shape(shape, 2)?;
    generate(DatasetParams {
        n_per_group,
        shape: shape.to_vec(),
        ..DatasetParams::default_2d(seed)
    })
}

/// 3D analogue with blobs in four of the eight octants.
pub fn gen_dataset_3d(n_per_group: usize, shape: &[usize], seed: u64) -> Result<SyntheticDataset> {
    check_shape(shape, 3)?;
    generate(DatasetParams {
        n_per_group,
        shape: shape.to_vec(),
        ..DatasetParams::default_3d(seed)
    })
}

/// Generates from explicit parameters (noise level and width included).
pub fn gen_from_params(params: &DatasetParams) -> Result<SyntheticDataset> {
    check_shape(&params.shape, params.shape.len())?;
    block_layout(params.shape.len())?;
    generate(params.clone())
}

/// Unit-magnitude rendering of the sample's pattern blobs.
pub fn ground_truth_pattern(sample: &ImageSample) -> Result<Tensor<f64>> {
    let blobs = sample
        .blobs
        .as_ref()
        .ok_or(Error::MissingGroundTruth(sample.subject_id))?;
    let unit: Vec<BlobSpec> = blobs
        .iter()
        .filter(|b| b.role == BlobRole::Pattern)
        .map(|b| BlobSpec {
            magnitude: 1.0,
            ..b.clone()
        })
        .collect();
    Ok(render_blobs(&unit, sample.pixels.shape()))
}

impl SyntheticDataset {
    pub fn shape(&self) -> &[usize] {
        &self.params.shape
    }

    pub fn indices(&self, split: Split, group: Option<Group>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.split[i] == split && group.is_none_or(|g| self.samples[i].group == g))
            .collect()
    }

    /// Stacks the selected samples into a `[N, 1, spatial...]` batch.
    pub fn batch<T: cfsim_tensor::Real>(&self, indices: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        let per = numel(shape);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.samples[i].pixels.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut full = vec![indices.len(), 1];
        full.extend_from_slice(shape);
        Tensor::new(full, data).expect("batch shape")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<Group> {
        indices.iter().map(|&i| self.samples[i].group).collect()
    }

    /// Copy with group labels randomly permuted within each split (a
    /// chance-level control that keeps per-split group sizes).
    pub fn with_permuted_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for split in [Split::Train, Split::Test] {
            let idx = self.indices(split, None);
            let mut groups = self.labels(&idx);
            groups.shuffle(&mut rng);
            for (&i, g) in idx.iter().zip(groups) {
                out.samples[i].group = g;
            }
        }
        out
    }

    /// Interquartile range of all pixel intensities.
    pub fn intensity_iqr(&self) -> f64 {
        let mut all: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.pixels.data().iter().map(|&v| v as f64))
            .collect();
        all.sort_by(f64::total_cmp);
        quantile(&all, 0.75) - quantile(&all, 0.25)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (s, &split) in self.samples.iter().zip(&self.split) {
            let file = format!("images/{:06}.f32", s.subject_id);
            io::write_f32(&dir.join(&file), s.pixels.data())?;
            entries.push(SampleEntry {
                subject_id: s.subject_id,
                group: s.group,
                split,
                file,
                blobs: s.blobs.clone(),
            });
        }
        io::write_json(
            &dir.join(MANIFEST),
            &DatasetManifest {
                format: FORMAT.to_string(),
                params: self.params.clone(),
                samples: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: DatasetManifest = io::read_json(&dir.join(MANIFEST))?;
        if m.format != FORMAT {
            return Err(Error::Dataset(format!("unsupported dataset format `{}`", m.format)));
        }
        let per = numel(&m.params.shape);
        let mut samples = Vec::with_capacity(m.samples.len());
        let mut split = Vec::with_capacity(m.samples.len());
        for e in m.samples {
            let values = io::read_f32(&dir.join(&e.file), Some(per))?;
            samples.push(ImageSample {
                pixels: Tensor::new(m.params.shape.clone(), values)?,
                group: e.group,
                subject_id: e.subject_id,
                blobs: e.blobs,
            });
            split.push(e.split);
        }
        Ok(Self {
            params: m.params,
            samples,
            split,
        })
    }
}

pub const MANIFEST: &str = "dataset.json";
const FORMAT: &str = "cfsim-dataset-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    params: DatasetParams,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    subject_id: u32,
    group: Group,
    split: Split,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blobs: Option<Vec<BlobSpec>>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: &[f64], magnitude: f64) -> BlobSpec {
        BlobSpec {
            center: center.to_vec(),
            magnitude,
            width: 3.0,
            role: BlobRole::Pattern,
        }
    }

    #[test]
    fn peak_equals_magnitude_at_integer_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = gen_gaussian_image(&[blob(&[16.0, 16.0], 1.0)], 0.0, &[32, 32], &mut rng).unwrap();
        assert_eq!(img.get(&[16, 16]), 1.0);
        let vol =
            gen_gaussian_image(&[blob(&[16.0, 16.0, 16.0], 2.5)], 0.0, &[32, 32, 32], &mut rng).unwrap();
        assert_eq!(vol.get(&[16, 16, 16]), 2.5);
    }

    #[test]
    fn two_blobs_superpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (blob(&[5.5, 20.0], 2.0), blob(&[24.0, 8.25], 4.0));
        let both = gen_gaussian_image(&[a.clone(), b.clone()], 0.0, &[32, 32], &mut rng).unwrap();
        let ia = gen_gaussian_image(&[a], 0.0, &[32, 32], &mut rng).unwrap();
        let ib = gen_gaussian_image(&[b], 0.0, &[32, 32], &mut rng).unwrap();
        for ((x, y), z) in both.data().iter().zip(ia.data()).zip(ib.data()) {
            assert!((x - (y + z)).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_grid_centers_and_empty_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_gaussian_image(&[blob(&[40.0, 3.0], 1.0)], 0.0, &[32, 32], &mut rng).is_err());
        assert!(gen_gaussian_image(&[blob(&[-0.5, 3.0], 1.0)], 0.0, &[32, 32], &mut rng).is_err());
        assert!(gen_gaussian_image(&[], 0.0, &[32, 32], &mut rng).is_err());
        assert!(gen_gaussian_image(&[blob(&[3.0, 3.0], 1.0)], -1.0, &[32, 32], &mut rng).is_err());
    }

    #[test]
    fn ground_truth_requires_metadata() {
        let s = ImageSample {
            pixels: Tensor::zeros(&[32, 32]),
            group: Group::Case,
            subject_id: 7,
            blobs: None,
        };
        assert!(matches!(ground_truth_pattern(&s), Err(Error::MissingGroundTruth(7))));
    }

    #[test]
    fn parameter_validation() {
        assert!(gen_dataset(1, &[32, 32], 0).is_err());
        assert!(gen_dataset(4, &[32, 32, 32], 0).is_err());
        assert!(gen_dataset_3d(4, &[32, 32], 0).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.25), 1.0);
        assert_eq!(quantile(&v, 0.125), 0.5);
    }
}
