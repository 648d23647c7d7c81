//! Prediction stacks over augmented clouds and the confidence/uncertainty
//! split into reliable and ambiguous points.
//!
//! The stand-in predictor is a nearest-seed soft classifier; a real backbone
//! plugs in by supplying a [`PredictionStack`] directly.

use nalgebra::{Point3, Rotation3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ClassId, LabelArray, PointCloud};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_KAPPA: f64 = 0.01;
pub const DEFAULT_AUGMENTATIONS: usize = 2;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ReliabilityError {
    #[error("scale components must lie in [0.5, 2.0], got {0:?}")]
    BadScale([f64; 3]),
    #[error("jitter sigma must be finite and >= 0, got {0}")]
    BadJitter(f64),
    #[error("non-finite augmentation parameter")]
    NonFiniteParams,
    #[error("no annotated seed points")]
    NoSeeds,
    #[error("seeds cover {found} points, cloud has {expected}")]
    SeedLength { expected: usize, found: usize },
    #[error("seed label {label} at point {index} is not below num_classes = {num_classes}")]
    SeedLabel {
        index: usize,
        label: ClassId,
        num_classes: usize,
    },
    #[error("neighbor count must be at least 1")]
    ZeroNeighbors,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("need at least one augmented slice")]
    NoAugmentations,
    #[error("stack must have at least 2 slices, 1 point and 1 class; got {0:?}")]
    StackShape((usize, usize, usize)),
    #[error("stack slice {slice}, point {point}: {msg}")]
    StackRow { slice: usize, point: usize, msg: String },
    #[error("tau must not be NaN and kappa must be >= 0 (got tau={tau}, kappa={kappa})")]
    BadThresholds { tau: f64, kappa: f64 },
}

/// Affine augmentation with Gaussian jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Euler angles about x, y, z in radians, applied as `Rz Ry Rx`.
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    /// Meters.
    pub translation: [f64; 3],
    /// Meters.
    pub jitter_sigma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            scale: [1.0; 3],
            translation: [0.0; 3],
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        if !self
            .rotation
            .iter()
            .chain(&self.translation)
            .chain(&self.scale)
            .all(|v| v.is_finite())
        {
            return Err(ReliabilityError::NonFiniteParams);
        }
        if !self.scale.iter().all(|s| (0.5..=2.0).contains(s)) {
            return Err(ReliabilityError::BadScale(self.scale));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(ReliabilityError::BadJitter(self.jitter_sigma));
        }
        Ok(())
    }
}

/// Ranges the default augmentation sampler draws from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_translation: f64,
    pub jitter_sigma: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_translation: 0.1,
            jitter_sigma: 0.005,
        }
    }
}

impl AugmentRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let rot = self.max_rotation_deg.to_radians();
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation = [sym(rot), sym(rot), sym(rot)];
        let translation = [
            sym(self.max_translation),
            sym(self.max_translation),
            sym(self.max_translation),
        ];
        let mut scale = [1.0; 3];
        for s in &mut scale {
            *s = if self.scale_max > self.scale_min {
                rng.random_range(self.scale_min..=self.scale_max)
            } else {
                self.scale_min
            };
        }
        AugmentParams {
            rotation,
            scale,
            translation,
            jitter_sigma: self.jitter_sigma,
        }
    }
}

/// `diag(scale) R x + translation + N(0, jitter²)`, colors untouched.
pub fn affine_augment(
    cloud: &PointCloud,
    params: &AugmentParams,
    seed: u64,
) -> Result<PointCloud, ReliabilityError> {
    params.validate()?;
    let [rx, ry, rz] = params.rotation;
    let rot = Rotation3::from_euler_angles(rx, ry, rz);
    let scale = Vector3::from(params.scale);
    let t = Vector3::from(params.translation);
    let mut positions: Vec<Point3<f64>> = cloud
        .positions()
        .iter()
        .map(|p| Point3::from((rot * p.coords).component_mul(&scale) + t))
        .collect();
    if params.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, params.jitter_sigma)
            .map_err(|_| ReliabilityError::BadJitter(params.jitter_sigma))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut positions {
            for c in p.coords.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    Ok(cloud.with_positions(positions))
}

/// Nearest-seed soft classifier settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// Distance scale in meters.
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 0.05,
        }
    }
}

type Seed = GeomWithData<[f64; 3], (usize, ClassId)>;

/// Soft class scores from the `k` nearest annotated points.
///
/// Each gathered seed adds `exp(-dist / temperature)` to its class and the
/// row is normalized. Distance ties at the k-th neighbor go to the lower
/// seed index. A point sitting exactly on a seed takes that seed's
/// one-hot (lowest seed index if several coincide).
pub fn knn_soft_predict(
    cloud: &PointCloud,
    seeds: &LabelArray,
    num_classes: usize,
    cfg: &KnnConfig,
) -> Result<Array2<f64>, ReliabilityError> {
    if seeds.len() != cloud.len() {
        return Err(ReliabilityError::SeedLength {
            expected: cloud.len(),
            found: seeds.len(),
        });
    }
    if cfg.k == 0 {
        return Err(ReliabilityError::ZeroNeighbors);
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(ReliabilityError::BadTemperature(cfg.temperature));
    }
    let mut entries: Vec<Seed> = Vec::new();
    for (index, label) in seeds.iter().enumerate() {
        if let Some(label) = label {
            if label as usize >= num_classes {
                return Err(ReliabilityError::SeedLabel {
                    index,
                    label,
                    num_classes,
                });
            }
            let p = cloud.positions()[index];
            entries.push(GeomWithData::new([p.x, p.y, p.z], (index, label)));
        }
    }
    if entries.is_empty() {
        return Err(ReliabilityError::NoSeeds);
    }
    let tree = RTree::bulk_load(entries);

    let rows: Vec<Vec<f64>> = cloud
        .positions()
        .par_iter()
        .map(|p| {
            // Take everything tied with the k-th distance, then keep the lowest indices.
            let mut neighbors: Vec<(f64, usize, ClassId)> = Vec::with_capacity(cfg.k + 1);
            for (s, d2) in tree.nearest_neighbor_iter_with_distance_2(&[p.x, p.y, p.z]) {
                if neighbors.len() >= cfg.k && neighbors.last().is_some_and(|n| n.0 < d2) {
                    break;
                }
                neighbors.push((d2, s.data.0, s.data.1));
            }
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            neighbors.truncate(cfg.k);
            neighbors.iter_mut().for_each(|n| n.0 = n.0.sqrt());
            soft_scores(&neighbors, num_classes, cfg.temperature)
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((cloud.len(), num_classes), flat).expect("rows have num_classes entries"))
}

/// Normalized class scores from `(distance, seed index, class)` neighbors.
fn soft_scores(neighbors: &[(f64, usize, ClassId)], num_classes: usize, temperature: f64) -> Vec<f64> {
    let mut row = vec![0.0; num_classes];
    if let Some(&(_, _, c)) = neighbors.iter().filter(|n| n.0 == 0.0).min_by_key(|n| n.1) {
        row[c as usize] = 1.0;
        return row;
    }
    // Shift by the nearest distance so far-away points do not underflow.
    let d_min = neighbors.iter().map(|n| n.0).fold(f64::INFINITY, f64::min);
    for &(d, _, c) in neighbors {
        row[c as usize] += (-(d - d_min) / temperature).exp();
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    row
}

/// `(K+1) x N x C` class probabilities; slice 0 is the original cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStack {
    probs: Array3<f64>,
}

impl PredictionStack {
    pub fn new(probs: Array3<f64>) -> Result<Self, ReliabilityError> {
        let (s, n, c) = probs.dim();
        if s < 2 || n == 0 || c == 0 {
            return Err(ReliabilityError::StackShape((s, n, c)));
        }
        for (slice, sl) in probs.outer_iter().enumerate() {
            for (point, row) in sl.outer_iter().enumerate() {
                if !row.iter().all(|v| v.is_finite() && *v >= 0.0) {
                    return Err(ReliabilityError::StackRow {
                        slice,
                        point,
                        msg: "entries must be finite and non-negative".into(),
                    });
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(ReliabilityError::StackRow {
                        slice,
                        point,
                        msg: format!("row sums to {sum}"),
                    });
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn from_slices(slices: &[Array2<f64>]) -> Result<Self, ReliabilityError> {
        let views: Vec<ArrayView2<f64>> = slices.iter().map(|s| s.view()).collect();
        let probs = ndarray::stack(Axis(0), &views)
            .map_err(|_| ReliabilityError::StackShape((slices.len(), 0, 0)))?;
        Self::new(probs)
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    /// Number of augmented slices `K`.
    pub fn augmentations(&self) -> usize {
        self.probs.dim().0 - 1
    }

    pub fn num_points(&self) -> usize {
        self.probs.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().2
    }

    pub fn slice(&self, j: usize) -> ArrayView2<'_, f64> {
        self.probs.index_axis(Axis(0), j)
    }
}

/// Settings for [`build_stack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub augmentations: usize,
    pub aug_seed: u64,
    pub knn: KnnConfig,
    pub ranges: AugmentRanges,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            augmentations: DEFAULT_AUGMENTATIONS,
            aug_seed: 0,
            knn: KnnConfig::default(),
            ranges: AugmentRanges::default(),
        }
    }
}

/// Predicts on the original cloud and on each `(params, jitter seed)`
/// augmentation, aligned by point index.
pub fn build_stack_with(
    cloud: &PointCloud,
    seeds: &LabelArray,
    num_classes: usize,
    knn: &KnnConfig,
    augmentations: &[(AugmentParams, u64)],
) -> Result<PredictionStack, ReliabilityError> {
    if augmentations.is_empty() {
        return Err(ReliabilityError::NoAugmentations);
    }
    let mut slices = vec![knn_soft_predict(cloud, seeds, num_classes, knn)?];
    for (params, seed) in augmentations {
        let aug = affine_augment(cloud, params, *seed)?;
        slices.push(knn_soft_predict(&aug, seeds, num_classes, knn)?);
    }
    PredictionStack::from_slices(&slices)
}

/// The `K` augmentations drawn from `cfg.aug_seed`.
pub fn sample_augmentations(cfg: &StackConfig) -> Vec<(AugmentParams, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.aug_seed);
    (0..cfg.augmentations)
        .map(|_| {
            let params = cfg.ranges.sample(&mut rng);
            (params, rng.next_u64())
        })
        .collect()
}

pub fn build_stack(
    cloud: &PointCloud,
    seeds: &LabelArray,
    num_classes: usize,
    cfg: &StackConfig,
) -> Result<PredictionStack, ReliabilityError> {
    if cfg.augmentations == 0 {
        return Err(ReliabilityError::NoAugmentations);
    }
    build_stack_with(cloud, seeds, num_classes, &cfg.knn, &sample_augmentations(cfg))
}

/// Reliable/ambiguous partition of the points.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilitySplit {
    pub reliable: Vec<bool>,
    /// Argmax of the mean prediction on reliable points, unannotated elsewhere.
    pub hard: LabelArray,
    /// Mean prediction, row-normalized.
    pub soft: Array2<f64>,
}

impl ReliabilitySplit {
    pub fn reliable_count(&self) -> usize {
        self.reliable.iter().filter(|r| **r).count()
    }
}

/// A point is reliable when some class has mean probability `>= tau` and
/// population variance across the slices `<= kappa`.
pub fn split_reliable(
    stack: &PredictionStack,
    tau: f64,
    kappa: f64,
) -> Result<ReliabilitySplit, ReliabilityError> {
    if tau.is_nan() || !(kappa >= 0.0) {
        return Err(ReliabilityError::BadThresholds { tau, kappa });
    }
    let (s, n, c) = stack.probs.dim();
    let inv = 1.0 / s as f64;
    let mut mean = Array2::<f64>::zeros((n, c));
    let mut var = Array2::<f64>::zeros((n, c));
    for slice in stack.probs.outer_iter() {
        mean.zip_mut_with(&slice, |m, &p| *m += p);
    }
    mean.mapv_inplace(|m| m * inv);
    for slice in stack.probs.outer_iter() {
        ndarray::Zip::from(&mut var)
            .and(&slice)
            .and(&mean)
            .for_each(|v, &p, &m| *v += (p - m) * (p - m));
    }
    var.mapv_inplace(|v| v * inv);

    let mut reliable = vec![false; n];
    let mut hard = LabelArray::ignored(n);
    let mut soft = mean.clone();
    for i in 0..n {
        let m = mean.row(i);
        let v = var.row(i);
        reliable[i] = (0..c).any(|k| m[k] >= tau && v[k] <= kappa);
        if reliable[i] {
            let mut best = 0;
            for k in 1..c {
                if m[k] > m[best] {
                    best = k;
                }
            }
            hard.set(i, Some(best as ClassId));
        }
        let total: f64 = m.sum();
        soft.row_mut(i).mapv_inplace(|x| x / total);
    }
    Ok(ReliabilitySplit { reliable, hard, soft })
}
