//! Rigid object reconstruction from box-labeled sweeps, and retrieval of the
//! best-fitting reconstructed object for a requested box.
//!
//! An object is built by collecting the returns inside its label box in every
//! sweep (expressed in the box frame: origin at the box center, +x along the
//! heading), mirroring them across the heading axis, aligning later sweeps
//! onto earlier ones with intensity-weighted ICP, and meshing the result into
//! surfels.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose, Surfel, Vec3};
use crate::map_builder::{build_surfel_list, MapConfig, PointSample};
use crate::rng::{counter_u64, STREAM_SELECT};
use crate::spatial::KdTree;

/// Weight of orientation error against dimension error in the fitness score (m/rad).
pub const ORIENTATION_WEIGHT: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 5;

/// Oriented 3D box annotation at one timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub center: [f64; 3],
    /// Yaw of the object's heading, radians.
    pub heading: f64,
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    pub timestamp: f64,
}

impl BoxLabel {
    /// Object-to-map transform.
    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.heading, Vec3::from(self.center))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dims.iter().all(|&d| d > 0.0) {
            return Err(Error::input("box dims must be positive"));
        }
        Ok(())
    }
}

/// True if an object-frame point lies inside a box of `dims` scaled by `scale`.
pub fn inside_box(p: &Vec3, dims: &[f64; 3], scale: f64) -> bool {
    (0..3).all(|a| p[a].abs() <= 0.5 * dims[a] * scale)
}

/// Surfel mesh of one reconstructed object in its own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAsset {
    pub surfels: Vec<Surfel>,
    pub dims: [f64; 3],
    pub source_id: String,
    /// Heading relative to the observing vehicle at the first labeled frame.
    pub rel_orientation: f64,
}

/// Collection of reconstructed objects addressed by `source_id`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectBank {
    assets: Vec<ObjectAsset>,
}

impl ObjectBank {
    pub fn new(assets: Vec<ObjectAsset>) -> Self {
        let mut bank = Self::default();
        for a in assets {
            bank.insert(a);
        }
        bank
    }

    /// Adds an asset, replacing any existing one with the same id.
    pub fn insert(&mut self, asset: ObjectAsset) {
        match self.assets.iter_mut().find(|a| a.source_id == asset.source_id) {
            Some(slot) => *slot = asset,
            None => self.assets.push(asset),
        }
    }

    pub fn get(&self, id: &str) -> Option<&ObjectAsset> {
        self.assets.iter().find(|a| a.source_id == id)
    }

    pub fn assets(&self) -> &[ObjectAsset] {
        &self.assets
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }
}

/// Collects the in-box returns of each sweep in the box frame.
///
/// `sweeps[i]` holds sensor-frame points and the sensor-to-map pose;
/// `labels[i]` is the object's box at that sweep.
pub fn accumulate_object_per_sweep(
    sweeps: &[(Vec<PointSample>, Pose)],
    labels: &[BoxLabel],
) -> Result<Vec<Vec<PointSample>>> {
    if sweeps.len() != labels.len() {
        return Err(Error::input(format!(
            "{} sweeps but {} box labels",
            sweeps.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(sweeps.len());
    for ((points, sensor), label) in sweeps.iter().zip(labels) {
        label.validate()?;
        let to_object = label.pose().inverse().compose(sensor);
        let origin = to_object.translation;
        out.push(
            points
                .iter()
                .filter_map(|p| {
                    let local = to_object.transform_point(&p.position);
                    inside_box(&local, &label.dims, 1.0).then_some(PointSample {
                        position: local,
                        sensor_origin: origin,
                        ..*p
                    })
                })
                .collect(),
        );
    }
    if out.iter().all(Vec::is_empty) {
        return Err(Error::Quality("no points fall inside any label box".into()));
    }
    Ok(out)
}

/// All in-box returns of all sweeps, concatenated in the box frame.
pub fn accumulate_object(
    sweeps: &[(Vec<PointSample>, Pose)],
    labels: &[BoxLabel],
) -> Result<Vec<PointSample>> {
    Ok(accumulate_object_per_sweep(sweeps, labels)?
        .into_iter()
        .flatten()
        .collect())
}

fn reflect(p: &Vec3) -> Vec3 {
    Vec3::new(p.x, -p.y, p.z)
}

/// Input followed by its reflection across the heading (xz) plane.
pub fn mirror_symmetry(points: &[PointSample]) -> Vec<PointSample> {
    let mut out = Vec::with_capacity(points.len() * 2);
    out.extend_from_slice(points);
    out.extend(points.iter().map(|p| PointSample {
        position: reflect(&p.position),
        sensor_origin: reflect(&p.sensor_origin),
        ..*p
    }));
    out
}

#[derive(Clone, Copy, Debug)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub translation_tol: f64,
    pub rotation_tol: f64,
    /// Width of the intensity similarity weight; `None` gives plain point-to-point ICP.
    pub intensity_sigma: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            translation_tol: 1e-6,
            rotation_tol: 1e-6,
            intensity_sigma: Some(0.1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IcpResult {
    /// Transform taking source points onto the target.
    pub pose: Pose,
    pub converged: bool,
    pub iterations: usize,
    /// Weighted RMS correspondence distance at `pose`.
    pub rmse: f64,
}

/// Weighted least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn weighted_kabsch(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<Pose> {
    let total: f64 = weights.iter().sum();
    if !(total > 1e-12) {
        return None;
    }
    let mut cs = Vec3::zeros();
    let mut cd = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += s * *w;
        cd += d * *w;
    }
    cs /= total;
    cd /= total;
    let mut h = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (s - cs) * (d - cd).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Some(Pose::new(rotation, cd - rotation * cs))
}

/// Aligns `source` onto `target` with intensity-weighted point-to-point ICP.
///
/// Correspondences are geometric nearest neighbors; each pair is weighted by
/// `exp(−ΔI²/σ²)` so that returns of different brightness pull less. Stops when
/// an update moves less than the translation and rotation tolerances. When it
/// runs out of iterations, the iterate with the lowest weighted error is
/// returned with `converged = false`.
pub fn icp_refine(source: &[PointSample], target: &[PointSample], cfg: &IcpConfig) -> Result<IcpResult> {
    if source.len() < 10 || target.len() < 10 {
        return Err(Error::input("ICP needs at least 10 points in each cloud"));
    }
    let target_pos: Vec<Vec3> = target.iter().map(|p| p.position).collect();
    let tree = KdTree::new(&target_pos);
    let mut pose = Pose::identity();
    let mut best = (f64::INFINITY, pose);
    let mut moved = Vec::with_capacity(source.len());
    let mut matched = Vec::with_capacity(source.len());
    let mut weights = Vec::with_capacity(source.len());
    for iter in 1..=cfg.max_iters {
        moved.clear();
        matched.clear();
        weights.clear();
        let mut err = 0.0;
        for s in source {
            let p = pose.transform_point(&s.position);
            let (j, d2) = tree.nearest(&p).expect("target is non-empty");
            let w = match cfg.intensity_sigma {
                Some(sigma) => {
                    let di = s.intensity - target[j].intensity;
                    (-(di * di) / (sigma * sigma)).exp()
                }
                None => 1.0,
            };
            err += w * d2;
            moved.push(p);
            matched.push(target_pos[j]);
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        let rmse = if total > 0.0 { (err / total).sqrt() } else { f64::INFINITY };
        if rmse < best.0 {
            best = (rmse, pose);
        }
        let Some(delta) = weighted_kabsch(&moved, &matched, &weights) else {
            break;
        };
        pose = delta.compose(&pose);
        if delta.translation.norm() < cfg.translation_tol && delta.rotation_angle() < cfg.rotation_tol {
            return Ok(IcpResult {
                pose,
                converged: true,
                iterations: iter,
                rmse,
            });
        }
    }
    Ok(IcpResult {
        pose: best.1,
        converged: false,
        iterations: cfg.max_iters,
        rmse: best.0,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MeshConfig {
    pub map: MapConfig,
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
    pub min_points: usize,
    /// Surfels further than this fraction outside the label box are discarded.
    pub box_margin: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            map: MapConfig::default(),
            outlier_radius: 0.1,
            outlier_min_neighbors: 4,
            min_points: 50,
            box_margin: 0.1,
        }
    }
}

/// Drops points with fewer than `min_neighbors` other points within `radius`.
pub fn remove_outliers(points: &[PointSample], radius: f64, min_neighbors: usize) -> Vec<PointSample> {
    let pos: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let tree = KdTree::new(&pos);
    points
        .iter()
        .filter(|p| tree.count_within(&p.position, radius, min_neighbors + 1) > min_neighbors)
        .copied()
        .collect()
}

/// Meshes an accumulated object-frame cloud into an asset.
pub fn meshify_object(
    points: &[PointSample],
    dims: [f64; 3],
    source_id: impl Into<String>,
    rel_orientation: f64,
    cfg: &MeshConfig,
) -> Result<ObjectAsset> {
    let kept = remove_outliers(points, cfg.outlier_radius, cfg.outlier_min_neighbors);
    if kept.len() < cfg.min_points {
        return Err(Error::Quality(format!(
            "only {} of {} points survive outlier removal (need {})",
            kept.len(),
            points.len(),
            cfg.min_points
        )));
    }
    let (surfels, _) = build_surfel_list(&kept, &cfg.map);
    let scale = 1.0 + cfg.box_margin;
    let surfels: Vec<Surfel> = surfels
        .into_iter()
        .filter(|s| inside_box(&s.center, &dims, scale))
        .collect();
    if surfels.is_empty() {
        return Err(Error::Quality("object produced no surfels".into()));
    }
    Ok(ObjectAsset {
        surfels,
        dims,
        source_id: source_id.into(),
        rel_orientation,
    })
}

/// Higher is better; zero for an exact match.
pub fn fitness(asset_dims: &[f64; 3], asset_orientation: f64, query_dims: &[f64; 3], query_orientation: f64) -> f64 {
    let dim_err = (Vec3::from(*query_dims) - Vec3::from(*asset_dims)).norm();
    let ang_err = wrap_angle(query_orientation - asset_orientation).abs();
    -(dim_err + ORIENTATION_WEIGHT * ang_err)
}

/// Bank indices ordered by descending fitness (ties by index).
pub fn rank_by_fitness(bank: &[ObjectAsset], query_dims: &[f64; 3], query_orientation: f64) -> Vec<usize> {
    let scores: Vec<f64> = bank
        .iter()
        .map(|a| fitness(&a.dims, a.rel_orientation, query_dims, query_orientation))
        .collect();
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Picks uniformly (keyed by `seed`) among the `k` best-fitting assets; returns its bank index.
pub fn select_object(
    bank: &[ObjectAsset],
    query_dims: &[f64; 3],
    query_orientation: f64,
    k: usize,
    seed: u64,
) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::input("object bank is empty"));
    }
    if k == 0 {
        return Err(Error::input("top-k must be at least 1"));
    }
    let order = rank_by_fitness(bank, query_dims, query_orientation);
    let top = k.min(order.len());
    let pick = (counter_u64(seed, STREAM_SELECT, 0, 0) % top as u64) as usize;
    Ok(order[pick])
}
