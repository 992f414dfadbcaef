//! Static surfel map construction from pose-aligned sweeps.
//!
//! Pipeline: aggregate sweeps into the map frame (dropping points flagged as
//! dynamic), keep one representative point per voxel, estimate a PCA normal
//! for each representative from the dense cloud, and turn it into a disk that
//! remembers the intensity, range and incidence angle it was observed with.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geometry::{incidence_angle, Aabb, Pose, SemanticClass, Surfel, Vec3};
use crate::par::{self, Exec};
use crate::spatial::KdTree;

/// One LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSample {
    pub position: Vec3,
    pub intensity: f64,
    pub laser_id: u8,
    pub timestamp: f64,
    pub semantic_class: SemanticClass,
    pub sensor_origin: Vec3,
    pub dynamic: bool,
}

impl PointSample {
    /// A static background return observed from the origin.
    pub fn at(position: Vec3) -> Self {
        Self {
            position,
            intensity: 0.5,
            laser_id: 0,
            timestamp: 0.0,
            semantic_class: SemanticClass::Background,
            sensor_origin: Vec3::zeros(),
            dynamic: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MapConfig {
    pub voxel_size: f64,
    pub normal_radius: f64,
    pub max_neighbors: usize,
    /// Disk radius as a multiple of `voxel_size`.
    pub radius_factor: f64,
    /// Two smallest covariance eigenvalues closer than this ratio make a normal degenerate.
    pub degeneracy_ratio: f64,
    pub exec: Exec,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.04,
            normal_radius: 0.20,
            max_neighbors: 200,
            radius_factor: 3f64.sqrt() / 2.0,
            degeneracy_ratio: 1e-6,
            exec: Exec::Parallel,
        }
    }
}

/// Surfels plus the acceleration structure used to raycast them.
#[derive(Clone, Debug)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    voxel_size: f64,
    bvh: Bvh,
}

impl SurfelMap {
    pub fn new(surfels: Vec<Surfel>, voxel_size: f64) -> Self {
        let bvh = Bvh::build(&surfels);
        Self {
            surfels,
            voxel_size,
            bvh,
        }
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.surfels.iter().map(|s| &s.center))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub input_points: usize,
    pub occupied_voxels: usize,
    pub degenerate: usize,
}

/// Moves every non-dynamic point of every sweep into the map frame.
///
/// `masks[i][j]` flags point `j` of sweep `i` as dynamic. Each output point
/// records its sweep's sensor position as `sensor_origin`.
pub fn aggregate_sweeps(
    sweeps: &[(Vec<PointSample>, Pose)],
    masks: &[Vec<bool>],
) -> Result<Vec<PointSample>> {
    if sweeps.len() != masks.len() {
        return Err(Error::input(format!(
            "{} sweeps but {} dynamic masks",
            sweeps.len(),
            masks.len()
        )));
    }
    let mut out = Vec::new();
    for (i, ((points, pose), mask)) in sweeps.iter().zip(masks).enumerate() {
        if points.len() != mask.len() {
            return Err(Error::input(format!(
                "sweep {i}: {} points but mask has {} entries",
                points.len(),
                mask.len()
            )));
        }
        out.extend(points.iter().zip(mask).filter(|(_, &d)| !d).map(|(p, _)| PointSample {
            position: pose.transform_point(&p.position),
            sensor_origin: pose.translation,
            dynamic: false,
            ..*p
        }));
    }
    Ok(out)
}

#[inline]
pub fn voxel_key(p: &Vec3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Indices of the voxel representatives, ascending.
///
/// The representative of a voxel is the point closest to its center; among
/// equally close points the lowest index wins.
pub fn voxel_representatives(points: &[Vec3], voxel_size: f64) -> Vec<usize> {
    let mut best: HashMap<[i64; 3], (f64, usize)> = HashMap::with_capacity(points.len() / 2);
    for (i, p) in points.iter().enumerate() {
        let key = voxel_key(p, voxel_size);
        let center = Vec3::new(
            (key[0] as f64 + 0.5) * voxel_size,
            (key[1] as f64 + 0.5) * voxel_size,
            (key[2] as f64 + 0.5) * voxel_size,
        );
        let d2 = (p - center).norm_squared();
        best.entry(key)
            .and_modify(|b| {
                if d2 < b.0 {
                    *b = (d2, i);
                }
            })
            .or_insert((d2, i));
    }
    let mut reps: Vec<usize> = best.into_values().map(|(_, i)| i).collect();
    reps.sort_unstable();
    reps
}

/// Keeps one point per occupied voxel, preserving input order.
pub fn voxel_downsample(points: &[PointSample], voxel_size: f64) -> Vec<PointSample> {
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    voxel_representatives(&positions, voxel_size)
        .into_iter()
        .map(|i| points[i])
        .collect()
}

/// PCA normal of a neighborhood: the eigenvector of the smallest covariance eigenvalue.
///
/// Returns `None` for fewer than three points, for (near) collinear or
/// coincident neighborhoods, and when the two smallest eigenvalues are within
/// `degeneracy_ratio` of each other so the normal direction is ambiguous.
pub fn estimate_normal(neighbors: &[Vec3], degeneracy_ratio: f64) -> Option<Vec3> {
    if neighbors.len() < 3 {
        return None;
    }
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    );
    if !(l2 > 0.0) || l1 <= 1e-12 * l2 || (l1 - l0) <= degeneracy_ratio * l1 {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}

/// Disk for a representative point, with the normal turned towards its sensor.
fn make_surfel(point: &PointSample, normal: Vec3, radius: f64) -> Surfel {
    let to_sensor = point.sensor_origin - point.position;
    let normal = if normal.dot(&to_sensor) < 0.0 { -normal } else { normal };
    let range = to_sensor.norm();
    let incidence = if range > 0.0 {
        incidence_angle(&(-to_sensor / range), &normal)
    } else {
        0.0
    };
    Surfel {
        center: point.position,
        normal,
        radius,
        orig_intensity: point.intensity,
        orig_range: range,
        orig_incidence: incidence,
        semantic_class: point.semantic_class,
    }
}

/// Runs downsampling, normal estimation and disk creation on a map-frame cloud.
pub fn build_surfels(points: &[PointSample], cfg: &MapConfig) -> (SurfelMap, BuildStats) {
    let (surfels, stats) = build_surfel_list(points, cfg);
    (SurfelMap::new(surfels, cfg.voxel_size), stats)
}

pub(crate) fn build_surfel_list(points: &[PointSample], cfg: &MapConfig) -> (Vec<Surfel>, BuildStats) {
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let reps = voxel_representatives(&positions, cfg.voxel_size);
    let tree = KdTree::new(&positions);
    let radius = cfg.radius_factor * cfg.voxel_size;
    let built: Vec<Option<Surfel>> = par::map_slice(cfg.exec, &reps, |&i| {
        let p = &points[i];
        let neighbors: Vec<Vec3> = tree
            .nearest_within(&p.position, cfg.normal_radius, cfg.max_neighbors)
            .into_iter()
            .map(|j| positions[j])
            .collect();
        estimate_normal(&neighbors, cfg.degeneracy_ratio).map(|n| make_surfel(p, n, radius))
    });
    let occupied = built.len();
    let surfels: Vec<Surfel> = built.into_iter().flatten().collect();
    let stats = BuildStats {
        input_points: points.len(),
        occupied_voxels: occupied,
        degenerate: occupied - surfels.len(),
    };
    (surfels, stats)
}
