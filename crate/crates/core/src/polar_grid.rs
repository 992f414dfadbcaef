//! Polar feature grids (rows = lasers, columns = azimuth bins).

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::{Pose, SemanticClass};
use crate::map_builder::PointSample;
use crate::raycast::{HitImage, RayGrid, SensorIntrinsics};

pub const CHANNELS: usize = 8;

pub const CH_RANGE: usize = 0;
pub const CH_ORIG_INTENSITY: usize = 1;
pub const CH_INCIDENCE: usize = 2;
pub const CH_ORIG_RANGE: usize = 3;
pub const CH_ORIG_INCIDENCE: usize = 4;
pub const CH_LASER_ID: usize = 5;
pub const CH_SEMANTIC: usize = 6;
pub const CH_OCCUPANCY: usize = 7;

/// Binary per-cell mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// True if every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Eight-channel polar grid, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    /// Empty grid: only the laser id channel is filled.
    pub fn empty(rows: usize, cols: usize) -> Self {
        let mut g = Self {
            rows,
            cols,
            data: vec![0.0; CHANNELS * rows * cols],
        };
        for r in 0..rows {
            for c in 0..cols {
                g.set(CH_LASER_ID, r, c, r as f64);
            }
        }
        g
    }

    #[inline]
    pub fn index(&self, ch: usize, row: usize, col: usize) -> usize {
        (ch * self.rows + row) * self.cols + col
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(ch, row, col)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        let i = self.index(ch, row, col);
        self.data[i] = v;
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn occupied(&self, row: usize, col: usize) -> bool {
        self.get(CH_OCCUPANCY, row, col) != 0.0
    }

    pub fn occupancy(&self) -> Mask {
        Mask {
            rows: self.rows,
            cols: self.cols,
            bits: self.channel(CH_OCCUPANCY).iter().map(|&v| v != 0.0).collect(),
        }
    }

    /// Checks the channel invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != CHANNELS * self.rows * self.cols {
            return Err(Error::input("feature grid data length does not match its shape"));
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                let occ = self.get(CH_OCCUPANCY, r, c);
                if occ != 0.0 && occ != 1.0 {
                    return Err(Error::input(format!("occupancy at ({r}, {c}) is {occ}")));
                }
                if self.get(CH_LASER_ID, r, c) != r as f64 {
                    return Err(Error::input(format!("laser id channel wrong at ({r}, {c})")));
                }
                if occ == 0.0 && (0..=CH_ORIG_INCIDENCE).any(|ch| self.get(ch, r, c) != 0.0) {
                    return Err(Error::input(format!("empty cell ({r}, {c}) carries values")));
                }
            }
        }
        Ok(())
    }
}

/// Grids a cast sweep cell for cell.
pub fn project(hits: &HitImage) -> FeatureGrid {
    let (rows, cols) = (hits.rows(), hits.cols());
    let mut g = FeatureGrid::empty(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if let Some(h) = hits.get(r, c) {
                g.set(CH_RANGE, r, c, h.hit.range);
                g.set(CH_ORIG_INTENSITY, r, c, h.orig_intensity);
                g.set(CH_INCIDENCE, r, c, h.hit.incidence);
                g.set(CH_ORIG_RANGE, r, c, h.orig_range);
                g.set(CH_ORIG_INCIDENCE, r, c, h.orig_incidence);
                g.set(CH_SEMANTIC, r, c, h.semantic_class.code() as f64);
                g.set(CH_OCCUPANCY, r, c, 1.0);
            }
        }
    }
    g
}

/// Column whose commanded azimuth is nearest to `phi`.
pub fn azimuth_column(intr: &SensorIntrinsics, phi: f64) -> usize {
    let rel = (intr.spin_direction as f64 * (phi - intr.azimuth_start)).rem_euclid(TAU);
    let col = (intr.n_cols as f64 * rel / TAU + 0.5).floor() as usize;
    col % intr.n_cols
}

/// A real sweep binned onto the polar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedSweep {
    pub occupancy: Mask,
    /// Range of the kept return per cell (0 where empty).
    pub range: Vec<f64>,
    /// Index of the kept point per cell.
    pub source: Vec<Option<usize>>,
    /// Points that landed in an already occupied cell.
    pub collisions: usize,
}

/// Bins sensor-frame points by laser id and azimuth.
///
/// Positions are expected in the sensor frame; the nearest return wins when two
/// points share a cell.
pub fn bin_real_sweep(points: &[PointSample], intr: &SensorIntrinsics) -> Result<BinnedSweep> {
    let (rows, cols) = (intr.n_beams, intr.n_cols);
    let mut out = BinnedSweep {
        occupancy: Mask::zeros(rows, cols),
        range: vec![0.0; rows * cols],
        source: vec![None; rows * cols],
        collisions: 0,
    };
    for (i, p) in points.iter().enumerate() {
        let row = p.laser_id as usize;
        if row >= rows {
            return Err(Error::input(format!(
                "point {i} has laser id {row} but the sensor has {rows} beams"
            )));
        }
        let col = azimuth_column(intr, p.position.y.atan2(p.position.x));
        let cell = row * cols + col;
        let range = p.position.norm();
        if out.occupancy.bits[cell] {
            out.collisions += 1;
            if range >= out.range[cell] {
                continue;
            }
        }
        out.occupancy.bits[cell] = true;
        out.range[cell] = range;
        out.source[cell] = Some(i);
    }
    Ok(out)
}

/// Emits one world-frame point per kept cell.
pub fn to_pointcloud(grid: &FeatureGrid, keep: &Mask, rays: &RayGrid) -> Result<Vec<PointSample>> {
    if keep.rows != grid.rows || keep.cols != grid.cols || rays.rows != grid.rows || rays.cols != grid.cols {
        return Err(Error::input("grid, mask and rays disagree on shape"));
    }
    let mut out = Vec::with_capacity(keep.count());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if !keep.get(r, c) {
                continue;
            }
            if !grid.occupied(r, c) {
                return Err(Error::input(format!("keep mask set at unoccupied cell ({r}, {c})")));
            }
            let ray = rays.get(r, c);
            let code = grid.get(CH_SEMANTIC, r, c);
            let class = SemanticClass::from_code(code as u8)
                .ok_or_else(|| Error::input(format!("bad semantic code {code} at ({r}, {c})")))?;
            out.push(PointSample {
                position: ray.at(grid.get(CH_RANGE, r, c)),
                intensity: grid.get(CH_ORIG_INTENSITY, r, c),
                laser_id: r as u8,
                timestamp: rays.sweep_start + ray.time_offset,
                semantic_class: class,
                sensor_origin: ray.origin,
                dynamic: class == SemanticClass::Vehicle,
            });
        }
    }
    Ok(out)
}

/// Re-expresses world points in the sensor frame at capture time.
///
/// The rotation is the sweep-start one and the origin is each point's own
/// `sensor_origin`, which matches how rays were fired.
pub fn to_sensor_frame(points: &[PointSample], sweep_pose: &Pose) -> Vec<PointSample> {
    let frame = Pose::new(sweep_pose.rotation, Default::default());
    points
        .iter()
        .map(|p| PointSample {
            position: frame.inverse_rotate(&(p.position - p.sensor_origin)),
            sensor_origin: Default::default(),
            ..*p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Hit, Vec3};
    use crate::raycast::{generate_rays, CellHit, HitSource};
    use crate::scene::Trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn blank_image(intr: &SensorIntrinsics, sdv: &Trajectory) -> HitImage {
        let rays = generate_rays(intr, sdv, 0.0, false);
        let n = rays.rays.len();
        HitImage {
            rays,
            cells: vec![None; n],
            masked: vec![false; n],
        }
    }

    fn cell_hit(range: f64) -> CellHit {
        CellHit {
            hit: Hit {
                range,
                point: Vec3::zeros(),
                surfel_index: 0,
                incidence: 0.3,
            },
            source: HitSource::Static,
            orig_intensity: 0.4,
            orig_range: 9.0,
            orig_incidence: 0.2,
            semantic_class: SemanticClass::Road,
        }
    }

    #[test]
    fn empty_image_projects_to_laser_ids_only() {
        let intr = SensorIntrinsics::default();
        let g = project(&blank_image(&intr, &Trajectory::stationary(Pose::identity())));
        g.validate().unwrap();
        for ch in 0..CHANNELS {
            let nonzero = g.channel(ch).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, ch == CH_LASER_ID, "channel {ch}");
        }
    }

    #[test]
    fn single_hit() {
        let intr = SensorIntrinsics::default();
        let mut img = blank_image(&intr, &Trajectory::stationary(Pose::identity()));
        img.cells[10 * 2048 + 500] = Some(cell_hit(7.5));
        let g = project(&img);
        g.validate().unwrap();
        assert_eq!(g.get(CH_RANGE, 10, 500), 7.5);
        assert_eq!(g.get(CH_OCCUPANCY, 10, 500), 1.0);
        assert_eq!(g.get(CH_SEMANTIC, 10, 500), 2.0);
        assert_eq!(g.occupancy().count(), 1);
    }

    #[test]
    fn bin_column_center_and_collisions() {
        let intr = SensorIntrinsics::default();
        let phi = intr.azimuth(500);
        let at = |r: f64, laser: u8| PointSample {
            laser_id: laser,
            ..PointSample::at(Vec3::new(r * phi.cos(), r * phi.sin(), 0.0))
        };
        let b = bin_real_sweep(&[at(7.0, 10), at(5.0, 10)], &intr).unwrap();
        assert!(b.occupancy.get(10, 500));
        assert_eq!(b.occupancy.count(), 1);
        assert_eq!(b.collisions, 1);
        assert!((b.range[10 * 2048 + 500] - 5.0).abs() < 1e-12);
        assert_eq!(b.source[10 * 2048 + 500], Some(1));
        assert!(bin_real_sweep(&[at(1.0, 64)], &intr).is_err());
    }

    #[test]
    fn clockwise_spin_binning() {
        let intr = SensorIntrinsics {
            spin_direction: -1,
            azimuth_start: 0.7,
            ..Default::default()
        };
        for col in [0, 1, 700, 2047] {
            assert_eq!(azimuth_column(&intr, intr.azimuth(col)), col);
        }
    }

    #[test]
    fn counting_oracle_110k_points() {
        let intr = SensorIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut points = Vec::new();
        let mut cells = HashSet::new();
        let half = 0.49 * TAU / intr.n_cols as f64;
        for _ in 0..110_000 {
            let row = rng.random_range(0..64usize);
            let col = rng.random_range(0..2048usize);
            cells.insert((row, col));
            let phi = intr.azimuth(col) + rng.random_range(-half..half);
            let theta = intr.elevation_table[row];
            let r = rng.random_range(2.0..80.0);
            let pos = Vec3::new(r * theta.cos() * phi.cos(), r * theta.cos() * phi.sin(), r * theta.sin());
            points.push(PointSample {
                laser_id: row as u8,
                ..PointSample::at(pos)
            });
        }
        let b = bin_real_sweep(&points, &intr).unwrap();
        assert_eq!(b.occupancy.count(), cells.len());
        assert_eq!(b.occupancy.count(), 110_000 - b.collisions);
    }

    #[test]
    fn pointcloud_keep_masks() {
        let intr = SensorIntrinsics::default();
        let sdv = Trajectory::stationary(Pose::identity());
        let mut img = blank_image(&intr, &sdv);
        for i in (0..img.cells.len()).step_by(7) {
            img.cells[i] = Some(cell_hit(3.0 + (i % 13) as f64));
        }
        let g = project(&img);
        let occ = g.occupancy();
        assert_eq!(to_pointcloud(&g, &occ, &img.rays).unwrap().len(), occ.count());
        assert!(to_pointcloud(&g, &Mask::zeros(64, 2048), &img.rays).unwrap().is_empty());
        let mut tenth = 0;
        let thinned = Mask::from_fn(64, 2048, |r, c| {
            occ.get(r, c) && {
                tenth += 1;
                tenth % 10 != 0
            }
        });
        let n = to_pointcloud(&g, &thinned, &img.rays).unwrap().len();
        assert!((n as f64 - 0.9 * occ.count() as f64).abs() <= 1.0);
        let mut bad = occ.clone();
        bad.bits[1] = true;
        assert!(to_pointcloud(&g, &bad, &img.rays).is_err());
    }

    #[test]
    fn rebinning_reproduces_occupancy() {
        let intr = SensorIntrinsics::default();
        let start = Pose::from_rpy(0.02, -0.01, 1.3, Vec3::new(4.0, -2.0, 1.7));
        let end = Pose::from_rpy(0.02, -0.01, 1.35, Vec3::new(5.5, -1.6, 1.7));
        let sdv = Trajectory::new(vec![(0.0, start), (0.1, end)]).unwrap();
        let mut img = blank_image(&intr, &sdv);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cell in img.cells.iter_mut() {
            if rng.random_bool(0.6) {
                *cell = Some(cell_hit(rng.random_range(0.2..120.0)));
            }
        }
        let g = project(&img);
        let pts = to_pointcloud(&g, &g.occupancy(), &img.rays).unwrap();
        // Round through f32 as the sweep file does.
        let local: Vec<PointSample> = to_sensor_frame(&pts, &start)
            .into_iter()
            .map(|p| PointSample {
                position: p.position.map(|v| v as f32 as f64),
                ..p
            })
            .collect();
        let b = bin_real_sweep(&local, &intr).unwrap();
        assert_eq!(b.collisions, 0);
        assert_eq!(b.occupancy, g.occupancy());
    }
}
