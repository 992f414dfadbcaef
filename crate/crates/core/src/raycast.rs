//! Spinning-LiDAR sweep simulation.
//!
//! Rays fire column by column over one sweep period. The sensor origin moves
//! with the SDV velocity sampled at the start of the sweep while the rotation
//! stays fixed at its start-of-sweep value, which models the rolling shutter
//! of the ego motion. Actors are posed at the midpoint of one of
//! [`DEFAULT_INTERVALS`] equal slices of the sweep, chosen by each ray's firing
//! time. The closest hit over the static map and all actors wins, and hits that
//! land inside the SDV's own body box are masked out.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geometry::{Hit, Ray, SemanticClass, Surfel, Vec3};
use crate::par::{self, Exec};
use crate::scene::{Scene, Trajectory};

pub const DEFAULT_BEAMS: usize = 64;
pub const DEFAULT_COLUMNS: usize = 2048;
pub const DEFAULT_INTERVALS: usize = 360;
pub const DEFAULT_T_MIN: f64 = 0.1;
/// Hits from different sources closer than this are treated as ties.
pub const TIE_EPSILON: f64 = 1e-9;

/// Beam layout and timing of the spinning sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorIntrinsics {
    pub n_beams: usize,
    pub n_cols: usize,
    /// Elevation of each beam in radians, indexed by laser id.
    pub elevation_table: Vec<f64>,
    pub azimuth_start: f64,
    /// +1 for counter-clockwise azimuth progression, −1 for clockwise.
    pub spin_direction: i8,
    pub sweep_period: f64,
}

impl Default for SensorIntrinsics {
    fn default() -> Self {
        Self::hdl64e()
    }
}

impl SensorIntrinsics {
    /// 64 beams spread evenly from +2.0° down to −24.9°, 2048 columns at 10 Hz.
    pub fn hdl64e() -> Self {
        let top = 2.0f64;
        let bottom = -24.9f64;
        let elevation_table = (0..DEFAULT_BEAMS)
            .map(|i| (top + (bottom - top) * i as f64 / (DEFAULT_BEAMS - 1) as f64).to_radians())
            .collect();
        Self {
            n_beams: DEFAULT_BEAMS,
            n_cols: DEFAULT_COLUMNS,
            elevation_table,
            azimuth_start: 0.0,
            spin_direction: 1,
            sweep_period: 0.1,
        }
    }

    /// Parses `beam_id,elevation_deg` rows (an optional non-numeric header is skipped).
    pub fn elevations_from_csv(text: &str) -> Result<Vec<f64>> {
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (Some(id), Some(elev), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(format!("intrinsics line {}: expected beam_id,elevation_deg", lineno + 1)));
            };
            match (id.parse::<usize>(), elev.parse::<f64>()) {
                (Ok(id), Ok(elev)) => rows.push((id, elev.to_radians())),
                _ if rows.is_empty() && lineno == 0 => continue,
                _ => return Err(Error::format(format!("intrinsics line {}: unparsable row {line:?}", lineno + 1))),
            }
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::format("intrinsics beam ids must be 0..n without gaps"));
        }
        Ok(rows.into_iter().map(|r| r.1).collect())
    }

    pub fn with_elevations(mut self, table: Vec<f64>) -> Self {
        self.n_beams = table.len();
        self.elevation_table = table;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_beams == 0 || self.n_cols == 0 {
            return Err(Error::input("sensor needs at least one beam and one column"));
        }
        if self.n_beams > u16::MAX as usize || self.n_cols > u16::MAX as usize {
            return Err(Error::input("sensor grid dimensions exceed 65535"));
        }
        if self.elevation_table.len() != self.n_beams {
            return Err(Error::input(format!(
                "elevation table has {} entries for {} beams",
                self.elevation_table.len(),
                self.n_beams
            )));
        }
        let t = &self.elevation_table;
        let desc = t.windows(2).all(|w| w[0] > w[1]);
        let asc = t.windows(2).all(|w| w[0] < w[1]);
        if !(desc || asc) {
            return Err(Error::input("elevation table must be strictly monotone"));
        }
        if self.spin_direction != 1 && self.spin_direction != -1 {
            return Err(Error::input("spin direction must be +1 or -1"));
        }
        if !(self.sweep_period > 0.0) {
            return Err(Error::input("sweep period must be positive"));
        }
        Ok(())
    }

    /// Commanded azimuth of column `col`.
    #[inline]
    pub fn azimuth(&self, col: usize) -> f64 {
        self.azimuth_start + self.spin_direction as f64 * (2.0 * PI * col as f64 / self.n_cols as f64)
    }

    /// Firing time of column `col` relative to the sweep start.
    #[inline]
    pub fn time_offset(&self, col: usize) -> f64 {
        col as f64 / self.n_cols as f64 * self.sweep_period
    }

    pub fn cell_count(&self) -> usize {
        self.n_beams * self.n_cols
    }
}

/// Unit direction for elevation `theta` and azimuth `phi` in the sensor frame.
#[inline]
pub fn beam_direction(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(ct * cp, ct * sp, st)
}

/// All rays of one sweep, row-major (`row * cols + col`).
#[derive(Clone, Debug, PartialEq)]
pub struct RayGrid {
    pub rows: usize,
    pub cols: usize,
    pub sweep_start: f64,
    pub rays: Vec<Ray>,
}

impl RayGrid {
    pub fn get(&self, row: usize, col: usize) -> &Ray {
        &self.rays[row * self.cols + col]
    }
}

/// Generates the sweep's rays from the SDV trajectory.
///
/// Column `j` fires at `Δt = (j / n_cols) · period` from origin `c₀ + Δt · v₀`
/// in direction `R₀ · [cosθ cosφ, cosθ sinφ, sinθ]`, with `c₀`, `R₀`, `v₀`
/// taken at `sweep_start`. With `compensate_rotation` the rotation is instead
/// interpolated at each column's firing time.
pub fn generate_rays(
    intr: &SensorIntrinsics,
    sdv: &Trajectory,
    sweep_start: f64,
    compensate_rotation: bool,
) -> RayGrid {
    let start = sdv.pose_at(sweep_start);
    let c0 = start.translation;
    let v0 = sdv.velocity_at(sweep_start);
    let mut rays = Vec::with_capacity(intr.cell_count());
    let columns: Vec<(f64, Vec3, f64, crate::geometry::Pose)> = (0..intr.n_cols)
        .map(|col| {
            let dt = intr.time_offset(col);
            let rot = if compensate_rotation {
                sdv.pose_at(sweep_start + dt)
            } else {
                start
            };
            (dt, c0 + v0 * dt, intr.azimuth(col), rot)
        })
        .collect();
    for (row, &theta) in intr.elevation_table.iter().enumerate() {
        for (col, (dt, origin, phi, rot)) in columns.iter().enumerate() {
            rays.push(Ray {
                origin: *origin,
                direction: rot.rotate(&beam_direction(theta, *phi)),
                time_offset: *dt,
                laser_row: row as u16,
                azimuth_col: col as u16,
            });
        }
    }
    RayGrid {
        rows: intr.n_beams,
        cols: intr.n_cols,
        sweep_start,
        rays,
    }
}

/// Where a hit surfel came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HitSource {
    Static,
    Actor(u16),
}

/// A hit together with the metadata recorded on its surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellHit {
    pub hit: Hit,
    pub source: HitSource,
    pub orig_intensity: f64,
    pub orig_range: f64,
    pub orig_incidence: f64,
    pub semantic_class: SemanticClass,
}

impl CellHit {
    pub fn new(hit: Hit, source: HitSource, surfel: &Surfel) -> Self {
        Self {
            hit,
            source,
            orig_intensity: surfel.orig_intensity,
            orig_range: surfel.orig_range,
            orig_incidence: surfel.orig_incidence,
            semantic_class: surfel.semantic_class,
        }
    }
}

/// True if `a` should replace the current best `b`.
///
/// Ranges within [`TIE_EPSILON`] tie; ties prefer the static map, then lower
/// actor index, then lower surfel index.
#[inline]
pub fn cell_hit_precedes(a: &CellHit, b: &CellHit) -> bool {
    if (a.hit.range - b.hit.range).abs() < TIE_EPSILON {
        (a.source, a.hit.surfel_index) < (b.source, b.hit.surfel_index)
    } else {
        a.hit.range < b.hit.range
    }
}

/// Result of casting one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct HitImage {
    pub rays: RayGrid,
    pub cells: Vec<Option<CellHit>>,
    /// Cells whose hit was removed because it landed on the SDV itself.
    pub masked: Vec<bool>,
}

impl HitImage {
    pub fn rows(&self) -> usize {
        self.rays.rows
    }

    pub fn cols(&self) -> usize {
        self.rays.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&CellHit> {
        self.cells[row * self.cols() + col].as_ref()
    }

    pub fn return_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CastConfig {
    pub t_min: f64,
    /// Number of equal time slices at which actor poses are updated.
    pub intervals: usize,
    pub compensate_rotation: bool,
    pub exec: Exec,
}

impl Default for CastConfig {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            intervals: DEFAULT_INTERVALS,
            compensate_rotation: false,
            exec: Exec::Parallel,
        }
    }
}

/// Slice of the sweep containing `time_offset`.
#[inline]
pub fn interval_index(time_offset: f64, period: f64, intervals: usize) -> usize {
    let k = (time_offset / period * intervals as f64).floor();
    (k.max(0.0) as usize).min(intervals - 1)
}

/// Absolute time at which actors are posed for slice `k`: the slice midpoint.
#[inline]
pub fn interval_time(k: usize, sweep_start: f64, period: f64, intervals: usize) -> f64 {
    sweep_start + (k as f64 + 0.5) * period / intervals as f64
}

/// True if world point `p` lies inside the SDV box at SDV pose time `t`.
pub fn inside_exclusion_box(scene: &Scene, t: f64, p: &Vec3) -> bool {
    let local = scene.sdv.pose_at(t).inverse_transform_point(p);
    (0..3).all(|a| local[a].abs() <= 0.5 * scene.exclusion_box[a])
}

struct Caster<'a> {
    scene: &'a Scene,
    cfg: CastConfig,
    period: f64,
    sweep_start: f64,
    /// `actor_bvhs[a][k]`: actor `a` posed for slice `k`, built on first use.
    actor_bvhs: Vec<Vec<OnceLock<Bvh>>>,
}

impl Caster<'_> {
    fn actor_bvh(&self, actor: usize, k: usize) -> &Bvh {
        self.actor_bvhs[actor][k].get_or_init(|| {
            let t = interval_time(k, self.sweep_start, self.period, self.cfg.intervals);
            Bvh::build(&self.scene.actors[actor].surfels_at(t))
        })
    }

    fn cast(&self, ray: &Ray) -> (Option<CellHit>, bool) {
        let map = &self.scene.map;
        let mut best = map
            .bvh()
            .closest_hit(ray, self.cfg.t_min)
            .map(|h| CellHit::new(h, HitSource::Static, &map.surfels()[h.surfel_index]));
        if !self.scene.actors.is_empty() {
            let k = interval_index(ray.time_offset, self.period, self.cfg.intervals);
            for (a, actor) in self.scene.actors.iter().enumerate() {
                if let Some(h) = self.actor_bvh(a, k).closest_hit(ray, self.cfg.t_min) {
                    let cand = CellHit::new(h, HitSource::Actor(a as u16), &actor.asset.surfels[h.surfel_index]);
                    if best.as_ref().is_none_or(|b| cell_hit_precedes(&cand, b)) {
                        best = Some(cand);
                    }
                }
            }
        }
        match best {
            Some(c) if inside_exclusion_box(self.scene, self.sweep_start + ray.time_offset, &c.hit.point) => (None, true),
            other => (other, false),
        }
    }
}

/// Casts every ray of one sweep against the scene.
pub fn cast_sweep(scene: &Scene, intr: &SensorIntrinsics, sweep_start: f64, cfg: &CastConfig) -> HitImage {
    let rays = generate_rays(intr, &scene.sdv, sweep_start, cfg.compensate_rotation);
    cast_rays(scene, rays, intr.sweep_period, cfg)
}

/// Casts a pre-generated ray grid against the scene.
pub fn cast_rays(scene: &Scene, rays: RayGrid, sweep_period: f64, cfg: &CastConfig) -> HitImage {
    assert!(cfg.intervals > 0, "at least one actor interval is required");
    let caster = Caster {
        scene,
        cfg: *cfg,
        period: sweep_period,
        sweep_start: rays.sweep_start,
        actor_bvhs: scene
            .actors
            .iter()
            .map(|_| (0..cfg.intervals).map(|_| OnceLock::new()).collect())
            .collect(),
    };
    let results = par::map_slice(cfg.exec, &rays.rays, |ray| caster.cast(ray));
    let (cells, masked) = results.into_iter().unzip();
    HitImage { rays, cells, masked }
}
