//! Synthetic worlds, sweeps and scenes for tests, benches and demos.
//!
//! "Real" sweeps are produced by scanning an analytic world of rectangles,
//! independently of the surfel raycaster.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{incidence_angle, Pose, SemanticClass, Surfel, Vec3};
use crate::io::SweepFile;
use crate::map_builder::{PointSample, SurfelMap};
use crate::object_bank::{BoxLabel, ObjectAsset, ObjectBank};
use crate::polar_grid::{project, FeatureGrid, Mask, CH_INCIDENCE};
use crate::raycast::{beam_direction, cast_sweep, CastConfig, SensorIntrinsics};
use crate::scene::{
    ActorSpec, Scenario, Scene, SceneActor, SdvSpec, Trajectory, TrajectorySample, DEFAULT_EXCLUSION_BOX,
};

/// Height of the simulated sensor above the road.
pub const SENSOR_HEIGHT: f64 = 1.8;
pub const CAR_DIMS: [f64; 3] = [4.5, 1.9, 1.6];
/// Incidence above which the synthetic raydrop rule drops a return.
pub const RULE_INCIDENCE: f64 = PI / 3.0;

/// Bounded planar patch `center + a·u + b·v`, `|a| ≤ half_u`, `|b| ≤ half_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: Vec3,
    pub normal: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub class: SemanticClass,
    pub reflectivity: f64,
    pub dynamic: bool,
}

impl Rect {
    pub fn new(center: Vec3, u: Vec3, v: Vec3, half_u: f64, half_v: f64, class: SemanticClass, reflectivity: f64) -> Self {
        Self {
            center,
            normal: u.cross(&v).normalize(),
            u,
            v,
            half_u,
            half_v,
            class,
            reflectivity,
            dynamic: false,
        }
    }

    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - origin).dot(&self.normal) / denom;
        if t <= t_min {
            return None;
        }
        let rel = origin + dir * t - self.center;
        (rel.dot(&self.u).abs() <= self.half_u && rel.dot(&self.v).abs() <= self.half_v).then_some(t)
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_u * self.half_v
    }
}

/// Six outward-facing faces of an oriented box.
pub fn box_rects(center: Vec3, yaw: f64, dims: [f64; 3], class: SemanticClass, reflectivity: f64) -> Vec<Rect> {
    let pose = Pose::from_yaw(yaw, center);
    let ax = [pose.rotate(&Vec3::x()), pose.rotate(&Vec3::y()), Vec3::z()];
    let half = dims.map(|d| 0.5 * d);
    let mut out = Vec::with_capacity(6);
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        for s in [1.0, -1.0] {
            let (u, v) = if s > 0.0 { (ax[i], ax[j]) } else { (ax[j], ax[i]) };
            let (hu, hv) = if s > 0.0 { (half[i], half[j]) } else { (half[j], half[i]) };
            out.push(Rect::new(center + ax[k] * (s * half[k]), u, v, hu, hv, class, reflectivity));
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct World {
    pub rects: Vec<Rect>,
}

impl World {
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, &Rect)> {
        let mut best: Option<(f64, &Rect)> = None;
        for r in &self.rects {
            if let Some(t) = r.intersect(origin, dir, t_min) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, r));
                }
            }
        }
        best
    }

    /// Road with sidewalks and facades on both sides, `half_length` along x.
    pub fn street(half_length: f64) -> Self {
        let road = Rect::new(Vec3::zeros(), Vec3::x(), Vec3::y(), half_length, 7.0, SemanticClass::Road, 0.15);
        let mut rects = vec![road];
        for s in [1.0, -1.0] {
            rects.push(Rect::new(Vec3::new(0.0, s * 9.5, 0.15), Vec3::x(), Vec3::y(), half_length, 2.5, SemanticClass::Background, 0.35));
            // Facades face the road.
            let (u, v) = if s > 0.0 { (Vec3::x(), Vec3::z()) } else { (Vec3::z(), Vec3::x()) };
            let (hu, hv) = if s > 0.0 { (half_length, 5.0) } else { (5.0, half_length) };
            rects.push(Rect::new(Vec3::new(0.0, s * 12.0, 5.0), u, v, hu, hv, SemanticClass::Background, 0.6));
        }
        Self { rects }
    }

    pub fn add_box(&mut self, center: Vec3, yaw: f64, dims: [f64; 3], class: SemanticClass, reflectivity: f64, dynamic: bool) {
        self.rects.extend(box_rects(center, yaw, dims, class, reflectivity).into_iter().map(|mut r| {
            r.dynamic = dynamic;
            r
        }));
    }

    /// Parked cars and poles along both curbs.
    pub fn furnish_street(&mut self, half_length: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = -half_length + 4.0;
        while x < half_length - 4.0 {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let c = Vec3::new(x, side * 5.8, 0.2 + 0.5 * CAR_DIMS[2]);
            self.add_box(c, rng.random_range(-0.05..0.05), CAR_DIMS, SemanticClass::Vehicle, 0.5, false);
            x += rng.random_range(8.0..16.0);
        }
        let mut x = -half_length + 2.0;
        while x < half_length - 2.0 {
            for side in [1.0, -1.0] {
                self.add_box(Vec3::new(x, side * 7.6, 2.15), 0.0, [0.25, 0.25, 4.0], SemanticClass::Background, 0.8, false);
            }
            x += 15.0;
        }
    }

    /// Covers every rectangle with surfels on a square lattice of pitch `spacing`.
    pub fn surfels(&self, spacing: f64, viewpoint_height: f64) -> Vec<Surfel> {
        let mut out = Vec::new();
        for r in &self.rects {
            let nu = ((2.0 * r.half_u / spacing).ceil() as usize).max(1);
            let nv = ((2.0 * r.half_v / spacing).ceil() as usize).max(1);
            let (su, sv) = (2.0 * r.half_u / nu as f64, 2.0 * r.half_v / nv as f64);
            let radius = 0.75 * su.max(sv);
            for i in 0..nu {
                for j in 0..nv {
                    let a = -r.half_u + (i as f64 + 0.5) * su;
                    let b = -r.half_v + (j as f64 + 0.5) * sv;
                    let center = r.center + r.u * a + r.v * b;
                    let view = Vec3::new(center.x, 0.0, viewpoint_height);
                    let d = center - view;
                    let range = d.norm();
                    let incidence = incidence_angle(&(d / range), &r.normal);
                    out.push(Surfel {
                        center,
                        normal: r.normal,
                        radius,
                        orig_intensity: r.reflectivity * incidence.cos(),
                        orig_range: range,
                        orig_incidence: incidence,
                        semantic_class: r.class,
                    });
                }
            }
        }
        out
    }

    pub fn area(&self) -> f64 {
        self.rects.iter().map(Rect::area).sum()
    }
}

/// Scans `world` from a sensor following `traj`, returning capture-time
/// sensor-frame points. `range_sigma` adds Gaussian range noise.
pub fn scan(world: &World, intr: &SensorIntrinsics, traj: &Trajectory, sweep_start: f64, range_sigma: f64, seed: u64) -> SweepFile {
    let pose = traj.pose_at(sweep_start);
    let v0 = traj.velocity_at(sweep_start);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, range_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    for col in 0..intr.n_cols {
        let dt = intr.time_offset(col);
        let origin = pose.translation + v0 * dt;
        for (row, &theta) in intr.elevation_table.iter().enumerate() {
            let local = beam_direction(theta, intr.azimuth(col));
            let dir = pose.rotate(&local);
            if let Some((t, rect)) = world.cast(&origin, &dir, 0.5) {
                let inc = incidence_angle(&dir, &rect.normal);
                let r = t + if range_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                points.push(PointSample {
                    position: local * r,
                    intensity: (rect.reflectivity * inc.cos()).clamp(0.0, 1.0),
                    laser_id: row as u8,
                    timestamp: sweep_start + dt,
                    semantic_class: rect.class,
                    sensor_origin: Vec3::zeros(),
                    dynamic: rect.dynamic,
                });
            }
        }
    }
    SweepFile {
        pose,
        sweep_start,
        points,
    }
}

fn parked(pose: Pose) -> Trajectory {
    Trajectory::stationary(pose)
}

/// Ground plane with two walls, scanned from `n` stationary poses.
pub fn plane_sweeps(n: usize, seed: u64) -> Vec<SweepFile> {
    let world = World {
        rects: vec![
            Rect::new(Vec3::zeros(), Vec3::x(), Vec3::y(), 30.0, 30.0, SemanticClass::Road, 0.2),
            Rect::new(Vec3::new(0.0, 15.0, 3.0), Vec3::z(), Vec3::x(), 3.0, 30.0, SemanticClass::Background, 0.6),
            Rect::new(Vec3::new(20.0, 0.0, 3.0), Vec3::y(), Vec3::z(), 30.0, 3.0, SemanticClass::Background, 0.6),
        ],
    };
    let intr = SensorIntrinsics::default();
    (0..n)
        .map(|i| {
            let pose = Pose::from_yaw(0.3 * i as f64, Vec3::new(2.0 * i as f64, -(i as f64), SENSOR_HEIGHT));
            scan(&world, &intr, &parked(pose), i as f64, 0.003, seed.wrapping_add(i as u64))
        })
        .collect()
}

/// A car-sized box passing a parked sensor, one sweep per position, with labels.
pub fn box_object_sweeps(n: usize, seed: u64) -> (Vec<SweepFile>, Vec<BoxLabel>) {
    let intr = SensorIntrinsics::default();
    let sensor = parked(Pose::from_translation(Vec3::new(0.0, 0.0, SENSOR_HEIGHT)));
    let mut sweeps = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let center = Vec3::new(-12.0 + 24.0 * frac, 6.0, 0.2 + 0.5 * CAR_DIMS[2]);
        let heading = 0.05 * (i as f64 - 2.0);
        let mut world = World {
            rects: vec![Rect::new(Vec3::zeros(), Vec3::x(), Vec3::y(), 40.0, 40.0, SemanticClass::Road, 0.2)],
        };
        world.add_box(center, heading, CAR_DIMS, SemanticClass::Vehicle, 0.5, true);
        let t = i as f64;
        sweeps.push(scan(&world, &intr, &sensor, t, 0.003, seed.wrapping_add(i as u64)));
        labels.push(BoxLabel {
            center: center.into(),
            heading,
            dims: [CAR_DIMS[0] + 0.1, CAR_DIMS[1] + 0.1, CAR_DIMS[2] + 0.1],
            timestamp: t,
        });
    }
    (sweeps, labels)
}

/// Surfel box standing in for a reconstructed car, in its own frame.
pub fn car_asset(id: &str, spacing: f64) -> ObjectAsset {
    let world = World {
        rects: box_rects(Vec3::zeros(), 0.0, CAR_DIMS, SemanticClass::Vehicle, 0.5),
    };
    ObjectAsset {
        surfels: world.surfels(spacing, 0.0),
        dims: CAR_DIMS,
        source_id: id.into(),
        rel_orientation: 0.0,
    }
}

/// Furnished street with roughly `target` surfels.
pub fn street_map(target: usize, half_length: f64, seed: u64) -> SurfelMap {
    let mut world = World::street(half_length);
    world.furnish_street(half_length, seed);
    let spacing = (world.area() / target as f64).sqrt();
    SurfelMap::new(world.surfels(spacing, SENSOR_HEIGHT), spacing)
}

fn samples(points: &[(f64, Vec3, f64)]) -> Vec<TrajectorySample> {
    points
        .iter()
        .map(|&(t, xyz, yaw)| TrajectorySample {
            t,
            xyz: xyz.into(),
            rpy: [0.0, 0.0, yaw],
        })
        .collect()
}

/// Street scenario: the SDV drives east at 10 m/s, two cars pass it.
pub fn street_scenario(map: &str, sweep_start: f64, seed: u64) -> Scenario {
    let sdv = samples(&[
        (0.0, Vec3::new(-20.0, -2.0, SENSOR_HEIGHT), 0.0),
        (4.0, Vec3::new(20.0, -2.0, SENSOR_HEIGHT), 0.0),
    ]);
    let z = 0.2 + 0.5 * CAR_DIMS[2];
    let actors = vec![
        ActorSpec {
            asset: "car_0".into(),
            trajectory: samples(&[(0.0, Vec3::new(25.0, 2.5, z), PI), (4.0, Vec3::new(-25.0, 2.5, z), PI)]),
        },
        ActorSpec {
            asset: "car_0".into(),
            trajectory: samples(&[(0.0, Vec3::new(-12.0, -2.0, z), 0.0), (4.0, Vec3::new(36.0, -2.0, z), 0.0)]),
        },
    ];
    Scenario {
        map: map.into(),
        sweep_start,
        sweep_period: 0.1,
        seed,
        sdv: SdvSpec {
            trajectory: sdv,
            exclusion_box: DEFAULT_EXCLUSION_BOX,
        },
        actors,
    }
}

pub fn street_bank() -> ObjectBank {
    ObjectBank::new(vec![car_asset("car_0", 0.08)])
}

/// Ray-cast sweeps of `scene` paired with labels from the incidence rule:
/// a simulated return survives iff its incidence is at most 60°.
pub fn raydrop_rule_pairs(scene: &Scene, starts: &[f64]) -> Vec<(FeatureGrid, Mask)> {
    let intr = SensorIntrinsics::default();
    starts
        .iter()
        .map(|&t| {
            let grid = project(&cast_sweep(scene, &intr, t, &CastConfig::default()));
            let real = Mask::from_fn(grid.rows, grid.cols, |r, c| {
                grid.occupied(r, c) && grid.get(CH_INCIDENCE, r, c) <= RULE_INCIDENCE
            });
            (grid, real)
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_surfel(rng: &mut ChaCha8Rng, center: Vec3, radius: (f64, f64), class: SemanticClass) -> Surfel {
    Surfel {
        center,
        normal: random_unit(rng),
        radius: rng.random_range(radius.0..radius.1),
        orig_intensity: rng.random_range(0.0..1.0),
        orig_range: rng.random_range(1.0..60.0),
        orig_incidence: rng.random_range(0.0..PI / 2.0),
        semantic_class: class,
    }
}

/// Random surfel soup around a moving SDV with up to three moving actors.
/// Total surfel count stays within `max_surfels`.
pub fn random_scene(seed: u64, max_surfels: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.random_range(max_surfels / 10..=max_surfels);
    let n_actors = rng.random_range(0..=3usize);
    let per_actor = if n_actors > 0 { rng.random_range(20..=(total / 8).max(21)) } else { 0 };
    let n_static = total - n_actors * per_actor;
    let surfels: Vec<Surfel> = (0..n_static)
        .map(|_| {
            let r = rng.random_range(3.0..40.0);
            let a = rng.random_range(-PI..PI);
            let c = Vec3::new(r * a.cos(), r * a.sin(), rng.random_range(-3.0..4.0));
            random_surfel(&mut rng, c, (0.2, 2.0), SemanticClass::Background)
        })
        .collect();
    let mut actors = Vec::with_capacity(n_actors);
    for k in 0..n_actors {
        let asset = ObjectAsset {
            surfels: (0..per_actor)
                .map(|_| {
                    let c = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8));
                    random_surfel(&mut rng, c, (0.1, 0.6), SemanticClass::Vehicle)
                })
                .collect(),
            dims: CAR_DIMS,
            source_id: format!("actor_{k}"),
            rel_orientation: 0.0,
        };
        let r = rng.random_range(6.0..25.0);
        let a = rng.random_range(-PI..PI);
        let start = Vec3::new(r * a.cos(), r * a.sin(), 0.0);
        let vel = Vec3::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), 0.0);
        let yaw0 = rng.random_range(-PI..PI);
        let yaw_rate = rng.random_range(-2.0..2.0);
        let traj = Trajectory::new(vec![
            (0.0, Pose::from_yaw(yaw0, start)),
            (1.0, Pose::from_yaw(yaw0 + yaw_rate, start + vel)),
        ])
        .expect("increasing times");
        actors.push(SceneActor {
            asset: Arc::new(asset),
            trajectory: traj,
        });
    }
    let v = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0);
    let yaw = rng.random_range(-PI..PI);
    let sdv = Trajectory::new(vec![
        (0.0, Pose::from_yaw(yaw, Vec3::zeros())),
        (1.0, Pose::from_yaw(yaw + rng.random_range(-0.3..0.3), v)),
    ])
    .expect("increasing times");
    Scene {
        map: Arc::new(SurfelMap::new(surfels, 0.04)),
        actors,
        sdv,
        exclusion_box: [4.0, 2.0, 2.0],
        warnings: Vec::new(),
    }
}
