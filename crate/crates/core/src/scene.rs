//! Scenario description and scene composition.

use std::sync::Arc;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Surfel, Vec3};
use crate::map_builder::SurfelMap;
use crate::object_bank::{ObjectAsset, ObjectBank};

pub const DEFAULT_SWEEP_PERIOD: f64 = 0.1;
pub const DEFAULT_EXCLUSION_BOX: [f64; 3] = [5.0, 2.5, 2.2];
/// Actors further than this outside the map bounds trigger a layout warning.
const OUT_OF_BOUNDS_MARGIN: f64 = 50.0;

/// Time-stamped poses with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("trajectory has no samples"));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::input("trajectory timestamps must be strictly increasing"));
        }
        for (_, pose) in &samples {
            pose.validate()?;
        }
        Ok(Self { samples })
    }

    pub fn stationary(pose: Pose) -> Self {
        Self {
            samples: vec![(0.0, pose)],
        }
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    /// Index `k` of the segment `[t_k, t_{k+1}]` containing `t`, for `t` inside the span.
    fn segment(&self, t: f64) -> usize {
        let k = self.samples.partition_point(|(ts, _)| *ts <= t);
        k.saturating_sub(1).min(self.samples.len() - 2)
    }

    /// Pose at `t`, clamped to the trajectory's time span.
    pub fn pose_at(&self, t: f64) -> Pose {
        self.pose_at_checked(t).0
    }

    /// Pose at `t` and whether `t` had to be clamped into the trajectory span.
    ///
    /// Translation is interpolated linearly and rotation along the shortest
    /// arc between the bracketing samples. Sample timestamps return the sample
    /// pose exactly.
    pub fn pose_at_checked(&self, t: f64) -> (Pose, bool) {
        let n = self.samples.len();
        if t <= self.samples[0].0 || n == 1 {
            return (self.samples[0].1, t != self.samples[0].0);
        }
        if t >= self.samples[n - 1].0 {
            return (self.samples[n - 1].1, t > self.samples[n - 1].0);
        }
        let k = self.segment(t);
        let (t0, p0) = &self.samples[k];
        let (t1, p1) = &self.samples[k + 1];
        if t == *t0 {
            return (*p0, false);
        }
        let s = (t - t0) / (t1 - t0);
        let translation = p0.translation + (p1.translation - p0.translation) * s;
        let rel = Rotation3::from_matrix_unchecked(p0.rotation.transpose() * p1.rotation);
        let step = Rotation3::new(rel.scaled_axis() * s);
        (Pose::new(p0.rotation * step.matrix(), translation), false)
    }

    /// Finite-difference velocity over the segment containing `t`.
    pub fn velocity_at(&self, t: f64) -> Vec3 {
        if self.samples.len() == 1 {
            return Vec3::zeros();
        }
        let t = t.clamp(self.start_time(), self.end_time());
        let k = self.segment(t);
        let (t0, p0) = &self.samples[k];
        let (t1, p1) = &self.samples[k + 1];
        (p1.translation - p0.translation) / (t1 - t0)
    }
}

/// One trajectory sample as written in scenario files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub xyz: [f64; 3],
    /// Roll, pitch, yaw in radians.
    pub rpy: [f64; 3],
}

impl TrajectorySample {
    pub fn from_pose(t: f64, pose: &Pose) -> Self {
        let (r, p, y) = pose.rpy();
        Self {
            t,
            xyz: pose.translation.into(),
            rpy: [r, p, y],
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_rpy(self.rpy[0], self.rpy[1], self.rpy[2], Vec3::from(self.xyz))
    }
}

pub fn trajectory_from_samples(samples: &[TrajectorySample]) -> Result<Trajectory> {
    Trajectory::new(samples.iter().map(|s| (s.t, s.pose())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdvSpec {
    pub trajectory: Vec<TrajectorySample>,
    #[serde(default = "default_exclusion_box")]
    pub exclusion_box: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub asset: String,
    pub trajectory: Vec<TrajectorySample>,
}

/// Scenario file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Path of the surfel map, relative to the scenario file.
    pub map: String,
    pub sweep_start: f64,
    #[serde(default = "default_sweep_period")]
    pub sweep_period: f64,
    #[serde(default)]
    pub seed: u64,
    pub sdv: SdvSpec,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
}

fn default_sweep_period() -> f64 {
    DEFAULT_SWEEP_PERIOD
}

fn default_exclusion_box() -> [f64; 3] {
    DEFAULT_EXCLUSION_BOX
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sweep_period > 0.0) {
            return Err(Error::input("sweep_period must be positive"));
        }
        if !self.sdv.exclusion_box.iter().all(|&d| d >= 0.0) {
            return Err(Error::input("exclusion box dims must be non-negative"));
        }
        Ok(())
    }
}

/// An object asset following a trajectory.
#[derive(Clone, Debug)]
pub struct SceneActor {
    pub asset: Arc<ObjectAsset>,
    pub trajectory: Trajectory,
}

impl SceneActor {
    /// The actor's surfels placed at its pose at time `t`.
    pub fn surfels_at(&self, t: f64) -> Vec<Surfel> {
        let pose = self.trajectory.pose_at(t);
        self.asset.surfels.iter().map(|s| s.transformed(&pose)).collect()
    }
}

/// Everything a sweep is cast against.
#[derive(Clone, Debug)]
pub struct Scene {
    pub map: Arc<SurfelMap>,
    pub actors: Vec<SceneActor>,
    pub sdv: Trajectory,
    /// Length, width, height of the box around the SDV pose whose hits are masked.
    pub exclusion_box: [f64; 3],
    pub warnings: Vec<String>,
}

impl Scene {
    pub fn static_surfel_count(&self) -> usize {
        self.map.len()
    }

    pub fn actor_surfel_count(&self) -> usize {
        self.actors.iter().map(|a| a.asset.surfels.len()).sum()
    }
}

/// Resolves a scenario against a loaded map and object bank.
pub fn compose(scenario: &Scenario, map: Arc<SurfelMap>, bank: &ObjectBank) -> Result<Scene> {
    scenario.validate()?;
    let sdv = trajectory_from_samples(&scenario.sdv.trajectory)?;
    let bounds = map.bounds();
    let mut warnings = Vec::new();
    let mut actors = Vec::with_capacity(scenario.actors.len());
    for (i, spec) in scenario.actors.iter().enumerate() {
        let asset = bank
            .get(&spec.asset)
            .ok_or_else(|| Error::Resolution(format!("actor {i}: unknown asset {:?}", spec.asset)))?;
        let trajectory = trajectory_from_samples(&spec.trajectory)?;
        if !bounds.is_empty() {
            let outside = trajectory.samples().iter().any(|(_, p)| {
                (0..3).any(|a| {
                    p.translation[a] < bounds.min[a] - OUT_OF_BOUNDS_MARGIN
                        || p.translation[a] > bounds.max[a] + OUT_OF_BOUNDS_MARGIN
                })
            });
            if outside {
                warnings.push(format!("actor {i} ({}) is placed outside the map bounds", spec.asset));
            }
        }
        actors.push(SceneActor {
            asset: Arc::new(asset.clone()),
            trajectory,
        });
    }
    Ok(Scene {
        map,
        actors,
        sdv,
        exclusion_box: scenario.sdv.exclusion_box,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SemanticClass;
    use nalgebra::{Quaternion, UnitQuaternion};
    use std::f64::consts::FRAC_PI_2;

    fn yaw_pose(yaw: f64, x: f64) -> Pose {
        Pose::from_yaw(yaw, Vec3::new(x, 0.0, 0.0))
    }

    /// Quaternion slerp written out from its closed form.
    fn slerp_oracle(a: &Pose, b: &Pose, s: f64) -> Pose {
        let qa = UnitQuaternion::from_matrix(&a.rotation).into_inner();
        let mut qb = UnitQuaternion::from_matrix(&b.rotation).into_inner();
        let mut dot = qa.coords.dot(&qb.coords);
        if dot < 0.0 {
            qb = -qb;
            dot = -dot;
        }
        let omega = dot.min(1.0).acos();
        let q: Quaternion<f64> = if omega < 1e-12 {
            qa
        } else {
            qa * ((1.0 - s) * omega).sin() / omega.sin() + qb * (s * omega).sin() / omega.sin()
        };
        Pose::new(
            *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix(),
            a.translation + (b.translation - a.translation) * s,
        )
    }

    #[test]
    fn pose_at_examples() {
        let single = Trajectory::new(vec![(1.0, yaw_pose(0.3, 2.0))]).unwrap();
        assert_eq!(single.pose_at(-5.0), yaw_pose(0.3, 2.0));
        assert_eq!(single.pose_at(7.0), yaw_pose(0.3, 2.0));

        let line = Trajectory::new(vec![(0.0, yaw_pose(0.0, 0.0)), (1.0, yaw_pose(0.0, 10.0))]).unwrap();
        assert_eq!(line.pose_at(0.5).translation, Vec3::new(5.0, 0.0, 0.0));

        let turn = Trajectory::new(vec![(0.0, yaw_pose(0.0, 0.0)), (1.0, yaw_pose(FRAC_PI_2, 0.0))]).unwrap();
        assert!((turn.pose_at(0.5).yaw() - FRAC_PI_2 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn pose_at_matches_quaternion_slerp() {
        let a = Pose::from_rpy(0.2, -0.1, 2.9, Vec3::new(1.0, 2.0, 3.0));
        let b = Pose::from_rpy(-0.3, 0.25, -2.8, Vec3::new(4.0, -1.0, 0.0));
        let traj = Trajectory::new(vec![(10.0, a), (12.0, b)]).unwrap();
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            let got = traj.pose_at(10.0 + 2.0 * s);
            let want = slerp_oracle(&a, &b, s);
            assert!((got.rotation - want.rotation).amax() < 1e-9, "s = {s}");
            assert!((got.translation - want.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn pose_at_exact_samples_and_clamping() {
        let poses = [yaw_pose(0.1, 0.0), yaw_pose(0.7, 1.0), yaw_pose(-0.4, 3.0)];
        let traj = Trajectory::new(vec![(0.0, poses[0]), (0.5, poses[1]), (1.0, poses[2])]).unwrap();
        assert_eq!(traj.pose_at_checked(0.5), (poses[1], false));
        assert_eq!(traj.pose_at_checked(1.0), (poses[2], false));
        assert_eq!(traj.pose_at_checked(2.0), (poses[2], true));
        assert_eq!(traj.pose_at_checked(-1.0), (poses[0], true));
    }

    #[test]
    fn pose_at_is_continuous() {
        let traj = Trajectory::new(vec![
            (0.0, yaw_pose(0.1, 0.0)),
            (0.5, yaw_pose(0.7, 1.0)),
            (1.0, yaw_pose(-0.4, 3.0)),
        ])
        .unwrap();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let a = traj.pose_at(t);
            let b = traj.pose_at(t + 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-7);
            assert!((a.rotation - b.rotation).amax() < 1e-7);
        }
    }

    #[test]
    fn velocity_examples() {
        let still = Trajectory::new(vec![(0.0, yaw_pose(0.0, 1.0)), (1.0, yaw_pose(0.0, 1.0))]).unwrap();
        assert_eq!(still.velocity_at(0.3), Vec3::zeros());
        let moving = Trajectory::new(vec![(0.0, yaw_pose(0.0, 0.0)), (0.1, yaw_pose(0.0, 1.0))]).unwrap();
        assert!((moving.velocity_at(0.05) - Vec3::new(10.0, 0.0, 0.0)).norm() < 1e-9);
        let piecewise = Trajectory::new(vec![
            (0.0, yaw_pose(0.0, 0.0)),
            (1.0, yaw_pose(0.0, 2.0)),
            (2.0, yaw_pose(0.0, 3.0)),
        ])
        .unwrap();
        assert_eq!(piecewise.velocity_at(0.2), piecewise.velocity_at(0.9));
        assert_eq!(piecewise.velocity_at(1.2), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(Trajectory::stationary(Pose::identity()).velocity_at(3.0), Vec3::zeros());
    }

    #[test]
    fn invalid_trajectories() {
        assert!(Trajectory::new(vec![]).is_err());
        assert!(Trajectory::new(vec![(0.0, Pose::identity()), (0.0, Pose::identity())]).is_err());
    }

    fn disk(x: f64) -> Surfel {
        Surfel {
            center: Vec3::new(x, 0.0, 0.0),
            normal: Vec3::x(),
            radius: 0.1,
            orig_intensity: 0.5,
            orig_range: 1.0,
            orig_incidence: 0.0,
            semantic_class: SemanticClass::Vehicle,
        }
    }

    fn scenario(actors: Vec<ActorSpec>) -> Scenario {
        Scenario {
            map: "map.lsrf".into(),
            sweep_start: 0.0,
            sweep_period: 0.1,
            seed: 1,
            sdv: SdvSpec {
                trajectory: vec![TrajectorySample { t: 0.0, xyz: [0.0; 3], rpy: [0.0; 3] }],
                exclusion_box: DEFAULT_EXCLUSION_BOX,
            },
            actors,
        }
    }

    #[test]
    fn compose_examples() {
        let map = Arc::new(SurfelMap::new((0..10).map(|i| disk(i as f64)).collect(), 0.04));
        let bank = ObjectBank::new(vec![ObjectAsset {
            surfels: (0..1000).map(|i| disk(i as f64 * 0.001)).collect(),
            dims: [4.0, 2.0, 1.5],
            source_id: "car".into(),
            rel_orientation: 0.0,
        }]);
        let empty = compose(&scenario(vec![]), map.clone(), &bank).unwrap();
        assert_eq!(empty.static_surfel_count(), 10);
        assert_eq!(empty.actor_surfel_count(), 0);

        let near = ActorSpec {
            asset: "car".into(),
            trajectory: vec![TrajectorySample { t: 0.0, xyz: [5.0, 3.0, 0.0], rpy: [0.0; 3] }],
        };
        let scene = compose(&scenario(vec![near.clone()]), map.clone(), &bank).unwrap();
        assert_eq!(scene.actors[0].surfels_at(0.0).len(), 1000);
        assert_eq!(scene.actors[0].surfels_at(0.0)[0].center, Vec3::new(5.0, 3.0, 0.0));
        assert!(scene.warnings.is_empty());

        let far = ActorSpec {
            trajectory: vec![TrajectorySample { t: 0.0, xyz: [1000.0, 0.0, 0.0], rpy: [0.0; 3] }],
            ..near
        };
        let scene = compose(&scenario(vec![far]), map.clone(), &bank).unwrap();
        assert_eq!(scene.warnings.len(), 1);

        let missing = ActorSpec { asset: "truck".into(), trajectory: vec![] };
        assert!(matches!(compose(&scenario(vec![missing]), map, &bank), Err(Error::Resolution(_))));
    }

    #[test]
    fn scenario_json_keys() {
        let text = r#"{
            "map": "m.lsrf", "sweep_start": 1.5, "sweep_period": 0.1, "seed": 9,
            "sdv": {"trajectory": [{"t": 1.5, "xyz": [0, 0, 1.8], "rpy": [0, 0, 0.3]}], "exclusion_box": [5, 2.5, 2.2]},
            "actors": [{"asset": "car", "trajectory": [{"t": 1.5, "xyz": [10, 0, 0], "rpy": [0, 0, 0]}]}]
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.actors[0].asset, "car");
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let minimal = r#"{"map": "m", "sweep_start": 0, "sdv": {"trajectory": [{"t": 0, "xyz": [0,0,0], "rpy": [0,0,0]}]}}"#;
        let s = Scenario::from_json(minimal).unwrap();
        assert_eq!(s.sweep_period, 0.1);
        assert_eq!(s.sdv.exclusion_box, DEFAULT_EXCLUSION_BOX);
    }
}
