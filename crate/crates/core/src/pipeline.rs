//! End-to-end steps shared by the command-line tool and the tests.

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose};
use crate::io::SweepFile;
use crate::map_builder::{aggregate_sweeps, build_surfels, BuildStats, MapConfig, PointSample, SurfelMap};
use crate::object_bank::{accumulate_object_per_sweep, icp_refine, meshify_object, mirror_symmetry, BoxLabel, IcpConfig, IcpResult, MeshConfig, ObjectAsset};
use crate::polar_grid::{bin_real_sweep, project, to_pointcloud, to_sensor_frame, FeatureGrid, Mask};
use crate::raycast::{cast_sweep, CastConfig, HitImage, SensorIntrinsics};
use crate::raydrop::{predict, sample_mask, ProbabilityGrid, RaydropModel};
use crate::scene::Scene;

/// Fewest points on either side for a sweep to be aligned by ICP.
pub const MIN_ICP_POINTS: usize = 10;

/// Builds a static surfel map from sweeps, leaving out points flagged dynamic.
pub fn build_map(sweeps: &[SweepFile], cfg: &MapConfig) -> Result<(SurfelMap, BuildStats)> {
    if sweeps.is_empty() {
        return Err(Error::input("no sweeps given"));
    }
    let masks: Vec<Vec<bool>> = sweeps.iter().map(|s| s.points.iter().map(|p| p.dynamic).collect()).collect();
    let pairs: Vec<(Vec<PointSample>, Pose)> = sweeps.iter().map(|s| (s.points.clone(), s.pose)).collect();
    let points = aggregate_sweeps(&pairs, &masks)?;
    Ok(build_surfels(&points, cfg))
}

#[derive(Clone, Debug)]
pub struct ObjectBuild {
    pub asset: ObjectAsset,
    /// Object-frame points after mirroring and alignment.
    pub points: usize,
    /// One entry per sweep after the first that had enough points to align.
    pub icp: Vec<(usize, IcpResult)>,
}

/// Reconstructs one object from labeled sweeps.
///
/// Each sweep's in-box points are mirrored across the object's length axis
/// and aligned by ICP to everything accumulated before it.
pub fn build_object(
    sweeps: &[(Vec<PointSample>, Pose)],
    labels: &[BoxLabel],
    source_id: &str,
    icp_cfg: &IcpConfig,
    mesh_cfg: &MeshConfig,
) -> Result<ObjectBuild> {
    let per_sweep = accumulate_object_per_sweep(sweeps, labels)?;
    let rel_orientation = wrap_angle(labels[0].heading - sweeps[0].1.yaw());
    let mut acc: Vec<PointSample> = Vec::new();
    let mut icp = Vec::new();
    for (k, points) in per_sweep.iter().enumerate() {
        let mut mirrored = mirror_symmetry(points);
        if !acc.is_empty() && acc.len() >= MIN_ICP_POINTS && mirrored.len() >= MIN_ICP_POINTS {
            let res = icp_refine(&mirrored, &acc, icp_cfg)?;
            for p in &mut mirrored {
                p.position = res.pose.transform_point(&p.position);
                p.sensor_origin = res.pose.transform_point(&p.sensor_origin);
            }
            icp.push((k, res));
        }
        acc.extend(mirrored);
    }
    let dims = labels[0].dims;
    let asset = meshify_object(&acc, dims, source_id, rel_orientation, mesh_cfg)?;
    Ok(ObjectBuild {
        asset,
        points: acc.len(),
        icp,
    })
}

/// Everything produced by simulating one sweep.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub hits: HitImage,
    pub grid: FeatureGrid,
    pub probabilities: Option<ProbabilityGrid>,
    /// Cells that produce a point.
    pub keep: Mask,
    /// Output points in the sensor frame at capture time.
    pub sweep: SweepFile,
}

/// Casts one sweep and applies the raydrop model if one is given.
pub fn simulate(
    scene: &Scene,
    intr: &SensorIntrinsics,
    sweep_start: f64,
    model: Option<&RaydropModel>,
    seed: u64,
    cfg: &CastConfig,
) -> Result<Simulation> {
    intr.validate()?;
    let hits = cast_sweep(scene, intr, sweep_start, cfg);
    let grid = project(&hits);
    let (probabilities, keep) = match model {
        Some(m) => {
            let p = predict(m, &grid, cfg.exec)?;
            let mask = sample_mask(&p, seed, cfg.exec);
            (Some(p), mask)
        }
        None => (None, grid.occupancy()),
    };
    let world = to_pointcloud(&grid, &keep, &hits.rays)?;
    let pose = scene.sdv.pose_at(sweep_start);
    let sweep = SweepFile {
        pose,
        sweep_start,
        points: to_sensor_frame(&world, &pose),
    };
    Ok(Simulation {
        hits,
        grid,
        probabilities,
        keep,
        sweep,
    })
}

/// Pairs simulated grids with binned real sweeps for raydrop training.
pub fn training_pairs(sims: Vec<FeatureGrid>, reals: &[SweepFile], intr: &SensorIntrinsics) -> Result<Vec<(FeatureGrid, Mask)>> {
    if sims.len() != reals.len() {
        return Err(Error::input(format!("{} simulated grids but {} real sweeps", sims.len(), reals.len())));
    }
    sims.into_iter()
        .zip(reals)
        .enumerate()
        .map(|(i, (grid, real))| {
            let binned = bin_real_sweep(&real.points, intr)?;
            if !binned.occupancy.same_shape(&grid.occupancy()) {
                return Err(Error::input(format!("pair {i}: real sweep binned to a different grid shape")));
            }
            Ok((grid, binned.occupancy))
        })
        .collect()
}
