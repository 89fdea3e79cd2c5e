//! Camera poses on a spherical cap around the robot base.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::RandomizeError;
use crate::pose::{Pose, Rotation, Vec3};

/// Golden-ratio conjugate, `(sqrt(5) - 1) / 2`.
const GOLDEN_CONJUGATE: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRigConfig {
    pub center: [f64; 3],
    pub radius: f64,
    /// Polar band measured from the vertical, radians.
    pub polar_range: [f64; 2],
    pub azimuth_range: [f64; 2],
    pub num_poses: usize,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.0],
            radius: 1.0,
            polar_range: [20f64.to_radians(), 70f64.to_radians()],
            azimuth_range: [(-120f64).to_radians(), 120f64.to_radians()],
            num_poses: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub config: CameraRigConfig,
    poses: Vec<Pose>,
}

impl CameraRig {
    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn num_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn pose(&self, index: usize) -> Option<&Pose> {
        self.poses.get(index)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.config.center)
    }
}

/// Camera orientation looking from `eye` at `target`: z forward, x right,
/// y down, with world z as the up reference.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Result<Pose, RandomizeError> {
    let forward = (target - eye).try_normalize(1e-12).ok_or(RandomizeError::DegenerateLookAt)?;
    let right = forward
        .cross(&Vec3::z())
        .try_normalize(1e-9)
        .unwrap_or_else(|| forward.cross(&Vec3::x()).normalize());
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    let rotation = Rotation::from_matrix(&m).map_err(|_| RandomizeError::DegenerateLookAt)?;
    Ok(Pose::new(rotation, *eye))
}

/// Spherical coordinates (polar from +z, azimuth from +x) of lattice point `k` of `n`.
pub fn lattice_angles(config: &CameraRigConfig, k: usize, n: usize) -> (f64, f64) {
    let [t0, t1] = config.polar_range;
    let [p0, p1] = config.azimuth_range;
    let frac = (k as f64 * GOLDEN_CONJUGATE).fract();
    let azimuth = p0 + frac * (p1 - p0);
    let u = (k as f64 + 0.5) / n as f64;
    let (c0, c1) = (t0.cos(), t1.cos());
    let polar = (c0 + (c1 - c0) * u).clamp(-1.0, 1.0).acos();
    (polar, azimuth)
}

/// Fibonacci lattice mapped onto the cap: golden-ratio azimuth increments and
/// area-uniform polar spacing.
pub fn fibonacci_cap(config: &CameraRigConfig) -> Result<CameraRig, RandomizeError> {
    let [t0, t1] = config.polar_range;
    let [p0, p1] = config.azimuth_range;
    let valid = 0.0 <= t0
        && t0 < t1
        && t1 <= std::f64::consts::FRAC_PI_2
        && p0 < p1
        && config.radius > 0.0
        && config.radius.is_finite()
        && config.num_poses >= 1;
    if !valid {
        return Err(RandomizeError::InvalidCap(format!("{config:?}")));
    }
    let center = Vec3::from(config.center);
    let n = config.num_poses;
    let poses = (0..n)
        .map(|k| {
            let (polar, azimuth) = lattice_angles(config, k, n);
            let dir = Vec3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
            look_at(&(center + dir * config.radius), &center)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraRig { config: config.clone(), poses })
}

/// Round-robin camera assignment that only advances after a successful episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraScheduler {
    num_poses: usize,
    cursor: usize,
}

impl CameraScheduler {
    pub fn new(num_poses: usize) -> Self {
        assert!(num_poses > 0, "scheduler needs at least one camera");
        Self { num_poses, cursor: 0 }
    }

    pub fn current(&self) -> usize {
        self.cursor
    }

    /// Returns the index used for the episode just finished; advances iff it succeeded.
    pub fn next_camera(&mut self, episode_success: bool) -> usize {
        let used = self.cursor;
        if episode_success {
            self.cursor = (self.cursor + 1) % self.num_poses;
        }
        used
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_sits_at_area_midpoint() {
        let cfg = CameraRigConfig { num_poses: 1, ..Default::default() };
        let rig = fibonacci_cap(&cfg).unwrap();
        assert_eq!(rig.num_poses(), 1);
        let p = rig.poses()[0].translation;
        let polar = (p.z / p.norm()).acos();
        let expected = ((cfg.polar_range[0].cos() + cfg.polar_range[1].cos()) / 2.0).acos();
        assert!((polar - expected).abs() < 1e-12);
    }

    #[test]
    fn cameras_look_at_center() {
        let cfg = CameraRigConfig { center: [0.1, -0.2, 0.05], ..Default::default() };
        let rig = fibonacci_cap(&cfg).unwrap();
        let c = rig.center();
        for pose in rig.poses() {
            assert!(((pose.translation - c).norm() - cfg.radius).abs() < 1e-9);
            // camera-frame coordinates of the center lie on the +z axis
            let local = pose.inverse().transform_point(&c);
            assert!(local.x.abs() < 1e-9 && local.y.abs() < 1e-9 && local.z > 0.0);
        }
    }

    #[test]
    fn image_down_axis_points_away_from_world_up() {
        let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
        for pose in rig.poses() {
            let down = pose.rotation.rotate(&Vec3::y());
            assert!(down.z < 0.0);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = [
            CameraRigConfig { polar_range: [0.5, 0.4], ..Default::default() },
            CameraRigConfig { polar_range: [0.1, 2.0], ..Default::default() },
            CameraRigConfig { radius: 0.0, ..Default::default() },
            CameraRigConfig { num_poses: 0, ..Default::default() },
            CameraRigConfig { azimuth_range: [1.0, 1.0], ..Default::default() },
        ];
        for cfg in bad {
            assert!(fibonacci_cap(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn scheduler_gating() {
        let mut s = CameraScheduler::new(100);
        assert_eq!([true, true, true].map(|ok| s.next_camera(ok)), [0, 1, 2]);

        let mut s = CameraScheduler::new(100);
        assert_eq!([true, false, false, true].map(|ok| s.next_camera(ok)), [0, 1, 1, 1]);
        assert_eq!(s.current(), 2);
    }

    #[test]
    fn scheduler_wraps() {
        let mut s = CameraScheduler::new(3);
        let used: Vec<_> = (0..7).map(|_| s.next_camera(true)).collect();
        assert_eq!(used, vec![0, 1, 2, 0, 1, 2, 0]);
    }
}
