use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::MIN_DEPTH;
use crate::numerics::Pinhole;
use crate::trajectory::Point2;

/// Pinhole camera rigidly mounted on the ego vehicle.
///
/// Ego frame: x forward, y left, z up. Camera frame: x right, y down,
/// z forward. `rotation * p_ego + translation = p_cam`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    /// Camera at `position` (ego frame) looking along `yaw` (left positive)
    /// tilted down by `pitch`.
    #[allow(clippy::too_many_arguments)]
    pub fn mounted(
        name: &str,
        position: [f64; 3],
        yaw: f64,
        pitch: f64,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cp * cy, cp * sy, -sp];
        let right = [sy, -cy, 0.0];
        let down = [-sp * cy, -sp * sy, -cp];
        let rotation = [right, down, forward];
        let mut translation = [0.0; 3];
        for (i, row) in rotation.iter().enumerate() {
            translation[i] = -(row[0] * position[0] + row[1] * position[1] + row[2] * position[2]);
        }
        Self {
            name: name.to_string(),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "camera {}: focal lengths and image size must be positive",
                self.name
            )));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "camera {}: rotation is not orthonormal",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn pinhole(&self) -> Pinhole {
        Pinhole {
            rot: self.rotation,
            trans: self.translation,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Ego-frame direction of the ray through pixel `(u, v)`, scaled so that
    /// its camera-frame depth component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        [
            r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
            r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
            r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
        ]
    }
}

/// Pixel of an ego-frame point; `None` at or behind the camera plane or
/// outside the image.
pub fn project(point: [f64; 3], cam: &CameraModel) -> Option<[f64; 2]> {
    let ph = cam.pinhole();
    let pc = ph.to_camera(point);
    if pc[2] <= MIN_DEPTH {
        return None;
    }
    let px = ph.pixel_of_camera_point(pc)?;
    let inside = px[0] >= 0.0
        && px[1] >= 0.0
        && px[0] < cam.width as f64
        && px[1] < cam.height as f64;
    inside.then_some(px)
}

/// Every waypoint at every height, waypoint-major.
pub fn lift_waypoints(waypoints: &[Point2], heights: &[f64]) -> Vec<[f64; 3]> {
    waypoints
        .iter()
        .flat_map(|w| heights.iter().map(move |&h| [w[0], w[1], h]))
        .collect()
}

/// Front, front-left and front-right cameras.
pub fn default_rig(width: usize, height: usize) -> Vec<CameraModel> {
    let focal = width as f64 / 2.0;
    let mount = [1.5, 0.0, 1.6];
    let side = 60f64.to_radians();
    vec![
        CameraModel::mounted("front", mount, 0.0, 0.0, focal, width, height),
        CameraModel::mounted("front_left", mount, side, 0.0, focal, width, height),
        CameraModel::mounted("front_right", mount, -side, 0.0, focal, width, height),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(f: f64, c: f64, size: usize) -> CameraModel {
        CameraModel {
            name: "id".into(),
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: size,
            height: size,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = CameraModel::mounted("f", [1.0, 0.0, 1.5], 0.0, 0.0, 20.0, 40, 20);
        let px = project([11.0, 0.0, 1.5], &cam).unwrap();
        assert!((px[0] - 20.0).abs() < 1e-12 && (px[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_absent() {
        let cam = CameraModel::mounted("f", [1.0, 0.0, 1.5], 0.0, 0.0, 20.0, 40, 20);
        assert!(project([-5.0, 0.0, 1.5], &cam).is_none());
        assert!(project([1.0, 0.0, 1.5], &cam).is_none());
    }

    #[test]
    fn hand_evaluated_pinhole() {
        // u = 100 * 1/10 + 50 = 60, v = 100 * 0/10 + 50 = 50
        let cam = identity_cam(100.0, 50.0, 200);
        assert_eq!(project([1.0, 0.0, 10.0], &cam), Some([60.0, 50.0]));
    }

    #[test]
    fn mounted_rotation_is_orthonormal() {
        for cam in default_rig(48, 24) {
            cam.validate().unwrap();
            let c = cam.center();
            assert!((c[0] - 1.5).abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 1.6).abs() < 1e-12);
        }
        let tilted = CameraModel::mounted("t", [0.0; 3], 0.3, 0.2, 10.0, 8, 8);
        tilted.validate().unwrap();
    }

    #[test]
    fn lift_counts_and_coordinates() {
        let w = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let pts = lift_waypoints(&w, &[0.0, 0.5, 1.0]);
        assert_eq!(pts.len(), 9);
        for (k, p) in pts.iter().enumerate() {
            assert_eq!([p[0], p[1]], w[k / 3]);
        }
        assert!(pts.iter().step_by(3).all(|p| p[2] == 0.0));
    }

    #[test]
    fn small_perturbation_moves_projection_a_little() {
        let cam = &default_rig(48, 24)[0];
        let base = project([12.0, 0.5, 0.0], cam).unwrap();
        let eps = 1e-4;
        let moved = project([12.0 + eps, 0.5 + eps, 0.0], cam).unwrap();
        let d = ((base[0] - moved[0]).powi(2) + (base[1] - moved[1]).powi(2)).sqrt();
        assert!(d < 100.0 * eps, "moved {d} px");
    }
}
