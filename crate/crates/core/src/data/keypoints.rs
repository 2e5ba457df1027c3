use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 18;

/// Joint order of the 18-point OpenPose (COCO) skeleton.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

/// Coordinates stored for joints that are not visible.
pub const INVISIBLE: [f64; 2] = [-1.0, -1.0];

/// One 18-joint skeleton in pixel coordinates (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoints18 {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Keypoints18 {
    pub fn new(points: [[f64; 2]; NUM_JOINTS], visible: [bool; NUM_JOINTS]) -> Self {
        let points = points
            .iter()
            .zip(&visible)
            .map(|(&p, &v)| if v { p } else { INVISIBLE })
            .collect();
        Self { points, visible: visible.to_vec() }
    }

    pub fn all_invisible() -> Self {
        Self { points: vec![INVISIBLE; NUM_JOINTS], visible: vec![false; NUM_JOINTS] }
    }

    /// Structural checks: 18 entries, sentinel coordinates for hidden joints.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_JOINTS || self.visible.len() != NUM_JOINTS {
            return Err(Error::Invalid(format!(
                "expected {NUM_JOINTS} keypoints, got {} points and {} visibility flags",
                self.points.len(),
                self.visible.len()
            )));
        }
        for (j, (p, &v)) in self.points.iter().zip(&self.visible).enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Invalid(format!("keypoint {j} has non-finite coordinates")));
            }
            if !v && *p != INVISIBLE {
                return Err(Error::Invalid(format!(
                    "invisible keypoint {j} must carry sentinel coordinates (-1, -1)"
                )));
            }
        }
        Ok(())
    }

    /// Checks that visible joints fall inside a `width x height` image.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (j, (p, &v)) in self.points.iter().zip(&self.visible).enumerate() {
            if v && !(p[0] >= 0.0 && p[0] < width as f64 && p[1] >= 0.0 && p[1] < height as f64) {
                return Err(Error::KeypointOutOfBounds { joint: j, x: p[0], y: p[1], width, height });
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str, path: &Path) -> Result<Self> {
        let kp: Self = serde_json::from_str(s).map_err(|e| Error::json(path, e))?;
        kp.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            msg: e.to_string(),
        })?;
        Ok(kp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("keypoints serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_joints_get_sentinel() {
        let mut pts = [[5.0, 6.0]; NUM_JOINTS];
        pts[3] = [9.0, 9.0];
        let mut vis = [true; NUM_JOINTS];
        vis[3] = false;
        let kp = Keypoints18::new(pts, vis);
        assert_eq!(kp.points[3], INVISIBLE);
        kp.validate().unwrap();
    }

    #[test]
    fn json_layout() {
        let kp = Keypoints18::all_invisible();
        let s = kp.to_json();
        assert!(s.starts_with("{\"points\":[[-1.0,-1.0]"));
        assert_eq!(Keypoints18::from_json_str(&s, Path::new("x.json")).unwrap(), kp);
    }

    #[test]
    fn malformed_reports_line() {
        let bad = "{\n\"points\": [[1,2]],\n\"visible\": [tru]\n}";
        match Keypoints18::from_json_str(bad, Path::new("k.json")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_count_rejected() {
        let s = r#"{"points": [[1,2]], "visible": [true]}"#;
        assert!(Keypoints18::from_json_str(s, Path::new("k.json")).is_err());
    }

    #[test]
    fn bounds() {
        let mut kp = Keypoints18::all_invisible();
        kp.points[0] = [64.0, 3.0];
        kp.visible[0] = true;
        assert!(matches!(kp.check_bounds(64, 64), Err(Error::KeypointOutOfBounds { joint: 0, .. })));
        kp.points[0] = [63.0, 3.0];
        kp.check_bounds(64, 64).unwrap();
    }
}
