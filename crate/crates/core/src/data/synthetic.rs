//! Procedural articulated depth hands.
//!
//! A hand is a kinematic tree of joints. Each non-root joint hangs off a pivot
//! in its parent's frame and swings about a flexion axis and the palm normal.
//! The surface is a union of spheres at the joints and sphere-swept bones,
//! ray-cast into a z-buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Record};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, JointFrame, JointSet, RawDepth};

pub type Mat3 = [[f64; 3]; 3];

/// One joint of the hand skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    /// Parent index; `None` only for the root (palm).
    pub parent: Option<usize>,
    /// Bone origin in the parent's frame, relative to the parent joint.
    pub pivot: [f64; 3],
    /// Vector from the pivot to this joint at zero articulation.
    pub bone: [f64; 3],
    pub flex_axis: [f64; 3],
    pub flex_deg: [f64; 2],
    /// Abduction range about the palm normal.
    pub spread_deg: [f64; 2],
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticHandConfig {
    pub joints: Vec<JointSpec>,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub cube_mm: f64,
    pub noise_std_mm: f64,
    /// Global in-plane roll range.
    pub roll_deg: [f64; 2],
    /// Out-of-plane tilt range applied about both image axes.
    pub tilt_deg: [f64; 2],
    pub center_x_mm: [f64; 2],
    pub center_y_mm: [f64; 2],
    pub center_z_mm: [f64; 2],
    /// Joints must project inside this fraction of the half crop.
    pub crop_margin: f64,
}

fn joint(
    name: &str,
    parent: Option<usize>,
    pivot: [f64; 3],
    bone: [f64; 3],
    flex_axis: [f64; 3],
    flex_deg: [f64; 2],
    spread_deg: [f64; 2],
    radius_mm: f64,
) -> JointSpec {
    JointSpec { name: name.into(), parent, pivot, bone, flex_axis, flex_deg, spread_deg, radius_mm }
}

impl Default for SyntheticHandConfig {
    /// 14 joints: palm, two wrist points, three thumb joints and a
    /// middle/tip pair for each remaining finger.
    fn default() -> Self {
        const FLEX: [f64; 3] = [-1.0, 0.0, 0.0];
        const THUMB: [f64; 3] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0];
        const NONE: [f64; 2] = [0.0, 0.0];
        let p = Some(0);
        let joints = vec![
            joint("palm", None, [0.0; 3], [0.0; 3], FLEX, NONE, NONE, 24.0),
            joint("wrist_radial", p, [0.0; 3], [-20.0, -42.0, 4.0], FLEX, NONE, NONE, 12.0),
            joint("wrist_ulnar", p, [0.0; 3], [20.0, -42.0, 4.0], FLEX, NONE, NONE, 12.0),
            joint("thumb_base", p, [-20.0, -16.0, 0.0], [-14.0, 10.0, -6.0], THUMB, [-10.0, 25.0], [-10.0, 15.0], 10.0),
            joint("thumb_mid", Some(3), [0.0; 3], [-18.0, 18.0, -4.0], THUMB, [0.0, 40.0], NONE, 9.0),
            joint("thumb_tip", Some(4), [0.0; 3], [-15.0, 15.0, -3.0], THUMB, [0.0, 50.0], NONE, 8.0),
            joint("index_mid", p, [-22.0, 30.0, 0.0], [0.0, 32.0, 0.0], FLEX, [0.0, 80.0], [-14.0, 6.0], 8.0),
            joint("index_tip", Some(6), [0.0; 3], [0.0, 30.0, 0.0], FLEX, [0.0, 90.0], NONE, 7.0),
            joint("middle_mid", p, [-7.0, 34.0, 0.0], [0.0, 35.0, 0.0], FLEX, [0.0, 80.0], [-6.0, 6.0], 8.0),
            joint("middle_tip", Some(8), [0.0; 3], [0.0, 32.0, 0.0], FLEX, [0.0, 90.0], NONE, 7.0),
            joint("ring_mid", p, [8.0, 32.0, 0.0], [0.0, 33.0, 0.0], FLEX, [0.0, 80.0], [-6.0, 8.0], 7.5),
            joint("ring_tip", Some(10), [0.0; 3], [0.0, 30.0, 0.0], FLEX, [0.0, 90.0], NONE, 6.5),
            joint("pinky_mid", p, [22.0, 26.0, 0.0], [0.0, 26.0, 0.0], FLEX, [0.0, 80.0], [-6.0, 14.0], 6.5),
            joint("pinky_tip", Some(12), [0.0; 3], [0.0, 24.0, 0.0], FLEX, [0.0, 90.0], NONE, 6.0),
        ];
        Self {
            joints,
            intrinsics: CameraIntrinsics { fx: 140.0, fy: 140.0, cx: 79.5, cy: 59.5 },
            width: 160,
            height: 120,
            cube_mm: crate::geometry::DEFAULT_CUBE_MM,
            noise_std_mm: 1.0,
            roll_deg: [-180.0, 180.0],
            tilt_deg: [-30.0, 30.0],
            center_x_mm: [-50.0, 50.0],
            center_y_mm: [-35.0, 35.0],
            center_z_mm: [380.0, 520.0],
            crop_margin: 0.9,
        }
    }
}

/// Articulation and placement of one hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub flex_deg: Vec<f64>,
    pub spread_deg: Vec<f64>,
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub position_mm: [f64; 3],
}

impl SyntheticHandConfig {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            intrinsics: self.intrinsics,
            n_joints: self.n_joints(),
            cube_mm: self.cube_mm,
            joint_names: self.joint_names(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Config("hand skeleton has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::Config("joint 0 must be the root".into())),
                (_, None) => return Err(Error::Config(format!("joint {i} ({}) has no parent", j.name))),
                (_, Some(p)) if p >= i => {
                    return Err(Error::Config(format!(
                        "joint {i} ({}) has parent {p}; parents must precede children",
                        j.name
                    )))
                }
                _ => {}
            }
            let axis_len = norm(j.flex_axis);
            if !(j.radius_mm > 0.0) || !(axis_len > 0.0) {
                return Err(Error::Config(format!("joint {i} ({}) needs a positive radius and axis", j.name)));
            }
            if j.flex_deg[0] > j.flex_deg[1] || j.spread_deg[0] > j.spread_deg[1] {
                return Err(Error::Config(format!("joint {i} ({}) has an inverted angle range", j.name)));
            }
        }
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 || !(self.cube_mm > 0.0) || !(self.noise_std_mm >= 0.0) {
            return Err(Error::Config("image size, cube and noise must be positive".into()));
        }
        if !(self.center_z_mm[0] > self.cube_mm / 2.0) {
            return Err(Error::Config("hand depth range must clear the crop cube".into()));
        }
        if !(self.crop_margin > 0.0 && self.crop_margin <= 1.0) {
            return Err(Error::Config("crop_margin must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> HandPose {
        let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        let flex_deg = self.joints.iter().map(|j| draw(j.flex_deg)).collect();
        let spread_deg = self.joints.iter().map(|j| draw(j.spread_deg)).collect();
        HandPose {
            flex_deg,
            spread_deg,
            roll_deg: draw(self.roll_deg),
            pitch_deg: draw(self.tilt_deg),
            yaw_deg: draw(self.tilt_deg),
            position_mm: [draw(self.center_x_mm), draw(self.center_y_mm), draw(self.center_z_mm)],
        }
    }

    /// Forward kinematics: joint positions and bone segments in camera mm.
    pub fn pose_geometry(&self, pose: &HandPose) -> (Vec<[f64; 3]>, Vec<([f64; 3], [f64; 3], f64)>) {
        let global = mat_mul(
            &rot_axis([0.0, 0.0, 1.0], pose.roll_deg),
            &mat_mul(&rot_axis([1.0, 0.0, 0.0], pose.pitch_deg), &rot_axis([0.0, 1.0, 0.0], pose.yaw_deg)),
        );
        let n = self.joints.len();
        let mut rot = vec![global; n];
        let mut pos = vec![pose.position_mm; n];
        let mut bones = Vec::new();
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            let p = j.parent.expect("validated topology");
            let local = mat_mul(&rot_axis([0.0, 0.0, 1.0], pose.spread_deg[i]), &rot_axis(j.flex_axis, pose.flex_deg[i]));
            rot[i] = mat_mul(&rot[p], &local);
            let pivot = add(pos[p], mat_vec(&rot[p], j.pivot));
            pos[i] = add(pivot, mat_vec(&rot[i], j.bone));
            if norm(j.pivot) > 0.0 {
                bones.push((pos[p], pivot, j.radius_mm + 3.0));
            }
            bones.push((pivot, pos[i], j.radius_mm));
        }
        (pos, bones)
    }

    fn fits_crop(&self, joints: &[[f64; 3]]) -> bool {
        let c = joints[0];
        let half = self.cube_mm / 2.0;
        let limit = self.crop_margin * half;
        joints.iter().all(|p| {
            p[2] > 0.0
                && ((p[0] / p[2] - c[0] / c[2]) * c[2]).abs() < limit
                && ((p[1] / p[2] - c[1] / c[2]) * c[2]).abs() < limit
                && (p[2] - c[2]).abs() < limit
        })
    }

    /// Ray-casts the hand into a z-buffer, returning depth in mm (0 = empty).
    pub fn render(&self, joints: &[[f64; 3]], bones: &[([f64; 3], [f64; 3], f64)]) -> Vec<f64> {
        let mut zbuf = vec![f64::INFINITY; self.width * self.height];
        let mut splat = |c: [f64; 3], r: f64| self.splat_sphere(&mut zbuf, c, r);
        for (j, p) in self.joints.iter().zip(joints) {
            splat(*p, j.radius_mm);
        }
        for &(a, b, r) in bones {
            let len = norm(sub(b, a));
            let steps = (len / (r / 4.0)).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                splat(add(a, scale(sub(b, a), t)), r);
            }
        }
        zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect()
    }

    fn splat_sphere(&self, zbuf: &mut [f64], c: [f64; 3], r: f64) {
        let k = &self.intrinsics;
        if c[2] - r <= 1.0 {
            return;
        }
        let u0 = k.fx * c[0] / c[2] + k.cx;
        let v0 = k.fy * c[1] / c[2] + k.cy;
        let ext_u = k.fx * r / (c[2] - r) + 1.0;
        let ext_v = k.fy * r / (c[2] - r) + 1.0;
        let cc = dot(c, c) - r * r;
        let u_lo = (u0 - ext_u).floor().max(0.0) as usize;
        let v_lo = (v0 - ext_v).floor().max(0.0) as usize;
        let u_hi = ((u0 + ext_u).ceil() as isize).min(self.width as isize - 1);
        let v_hi = ((v0 + ext_v).ceil() as isize).min(self.height as isize - 1);
        if u_hi < 0 || v_hi < 0 {
            return;
        }
        for v in v_lo..=v_hi as usize {
            for u in u_lo..=u_hi as usize {
                let d = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
                let a = dot(d, d);
                let b = dot(d, c);
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    continue;
                }
                let t = (b - disc.sqrt()) / a;
                let cell = &mut zbuf[v * self.width + u];
                if t > 0.0 && t < *cell {
                    *cell = t;
                }
            }
        }
    }
}

/// Generates `n` rendered hands with exact joint labels and their poses.
pub fn generate_with_poses<R: Rng + ?Sized>(
    config: &SyntheticHandConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(Record, HandPose)>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let noise = Normal::new(0.0, config.noise_std_mm).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempts = 0;
        let (pose, joints, bones) = loop {
            let pose = config.sample_pose(rng);
            let (joints, bones) = config.pose_geometry(&pose);
            if config.fits_crop(&joints) {
                break (pose, joints, bones);
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config("hand skeleton never fits inside the crop cube".into()));
            }
        };
        let depth = config.render(&joints, &bones);
        let data = depth
            .into_iter()
            .map(|z| {
                if z <= 0.0 {
                    return 0;
                }
                let z = if config.noise_std_mm > 0.0 { z + noise.sample(rng) } else { z };
                z.round().clamp(1.0, u16::MAX as f64) as u16
            })
            .collect();
        let record = Record {
            id: format!("s{i:06}"),
            depth: RawDepth::new(config.width, config.height, data)?,
            center_xyz: joints[0],
            joints: Some(JointSet::new(joints, JointFrame::CameraMm)),
        };
        out.push((record, pose));
    }
    Ok(out)
}

/// Generates a labeled synthetic dataset.
pub fn generate_synthetic<R: Rng + ?Sized>(config: &SyntheticHandConfig, n: usize, rng: &mut R) -> Result<Dataset> {
    let records = generate_with_poses(config, n, rng)?.into_iter().map(|(r, _)| r).collect();
    Ok(Dataset { meta: config.meta(), records })
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rodrigues rotation about `axis` (normalised here) by `deg` degrees.
fn rot_axis(axis: [f64; 3], deg: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = scale(axis, 1.0 / n);
    let (s, c) = deg.to_radians().sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
