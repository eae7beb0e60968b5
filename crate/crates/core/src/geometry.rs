//! Camera projection, hand-cube cropping and the affine augmentation family.
//!
//! Crop coordinates put pixel `i` at continuous coordinate `i`, so the crop
//! centre sits at `(S - 1) / 2`. Depth inside a crop is normalised so that the
//! cube spans `[-1, 1]` with background at the far plane `+1`.
//!
//! Augmentations act on camera millimetres as `P' = c + s R (P - c) + t`,
//! where `c` is the crop centre and `R` rotates the X/Y plane. Every frame
//! carries the composed augmentation in its [`CropSpec::view`], and the
//! crop-space realisation of that map is the same similarity conjugated into
//! pixel units. Label projection through an augmented crop therefore agrees
//! with the resampled pixels up to interpolation error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth value assigned to background, invalid and out-of-window pixels.
pub const BACKGROUND: f32 = 1.0;

/// Default side length of the crop cube in millimetres.
pub const DEFAULT_CUBE_MM: f64 = 250.0;

/// Default crop resolution.
pub const DEFAULT_OUT_SIZE: usize = 128;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to image pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if p[2] <= 0.0 {
            return Err(Error::Projection(p[2]));
        }
        Ok([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// Back-projects an image pixel at depth `z` mm.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<[f64; 3]> {
        if z <= 0.0 {
            return Err(Error::Projection(z));
        }
        Ok([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z])
    }
}

/// A full-resolution depth image in millimetres; zero marks invalid pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDepth {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl RawDepth {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }
}

/// An in-plane similarity with translation, in camera millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAugmentation {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation_mm: [f64; 3],
}

impl Default for AffineAugmentation {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineAugmentation {
    pub const fn identity() -> Self {
        Self { rotation_deg: 0.0, scale: 1.0, translation_mm: [0.0; 3] }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn sin_cos(&self) -> (f64, f64) {
        self.rotation_deg.to_radians().sin_cos()
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineAugmentation) -> AffineAugmentation {
        let (s, c) = self.sin_cos();
        let t = inner.translation_mm;
        let k = self.scale;
        AffineAugmentation {
            rotation_deg: self.rotation_deg + inner.rotation_deg,
            scale: self.scale * inner.scale,
            translation_mm: [
                k * (c * t[0] - s * t[1]) + self.translation_mm[0],
                k * (s * t[0] + c * t[1]) + self.translation_mm[1],
                k * t[2] + self.translation_mm[2],
            ],
        }
    }

    pub fn inverse(&self) -> AffineAugmentation {
        let (s, c) = self.sin_cos();
        let t = self.translation_mm;
        let k = 1.0 / self.scale;
        AffineAugmentation {
            rotation_deg: -self.rotation_deg,
            scale: k,
            translation_mm: [
                -k * (c * t[0] + s * t[1]),
                -k * (-s * t[0] + c * t[1]),
                -k * t[2],
            ],
        }
    }

    /// Maps a camera-frame point about the centre `center`.
    pub fn apply_point(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.sin_cos();
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let k = self.scale;
        [
            center[0] + k * (c * d[0] - s * d[1]) + self.translation_mm[0],
            center[1] + k * (s * d[0] + c * d[1]) + self.translation_mm[1],
            center[2] + k * d[2] + self.translation_mm[2],
        ]
    }

    /// Crop-space realisation: maps (u, v, normalised z) of a crop to the
    /// augmented crop.
    pub fn apply_crop(&self, p: [f64; 3], crop: &CropSpec) -> [f64; 3] {
        let (s, c) = self.sin_cos();
        let mid = crop.pixel_center();
        let ppm = crop.pixels_per_mm();
        let k = self.scale;
        let (du, dv) = (p[0] - mid, p[1] - mid);
        [
            mid + k * (c * du - s * dv) + self.translation_mm[0] * ppm,
            mid + k * (s * du + c * dv) + self.translation_mm[1] * ppm,
            k * p[2] + self.translation_mm[2] / crop.half_depth(),
        ]
    }
}

/// Sampling intervals for [`sample_augmentation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationRanges {
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub translation_mm: [f64; 2],
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self { rotation_deg: [-180.0, 180.0], scale: [0.9, 1.1], translation_mm: [-10.0, 10.0] }
    }
}

impl AugmentationRanges {
    pub fn identity() -> Self {
        Self { rotation_deg: [0.0, 0.0], scale: [1.0, 1.0], translation_mm: [0.0, 0.0] }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("translation_mm", self.translation_mm),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("augmentation range {name} = {r:?} is not ordered")));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config("augmentation scale must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, aug: &AffineAugmentation) -> bool {
        let inside = |r: [f64; 2], x: f64| r[0] <= x && x <= r[1];
        inside(self.rotation_deg, aug.rotation_deg)
            && inside(self.scale, aug.scale)
            && aug.translation_mm.iter().all(|&t| inside(self.translation_mm, t))
    }
}

/// Geometry of a hand crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center_xyz: [f64; 3],
    pub cube_mm: f64,
    pub out_size: usize,
    /// Augmentation composed onto the original crop.
    #[serde(default)]
    pub view: AffineAugmentation,
}

impl CropSpec {
    pub fn new(center_xyz: [f64; 3], cube_mm: f64, out_size: usize) -> Result<Self> {
        if !(cube_mm > 0.0) {
            return Err(Error::Config(format!("cube_mm must be positive, got {cube_mm}")));
        }
        if out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        if !(center_xyz[2] > 0.0) {
            return Err(Error::Projection(center_xyz[2]));
        }
        Ok(Self { center_xyz, cube_mm, out_size, view: AffineAugmentation::identity() })
    }

    pub fn pixel_center(&self) -> f64 {
        (self.out_size as f64 - 1.0) / 2.0
    }

    pub fn pixels_per_mm(&self) -> f64 {
        self.out_size as f64 / self.cube_mm
    }

    pub fn half_depth(&self) -> f64 {
        self.cube_mm / 2.0
    }

    /// Camera mm to crop (u, v, normalised z) through this crop's view.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let base = self.view.inverse().apply_point(p, self.center_xyz);
        if base[2] <= 0.0 {
            return Err(Error::Projection(base[2]));
        }
        let c = self.center_xyz;
        let k = self.out_size as f64 * c[2] / self.cube_mm;
        let mid = self.pixel_center();
        let uvz = [
            mid + (base[0] / base[2] - c[0] / c[2]) * k,
            mid + (base[1] / base[2] - c[1] / c[2]) * k,
            (base[2] - c[2]) / self.half_depth(),
        ];
        Ok(self.view.apply_crop(uvz, self))
    }

    /// Crop (u, v, normalised z) back to camera mm.
    pub fn unproject(&self, uvz: [f64; 3]) -> Result<[f64; 3]> {
        let base_uvz = self.view.inverse().apply_crop(uvz, self);
        let c = self.center_xyz;
        let z = c[2] + base_uvz[2] * self.half_depth();
        if z <= 0.0 {
            return Err(Error::Projection(z));
        }
        let k = self.cube_mm / (self.out_size as f64 * c[2]);
        let mid = self.pixel_center();
        let base = [
            z * ((base_uvz[0] - mid) * k + c[0] / c[2]),
            z * ((base_uvz[1] - mid) * k + c[1] / c[2]),
            z,
        ];
        Ok(self.view.apply_point(base, c))
    }
}

/// A cropped, normalised depth image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthFrame {
    /// Row-major `out_size × out_size` values in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub crop: CropSpec,
    pub intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn background(crop: CropSpec, intrinsics: CameraIntrinsics) -> Self {
        Self { pixels: vec![BACKGROUND; crop.out_size * crop.out_size], crop, intrinsics }
    }

    pub fn size(&self) -> usize {
        self.crop.out_size
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.crop.out_size + col]
    }

    fn texel(&self, row: isize, col: isize) -> f64 {
        let s = self.size() as isize;
        if row < 0 || col < 0 || row >= s || col >= s {
            BACKGROUND as f64
        } else {
            self.pixels[row as usize * self.size() + col as usize] as f64
        }
    }

    /// Bilinear sample at continuous (x = column, y = row); outside reads as
    /// background. Background texels are not blended into the hand: the
    /// foreground weights are renormalised, and the sample is background
    /// when background texels carry more than half the weight. Plain
    /// blending would invent depths between the hand and the far plane
    /// along every silhouette edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (c, r) = (x0 as isize, y0 as isize);
        if fx == 0.0 && fy == 0.0 {
            return self.texel(r, c);
        }
        let taps = [
            (r, c, (1.0 - fx) * (1.0 - fy)),
            (r, c + 1, fx * (1.0 - fy)),
            (r + 1, c, (1.0 - fx) * fy),
            (r + 1, c + 1, fx * fy),
        ];
        let (mut w, mut acc) = (0.0, 0.0);
        for (tr, tc, tw) in taps {
            let v = self.texel(tr, tc);
            if tw > 0.0 && v < BACKGROUND as f64 {
                w += tw;
                acc += tw * v;
            }
        }
        if w <= 0.5 {
            BACKGROUND as f64
        } else {
            acc / w
        }
    }
}

/// Coordinate frame tag of a [`JointSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JointFrame {
    CropUvz,
    CameraMm,
}

/// `N_J` joint locations with their frame tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSet {
    pub coords: Vec<[f64; 3]>,
    pub frame: JointFrame,
}

impl JointSet {
    pub fn new(coords: Vec<[f64; 3]>, frame: JointFrame) -> Self {
        Self { coords, frame }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub(crate) fn expect_frame(&self, expected: JointFrame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::FrameMismatch { expected, actual: self.frame });
        }
        Ok(())
    }
}

/// Crops a cube around `center_xyz` from a raw depth image and maps depth
/// linearly onto `[-1, 1]`. Invalid (zero) and out-of-image pixels become
/// background; depths beyond the cube clamp to the range ends.
pub fn crop_and_normalize(
    raw: &RawDepth,
    intrinsics: &CameraIntrinsics,
    center_xyz: [f64; 3],
    cube_mm: f64,
    out_size: usize,
) -> Result<DepthFrame> {
    intrinsics.validate()?;
    let crop = CropSpec::new(center_xyz, cube_mm, out_size)?;
    let [uc, vc] = intrinsics.project(center_xyz)?;
    let cz = center_xyz[2];
    let half = crop.half_depth();
    let step_u = cube_mm * intrinsics.fx / cz / out_size as f64;
    let step_v = cube_mm * intrinsics.fy / cz / out_size as f64;
    let mid = crop.pixel_center();

    // Window extent in image pixels, inclusive of the outer pixel centres.
    let u_lo = uc - mid * step_u;
    let u_hi = uc + mid * step_u;
    let v_lo = vc - mid * step_v;
    let v_hi = vc + mid * step_v;
    let (w, h) = (raw.width as f64, raw.height as f64);
    if u_hi.round() < 0.0 || v_hi.round() < 0.0 || u_lo.round() > w - 1.0 || v_lo.round() > h - 1.0 {
        return Err(Error::DegenerateCrop { width: raw.width, height: raw.height });
    }

    let mut pixels = Vec::with_capacity(out_size * out_size);
    for row in 0..out_size {
        let v = (vc + (row as f64 - mid) * step_v).round();
        for col in 0..out_size {
            let u = (uc + (col as f64 - mid) * step_u).round();
            let value = if u < 0.0 || v < 0.0 || u > w - 1.0 || v > h - 1.0 {
                BACKGROUND
            } else {
                match raw.get(v as usize, u as usize) {
                    0 => BACKGROUND,
                    d => ((d as f64 - cz) / half).clamp(-1.0, 1.0) as f32,
                }
            };
            pixels.push(value);
        }
    }
    Ok(DepthFrame { pixels, crop, intrinsics: *intrinsics })
}

/// Draws each augmentation parameter independently and uniformly.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, ranges: &AugmentationRanges) -> AffineAugmentation {
    let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
    let rotation_deg = draw(ranges.rotation_deg);
    let scale = draw(ranges.scale);
    let translation_mm = [
        draw(ranges.translation_mm),
        draw(ranges.translation_mm),
        draw(ranges.translation_mm),
    ];
    AffineAugmentation { rotation_deg, scale, translation_mm }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Resamples a frame under `aug`. Rotation and scale act about the crop
/// centre, translation shifts pixels and depth. Out-of-bounds samples are
/// background.
pub fn apply_to_frame(aug: &AffineAugmentation, frame: &DepthFrame) -> DepthFrame {
    if aug.is_identity() {
        let mut out = frame.clone();
        out.crop.view = aug.compose(&frame.crop.view);
        return out;
    }
    let crop = &frame.crop;
    let size = crop.out_size;
    let inv = aug.inverse();
    let depth_shift = aug.translation_mm[2] / crop.half_depth();
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let src = inv.apply_crop([col as f64, row as f64, 0.0], crop);
            let value = frame.sample_bilinear(snap(src[0]), snap(src[1]));
            let out = if value >= BACKGROUND as f64 - 1e-6 {
                BACKGROUND
            } else {
                (aug.scale * value + depth_shift).clamp(-1.0, 1.0) as f32
            };
            pixels.push(out);
        }
    }
    let mut crop = *crop;
    crop.view = aug.compose(&frame.crop.view);
    DepthFrame { pixels, crop, intrinsics: frame.intrinsics }
}

/// Applies `aug` to camera-frame joints about the crop centre `center_xyz`.
pub fn apply_to_joints(aug: &AffineAugmentation, joints: &JointSet, center_xyz: [f64; 3]) -> Result<JointSet> {
    joints.expect_frame(JointFrame::CameraMm)?;
    let coords = joints.coords.iter().map(|&p| aug.apply_point(p, center_xyz)).collect();
    Ok(JointSet::new(coords, JointFrame::CameraMm))
}

pub fn uvz_to_xyz(joints: &JointSet, frame: &DepthFrame) -> Result<JointSet> {
    joints.expect_frame(JointFrame::CropUvz)?;
    let coords = joints
        .coords
        .iter()
        .map(|&p| frame.crop.unproject(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointSet::new(coords, JointFrame::CameraMm))
}

pub fn xyz_to_uvz(joints: &JointSet, frame: &DepthFrame) -> Result<JointSet> {
    joints.expect_frame(JointFrame::CameraMm)?;
    let coords = joints
        .coords
        .iter()
        .map(|&p| frame.crop.project(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointSet::new(coords, JointFrame::CropUvz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(140.0, 140.0, 80.0, 60.0).unwrap()
    }

    fn flat_raw(depth: u16) -> RawDepth {
        RawDepth::new(160, 120, vec![depth; 160 * 120]).unwrap()
    }

    #[test]
    fn constant_depth_at_center_maps_to_zero() {
        let frame = crop_and_normalize(&flat_raw(400), &intrinsics(), [0.0, 0.0, 400.0], 250.0, 32).unwrap();
        assert!(frame.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn cube_boundary_maps_to_plus_one() {
        let frame = crop_and_normalize(&flat_raw(525), &intrinsics(), [0.0, 0.0, 400.0], 250.0, 16).unwrap();
        assert!(frame.pixels.iter().all(|&p| p == 1.0));
        let frame = crop_and_normalize(&flat_raw(275), &intrinsics(), [0.0, 0.0, 400.0], 250.0, 16).unwrap();
        assert!(frame.pixels.iter().all(|&p| p == -1.0));
    }

    #[test]
    fn invalid_pixels_are_background() {
        let frame = crop_and_normalize(&flat_raw(0), &intrinsics(), [0.0, 0.0, 400.0], 250.0, 8).unwrap();
        assert!(frame.pixels.iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn crop_outside_image_is_degenerate() {
        let err = crop_and_normalize(&flat_raw(400), &intrinsics(), [2000.0, 0.0, 400.0], 250.0, 32);
        assert!(matches!(err, Err(Error::DegenerateCrop { .. })));
        let err = crop_and_normalize(&flat_raw(400), &intrinsics(), [0.0, 0.0, -5.0], 250.0, 32);
        assert!(err.is_err());
    }

    #[test]
    fn collapsed_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aug = sample_augmentation(&mut rng, &AugmentationRanges::identity());
        assert!(aug.is_identity());
    }

    #[test]
    fn augmentation_draws_stay_in_range_and_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ranges = AugmentationRanges::default();
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let aug = sample_augmentation(&mut rng, &ranges);
            assert!(ranges.contains(&aug));
            sum += aug.rotation_deg;
        }
        assert!((sum / n as f64).abs() < 5.0);
    }

    #[test]
    fn translation_moves_x_by_exactly_ten() {
        let aug = AffineAugmentation { translation_mm: [10.0, 0.0, 0.0], ..AffineAugmentation::identity() };
        let joints = JointSet::new(vec![[3.5, -2.0, 410.0], [-40.0, 12.25, 380.0]], JointFrame::CameraMm);
        let out = apply_to_joints(&aug, &joints, [1.0, 2.0, 400.0]).unwrap();
        for (a, b) in joints.coords.iter().zip(&out.coords) {
            assert_eq!(b[0], a[0] + 10.0);
            assert_eq!(b[1], a[1]);
            assert_eq!(b[2], a[2]);
        }
    }

    #[test]
    fn joints_in_wrong_frame_are_rejected() {
        let joints = JointSet::new(vec![[1.0, 2.0, 0.5]], JointFrame::CropUvz);
        let err = apply_to_joints(&AffineAugmentation::identity(), &joints, [0.0, 0.0, 400.0]);
        assert!(matches!(err, Err(Error::FrameMismatch { .. })));
    }

    #[test]
    fn center_projects_to_pixel_center() {
        let crop = CropSpec::new([12.0, -7.0, 450.0], 250.0, 128).unwrap();
        let uvz = crop.project([12.0, -7.0, 450.0]).unwrap();
        assert!((uvz[0] - 63.5).abs() < 1e-12);
        assert!((uvz[1] - 63.5).abs() < 1e-12);
        assert!(uvz[2].abs() < 1e-12);
    }

    #[test]
    fn projection_rejects_nonpositive_depth() {
        let crop = CropSpec::new([0.0, 0.0, 400.0], 250.0, 32).unwrap();
        assert!(matches!(crop.project([0.0, 0.0, -1.0]), Err(Error::Projection(_))));
        assert!(matches!(crop.unproject([0.0, 0.0, -4.0]), Err(Error::Projection(_))));
    }

    #[test]
    fn identity_augmentation_keeps_pixels() {
        let raw = RawDepth::new(160, 120, (0..160 * 120).map(|i| 300 + (i % 211) as u16).collect()).unwrap();
        let frame = crop_and_normalize(&raw, &intrinsics(), [5.0, 3.0, 400.0], 250.0, 32).unwrap();
        let out = apply_to_frame(&AffineAugmentation::identity(), &frame);
        assert_eq!(out.pixels, frame.pixels);
    }
}
