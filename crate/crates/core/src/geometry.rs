//! Camera–LiDAR projective geometry, voxel quantization and window assignment.
//!
//! Conventions: the LiDAR (vehicle) frame is x forward, y left, z up. The
//! camera frame is x right, y down, z along the optical axis. Pixel
//! coordinates are `(u, v)` = (column, row) with pixel `(i, j)` covering
//! `[j, j + 1) × [i, i + 1)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;

/// Depth below which a point counts as behind the camera (meters).
pub const DEPTH_EPS: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Contract(format!(
                "not a rotation: |RᵀR - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Pose {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::from(translation),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn position(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn transform(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(*p) + self.translation;
        [q.x, q.y, q.z]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major R followed by t.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_array(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Data(format!("pose needs 12 numbers, got {}", v.len())));
        }
        let rotation = Matrix3::from_row_slice(&v[..9]);
        let translation = Vector3::new(v[9], v[10], v[11]);
        // Text round trips can perturb the last bit; re-validate loosely.
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Data("pose rotation is not orthonormal".into()));
        }
        Ok(Pose { rotation, translation })
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::Contract(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {height}x{width}"
            )));
        }
        Ok(CameraModel { fx, fy, cx, cy, height, width })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicCalibration {
    pub cam_from_lidar: Pose,
}

impl ExtrinsicCalibration {
    pub fn identity() -> Self {
        ExtrinsicCalibration {
            cam_from_lidar: Pose::identity(),
        }
    }
}

/// Pixel coordinates plus a validity flag per input point.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pixels: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Transforms LiDAR points into the camera frame and projects them.
///
/// A point is invalid when its depth is at most [`DEPTH_EPS`] or it lands
/// outside `[0, w) × [0, h)`. Invalid points keep their (possibly
/// meaningless) pixel coordinates so indices stay aligned with the input.
pub fn project_points(points: &[[f64; 3]], cal: &ExtrinsicCalibration, cam: &CameraModel) -> Projection {
    let mut pixels = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let [x, y, z] = cal.cam_from_lidar.transform(p);
        if z <= DEPTH_EPS {
            pixels.push([f64::NAN, f64::NAN]);
            valid.push(false);
            continue;
        }
        let u = cam.fx * x / z + cam.cx;
        let v = cam.fy * y / z + cam.cy;
        pixels.push([u, v]);
        valid.push((0.0..cam.width as f64).contains(&u) && (0.0..cam.height as f64).contains(&v));
    }
    Projection { pixels, valid }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowIndex {
    pub u: usize,
    pub v: usize,
}

/// Non-overlapping `dh × dw` windows tiling an `extent = (h, w)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub extent: (usize, usize),
    pub dh: usize,
    pub dw: usize,
}

impl WindowGrid {
    pub fn new(extent: (usize, usize), dh: usize, dw: usize) -> Result<Self> {
        if dh == 0 || dw == 0 {
            return Err(Error::Contract("window extents must be positive".into()));
        }
        Ok(WindowGrid { extent, dh, dw })
    }

    /// Number of window rows and columns (partial windows at the border count).
    pub fn counts(&self) -> (usize, usize) {
        (self.extent.0.div_ceil(self.dh), self.extent.1.div_ceil(self.dw))
    }
}

/// Assigns each `(row, col)` feature-plane coordinate to the window
/// `floor(coord / [dh, dw])`, using 0-based window indices.
pub fn assign_windows(coords: &[[f64; 2]], grid: &WindowGrid) -> Result<Vec<WindowIndex>> {
    let (h, w) = grid.extent;
    coords
        .iter()
        .enumerate()
        .map(|(i, &[r, c])| {
            if !(0.0..h as f64).contains(&r) || !(0.0..w as f64).contains(&c) {
                return Err(Error::Contract(format!(
                    "coordinate {i} = ({r}, {c}) outside [0,{h})x[0,{w})"
                )));
            }
            Ok(WindowIndex {
                u: (r / grid.dh as f64).floor() as usize,
                v: (c / grid.dw as f64).floor() as usize,
            })
        })
        .collect()
}

fn voxel_key(p: &[f64; 3], q: f64) -> [i64; 3] {
    [
        (p[0] / q).floor() as i64,
        (p[1] / q).floor() as i64,
        (p[2] / q).floor() as i64,
    ]
}

/// Replaces the points in each occupied voxel of edge `q` with their
/// centroid. Output is sorted lexicographically by voxel key.
pub fn voxel_downsample(points: &[[f64; 3]], q: f64) -> Result<Vec<[f64; 3]>> {
    if !(q > 0.0) {
        return Err(Error::Contract(format!("voxel size must be positive, got {q}")));
    }
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
    for p in points {
        let e = cells.entry(voxel_key(p, q)).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += p[k];
        }
        e.1 += 1;
    }
    Ok(cells
        .into_values()
        .map(|(s, n)| {
            let n = n as f64;
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect())
}

/// A calibration with a known injected error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedCalibration {
    pub calibration: ExtrinsicCalibration,
    /// Translation error `‖Δt‖₂` in meters.
    pub t_err: f64,
    /// Rotation error angle in radians, in `[0, π]`.
    pub r_err: f64,
}

/// `R̂ = R_e R`, `t̂ = t + Δt` with `R_e` the rotation by `angle` about `axis`.
pub fn perturb_extrinsics(
    cal: &ExtrinsicCalibration,
    axis: [f64; 3],
    angle: f64,
    dt: [f64; 3],
) -> Result<PerturbedCalibration> {
    let axis = Vector3::from(axis);
    if (axis.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("rotation axis must be unit length, |a| = {}", axis.norm())));
    }
    let r_e = *Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).matrix();
    let pose = &cal.cam_from_lidar;
    let dt = Vector3::from(dt);
    let perturbed = Pose::new(r_e * pose.rotation, pose.translation + dt)?;
    Ok(PerturbedCalibration {
        calibration: ExtrinsicCalibration {
            cam_from_lidar: perturbed,
        },
        t_err: dt.norm(),
        r_err: rotation_angle(&r_e),
    })
}

/// `|arccos((trace(R) - 1) / 2)|` with the argument clamped to `[-1, 1]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().abs()
}

/// `Î = I + α δ` with `δ` i.i.d. standard normal drawn from `seed`. No clamping.
pub fn perturb_image(image: &Image, alpha: f64, seed: u64) -> Result<Image> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("noise intensity must be nonnegative, got {alpha}")));
    }
    let mut out = image.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data_mut() {
        let d: f64 = StandardNormal.sample(&mut rng);
        *v += alpha * d;
    }
    Ok(out)
}

/// Writes the 12 extrinsic numbers (row-major R then t) on one line and
/// `fx fy cx cy h w` on the next.
pub fn write_calibration(path: &Path, cal: &ExtrinsicCalibration, cam: &CameraModel) -> Result<()> {
    let mut s = String::new();
    let nums: Vec<String> = cal.cam_from_lidar.to_array().iter().map(|v| v.to_string()).collect();
    writeln!(s, "{}", nums.join(" ")).unwrap();
    writeln!(s, "{} {} {} {} {} {}", cam.fx, cam.fy, cam.cx, cam.cy, cam.height, cam.width).unwrap();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_calibration(path: &Path) -> Result<(ExtrinsicCalibration, CameraModel)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_calibration(text: &str) -> Result<(ExtrinsicCalibration, CameraModel)> {
    let nums = parse_numbers(text)?;
    if nums.len() != 18 {
        return Err(Error::Data(format!("calibration needs 18 numbers, found {}", nums.len())));
    }
    let pose = Pose::from_array(&nums[..12])?;
    let dims = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Data(format!("image extent {v} is not a positive integer")))
        }
    };
    let cam = CameraModel::new(nums[12], nums[13], nums[14], nums[15], dims(nums[16])?, dims(nums[17])?)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok((ExtrinsicCalibration { cam_from_lidar: pose }, cam))
}

pub(crate) fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("not a number: {t:?}"))))
        .collect()
}
