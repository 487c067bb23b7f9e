//! Pinhole cameras, rigid motions and differentiable inverse warping.
//!
//! Pixel centres sit at integer coordinates: column `u` in `[0, width-1]`,
//! row `v` in `[0, height-1]`. Camera frames are x right, y down, z forward.
//! Image tensors use `[N, C, H, W]` layout; depth is `[N, 1, H, W]`, point
//! clouds are `[N, 3, H, W]` and sampling coordinates `[N, 2, H, W]`
//! (column first).

use serde::{Deserialize, Serialize};

use crate::diff::{kernels, Array, Graph, Tensor};
use crate::error::{Error, Result};

/// Transformed points with `z` at or below this are projected as invalid.
pub const Z_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Shared intrinsics for a whole dataset: principal point at the image
    /// centre and a single focal length.
    pub fn universal(width: usize, height: usize, focal: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Unit-depth viewing rays `((u-cx)/fx, (v-cy)/fy, 1)` as a `[1, 3, H, W]` array.
    pub fn ray_grid(&self) -> Array {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                data[i] = (u as f64 - self.cx) / self.fx;
                data[h * w + i] = (v as f64 - self.cy) / self.fy;
                data[2 * h * w + i] = 1.0;
            }
        }
        Array {
            shape: vec![1, 3, h, w],
            data,
        }
    }

    /// The identity sampling grid as a `[1, 2, H, W]` array.
    pub fn pixel_grid(&self) -> Array {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 2 * h * w];
        for v in 0..h {
            for u in 0..w {
                data[v * w + u] = u as f64;
                data[h * w + v * w + u] = v as f64;
            }
        }
        Array {
            shape: vec![1, 2, h, w],
            data,
        }
    }
}

/// Axis-angle rotation (radians times unit axis) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose6DoF {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Pose6DoF {
            axis_angle,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .axis_angle
            .iter()
            .chain(&self.translation)
            .all(|v| v.is_finite());
        if !finite || self.angle() >= std::f64::consts::PI {
            return Err(Error::InvalidArgument(format!(
                "pose must be finite with rotation angle below pi: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn angle(&self) -> f64 {
        self.axis_angle.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The pose of the inverse rigid motion.
    pub fn inverse(&self) -> Self {
        let r = kernels::rotation_from_axis_angle(self.axis_angle);
        let t = self.translation;
        // -R^T t
        let inv_t = [
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        ];
        Pose6DoF {
            axis_angle: self.axis_angle.map(|v| -v),
            translation: inv_t,
        }
    }

    pub fn to_vec(&self) -> [f64; 6] {
        let [a, b, c] = self.axis_angle;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }
}

/// A 4x4 homogeneous rigid transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3Transform {
    pub matrix: [[f64; 4]; 4],
}

impl Se3Transform {
    pub fn identity() -> Self {
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Se3Transform { matrix }
    }

    pub fn from_parts(rotation: [f64; 9], translation: [f64; 3]) -> Self {
        let mut m = Self::identity().matrix;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rotation[i * 3 + j];
            }
            m[i][3] = translation[i];
        }
        Se3Transform { matrix: m }
    }

    pub fn rotation(&self) -> [f64; 9] {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.matrix[i][j];
            }
        }
        r
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Se3Transform) -> Se3Transform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.matrix[i][k] * other.matrix[k][j]).sum();
            }
        }
        Se3Transform { matrix: m }
    }

    /// Closed-form rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Se3Transform {
        let r = self.rotation();
        let t = self.translation();
        let rt = [r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]];
        let nt = [
            -(rt[0] * t[0] + rt[1] * t[1] + rt[2] * t[2]),
            -(rt[3] * t[0] + rt[4] * t[1] + rt[5] * t[2]),
            -(rt[6] * t[0] + rt[7] * t[1] + rt[8] * t[2]),
        ];
        Se3Transform::from_parts(rt, nt)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Largest absolute deviation of `R^T R` from the identity, of `det R`
    /// from one, and of the last row from `(0, 0, 0, 1)`.
    pub fn rigidity_error(&self) -> f64 {
        let r = self.rotation();
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                err = err.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        err = err.max((det - 1.0).abs());
        let last = self.matrix[3];
        err.max(last[0].abs())
            .max(last[1].abs())
            .max(last[2].abs())
            .max((last[3] - 1.0).abs())
    }

    pub fn max_abs_diff(&self, other: &Se3Transform) -> f64 {
        self.matrix
            .iter()
            .flatten()
            .zip(other.matrix.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Rotation by the exponential map of the axis-angle vector, then translation.
pub fn pose_to_transform(p: &Pose6DoF) -> Se3Transform {
    Se3Transform::from_parts(kernels::rotation_from_axis_angle(p.axis_angle), p.translation)
}

/// A batch of rigid transforms recorded in a graph.
#[derive(Clone, Copy, Debug)]
pub struct RigidTensor {
    /// `[N, 3, 3]`
    pub rotation: Tensor,
    /// `[N, 3, 1]`
    pub translation: Tensor,
}

impl RigidTensor {
    /// Differentiable transform from a `[N, 6]` tensor of
    /// `(axis_angle, translation)` rows.
    pub fn from_pose_tensor(g: &mut Graph, pose: Tensor) -> Result<Self> {
        let n = match g.shape(pose) {
            &[n, 6] => n,
            s => return Err(Error::shape("pose_to_transform", &[s])),
        };
        let axis = g.narrow(pose, 1, 0, 3)?;
        let rotation = g.axis_angle_to_rotation(axis)?;
        let t = g.narrow(pose, 1, 3, 3)?;
        let translation = g.reshape(t, &[n, 3, 1])?;
        Ok(RigidTensor {
            rotation,
            translation,
        })
    }

    /// Inverse of [`RigidTensor::from_pose_tensor`]: `R(-a)` with
    /// translation `-R(-a) t`.
    pub fn inverse_from_pose_tensor(g: &mut Graph, pose: Tensor) -> Result<Self> {
        let n = match g.shape(pose) {
            &[n, 6] => n,
            s => return Err(Error::shape("pose_to_transform", &[s])),
        };
        let axis = g.narrow(pose, 1, 0, 3)?;
        let axis = g.neg(axis)?;
        let rotation = g.axis_angle_to_rotation(axis)?;
        let t = g.narrow(pose, 1, 3, 3)?;
        let t = g.reshape(t, &[n, 3, 1])?;
        let rt = g.batch_matmul(rotation, t)?;
        let translation = g.neg(rt)?;
        Ok(RigidTensor {
            rotation,
            translation,
        })
    }

    /// Constant transforms, one per batch element.
    pub fn constant(g: &mut Graph, transforms: &[Se3Transform]) -> Result<Self> {
        let n = transforms.len();
        let rot: Vec<f64> = transforms.iter().flat_map(|t| t.rotation()).collect();
        let tr: Vec<f64> = transforms.iter().flat_map(|t| t.translation()).collect();
        Ok(RigidTensor {
            rotation: g.constant(rot, &[n, 3, 3])?,
            translation: g.constant(tr, &[n, 3, 1])?,
        })
    }
}

/// Lift every pixel to 3D: `depth * ((u-cx)/fx, (v-cy)/fy, 1)`.
pub fn backproject(g: &mut Graph, depth: Tensor, k: &Intrinsics) -> Result<Tensor> {
    let shape = g.shape(depth).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != k.height || shape[3] != k.width {
        return Err(Error::shape("backproject", &[&shape, &[k.height, k.width]]));
    }
    if let Some(i) = g.value(depth).iter().position(|&d| !(d > 0.0)) {
        return Err(Error::domain(
            "backproject",
            format!("depth must be positive, found {} at index {i}", g.value(depth)[i]),
        ));
    }
    let rays = k.ray_grid().to_constant(g);
    g.mul(depth, rays)
}

/// Sampling coordinates and validity for a projected point cloud.
pub struct Projection {
    /// `[N, 2, H, W]` pixel coordinates (column, row).
    pub coords: Tensor,
    /// `[N, 1, H, W]`, 1.0 where the point lies in front of the camera and
    /// inside the image, else 0.0.
    pub valid: Array,
}

/// Apply `transform` to every point and project with the pinhole model.
pub fn project(g: &mut Graph, points: Tensor, k: &Intrinsics, transform: &RigidTensor) -> Result<Projection> {
    let shape = g.shape(points).to_vec();
    let (n, h, w) = match shape[..] {
        [n, 3, h, w] => (n, h, w),
        _ => return Err(Error::shape("project", &[&shape])),
    };
    let flat = g.reshape(points, &[n, 3, h * w])?;
    let rotated = g.batch_matmul(transform.rotation, flat)?;
    let moved = g.add(rotated, transform.translation)?;
    let x = g.narrow(moved, 1, 0, 1)?;
    let y = g.narrow(moved, 1, 1, 1)?;
    let z = g.narrow(moved, 1, 2, 1)?;
    let zc = g.clamp(z, Z_MIN, f64::INFINITY)?;
    let xn = g.div(x, zc)?;
    let yn = g.div(y, zc)?;
    let xs = g.mul_scalar(xn, k.fx)?;
    let u = g.add_scalar(xs, k.cx)?;
    let ys = g.mul_scalar(yn, k.fy)?;
    let v = g.add_scalar(ys, k.cy)?;
    let uv = g.concat(&[u, v], 1)?;
    let coords = g.reshape(uv, &[n, 2, h, w])?;

    let (zv, uvv) = (g.value(z), g.value(uv));
    let plane = h * w;
    let mut valid = vec![0.0; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let zz = zv[b * plane + p];
            let uu = uvv[b * 2 * plane + p];
            let vv = uvv[b * 2 * plane + plane + p];
            let inside = zz > Z_MIN
                && (0.0..=(w - 1) as f64).contains(&uu)
                && (0.0..=(h - 1) as f64).contains(&vv);
            if inside {
                valid[b * plane + p] = 1.0;
            }
        }
    }
    Ok(Projection {
        coords,
        valid: Array {
            shape: vec![n, 1, h, w],
            data: valid,
        },
    })
}

/// Bilinear interpolation of `image` at `coords`, clamping to the border.
pub fn bilinear_sample(g: &mut Graph, image: Tensor, coords: Tensor) -> Result<Tensor> {
    g.bilinear_sample(image, coords)
}

/// Reconstruct the target view from `source` using target-frame depth and
/// the target-to-source motion. Returns the reconstruction and its
/// validity mask.
pub fn synthesize_view(
    g: &mut Graph,
    source: Tensor,
    depth: Tensor,
    transform: &RigidTensor,
    k: &Intrinsics,
) -> Result<(Tensor, Array)> {
    let points = backproject(g, depth, k)?;
    let proj = project(g, points, k, transform)?;
    let recon = g.bilinear_sample(source, proj.coords)?;
    Ok((recon, proj.valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn k_small() -> Intrinsics {
        Intrinsics::new(20.0, 22.0, 3.5, 2.5, 8, 6).unwrap()
    }

    #[test]
    fn zero_pose_is_identity() {
        let t = pose_to_transform(&Pose6DoF::identity());
        assert_eq!(t, Se3Transform::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = pose_to_transform(&Pose6DoF::new([0.0, 0.0, FRAC_PI_2], [0.0; 3]).unwrap());
        let p = t.apply([1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-9 && (p[1] - 1.0).abs() < 1e-9 && p[2].abs() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Pose6DoF::new([0.3, -1.2, 0.7], [1.0, -2.0, 0.5]).unwrap();
        let t = pose_to_transform(&p);
        let id = t.compose(&t.inverse());
        assert!(id.max_abs_diff(&Se3Transform::identity()) < 1e-9);
        assert!(t.rigidity_error() < 1e-9);
    }

    #[test]
    fn pose_angle_must_be_below_pi() {
        assert!(Pose6DoF::new([0.0, 0.0, 3.2], [0.0; 3]).is_err());
        assert!(Pose6DoF::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        let u = Intrinsics::universal(64, 48, 50.0).unwrap();
        assert_eq!((u.cx, u.cy), (31.5, 23.5));
    }

    #[test]
    fn backproject_principal_ray_and_formula() {
        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 3, 3).unwrap();
        let mut g = Graph::new();
        let d = g.full(&[1, 1, 3, 3], 4.0);
        let p = backproject(&mut g, d, &k).unwrap();
        let v = g.value(p);
        // pixel (1, 1) is the principal point
        assert_eq!((v[4], v[9 + 4], v[18 + 4]), (0.0, 0.0, 4.0));

        let k1 = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 3, 3).unwrap();
        let d = g.full(&[1, 1, 3, 3], 3.0);
        let p = backproject(&mut g, d, &k1).unwrap();
        let v = g.value(p);
        // pixel (u=1, v=2)
        let i = 2 * 3 + 1;
        assert_eq!((v[i], v[9 + i], v[18 + i]), (3.0, 6.0, 3.0));
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = k_small();
        let mut g = Graph::new();
        let mut data = vec![1.0; 48];
        data[5] = 0.0;
        let d = g.constant(data, &[1, 1, 6, 8]).unwrap();
        assert!(matches!(backproject(&mut g, d, &k), Err(Error::Domain { .. })));
    }

    #[test]
    fn project_masks_points_behind_camera() {
        let k = k_small();
        let mut g = Graph::new();
        let d = g.full(&[1, 1, 6, 8], 1.0);
        let pts = backproject(&mut g, d, &k).unwrap();
        // move the camera one unit forward: every point lands at z = 0
        let t = Se3Transform::from_parts([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], [0.0, 0.0, -1.0]);
        let rt = RigidTensor::constant(&mut g, &[t]).unwrap();
        let proj = project(&mut g, pts, &k, &rt).unwrap();
        assert!(proj.valid.data.iter().all(|&m| m == 0.0));
        assert!(g.value(proj.coords).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_translation_contracts_toward_principal_point() {
        // fronto-parallel plane at depth 2, camera moves 1 unit toward it:
        // points end at depth 1 ... in the moved frame coordinates scale by 2/1.
        // Moving the points away (+1 in z) contracts by 2/3.
        let k = k_small();
        let mut g = Graph::new();
        let d = g.full(&[1, 1, 6, 8], 2.0);
        let pts = backproject(&mut g, d, &k).unwrap();
        let t = Se3Transform::from_parts([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 1.0]);
        let rt = RigidTensor::constant(&mut g, &[t]).unwrap();
        let proj = project(&mut g, pts, &k, &rt).unwrap();
        let c = g.value(proj.coords);
        for v in 0..6 {
            for u in 0..8 {
                let i = v * 8 + u;
                let eu = k.cx + (u as f64 - k.cx) * 2.0 / 3.0;
                let ev = k.cy + (v as f64 - k.cy) * 2.0 / 3.0;
                assert!((c[i] - eu).abs() < 1e-12 && (c[48 + i] - ev).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_exact_and_midpoint() {
        let mut g = Graph::new();
        let img = g.constant(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let crd = g.constant(vec![1.0, 0.5, 0.0, 0.0], &[1, 2, 1, 2]).unwrap();
        let out = g.bilinear_sample(img, crd).unwrap();
        assert_eq!(g.value(out), &[1.0, 0.5]);
    }

    #[test]
    fn sample_clamps_out_of_bounds() {
        let mut g = Graph::new();
        let img = g.constant(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let crd = g.constant(vec![-5.0, 9.0, -1.0, 7.0], &[1, 2, 1, 2]).unwrap();
        let out = g.bilinear_sample(img, crd).unwrap();
        assert_eq!(g.value(out), &[0.0, 3.0]);
    }
}
