//! Differentiable view synthesis: disparity to depth, pose vectors to rigid
//! transforms, and backprojection / projection / bilinear sampling through a
//! pinhole camera.

use crate::autodiff::{custom_op2, custom_op3, Arr, Var};
use crate::{Error, Result};
use ndarray::{Array2, Array3, IxDyn};

/// Pinhole intrinsics in pixels, valid at one specific resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Rescale to a resized image: focal lengths and principal point scale
    /// with the per-axis resize factors.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// Rigid motion: `x' = R x + t`.
#[derive(Clone, Debug)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        RigidTransform { rotation, translation: [0.0; 3] }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn compose(&self, then: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += then.rotation[i][k] * self.rotation[k][j];
                }
            }
        }
        let translation = then.apply(self.translation);
        RigidTransform { rotation, translation }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform { rotation: rt, translation }
    }
}

/// Six-parameter ego-motion: axis-angle rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseVector {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseVector {
    pub fn zero() -> Self {
        PoseVector { rotation: [0.0; 3], translation: [0.0; 3] }
    }
}

pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;

/// Map sigmoid disparity in (0,1) to metric depth:
/// `depth = 1 / (1/max + (1/min - 1/max) * disp)`, a strictly decreasing
/// bijection onto (min_depth, max_depth).
pub fn disp_to_depth(disp: &Array2<f64>, min_depth: f64, max_depth: f64) -> Result<Array2<f64>> {
    check_depth_range(min_depth, max_depth)?;
    let lo = 1.0 / max_depth;
    let span = 1.0 / min_depth - lo;
    Ok(disp.mapv(|d| 1.0 / (lo + span * d)))
}

/// Inverse of [`disp_to_depth`].
pub fn depth_to_disp(depth: &Array2<f64>, min_depth: f64, max_depth: f64) -> Result<Array2<f64>> {
    check_depth_range(min_depth, max_depth)?;
    let lo = 1.0 / max_depth;
    let span = 1.0 / min_depth - lo;
    Ok(depth.mapv(|z| (1.0 / z - lo) / span))
}

fn check_depth_range(min_depth: f64, max_depth: f64) -> Result<()> {
    if !(min_depth > 0.0 && max_depth > min_depth) {
        return Err(Error::InvalidArgument(format!(
            "depth range ({min_depth}, {max_depth}) requires 0 < min < max"
        )));
    }
    Ok(())
}

/// Differentiable disparity-to-depth on the tape.
pub fn disp_to_depth_var(disp: &Var, min_depth: f64, max_depth: f64) -> Result<Var> {
    check_depth_range(min_depth, max_depth)?;
    let lo = 1.0 / max_depth;
    let span = 1.0 / min_depth - lo;
    Ok(disp.mul_scalar(span).add_scalar(lo).reciprocal())
}

/// Axis-angle to rotation matrix (Rodrigues).
pub fn rotation_from_axis_angle(r: [f64; 3]) -> [[f64; 3]; 3] {
    let u = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b) = rotation_coefficients(u);
    let s = skew(r);
    let s2 = mat_mul3(&s, &s);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = if i == j { 1.0 } else { 0.0 } + a * s[i][j] + b * s2[i][j];
        }
    }
    out
}

/// `(sin(theta)/theta, (1 - cos(theta))/theta^2)` as functions of
/// `u = theta^2`, with series fallbacks near zero.
fn rotation_coefficients(u: f64) -> (f64, f64) {
    if u < 1e-10 {
        (1.0 - u / 6.0 + u * u / 120.0, 0.5 - u / 24.0 + u * u / 720.0)
    } else {
        let t = u.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / u)
    }
}

fn rotation_coefficient_derivs(u: f64) -> (f64, f64) {
    if u < 1e-10 {
        (-1.0 / 6.0 + u / 60.0, -1.0 / 24.0 + u / 360.0)
    } else {
        let t = u.sqrt();
        let da = (t * t.cos() - t.sin()) / (2.0 * t * t * t);
        let db = (t * t.sin() / 2.0 - (1.0 - t.cos())) / (u * u);
        (da, db)
    }
}

fn skew(r: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Pose vector to rigid transform; with `invert` the returned transform is
/// the group inverse `(R^T, -R^T t)`.
pub fn pose_to_transform(pose: &PoseVector, invert: bool) -> RigidTransform {
    let rotation = rotation_from_axis_angle(pose.rotation);
    let fwd = RigidTransform { rotation, translation: pose.translation };
    if invert {
        fwd.inverse()
    } else {
        fwd
    }
}

/// Differentiable Rodrigues: rotation 3-vector (shape `[3]`) to a `[3, 3]`
/// rotation matrix, built from tape primitives so gradients flow to the pose.
pub fn rotation_from_axis_angle_var(r: &Var) -> Var {
    assert_eq!(r.shape(), [3]);
    // u = |r|^2, a = sin(t)/t, b = (1 - cos t)/t^2 with t = sqrt(u).
    let u = r.square().sum_all();
    let ab = rotation_coefficients_var(&u); // shape [2]
    let a = ab.slice0(0, 1);
    let b = ab.slice0(1, 1);
    let s = skew_var(r);
    let s2 = s.matmul(&s);
    let a9 = a.broadcast_to(&[3, 3]);
    let b9 = b.broadcast_to(&[3, 3]);
    let eye = Var::constant(Arr::from_shape_fn(IxDyn(&[3, 3]), |ix| {
        if ix[0] == ix[1] {
            1.0
        } else {
            0.0
        }
    }));
    eye.add(&s.mul(&a9)).add(&s2.mul(&b9))
}

fn rotation_coefficients_var(u: &Var) -> Var {
    let uv = u.value()[[0]];
    let (a, b) = rotation_coefficients(uv);
    let (da, db) = rotation_coefficient_derivs(uv);
    custom_op2(
        u,
        None,
        Arr::from_shape_vec(IxDyn(&[2]), vec![a, b]).unwrap(),
        move |g, _u, _| {
            let gu = g[[0]] * da + g[[1]] * db;
            (Arr::from_elem(IxDyn(&[1]), gu), None)
        },
    )
}

fn skew_var(r: &Var) -> Var {
    let rv = r.value();
    let value = Arr::from_shape_vec(
        IxDyn(&[3, 3]),
        vec![0.0, -rv[[2]], rv[[1]], rv[[2]], 0.0, -rv[[0]], -rv[[1]], rv[[0]], 0.0],
    )
    .unwrap();
    custom_op2(r, None, value, |g, _r, _| {
        let gr = Arr::from_shape_vec(
            IxDyn(&[3]),
            vec![
                g[[2, 1]] - g[[1, 2]],
                g[[0, 2]] - g[[2, 0]],
                g[[1, 0]] - g[[0, 1]],
            ],
        )
        .unwrap();
        (gr, None)
    })
}


/// Differentiable pose-vector (shape `[6]`: rotation then translation) to a
/// `(R [3,3], t [3])` pair, optionally inverted.
pub fn pose_to_transform_var(pose: &Var, invert: bool) -> (Var, Var) {
    assert_eq!(pose.shape(), [6]);
    let rot = pose.slice0(0, 3);
    let t = pose.slice0(3, 3);
    let r = rotation_from_axis_angle_var(&rot);
    if invert {
        let rt = r.transpose2();
        let t_inv = rt.matmul(&t.reshape(&[3, 1])).reshape(&[3]).neg();
        (rt, t_inv)
    } else {
        (r, t)
    }
}

/// Reconstruction of the target view by inverse warping, plain-value entry
/// point. See [`synthesize_view_var`] for the differentiable form.
pub fn synthesize_view(
    source: &Array3<f64>,
    depth: &Array2<f64>,
    transform: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let rot = Arr::from_shape_fn(IxDyn(&[3, 3]), |ix| transform.rotation[ix[0]][ix[1]]);
    let t = Arr::from_shape_vec(IxDyn(&[3]), transform.translation.to_vec()).unwrap();
    let (rec, mask) = synthesize_view_var(
        &Var::constant(source.clone().into_dyn()),
        &Var::constant(depth.clone().into_dyn()),
        &Var::constant(rot),
        &Var::constant(t),
        k,
    )?;
    let rec = rec.value().clone().into_dimensionality().expect("3-D reconstruction");
    Ok((rec, mask))
}

/// Differentiable inverse warp.
///
/// For each target pixel p the 3-D point `depth(p) * K^-1 [u, v, 1]` is
/// mapped through `x' = R x + t` and projected back through K; the
/// reconstruction bilinearly samples the source there. The returned mask is
/// 1 where the sample point lands inside the source frame with positive
/// depth; out-of-bounds samples clamp to the border and are masked 0.
/// Gradients flow to the source image, the depth map, and the transform.
pub fn synthesize_view_var(
    source: &Var,
    depth: &Var,
    rotation: &Var,
    translation: &Var,
    k: &CameraIntrinsics,
) -> Result<(Var, Array2<f64>)> {
    let sshape = source.shape().to_vec();
    if sshape.len() != 3 {
        return Err(Error::ShapeMismatch("synthesize_view: source must be [C,H,W]".into()));
    }
    let (h, w) = (sshape[1], sshape[2]);
    if depth.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "synthesize_view: depth {:?} does not match source {}x{}",
            depth.shape(),
            h,
            w
        )));
    }
    if depth.value().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(
            "synthesize_view: depth must be strictly positive".into(),
        ));
    }
    let (grid, mask) = project_grid(depth, rotation, translation, k, h, w);
    let rec = grid_sample(source, &grid);
    Ok((rec, mask))
}

/// Compute per-pixel source-frame sampling coordinates `[2, H, W]` (u then v)
/// for the rigid motion, plus the validity mask.
fn project_grid(
    depth: &Var,
    rotation: &Var,
    translation: &Var,
    k: &CameraIntrinsics,
    h: usize,
    w: usize,
) -> (Var, Array2<f64>) {
    const Z_EPS: f64 = 1e-6;
    let (fx, fy, cx, cy) = (k.fx, k.fy, k.cx, k.cy);
    // Backprojection directions K^-1 [u, v, 1] per pixel (constant).
    let mut dirs = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            dirs[[0, i, j]] = (j as f64 - cx) / fx;
            dirs[[1, i, j]] = (i as f64 - cy) / fy;
            dirs[[2, i, j]] = 1.0;
        }
    }

    let compute = |d: &Arr, r: &Arr, t: &Arr| -> (Arr, Arr, Array2<f64>) {
        let mut grid = Arr::zeros(IxDyn(&[2, h, w]));
        let mut cam = Arr::zeros(IxDyn(&[3, h, w])); // transformed points, saved for backward
        let mut mask = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let dv = d[[i, j]];
                let x = [dv * dirs[[0, i, j]], dv * dirs[[1, i, j]], dv * dirs[[2, i, j]]];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = r[[a, 0]] * x[0] + r[[a, 1]] * x[1] + r[[a, 2]] * x[2] + t[[a]];
                }
                let z_ok = p[2] > Z_EPS;
                let z = if z_ok { p[2] } else { Z_EPS };
                let u = fx * p[0] / z + cx;
                let v = fy * p[1] / z + cy;
                grid[[0, i, j]] = u;
                grid[[1, i, j]] = v;
                cam[[0, i, j]] = p[0];
                cam[[1, i, j]] = p[1];
                cam[[2, i, j]] = z;
                let in_bounds = u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64;
                mask[[i, j]] = if z_ok && in_bounds { 1.0 } else { 0.0 };
            }
        }
        (grid, cam, mask)
    };

    let (grid, cam, mask) = compute(depth.value(), rotation.value(), translation.value());
    let dirs = std::rc::Rc::new(dirs);
    let dirs_b = dirs.clone();
    let grid_var = custom_op3(
        depth,
        rotation,
        translation,
        grid,
        move |g, d, r, _t| {
            let mut gd = Arr::zeros(IxDyn(&[h, w]));
            let mut gr = Arr::zeros(IxDyn(&[3, 3]));
            let mut gt = Arr::zeros(IxDyn(&[3]));
            for i in 0..h {
                for j in 0..w {
                    let dv = d[[i, j]];
                    let x = [
                        dv * dirs_b[[0, i, j]],
                        dv * dirs_b[[1, i, j]],
                        dv * dirs_b[[2, i, j]],
                    ];
                    let (px, py, pz) = (cam[[0, i, j]], cam[[1, i, j]], cam[[2, i, j]]);
                    let clamped = pz <= Z_EPS + f64::EPSILON && cam[[2, i, j]] == Z_EPS;
                    let (gu, gv) = (g[[0, i, j]], g[[1, i, j]]);
                    // d(u,v)/d(p): u = fx px / pz + cx, v = fy py / pz + cy.
                    let mut gp = [
                        gu * fx / pz,
                        gv * fy / pz,
                        -gu * fx * px / (pz * pz) - gv * fy * py / (pz * pz),
                    ];
                    if clamped {
                        gp[2] = 0.0;
                    }
                    // p = R x + t.
                    for a in 0..3 {
                        gt[[a]] += gp[a];
                        for b in 0..3 {
                            gr[[a, b]] += gp[a] * x[b];
                        }
                    }
                    // x = d * dir.
                    let rd = [
                        r[[0, 0]] * dirs_b[[0, i, j]] + r[[0, 1]] * dirs_b[[1, i, j]] + r[[0, 2]],
                        r[[1, 0]] * dirs_b[[0, i, j]] + r[[1, 1]] * dirs_b[[1, i, j]] + r[[1, 2]],
                        r[[2, 0]] * dirs_b[[0, i, j]] + r[[2, 1]] * dirs_b[[1, i, j]] + r[[2, 2]],
                    ];
                    gd[[i, j]] += gp[0] * rd[0] + gp[1] * rd[1] + gp[2] * rd[2];
                }
            }
            (gd, gr, gt)
        },
    );
    (grid_var, mask)
}

struct TapEntry {
    x0: usize,
    y0: usize,
    wx: f64,
    wy: f64,
    du_ok: bool,
    dv_ok: bool,
}

fn bilinear_taps(grid: &Arr, h: usize, w: usize, oh: usize, ow: usize) -> Vec<TapEntry> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let u = grid[[0, i, j]];
            let v = grid[[1, i, j]];
            let uc = u.clamp(0.0, (w - 1) as f64);
            let vc = v.clamp(0.0, (h - 1) as f64);
            let x0 = (uc.floor() as usize).min(w.saturating_sub(2));
            let y0 = (vc.floor() as usize).min(h.saturating_sub(2));
            out.push(TapEntry {
                x0,
                y0,
                wx: uc - x0 as f64,
                wy: vc - y0 as f64,
                du_ok: u > 0.0 && u < (w - 1) as f64,
                dv_ok: v > 0.0 && v < (h - 1) as f64,
            });
        }
    }
    out
}

/// Bilinear sampling of `[C, H, W]` at coordinates `grid` (`[2, H', W']`,
/// u/x first). Coordinates are clamped to the image; gradients flow to both
/// the image and the coordinates (zero where clamping saturates).
pub fn grid_sample(source: &Var, grid: &Var) -> Var {
    let (c, h, w) = {
        let s = source.shape();
        (s[0], s[1], s[2])
    };
    let gs = grid.shape().to_vec();
    assert_eq!(gs[0], 2, "grid_sample: grid must be [2, H, W]");
    let (oh, ow) = (gs[1], gs[2]);

    let entries = bilinear_taps(grid.value(), h, w, oh, ow);
    let mut value = Arr::zeros(IxDyn(&[c, oh, ow]));
    {
        let src = source.value();
        for (idx, e) in entries.iter().enumerate() {
            let (i, j) = (idx / ow, idx % ow);
            let (x1, y1) = (e.x0 + 1, e.y0 + 1);
            for ch in 0..c {
                let v00 = src[[ch, e.y0, e.x0]];
                let v01 = src[[ch, e.y0, x1]];
                let v10 = src[[ch, y1, e.x0]];
                let v11 = src[[ch, y1, x1]];
                value[[ch, i, j]] = (1.0 - e.wy) * ((1.0 - e.wx) * v00 + e.wx * v01)
                    + e.wy * ((1.0 - e.wx) * v10 + e.wx * v11);
            }
        }
    }

    custom_op2(source, Some(grid), value, move |g, src, grid| {
        let grid = grid.expect("grid value");
        let entries = bilinear_taps(grid, h, w, oh, ow);
        let mut gsrc = Arr::zeros(IxDyn(&[c, h, w]));
        let mut ggrid = Arr::zeros(IxDyn(&[2, oh, ow]));
        for (idx, e) in entries.iter().enumerate() {
            let (i, j) = (idx / ow, idx % ow);
            let (x1, y1) = (e.x0 + 1, e.y0 + 1);
            let mut du = 0.0;
            let mut dv = 0.0;
            for ch in 0..c {
                let gv = g[[ch, i, j]];
                gsrc[[ch, e.y0, e.x0]] += gv * (1.0 - e.wy) * (1.0 - e.wx);
                gsrc[[ch, e.y0, x1]] += gv * (1.0 - e.wy) * e.wx;
                gsrc[[ch, y1, e.x0]] += gv * e.wy * (1.0 - e.wx);
                gsrc[[ch, y1, x1]] += gv * e.wy * e.wx;
                let v00 = src[[ch, e.y0, e.x0]];
                let v01 = src[[ch, e.y0, x1]];
                let v10 = src[[ch, y1, e.x0]];
                let v11 = src[[ch, y1, x1]];
                du += gv * ((1.0 - e.wy) * (v01 - v00) + e.wy * (v11 - v10));
                dv += gv * ((1.0 - e.wx) * (v10 - v00) + e.wx * (v11 - v01));
            }
            ggrid[[0, i, j]] = if e.du_ok { du } else { 0.0 };
            ggrid[[1, i, j]] = if e.dv_ok { dv } else { 0.0 };
        }
        (gsrc, Some(ggrid))
    })
}
