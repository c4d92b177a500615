//! Training objective: reconstruction, photometric reprojection (L1 + SSIM),
//! discriminative and curvature smoothness, and their combination across the
//! disparity pyramid.
//!
//! All per-pixel sums are realized as means so loss magnitudes stay
//! independent of resolution; the fixed 0.15/0.85 reprojection weights only
//! make sense on normalized terms.

use crate::autodiff::{Arr, Var};
use crate::geometry::{
    disp_to_depth_var, pose_to_transform_var, synthesize_view_var, CameraIntrinsics, PoseVector,
    DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH,
};
use crate::{Error, Result};
use ndarray::{Array2, Array3, IxDyn};

pub const PHOTOMETRIC_L1_WEIGHT: f64 = 0.15;
pub const PHOTOMETRIC_SSIM_WEIGHT: f64 = 0.85;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_BETA: f64 = 1e-3;

/// Loss terms of one pyramid scale.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScaleLosses {
    pub l_rec: f64,
    pub l_pl: f64,
    pub l_dis: f64,
    pub l_cvt: f64,
    pub l_smooth: f64,
    pub l_final: f64,
}

/// Full breakdown: per-scale terms plus their means. The identities
/// `l_smooth = alpha*l_dis + beta*l_cvt` and `l_final = l_pl + l_rec +
/// l_smooth` hold per scale and, by linearity, for the means.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_pl: f64,
    pub l_dis: f64,
    pub l_cvt: f64,
    pub l_smooth: f64,
    pub l_final: f64,
    pub per_scale: Vec<ScaleLosses>,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            (self.l_rec, "l_rec"),
            (self.l_pl, "l_pl"),
            (self.l_dis, "l_dis"),
            (self.l_cvt, "l_cvt"),
            (self.l_smooth, "l_smooth"),
            (self.l_final, "l_final"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, n)| n)
    }
}

fn mask_count(mask: Option<&Array2<f64>>, h: usize, w: usize) -> f64 {
    match mask {
        Some(m) => m.iter().filter(|&&v| v != 0.0).count() as f64,
        None => (h * w) as f64,
    }
}

fn apply_mask(map: &Var, mask: Option<&Array2<f64>>) -> Var {
    match mask {
        Some(m) => map.mul(&Var::constant(m.clone().into_dyn())),
        None => map.clone(),
    }
}

/// Mean absolute difference over (masked) pixels and channels. An empty mask
/// yields zero; the boolean flags that degenerate case so callers can warn.
pub fn reconstruction_loss(
    rec: &Array3<f64>,
    target: &Array3<f64>,
    mask: Option<&Array2<f64>>,
) -> Result<(f64, bool)> {
    let (v, empty) = reconstruction_loss_var(
        &Var::constant(rec.clone().into_dyn()),
        &Var::constant(target.clone().into_dyn()),
        mask,
    )?;
    Ok((v.scalar(), empty))
}

pub fn reconstruction_loss_var(
    rec: &Var,
    target: &Var,
    mask: Option<&Array2<f64>>,
) -> Result<(Var, bool)> {
    if rec.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction_loss: {:?} vs {:?}",
            rec.shape(),
            target.shape()
        )));
    }
    let (h, w) = (rec.shape()[1], rec.shape()[2]);
    let count = mask_count(mask, h, w);
    if count == 0.0 {
        return Ok((Var::scalar_const(0.0), true));
    }
    // Per-pixel L1 averaged over channels, then masked mean over pixels.
    let l1_map = rec.sub(target).abs().mean_axis0();
    let masked = apply_mask(&l1_map, mask);
    Ok((masked.sum_all().mul_scalar(1.0 / count), false))
}

/// Per-pixel structural similarity with 3x3 box statistics, reflect padding
/// and the usual stabilizers C1 = 0.01^2, C2 = 0.03^2. Output lies in
/// [-1, 1], with 1 for identical signals.
pub fn ssim_map(x: &Array3<f64>, y: &Array3<f64>) -> Result<Array3<f64>> {
    let out = ssim_map_var(
        &Var::constant(x.clone().into_dyn()),
        &Var::constant(y.clone().into_dyn()),
    )?;
    Ok(out.value().clone().into_dimensionality().expect("ssim map is 3-D"))
}

pub fn ssim_map_var(x: &Var, y: &Var) -> Result<Var> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mu_x = x.mean_pool3_reflect();
    let mu_y = y.mean_pool3_reflect();
    let mu_xy = mu_x.mul(&mu_y);
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let sigma_x = x.square().mean_pool3_reflect().sub(&mu_xx);
    let sigma_y = y.square().mean_pool3_reflect().sub(&mu_yy);
    let sigma_xy = x.mul(y).mean_pool3_reflect().sub(&mu_xy);
    let num = mu_xy
        .mul_scalar(2.0)
        .add_scalar(C1)
        .mul(&sigma_xy.mul_scalar(2.0).add_scalar(C2));
    let den = mu_xx
        .add(&mu_yy)
        .add_scalar(C1)
        .mul(&sigma_x.add(&sigma_y).add_scalar(C2));
    Ok(num.div(&den))
}

/// Per-pixel photometric error `0.15 * |rec - target| + 0.85 * (1 - SSIM)/2`,
/// channel-averaged, shape `[H, W]`.
pub fn photometric_error_map_var(rec: &Var, target: &Var) -> Result<Var> {
    let l1 = rec.sub(target).abs().mean_axis0();
    let ssim = ssim_map_var(rec, target)?.mean_axis0();
    let dssim = ssim.neg().add_scalar(1.0).mul_scalar(0.5);
    Ok(l1
        .mul_scalar(PHOTOMETRIC_L1_WEIGHT)
        .add(&dssim.mul_scalar(PHOTOMETRIC_SSIM_WEIGHT)))
}

/// Blended L1 + SSIM photometric loss over (masked) pixels.
pub fn photometric_loss(
    rec: &Array3<f64>,
    target: &Array3<f64>,
    mask: Option<&Array2<f64>>,
) -> Result<(f64, bool)> {
    let (v, empty) = photometric_loss_var(
        &Var::constant(rec.clone().into_dyn()),
        &Var::constant(target.clone().into_dyn()),
        mask,
    )?;
    Ok((v.scalar(), empty))
}

pub fn photometric_loss_var(
    rec: &Var,
    target: &Var,
    mask: Option<&Array2<f64>>,
) -> Result<(Var, bool)> {
    let (l1, ssim, empty) = photometric_terms(rec, target, mask)?;
    Ok((
        l1.mul_scalar(PHOTOMETRIC_L1_WEIGHT)
            .add(&ssim.mul_scalar(PHOTOMETRIC_SSIM_WEIGHT)),
        empty,
    ))
}

/// The unweighted photometric terms `(mean L1, mean (1-SSIM)/2)`; the loss is
/// `0.15 * L1 + 0.85 * SSIM_term`. Dropping the SSIM term must leave exactly
/// `0.15 * L1`, which is what the linearity test hook checks.
pub fn photometric_terms(
    rec: &Var,
    target: &Var,
    mask: Option<&Array2<f64>>,
) -> Result<(Var, Var, bool)> {
    if rec.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "photometric_loss: {:?} vs {:?}",
            rec.shape(),
            target.shape()
        )));
    }
    let (h, w) = (rec.shape()[1], rec.shape()[2]);
    let count = mask_count(mask, h, w);
    if count == 0.0 {
        return Ok((Var::scalar_const(0.0), Var::scalar_const(0.0), true));
    }
    let l1_map = rec.sub(target).abs().mean_axis0();
    let ssim = ssim_map_var(rec, target)?.mean_axis0();
    let dssim_map = ssim.neg().add_scalar(1.0).mul_scalar(0.5);
    let l1 = apply_mask(&l1_map, mask).sum_all().mul_scalar(1.0 / count);
    let dssim = apply_mask(&dssim_map, mask).sum_all().mul_scalar(1.0 / count);
    Ok((l1, dssim, false))
}

/// Forward differences along x via a fixed-kernel convolution (order 1 or 2).
fn diff_x(map: &Var, order: usize) -> Option<Var> {
    let w = map.shape()[2];
    if w < order + 1 {
        return None;
    }
    let kernel = match order {
        1 => vec![-1.0, 1.0],
        2 => vec![1.0, -2.0, 1.0],
        _ => unreachable!(),
    };
    let c = map.shape()[0];
    Some(per_channel_conv(map, c, &kernel, 1, order + 1))
}

fn diff_y(map: &Var, order: usize) -> Option<Var> {
    let h = map.shape()[1];
    if h < order + 1 {
        return None;
    }
    let kernel = match order {
        1 => vec![-1.0, 1.0],
        2 => vec![1.0, -2.0, 1.0],
        _ => unreachable!(),
    };
    let c = map.shape()[0];
    Some(per_channel_conv(map, c, &kernel, order + 1, 1))
}

/// Depthwise convolution with the same small kernel on every channel,
/// realized as a grouped kernel tensor (off-diagonal blocks zero).
fn per_channel_conv(map: &Var, c: usize, taps: &[f64], kh: usize, kw: usize) -> Var {
    let mut k = Arr::zeros(IxDyn(&[c, c, kh, kw]));
    for ch in 0..c {
        for (idx, &t) in taps.iter().enumerate() {
            let (i, j) = if kh == 1 { (0, idx) } else { (idx, 0) };
            k[[ch, ch, i, j]] = t;
        }
    }
    map.conv2d(&Var::constant(k), None, 1, 0)
}

/// Edge-weighted smoothness on mean-normalized disparity.
///
/// `l_dis` penalizes first differences of `d = disp / (mean(disp) + 1e-7)`
/// weighted by `exp(-lambda * |grad I|)` (channel-averaged image gradient
/// magnitude); `l_cvt` does the same with second differences. Each is the sum
/// of the per-direction means; `l_smooth = alpha * l_dis + beta * l_cvt`.
/// Normalizing by the disparity mean keeps the terms invariant to a global
/// disparity rescale.
pub fn smoothness_loss(
    disp: &Array2<f64>,
    image: &Array3<f64>,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<(f64, f64, f64)> {
    let (d, c, s) = smoothness_loss_var(
        &Var::constant(disp.clone().into_dyn()),
        image,
        lambda,
        alpha,
        beta,
    )?;
    Ok((d.scalar(), c.scalar(), s.scalar()))
}

pub fn smoothness_loss_var(
    disp: &Var,
    image: &Array3<f64>,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let dshape = disp.shape().to_vec();
    if dshape.len() != 2 {
        return Err(Error::ShapeMismatch("smoothness_loss: disp must be [H, W]".into()));
    }
    let (h, w) = (dshape[0], dshape[1]);
    if image.shape()[1] != h || image.shape()[2] != w {
        return Err(Error::ShapeMismatch(format!(
            "smoothness_loss: image {:?} does not match disparity {}x{}",
            image.shape(),
            h,
            w
        )));
    }
    let mean = disp.mean_all().add_scalar(1e-7);
    let d = disp.div(&mean.broadcast_to(&[h, w])).reshape(&[1, h, w]);
    let img = Var::constant(image.clone().into_dyn());

    let term = |order: usize| -> Var {
        let mut total = Var::scalar_const(0.0);
        for horizontal in [true, false] {
            let dd = if horizontal { diff_x(&d, order) } else { diff_y(&d, order) };
            let Some(dd) = dd else { continue };
            let di = if horizontal { diff_x(&img, order) } else { diff_y(&img, order) }
                .expect("image has same dims as disparity");
            // Weight map from the image is a constant: channel-mean |grad I|.
            let weight = di.abs().mean_axis0().value().mapv(|v| (-lambda * v).exp());
            let weighted = dd.abs().mean_axis0().mul(&Var::constant(weight));
            total = total.add(&weighted.mean_all());
        }
        total
    };

    let l_dis = term(1);
    let l_cvt = term(2);
    let l_smooth = l_dis.mul_scalar(alpha).add(&l_cvt.mul_scalar(beta));
    Ok((l_dis, l_cvt, l_smooth))
}

/// Tape-tracked total loss plus its plain-number breakdown.
pub struct TotalLossVars {
    pub l_final: Var,
    pub breakdown: LossBreakdown,
}

/// Settings for [`total_loss`]; defaults follow the training recipe.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            min_depth: DEFAULT_MIN_DEPTH,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

/// Full objective over a disparity pyramid, plain-value entry point.
///
/// Pose convention: both pose vectors describe temporally ordered motion,
/// `poses[0]` maps the earlier source frame to the target and is inverted
/// for warping, `poses[1]` maps the target to the later source frame and is
/// used directly.
pub fn total_loss(
    disps: &[Array2<f64>],
    target: &Array3<f64>,
    sources: &[Array3<f64>; 2],
    poses: &[PoseVector; 2],
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let disp_vars: Vec<Var> = disps
        .iter()
        .map(|d| Var::constant(d.clone().into_dyn()))
        .collect();
    let pose_vars: Vec<Var> = poses
        .iter()
        .map(|p| {
            let mut v = p.rotation.to_vec();
            v.extend_from_slice(&p.translation);
            Var::constant(Arr::from_shape_vec(IxDyn(&[6]), v).unwrap())
        })
        .collect();
    let out = total_loss_var(&disp_vars, target, sources, &[&pose_vars[0], &pose_vars[1]], k, cfg)?;
    Ok(out.breakdown)
}

/// Full objective on the tape.
///
/// Per scale: the disparity is nearest-upsampled to the input resolution and
/// converted to depth; one reconstruction per source frame is synthesized
/// (pose vectors are source->target motions, inverted inside); the
/// reprojection term takes the per-pixel minimum over the two sources to
/// cope with occlusions while the reconstruction term averages them; the
/// smoothness term runs at the disparity's native resolution against the
/// correspondingly downsampled target. Scale terms are averaged with equal
/// weight.
pub fn total_loss_var(
    disps: &[Var],
    target: &Array3<f64>,
    sources: &[Array3<f64>; 2],
    poses: &[&Var; 2],
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<TotalLossVars> {
    if disps.is_empty() {
        return Err(Error::InvalidArgument("total_loss: empty pyramid".into()));
    }
    let (h, w) = (target.shape()[1], target.shape()[2]);
    for s in sources {
        if s.shape() != target.shape() {
            return Err(Error::ShapeMismatch(
                "total_loss: source and target shapes differ".into(),
            ));
        }
    }
    let target_var = Var::constant(target.clone().into_dyn());
    // poses[0] is earlier->target (inverted into target->earlier), poses[1]
    // is target->later (already the warping direction).
    let transforms: Vec<(Var, Var)> = poses
        .iter()
        .zip([true, false])
        .map(|(p, invert)| pose_to_transform_var(p, invert))
        .collect();

    let mut per_scale = Vec::with_capacity(disps.len());
    let mut scale_finals: Vec<Var> = Vec::with_capacity(disps.len());
    for disp in disps {
        let ds = disp.shape().to_vec();
        if ds.len() != 2 || ds[0] == 0 || h % ds[0] != 0 || w % ds[1] != 0 || h / ds[0] != w / ds[1]
        {
            return Err(Error::ShapeMismatch(format!(
                "total_loss: disparity {:?} does not divide target {}x{} evenly",
                ds, h, w
            )));
        }
        let factor = h / ds[0];
        let disp_full = if factor == 1 {
            disp.clone()
        } else {
            disp.reshape(&[1, ds[0], ds[1]])
                .upsample_nearest(factor)
                .reshape(&[h, w])
        };
        let depth = disp_to_depth_var(&disp_full, cfg.min_depth, cfg.max_depth)?;

        // Both terms run unmasked: out-of-frame samples clamp to the source
        // border and pay real photometric cost, so invalidating pixels is
        // never free. Masking here would make an all-invalid warp a
        // zero-loss attractor.
        let mut rec_losses: Vec<Var> = Vec::with_capacity(2);
        let mut err_maps: Vec<Var> = Vec::with_capacity(2);
        for (src, (rot, t)) in sources.iter().zip(&transforms) {
            let src_var = Var::constant(src.clone().into_dyn());
            let (rec, _mask) = synthesize_view_var(&src_var, &depth, rot, t, k)?;
            let (rl, _) = reconstruction_loss_var(&rec, &target_var, None)?;
            rec_losses.push(rl);
            err_maps.push(photometric_error_map_var(&rec, &target_var)?);
        }
        let l_rec = rec_losses[0].add(&rec_losses[1]).mul_scalar(0.5);

        // Per-pixel minimum over the two sources copes with occlusion: a
        // region hidden in one source takes the other's error.
        let l_pl = err_maps[0].min2(&err_maps[1]).mean_all();

        let image_native = if factor == 1 {
            target.clone()
        } else {
            let t = Var::constant(target.clone().into_dyn()).avg_pool(factor);
            t.value().clone().into_dimensionality().expect("3-D image")
        };
        let (l_dis, l_cvt, l_smooth) =
            smoothness_loss_var(disp, &image_native, cfg.lambda, cfg.alpha, cfg.beta)?;

        let l_final = l_pl.add(&l_rec).add(&l_smooth);
        per_scale.push(ScaleLosses {
            l_rec: l_rec.scalar(),
            l_pl: l_pl.scalar(),
            l_dis: l_dis.scalar(),
            l_cvt: l_cvt.scalar(),
            l_smooth: l_smooth.scalar(),
            l_final: l_final.scalar(),
        });
        scale_finals.push(l_final);
    }

    let inv = 1.0 / scale_finals.len() as f64;
    let mut l_final = scale_finals[0].clone();
    for s in &scale_finals[1..] {
        l_final = l_final.add(s);
    }
    let l_final = l_final.mul_scalar(inv);

    let n = per_scale.len() as f64;
    let mean = |f: fn(&ScaleLosses) -> f64| per_scale.iter().map(f).sum::<f64>() / n;
    let breakdown = LossBreakdown {
        l_rec: mean(|s| s.l_rec),
        l_pl: mean(|s| s.l_pl),
        l_dis: mean(|s| s.l_dis),
        l_cvt: mean(|s| s.l_cvt),
        l_smooth: mean(|s| s.l_smooth),
        l_final: l_final.scalar(),
        per_scale,
    };
    Ok(TotalLossVars { l_final, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn reconstruction_loss_zero_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 3, 4, 4);
        let (v, _) = reconstruction_loss(&img, &img, None).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn reconstruction_loss_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = rand_image(&mut rng, 3, 4, 4);
        let rec = &target + 0.5;
        let (v, _) = reconstruction_loss(&rec, &target, None).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_matches_hand_sum_on_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 2, 2, 2);
        let b = rand_image(&mut rng, 2, 2, 2);
        let mut hand = 0.0;
        for v in (&a - &b).iter() {
            hand += v.abs();
        }
        hand /= 8.0;
        let (v, _) = reconstruction_loss(&a, &b, None).unwrap();
        assert!((v - hand).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_empty_mask_reports_warning() {
        let img = Array3::zeros((1, 2, 2));
        let mask = Array2::zeros((2, 2));
        let (v, empty) = reconstruction_loss(&img, &img, Some(&mask)).unwrap();
        assert_eq!(v, 0.0);
        assert!(empty);
    }

    #[test]
    fn ssim_of_identical_signals_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_image(&mut rng, 2, 6, 6);
        let m = ssim_map(&x, &x).unwrap();
        for v in m.iter() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_constant_offset_matches_closed_form() {
        // Constant images: variances vanish, so
        // SSIM = (2ab + C1) C2 / ((a^2 + b^2 + C1) C2).
        let a = 0.4;
        let b = 0.6;
        let x = Array3::from_elem((1, 5, 5), a);
        let y = Array3::from_elem((1, 5, 5), b);
        let want = (2.0 * a * b + 1e-4) / (a * a + b * b + 1e-4);
        let m = ssim_map(&x, &y).unwrap();
        for v in m.iter() {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_image(&mut rng, 1, 6, 6);
        let y = rand_image(&mut rng, 1, 6, 6);
        let xy = ssim_map(&x, &y).unwrap();
        let yx = ssim_map(&y, &x).unwrap();
        for (a, b) in xy.iter().zip(yx.iter()) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a >= -1.0 - 1e-12 && *a <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn photometric_loss_zero_for_identical_and_weights_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_image(&mut rng, 3, 6, 6);
        let (v, _) = photometric_loss(&t, &t, None).unwrap();
        assert!(v.abs() < 1e-12);

        let rec = rand_image(&mut rng, 3, 6, 6);
        let (l1, ssim_term, _) = photometric_terms(
            &Var::constant(rec.clone().into_dyn()),
            &Var::constant(t.clone().into_dyn()),
            None,
        )
        .unwrap();
        let (full, _) = photometric_loss(&rec, &t, None).unwrap();
        // Weights are exactly 0.15 / 0.85: zeroing the SSIM term leaves
        // exactly 0.15 * L1.
        assert!((full - (0.15 * l1.scalar() + 0.85 * ssim_term.scalar())).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_for_constant_disparity() {
        let disp = Array2::from_elem((6, 6), 0.37);
        let img = Array3::from_elem((3, 6, 6), 0.5);
        let (d, c, s) = smoothness_loss(&disp, &img, 0.5, 1e-3, 1e-3).unwrap();
        assert!(d.abs() < 1e-12 && c.abs() < 1e-12 && s.abs() < 1e-12);
    }

    #[test]
    fn smoothness_linear_ramp_matches_hand_computation() {
        // 1x8 row with mean 1 so normalization is (numerically) the identity;
        // first differences are the slope everywhere, second differences 0.
        let slope = 0.02;
        let w = 8;
        let disp = Array2::from_shape_fn((1, w), |(_, j)| 1.0 + slope * (j as f64 - 3.5));
        let img = Array3::from_elem((1, 1, w), 0.5);
        let (d, c, _) = smoothness_loss(&disp, &img, 0.5, 1e-3, 1e-3).unwrap();
        // Hand oracle: d_j = disp_j / (1 + 1e-7); |diff| = slope / (1 + 1e-7).
        let want = slope / (1.0 + 1e-7);
        assert!((d - want).abs() < 1e-9, "{d} vs {want}");
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn stronger_image_edges_decrease_l_dis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let disp = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.2..0.8));
        let flat = Array3::from_elem((1, 6, 6), 0.5);
        let edgy = Array3::from_shape_fn((1, 6, 6), |(_, _, j)| if j % 2 == 0 { 0.0 } else { 1.0 });
        let (d_flat, _, _) = smoothness_loss(&disp, &flat, 0.5, 1e-3, 1e-3).unwrap();
        let (d_edgy, _, _) = smoothness_loss(&disp, &edgy, 0.5, 1e-3, 1e-3).unwrap();
        assert!(d_edgy < d_flat);
    }

    #[test]
    fn smoothness_invariant_to_disparity_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let disp = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.3..0.9));
        let img = rand_image(&mut rng, 3, 6, 6);
        let (d0, c0, _) = smoothness_loss(&disp, &img, 0.5, 1e-3, 1e-3).unwrap();
        for scale in [0.5, 2.0, 10.0] {
            let scaled = &disp * scale;
            let (d, c, _) = smoothness_loss(&scaled, &img, 0.5, 1e-3, 1e-3).unwrap();
            assert!((d - d0).abs() < 1e-6, "scale {scale}: {d} vs {d0}");
            assert!((c - c0).abs() < 1e-6);
        }
    }

    fn toy_k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 20.0, fy: 20.0, cx: 7.5, cy: 7.5 }
    }

    fn pyramid_for(h: usize, w: usize, value: f64) -> Vec<Array2<f64>> {
        vec![
            Array2::from_elem((h / 16, w / 16), value),
            Array2::from_elem((h / 8, w / 8), value),
            Array2::from_elem((h / 4, w / 4), value),
            Array2::from_elem((h / 2, w / 2), value),
        ]
    }

    #[test]
    fn perfect_reconstruction_with_constant_disparity_gives_zero() {
        // Zero motion: every reconstruction equals the target regardless of
        // depth; constant disparity kills the smoothness terms.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_image(&mut rng, 3, 16, 16);
        let sources = [t.clone(), t.clone()];
        let poses = [PoseVector::zero(), PoseVector::zero()];
        let disps = pyramid_for(16, 16, 0.3);
        let br = total_loss(&disps, &t, &sources, &poses, &toy_k(), &LossConfig::default()).unwrap();
        assert!(br.l_final.abs() < 1e-9, "l_final = {}", br.l_final);
    }

    #[test]
    fn breakdown_identities_hold_per_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = rand_image(&mut rng, 3, 16, 16);
        let s0 = rand_image(&mut rng, 3, 16, 16);
        let s1 = rand_image(&mut rng, 3, 16, 16);
        let poses = [
            PoseVector { rotation: [0.01, 0.0, -0.01], translation: [0.05, 0.0, 0.02] },
            PoseVector { rotation: [-0.01, 0.01, 0.0], translation: [-0.05, 0.01, 0.0] },
        ];
        let disps: Vec<Array2<f64>> = vec![
            Array2::from_shape_fn((1, 1), |_| rng.gen_range(0.2..0.8)),
            Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.2..0.8)),
            Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.2..0.8)),
            Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.2..0.8)),
        ];
        let cfg = LossConfig::default();
        let br = total_loss(&disps, &t, &[s0, s1], &poses, &toy_k(), &cfg).unwrap();
        for s in &br.per_scale {
            assert!((s.l_smooth - (cfg.alpha * s.l_dis + cfg.beta * s.l_cvt)).abs() < 1e-9);
            assert!((s.l_final - (s.l_pl + s.l_rec + s.l_smooth)).abs() < 1e-9);
        }
        assert!((br.l_smooth - (cfg.alpha * br.l_dis + cfg.beta * br.l_cvt)).abs() < 1e-9);
        assert!((br.l_final - (br.l_pl + br.l_rec + br.l_smooth)).abs() < 1e-9);
        assert!(br.l_final.is_finite() && br.l_final >= 0.0);
    }

    #[test]
    fn min_reprojection_never_exceeds_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = rand_image(&mut rng, 3, 16, 16);
        // One source matches the target, the other has a block of noise over
        // it; the per-pixel min must not exceed the mean of both errors.
        let clean = t.clone();
        let mut occluded = t.clone();
        for c in 0..3 {
            for i in 4..10 {
                for j in 4..10 {
                    occluded[[c, i, j]] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let e0 = photometric_error_map_var(
            &Var::constant(clean.clone().into_dyn()),
            &Var::constant(t.clone().into_dyn()),
        )
        .unwrap();
        let e1 = photometric_error_map_var(
            &Var::constant(occluded.clone().into_dyn()),
            &Var::constant(t.clone().into_dyn()),
        )
        .unwrap();
        let min_mean = e0.min2(&e1).mean_all().scalar();
        let mean_mean = e0.add(&e1).mul_scalar(0.5).mean_all().scalar();
        assert!(min_mean <= mean_mean + 1e-12);
    }

    #[test]
    fn deterministic_reevaluation_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = rand_image(&mut rng, 3, 16, 16);
        let s0 = rand_image(&mut rng, 3, 16, 16);
        let s1 = rand_image(&mut rng, 3, 16, 16);
        let poses = [
            PoseVector { rotation: [0.0; 3], translation: [0.1, 0.0, 0.0] },
            PoseVector { rotation: [0.0; 3], translation: [-0.1, 0.0, 0.0] },
        ];
        let disps = pyramid_for(16, 16, 0.4);
        let cfg = LossConfig::default();
        let a = total_loss(&disps, &t, &[s0.clone(), s1.clone()], &poses, &toy_k(), &cfg).unwrap();
        let b = total_loss(&disps, &t, &[s0, s1], &poses, &toy_k(), &cfg).unwrap();
        assert_eq!(a.l_final.to_bits(), b.l_final.to_bits());
        assert_eq!(a.l_pl.to_bits(), b.l_pl.to_bits());
    }

    #[test]
    fn total_loss_gradient_wrt_disparity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = rand_image(&mut rng, 2, 16, 16);
        let s0 = rand_image(&mut rng, 2, 16, 16);
        let s1 = rand_image(&mut rng, 2, 16, 16);
        let poses = [
            PoseVector { rotation: [0.005, -0.004, 0.006], translation: [0.08, 0.02, 0.03] },
            PoseVector { rotation: [-0.006, 0.005, -0.004], translation: [-0.07, -0.01, 0.02] },
        ];
        let k = CameraIntrinsics { fx: 30.0, fy: 30.0, cx: 7.5, cy: 7.5 };
        let cfg = LossConfig::default();
        let disps0: Vec<Array2<f64>> = vec![
            Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.3..0.7)),
            Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.3..0.7)),
        ];
        let pose_arrs: Vec<Arr> = poses
            .iter()
            .map(|p| {
                let mut v = p.rotation.to_vec();
                v.extend_from_slice(&p.translation);
                Arr::from_shape_vec(IxDyn(&[6]), v).unwrap()
            })
            .collect();

        let eval = |disps: &[Array2<f64>], tape: Option<&Tape>| -> (f64, Option<Vec<Arr>>) {
            let dvars: Vec<Var> = disps
                .iter()
                .map(|d| match tape {
                    Some(t) => t.leaf(d.clone().into_dyn()),
                    None => Var::constant(d.clone().into_dyn()),
                })
                .collect();
            let p0 = Var::constant(pose_arrs[0].clone());
            let p1 = Var::constant(pose_arrs[1].clone());
            let out = total_loss_var(&dvars, &t, &[s0.clone(), s1.clone()], &[&p0, &p1], &k, &cfg)
                .unwrap();
            let v = out.l_final.scalar();
            let g = tape.map(|tp| {
                let gr = tp.backward(&out.l_final);
                dvars
                    .iter()
                    .map(|dv| {
                        gr.wrt(dv)
                            .cloned()
                            .unwrap_or_else(|| Arr::zeros(dv.value().raw_dim()))
                    })
                    .collect()
            });
            (v, g)
        };

        let tape = Tape::new();
        let (_, grads) = eval(&disps0, Some(&tape));
        let grads = grads.unwrap();
        let eps = 1e-6;
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        for level in 0..disps0.len() {
            for _ in 0..4 {
                let i = rng2.gen_range(0..disps0[level].nrows());
                let j = rng2.gen_range(0..disps0[level].ncols());
                let mut p = disps0.clone();
                let mut m = disps0.clone();
                p[level][[i, j]] += eps;
                m[level][[i, j]] -= eps;
                let num = (eval(&p, None).0 - eval(&m, None).0) / (2.0 * eps);
                let a = grads[level][[i, j]];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-9);
                assert!(rel < 1e-3, "level {level} ({i},{j}): {a} vs {num} rel {rel}");
            }
        }
    }
}
