//! Rendering of disparity panels and depth files for inspection.

use crate::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Anchor points of the magma colormap (dark purple to light yellow),
/// linearly interpolated.
const MAGMA_ANCHORS: [[f64; 3]; 17] = [
    [0.001462, 0.000466, 0.013866],
    [0.043830, 0.033830, 0.141886],
    [0.123833, 0.067295, 0.295879],
    [0.232077, 0.059889, 0.437695],
    [0.341482, 0.080564, 0.492631],
    [0.445163, 0.122724, 0.506901],
    [0.550287, 0.161158, 0.505719],
    [0.658483, 0.196027, 0.490253],
    [0.767398, 0.233705, 0.457755],
    [0.868793, 0.287728, 0.409303],
    [0.944006, 0.377643, 0.365136],
    [0.981895, 0.490357, 0.357777],
    [0.994738, 0.599970, 0.433898],
    [0.996580, 0.707866, 0.537396],
    [0.992440, 0.815647, 0.675911],
    [0.987053, 0.926106, 0.844904],
    [0.987053, 0.991438, 0.749504],
];

/// Colormap lookup for a name; only "magma" is available.
pub fn colormap(name: &str) -> Result<fn(f64) -> [u8; 3]> {
    match name {
        "magma" => Ok(magma),
        other => Err(Error::InvalidArgument(format!("unknown colormap {other:?}"))),
    }
}

pub fn magma(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (MAGMA_ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(MAGMA_ANCHORS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = MAGMA_ANCHORS[i][c] * (1.0 - f) + MAGMA_ANCHORS[i + 1][c] * f;
        out[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Value below which a fraction `p` (in [0, 1]) of the data lies (nearest
/// rank, deterministic).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let rank = ((p.clamp(0.0, 1.0)) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Write an 8-bit colormapped disparity panel, normalized per image by its
/// 95th percentile.
pub fn save_disparity_panel(path: &Path, disp: &Array2<f64>, map: fn(f64) -> [u8; 3]) -> Result<()> {
    let (h, w) = disp.dim();
    let values: Vec<f64> = disp.iter().copied().collect();
    let hi = percentile(&values, 0.95).max(1e-12);
    let mut img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let t = (disp[[y as usize, x as usize]] / hi).clamp(0.0, 1.0);
        p.0 = map(t);
    }
    img.save(path)
        .map_err(|e| Error::Dataset(format!("writing {}: {e}", path.display())))
}

/// Bilinear resize of a 2-D map.
pub fn resize_bilinear_2d(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    Array2::from_shape_fn((height, width), |(i, j)| {
        let v = (i as f64 + 0.5) * sh as f64 / height as f64 - 0.5;
        let u = (j as f64 + 0.5) * sw as f64 / width as f64 - 0.5;
        let vc = v.clamp(0.0, (sh - 1) as f64);
        let uc = u.clamp(0.0, (sw - 1) as f64);
        let y0 = (vc.floor() as usize).min(sh.saturating_sub(2));
        let x0 = (uc.floor() as usize).min(sw.saturating_sub(2));
        let (wy, wx) = (vc - y0 as f64, uc - x0 as f64);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        (1.0 - wy) * ((1.0 - wx) * src[[y0, x0]] + wx * src[[y0, x1]])
            + wy * ((1.0 - wx) * src[[y1, x0]] + wx * src[[y1, x1]])
    })
}

/// Bilinear resize of a channels-first image.
pub fn resize_bilinear_3d(src: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let c = src.shape()[0];
    let mut out = Array3::zeros((c, height, width));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_bilinear_2d(&plane, height, width));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magma_endpoints_and_monotone_lightness() {
        let lo = magma(0.0);
        let hi = magma(1.0);
        assert!(lo.iter().map(|&v| v as u32).sum::<u32>() < 64);
        assert!(hi.iter().map(|&v| v as u32).sum::<u32>() > 600);
        assert!(colormap("magma").is_ok());
        assert!(colormap("jet").is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(percentile(&vals, 0.95), 95.0);
        assert_eq!(percentile(&vals, 0.0), 1.0);
        assert_eq!(percentile(&vals, 1.0), 100.0);
    }

    #[test]
    fn constant_disparity_renders_uniform_panel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let disp = Array2::from_elem((8, 8), 0.4);
        save_disparity_panel(&path, &disp, magma).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let first = img.get_pixel(0, 0);
        for p in img.pixels() {
            assert_eq!(p, first);
        }
    }

    #[test]
    fn resize_preserves_constants_and_interpolates() {
        let src = Array2::from_elem((4, 4), 0.7);
        let up = resize_bilinear_2d(&src, 8, 8);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let ramp = Array2::from_shape_fn((1, 4), |(_, j)| j as f64);
        let wide = resize_bilinear_2d(&ramp, 1, 8);
        for j in 1..8 {
            assert!(wide[[0, j]] >= wide[[0, j - 1]]);
        }
    }
}
