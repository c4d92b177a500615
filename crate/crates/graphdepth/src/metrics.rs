//! Depth evaluation: the standard error/accuracy suite with per-image median
//! scaling and a configurable depth cap.

use crate::{Error, Result};
use ndarray::Array2;
use std::io::Write;

pub const DEFAULT_EVAL_MIN_DEPTH: f64 = 1e-3;
pub const DEFAULT_EVAL_MAX_DEPTH: f64 = 80.0;

/// One evaluation record. Deltas are percentages in [0, 100] and nest:
/// `delta1 <= delta2 <= delta3` (thresholds 1.25, 1.25^2, 1.25^3).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in depth values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rescale the prediction by `median(gt[valid]) / median(pred[valid])`,
/// resolving the global scale ambiguity of monocular prediction per image.
pub fn median_scale(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    valid: &Array2<f64>,
) -> Result<Array2<f64>> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::ShapeMismatch("median_scale: shapes differ".into()));
    }
    let mut pv: Vec<f64> = Vec::new();
    let mut gv: Vec<f64> = Vec::new();
    for ((p, g), m) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if *m != 0.0 {
            pv.push(*p);
            gv.push(*g);
        }
    }
    if pv.is_empty() {
        return Err(Error::InvalidArgument("median_scale: empty valid mask".into()));
    }
    let mp = median(&mut pv);
    let mg = median(&mut gv);
    if mp == 0.0 {
        return Err(Error::InvalidArgument(
            "median_scale: degenerate prediction with zero median".into(),
        ));
    }
    Ok(pred * (mg / mp))
}

/// Evaluation settings. `min_depth` doubles as the ground-truth validity
/// floor (sparse lidar maps encode missing pixels as 0).
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub min_depth: f64,
    pub max_depth: f64,
    pub median_scaling: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            min_depth: DEFAULT_EVAL_MIN_DEPTH,
            max_depth: DEFAULT_EVAL_MAX_DEPTH,
            median_scaling: true,
        }
    }
}

/// Evaluate a predicted depth map against ground truth.
///
/// Pixels with gt outside `(min_depth, max_depth)` are excluded; after
/// optional median scaling the prediction is clamped to the same range.
pub fn evaluate(pred: &Array2<f64>, gt: &Array2<f64>, opts: &EvalOptions) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "evaluate: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let valid = gt.mapv(|g| if g > opts.min_depth && g < opts.max_depth { 1.0 } else { 0.0 });
    let count = valid.iter().filter(|&&v| v != 0.0).count();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "evaluate: no ground-truth pixels inside the depth cap".into(),
        ));
    }
    let scaled = if opts.median_scaling {
        median_scale(pred, gt, &valid)?
    } else {
        pred.clone()
    };
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for ((p, g), m) in scaled.iter().zip(gt.iter()).zip(valid.iter()) {
        if *m == 0.0 {
            continue;
        }
        let p = p.clamp(opts.min_depth, opts.max_depth);
        let diff = g - p;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = g.ln() - p.ln();
        sq_log += dl * dl;
        let ratio = (g / p).max(p / g);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1;
        }
    }
    let n = count as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: 100.0 * d1 as f64 / n,
        delta2: 100.0 * d2 as f64 / n,
        delta3: 100.0 * d3 as f64 / n,
    })
}

/// Mean of per-image metrics, in input order.
pub fn aggregate(per_image: &[DepthMetrics]) -> DepthMetrics {
    let n = per_image.len().max(1) as f64;
    let mut sum = DepthMetrics::default();
    for m in per_image {
        sum.abs_rel += m.abs_rel;
        sum.sq_rel += m.sq_rel;
        sum.rmse += m.rmse;
        sum.rmse_log += m.rmse_log;
        sum.delta1 += m.delta1;
        sum.delta2 += m.delta2;
        sum.delta3 += m.delta3;
    }
    DepthMetrics {
        abs_rel: sum.abs_rel / n,
        sq_rel: sum.sq_rel / n,
        rmse: sum.rmse / n,
        rmse_log: sum.rmse_log / n,
        delta1: sum.delta1 / n,
        delta2: sum.delta2 / n,
        delta3: sum.delta3 / n,
    }
}

/// Write the metrics report: one record per image plus an `aggregate`
/// record, one `key=value` line per field, records separated by blank lines.
pub fn write_report<W: Write>(
    out: &mut W,
    records: &[(String, DepthMetrics)],
    aggregate: &DepthMetrics,
) -> std::io::Result<()> {
    for (id, m) in records {
        writeln!(out, "id={id}")?;
        for (name, value) in m.fields() {
            writeln!(out, "{name}={value:.17}")?;
        }
        writeln!(out)?;
    }
    writeln!(out, "id=aggregate")?;
    for (name, value) in aggregate.fields() {
        writeln!(out, "{name}={value:.17}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts_no_scaling() -> EvalOptions {
        EvalOptions { median_scaling: false, ..EvalOptions::default() }
    }

    #[test]
    fn median_scale_restores_doubled_prediction() {
        let gt = Array2::from_shape_vec((1, 3), vec![2.0, 4.0, 6.0]).unwrap();
        let pred = &gt * 2.0;
        let valid = Array2::from_elem((1, 3), 1.0);
        let scaled = median_scale(&pred, &gt, &valid).unwrap();
        for (a, b) in scaled.iter().zip(gt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = median_scale(&gt, &gt, &valid).unwrap();
        for (a, b) in same.iter().zip(gt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn median_scale_hand_case() {
        let pred = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let gt = Array2::from_shape_vec((1, 3), vec![2.0, 4.0, 8.0]).unwrap();
        let valid = Array2::from_elem((1, 3), 1.0);
        // Medians: pred 2, gt 4, scale 2.
        let scaled = median_scale(&pred, &gt, &valid).unwrap();
        assert_eq!(scaled.as_slice().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_median_prediction_rejected() {
        let pred = Array2::from_elem((1, 3), 0.0);
        let gt = Array2::from_shape_vec((1, 3), vec![2.0, 4.0, 8.0]).unwrap();
        let valid = Array2::from_elem((1, 3), 1.0);
        assert!(median_scale(&pred, &gt, &valid).is_err());
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let gt = Array2::from_shape_fn((4, 4), |(i, j)| 1.0 + i as f64 + 0.5 * j as f64);
        let m = evaluate(&gt, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(
            (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((m.delta1, m.delta2, m.delta3), (100.0, 100.0, 100.0));
    }

    #[test]
    fn single_pixel_case_matches_hand_evaluation() {
        // gt 10, pred 5, no scaling. Hand evaluation of every formula:
        // abs_rel |10-5|/10 = 0.5; sq_rel 25/10 = 2.5; rmse 5;
        // rmse_log ln 2; ratio max(2, 0.5) = 2 exceeds 1.25, 1.5625 and
        // 1.953125, so all three deltas are 0.
        let gt = Array2::from_elem((1, 1), 10.0);
        let pred = Array2::from_elem((1, 1), 5.0);
        let m = evaluate(&pred, &gt, &opts_no_scaling()).unwrap();
        assert!((m.abs_rel - 0.5).abs() < 1e-15);
        assert!((m.sq_rel - 2.5).abs() < 1e-15);
        assert!((m.rmse - 5.0).abs() < 1e-15);
        assert!((m.rmse_log - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        // A ratio between 1.25^2 and 1.25^3 exercises the intended nesting
        // pattern (0, 0, 100): gt 10, pred 5.5 gives ratio 1.8181...
        let pred = Array2::from_elem((1, 1), 5.5);
        let m = evaluate(&pred, &gt, &opts_no_scaling()).unwrap();
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 100.0));
    }

    #[test]
    fn depth_cap_excludes_pixels_and_can_empty_the_mask() {
        let gt = Array2::from_elem((1, 1), 90.0);
        let pred = Array2::from_elem((1, 1), 50.0);
        assert!(evaluate(&pred, &gt, &EvalOptions::default()).is_err());
    }

    #[test]
    fn scaling_absorbs_any_global_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Array2::from_shape_fn((8, 8), |_| rng.gen_range(1.0..70.0));
        let pred = Array2::from_shape_fn((8, 8), |_| rng.gen_range(1.0..70.0));
        let base = evaluate(&pred, &gt, &EvalOptions::default()).unwrap();
        for c in [0.1, 3.0, 40.0] {
            let m = evaluate(&(&pred * c), &gt, &EvalOptions::default()).unwrap();
            for ((_, a), (_, b)) in m.fields().iter().zip(base.fields().iter()) {
                assert!((a - b).abs() < 1e-9, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matches_brute_force_reference_on_random_maps() {
        // Independent reference: recompute every formula directly per pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.5..90.0));
            let pred = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.5..90.0));
            let opts = opts_no_scaling();
            let m = evaluate(&pred, &gt, &opts).unwrap();

            let mut vals: Vec<(f64, f64)> = Vec::new();
            for (p, g) in pred.iter().zip(gt.iter()) {
                if *g > opts.min_depth && *g < opts.max_depth {
                    vals.push((p.clamp(opts.min_depth, opts.max_depth), *g));
                }
            }
            let n = vals.len() as f64;
            let abs_rel: f64 = vals.iter().map(|(p, g)| (g - p).abs() / g).sum::<f64>() / n;
            let sq_rel: f64 = vals.iter().map(|(p, g)| (g - p) * (g - p) / g).sum::<f64>() / n;
            let rmse = (vals.iter().map(|(p, g)| (g - p) * (g - p)).sum::<f64>() / n).sqrt();
            let rmse_log =
                (vals.iter().map(|(p, g)| (g.ln() - p.ln()).powi(2)).sum::<f64>() / n).sqrt();
            let frac = |t: f64| {
                100.0
                    * vals
                        .iter()
                        .filter(|(p, g)| (g / p).max(p / g) < 1.25f64.powf(t))
                        .count() as f64
                    / n
            };
            assert!((m.abs_rel - abs_rel).abs() < 1e-9);
            assert!((m.sq_rel - sq_rel).abs() < 1e-9);
            assert!((m.rmse - rmse).abs() < 1e-9);
            assert!((m.rmse_log - rmse_log).abs() < 1e-9);
            assert!((m.delta1 - frac(1.0)).abs() < 1e-9);
            assert!((m.delta2 - frac(2.0)).abs() < 1e-9);
            assert!((m.delta3 - frac(3.0)).abs() < 1e-9);
            assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }
    }

    #[test]
    fn report_format_round_trips() {
        let m = DepthMetrics {
            abs_rel: 0.1,
            sq_rel: 0.2,
            rmse: 1.0,
            rmse_log: 0.3,
            delta1: 80.0,
            delta2: 90.0,
            delta3: 95.0,
        };
        let mut buf = Vec::new();
        write_report(&mut buf, &[("img0".into(), m)], &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("id=img0"));
        assert!(text.contains("id=aggregate"));
        assert!(text.lines().any(|l| l.starts_with("abs_rel=0.1")));
        assert!(text.lines().any(|l| l.starts_with("delta3=95")));
    }
}
