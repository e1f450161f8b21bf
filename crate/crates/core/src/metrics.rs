//! Depth-map error measures: absolute/squared relative error, RMSE, log10
//! error, threshold accuracies, and windowed SSIM, plus whole-test-set
//! evaluation with CSV/table reporting.

use thiserror::Error;

use crate::data::StereoSample;
use crate::model::{self, ModelError, ModelParams};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what} has a non-positive value {value} at pixel ({x}, {y})")]
    NonPositive {
        what: &'static str,
        value: f64,
        x: usize,
        y: usize,
    },
    #[error("prediction shape {pred:?} does not match ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("map {h}x{w} is smaller than the {win}x{win} ssim window")]
    TooSmall { h: usize, w: usize, win: usize },
    #[error("empty test set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One row of the evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub log10: f64,
    pub rmse: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub ssim: f64,
}

/// Accept a single-channel map as [H, W] or [1, H, W].
fn plane<'a>(t: &'a Tensor, other: &Tensor) -> Result<(usize, usize, &'a [f64])> {
    let s = t.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => {
            return Err(MetricsError::ShapeMismatch {
                pred: t.shape().to_vec(),
                gt: other.shape().to_vec(),
            })
        }
    };
    Ok((h, w, t.data()))
}

fn paired<'a>(
    pred: &'a Tensor,
    gt: &'a Tensor,
) -> Result<(usize, usize, &'a [f64], &'a [f64])> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    let (h, w, p) = plane(pred, gt)?;
    let (_, _, g) = plane(gt, pred)?;
    Ok((h, w, p, g))
}

fn check_positive(what: &'static str, data: &[f64], w: usize) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if *v <= 0.0 {
            return Err(MetricsError::NonPositive {
                what,
                value: *v,
                x: i % w,
                y: i / w,
            });
        }
    }
    Ok(())
}

/// mean(|p - g| / g)
pub fn abs_rel(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, w, p, g) = paired(pred, gt)?;
    check_positive("ground truth", g, w)?;
    Ok(p.iter().zip(g).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / p.len() as f64)
}

/// mean((p - g)^2 / g)
pub fn sq_rel(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, w, p, g) = paired(pred, gt)?;
    check_positive("ground truth", g, w)?;
    Ok(p.iter().zip(g).map(|(p, g)| (p - g) * (p - g) / g).sum::<f64>() / p.len() as f64)
}

/// sqrt(mean((p - g)^2))
pub fn rmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, w, p, g) = paired(pred, gt)?;
    check_positive("ground truth", g, w)?;
    Ok((p.iter().zip(g).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / p.len() as f64).sqrt())
}

/// mean(|log10 p - log10 g|)
pub fn log10_err(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, w, p, g) = paired(pred, gt)?;
    check_positive("ground truth", g, w)?;
    check_positive("prediction", p, w)?;
    Ok(p.iter()
        .zip(g)
        .map(|(p, g)| (p.log10() - g.log10()).abs())
        .sum::<f64>()
        / p.len() as f64)
}

/// Fraction of pixels with max(p/g, g/p) < 1.25^i  (i in 1..=3).
pub fn threshold_acc(pred: &Tensor, gt: &Tensor, i: u32) -> Result<f64> {
    assert!((1..=3).contains(&i), "threshold index must be 1..=3");
    let (_, w, p, g) = paired(pred, gt)?;
    check_positive("ground truth", g, w)?;
    check_positive("prediction", p, w)?;
    let bound = 1.25f64.powi(i as i32);
    let hits = p
        .iter()
        .zip(g)
        .filter(|(p, g)| (*p / *g).max(*g / *p) < bound)
        .count();
    Ok(hits as f64 / p.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Separable valid-placement gaussian filter: output is (h-10) x (w-10).
fn gauss_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wv) in win.iter().enumerate() {
                acc += wv * src[y * w + x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wv) in win.iter().enumerate() {
                acc += wv * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over valid 11x11 gaussian windows
/// (sigma 1.5, k1 0.01, k2 0.03, dynamic range 1).
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w, p, g) = paired(pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            h,
            w,
            win: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let pp: Vec<f64> = p.iter().map(|v| v * v).collect();
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let pg: Vec<f64> = p.iter().zip(g).map(|(a, b)| a * b).collect();

    let mu_p = gauss_valid(p, h, w, &win);
    let mu_g = gauss_valid(g, h, w, &win);
    let e_pp = gauss_valid(&pp, h, w, &win);
    let e_gg = gauss_valid(&gg, h, w, &win);
    let e_pg = gauss_valid(&pg, h, w, &win);

    let mut total = 0.0;
    for i in 0..mu_p.len() {
        let (mp, mg) = (mu_p[i], mu_g[i]);
        let var_p = e_pp[i] - mp * mp;
        let var_g = e_gg[i] - mg * mg;
        let cov = e_pg[i] - mp * mg;
        let s = ((2.0 * mp * mg + c1) * (2.0 * cov + c2))
            / ((mp * mp + mg * mg + c1) * (var_p + var_g + c2));
        total += s;
    }
    Ok(total / mu_p.len() as f64)
}

/// All eight measures for one prediction/ground-truth pair.
pub fn compute_sample(pred: &Tensor, gt: &Tensor) -> Result<DepthMetrics> {
    Ok(DepthMetrics {
        abs_rel: abs_rel(pred, gt)?,
        sq_rel: sq_rel(pred, gt)?,
        log10: log10_err(pred, gt)?,
        rmse: rmse(pred, gt)?,
        sigma1: threshold_acc(pred, gt, 1)?,
        sigma2: threshold_acc(pred, gt, 2)?,
        sigma3: threshold_acc(pred, gt, 3)?,
        ssim: ssim(pred, gt)?,
    })
}

fn sorted_mean(values: Vec<f64>) -> f64 {
    // summing in value order makes the average independent of sample order
    let mut v = values;
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.iter().sum::<f64>() / v.len() as f64
}

/// Uniform average of per-sample metrics; exactly permutation-invariant.
pub fn average(rows: &[DepthMetrics]) -> Result<DepthMetrics> {
    if rows.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(DepthMetrics {
        abs_rel: sorted_mean(rows.iter().map(|r| r.abs_rel).collect()),
        sq_rel: sorted_mean(rows.iter().map(|r| r.sq_rel).collect()),
        log10: sorted_mean(rows.iter().map(|r| r.log10).collect()),
        rmse: sorted_mean(rows.iter().map(|r| r.rmse).collect()),
        sigma1: sorted_mean(rows.iter().map(|r| r.sigma1).collect()),
        sigma2: sorted_mean(rows.iter().map(|r| r.sigma2).collect()),
        sigma3: sorted_mean(rows.iter().map(|r| r.sigma3).collect()),
        ssim: sorted_mean(rows.iter().map(|r| r.ssim).collect()),
    })
}

/// Run the model on every sample and average the per-sample metrics.
pub fn evaluate_model(params: &ModelParams, samples: &[StereoSample]) -> Result<DepthMetrics> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let left = s.left.insert_axis0();
        let right = s.right.insert_axis0();
        let clue = s.clue.insert_axis0();
        let clue_ref = params.config.clue_enabled.then_some(&clue);
        let pred = model::forward(params, &left, clue_ref, &right)?;
        let pred = Tensor::new(s.gt_depth.shape().to_vec(), pred.data().to_vec())?;
        rows.push(compute_sample(&pred, &s.gt_depth)?);
    }
    average(&rows)
}

pub const CSV_HEADER: &str = "abs_rel,sq_rel,log10,rmse,sigma1,sigma2,sigma3,ssim";

impl DepthMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.abs_rel,
            self.sq_rel,
            self.log10,
            self.rmse,
            self.sigma1,
            self.sigma2,
            self.sigma3,
            self.ssim
        )
    }

    /// Aligned two-line table in the standard column order.
    pub fn table(&self) -> String {
        let header = format!(
            "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "abs_rel", "sq_rel", "log10", "rmse", "sigma1", "sigma2", "sigma3", "ssim"
        );
        let row = format!(
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            self.abs_rel,
            self.sq_rel,
            self.log10,
            self.rmse,
            self.sigma1,
            self.sigma2,
            self.sigma3,
            self.ssim
        );
        format!("{header}\n{row}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn perfect_prediction_zeros_the_error_metrics() {
        let gt = t(vec![2], vec![0.5, 0.25]);
        // shape [2] is rejected; metrics want maps
        assert!(abs_rel(&gt, &gt).is_err());

        let gt = t(vec![1, 2, 2], vec![0.5, 0.25, 0.75, 1.0]);
        assert_eq!(abs_rel(&gt, &gt).unwrap(), 0.0);
        assert_eq!(sq_rel(&gt, &gt).unwrap(), 0.0);
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(log10_err(&gt, &gt).unwrap(), 0.0);
        for i in 1..=3 {
            assert_eq!(threshold_acc(&gt, &gt, i).unwrap(), 1.0);
        }
    }

    #[test]
    fn frozen_two_pixel_example() {
        // pred = [1, 2], gt = [2, 2]
        let pred = t(vec![1, 1, 2], vec![1.0, 2.0]);
        let gt = t(vec![1, 1, 2], vec![2.0, 2.0]);
        assert!((abs_rel(&pred, &gt).unwrap() - 0.25).abs() < 1e-15);
        assert!((sq_rel(&pred, &gt).unwrap() - 0.25).abs() < 1e-15);
        assert!((rmse(&pred, &gt).unwrap() - 0.7071067811865476).abs() < 1e-12);
        assert!((log10_err(&pred, &gt).unwrap() - 0.1505149978319906).abs() < 1e-12);
        assert!((threshold_acc(&pred, &gt, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log10_error_of_doubling_is_log10_two() {
        let gt = t(vec![1, 2, 2], vec![0.1, 0.35, 0.6, 0.92]);
        let pred = t(vec![1, 2, 2], gt.data().iter().map(|v| 2.0 * v).collect());
        assert!((log10_err(&pred, &gt).unwrap() - 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn threshold_boundary_is_strict() {
        let gt = t(vec![1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]);
        let factor = 1.25f64.powi(3) + 1e-9;
        let pred = t(vec![1, 2, 2], gt.data().iter().map(|v| factor * v).collect());
        assert_eq!(threshold_acc(&pred, &gt, 3).unwrap(), 0.0);
    }

    #[test]
    fn sigma_accuracies_are_nested() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 64;
            let gt = Tensor::random_uniform(vec![1, 8, 8], 0.05, 1.0, &mut rng);
            let pred = t(
                vec![1, 8, 8],
                (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
            );
            let s1 = threshold_acc(&pred, &gt, 1).unwrap();
            let s2 = threshold_acc(&pred, &gt, 2).unwrap();
            let s3 = threshold_acc(&pred, &gt, 3).unwrap();
            assert!(s1 <= s2 && s2 <= s3, "{s1} {s2} {s3}");
        }
    }

    #[test]
    fn relative_metrics_under_common_scaling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let gt = Tensor::random_uniform(vec![1, 8, 8], 0.1, 1.0, &mut rng);
        let pred = Tensor::random_uniform(vec![1, 8, 8], 0.1, 1.0, &mut rng);
        let k = 3.7;
        let gt_k = t(vec![1, 8, 8], gt.data().iter().map(|v| k * v).collect());
        let pred_k = t(vec![1, 8, 8], pred.data().iter().map(|v| k * v).collect());
        // abs_rel is scale-free; rmse and sq_rel scale linearly with k
        let a = abs_rel(&pred, &gt).unwrap();
        let ak = abs_rel(&pred_k, &gt_k).unwrap();
        assert!((a - ak).abs() < 1e-12);
        let r = rmse(&pred, &gt).unwrap();
        let rk = rmse(&pred_k, &gt_k).unwrap();
        assert!((rk - k * r).abs() < 1e-12);
        let s = sq_rel(&pred, &gt).unwrap();
        let sk = sq_rel(&pred_k, &gt_k).unwrap();
        assert!((sk - k * s).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_gt_is_rejected_with_coordinates() {
        let pred = t(vec![1, 2, 2], vec![0.5; 4]);
        let gt = t(vec![1, 2, 2], vec![0.5, 0.5, 0.0, 0.5]);
        match abs_rel(&pred, &gt) {
            Err(MetricsError::NonPositive { x, y, .. }) => {
                assert_eq!((x, y), (0, 1));
            }
            other => panic!("expected NonPositive, got {other:?}"),
        }
    }

    fn checkerboard(h: usize, w: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| ((i / w + i % w) % 2) as f64)
            .collect();
        t(vec![1, h, w], data)
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::random_uniform(vec![1, 16, 16], 0.0, 1.0, &mut rng);
        let y = Tensor::random_uniform(vec![1, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);

        let cb = checkerboard(16, 16);
        let inv = t(vec![1, 16, 16], cb.data().iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&cb, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_too_small_maps() {
        let x = Tensor::full(vec![1, 8, 8], 0.5);
        assert!(matches!(ssim(&x, &x), Err(MetricsError::TooSmall { .. })));
    }

    #[test]
    fn average_is_permutation_invariant() {
        let rows = vec![
            DepthMetrics {
                abs_rel: 0.1,
                sq_rel: 0.01,
                log10: 0.05,
                rmse: 0.2,
                sigma1: 0.7,
                sigma2: 0.8,
                sigma3: 0.9,
                ssim: 0.6,
            },
            DepthMetrics {
                abs_rel: 0.3,
                sq_rel: 0.07,
                log10: 0.02,
                rmse: 0.1,
                sigma1: 0.5,
                sigma2: 0.6,
                sigma3: 0.7,
                ssim: 0.95,
            },
            DepthMetrics {
                abs_rel: 0.17,
                sq_rel: 0.003,
                log10: 0.11,
                rmse: 0.33,
                sigma1: 0.2,
                sigma2: 0.4,
                sigma3: 0.5,
                ssim: 0.81,
            },
        ];
        let fwd = average(&rows).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(fwd, average(&rev).unwrap());
    }

    #[test]
    fn constant_predictor_aggregate_matches_naive_mean() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pred = Tensor::full(vec![1, 16, 16], 0.5);
        let gts: Vec<Tensor> = (0..4)
            .map(|_| Tensor::random_uniform(vec![1, 16, 16], 0.05, 1.0, &mut rng))
            .collect();
        let rows: Vec<DepthMetrics> = gts
            .iter()
            .map(|gt| compute_sample(&pred, gt).unwrap())
            .collect();
        let avg = average(&rows).unwrap();
        let naive = rows.iter().map(|r| r.abs_rel).sum::<f64>() / rows.len() as f64;
        assert!((avg.abs_rel - naive).abs() < 1e-10);
        let naive_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
        assert!((avg.ssim - naive_ssim).abs() < 1e-10);
    }

    #[test]
    fn csv_and_table_have_eight_columns() {
        let m = DepthMetrics {
            abs_rel: 0.218,
            sq_rel: 0.013,
            log10: 0.084,
            rmse: 0.037,
            sigma1: 0.736,
            sigma2: 0.880,
            sigma3: 0.935,
            ssim: 0.886,
        };
        assert_eq!(CSV_HEADER.split(',').count(), 8);
        assert_eq!(m.csv_row().split(',').count(), 8);
        let table = m.table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split_whitespace().count(), 8);
        assert_eq!(lines[1].split_whitespace().count(), 8);
    }
}
