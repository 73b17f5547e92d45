//! Reconstruction quality metrics on volumes.
//!
//! All functions take tensors whose trailing three axes are spatial
//! (`[d, h, w]` or `[1, d, h, w]`).

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(pred: &Tensor, gt: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes(what, pred.shape(), gt.shape()));
    }
    Ok(())
}

fn spatial(t: &Tensor) -> Result<[usize; 3]> {
    let s = t.shape();
    match s.len() {
        3 => Ok([s[0], s[1], s[2]]),
        4 if s[0] == 1 => Ok([s[1], s[2], s[3]]),
        _ => Err(Error::Shape(format!(
            "expected a volume [d,h,w] or [1,d,h,w], got {s:?}"
        ))),
    }
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "mse")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// `10·log10(max_val² / MSE)` in dB; `f64::INFINITY` when the volumes match.
pub fn psnr(pred: &Tensor, gt: &Tensor, max_val: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// RMSE divided by the ground-truth intensity range.
pub fn nrmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let m = mse(pred, gt)?;
    let (lo, hi) = gt
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::DegenerateRange);
    }
    Ok(m.sqrt() / range)
}

/// Sliding sums of width `w` along one axis, keeping only full windows.
fn box_axis(src: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - w + 1;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let base = (a * dims[1] + b) * dims[2] + c;
                out.push((0..w).map(|k| src[base + k * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn box_sum(src: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let (a, d) = box_axis(src, dims, 2, w);
    let (b, d) = box_axis(&a, d, 1, w);
    box_axis(&b, d, 0, w).0
}

/// Mean structural similarity over all `window³` boxes (stride 1, no padding)
/// with uniform weights and population statistics.
pub fn ssim3d(pred: &Tensor, gt: &Tensor, window: usize, dynamic_range: f64) -> Result<f64> {
    same_shape(pred, gt, "ssim3d")?;
    let dims = spatial(pred)?;
    if window == 0 || dims.iter().any(|&d| d < window) {
        return Err(Error::Shape(format!(
            "volume {dims:?} is smaller than the {window}³ SSIM window"
        )));
    }
    let (x, y) = (pred.data(), gt.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let [sx, sy, sxx, syy, sxy] = [x, y, &xx, &yy, &xy].map(|v| box_sum(v, dims, window));

    let n = (window * window * window) as f64;
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = sxx[i] / n - mx * mx;
            let vy = syy[i] / n - my * my;
            let cov = sxy[i] / n - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / sx.len() as f64)
}

pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    ssim3d(pred, gt, SSIM_WINDOW, 1.0)
}

pub(crate) mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value '{t}'"))),
        }
    }
}

/// Mean metrics over a set of (prediction, ground truth) pairs. A PSNR of
/// `inf` (serialized as the string `"inf"`) marks an exact reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
    ) -> Result<Self> {
        let (mut p, mut s, mut r, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (pred, gt) in pairs {
            p += psnr(pred, gt, 1.0)?;
            s += ssim(pred, gt)?;
            r += nrmse(pred, gt)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let k = n as f64;
        Ok(Self {
            psnr: p / k,
            ssim: s / k,
            nrmse: r / k,
            n_samples: n,
        })
    }

    /// Averages per-sample reports weighted by sample count.
    pub fn combine(reports: &[MetricReport]) -> Result<Self> {
        let n: usize = reports.iter().map(|r| r.n_samples).sum();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let avg = |f: fn(&MetricReport) -> f64| {
            reports
                .iter()
                .map(|r| f(r) * r.n_samples as f64)
                .sum::<f64>()
                / n as f64
        };
        Ok(Self {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            nrmse: avg(|r| r.nrmse),
            n_samples: n,
        })
    }
}
