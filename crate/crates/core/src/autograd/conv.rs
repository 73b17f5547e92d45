//! Direct 3D convolution kernels.
//!
//! All three kernels share one geometry: a cross-correlation from a
//! `[c_in, D, H, W]` input to a `[c_out, D', H', W']` output. The transposed
//! convolution is expressed through the same geometry with the roles of
//! input and output swapped.

use super::kernels::{mm_acc, mm_tn_acc};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Shape("convolution stride must be positive".into()));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * pad;
            if kernel[axis] > padded || kernel[axis] == 0 {
                return Err(Error::Shape(format!(
                    "kernel {:?} does not fit padded input {:?} (pad {pad})",
                    kernel, input
                )));
            }
            output[axis] = (padded - kernel[axis]) / stride + 1;
        }
        Ok(Self {
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// Geometry of the forward convolution whose input gradient is the
    /// transposed convolution of an `[c_in, input]` tensor.
    pub fn transposed(
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut full = [0; 3];
        for axis in 0..3 {
            let span = (input[axis] - 1) * stride + kernel[axis];
            if span <= 2 * pad {
                return Err(Error::Shape(format!(
                    "transposed convolution of {input:?} with kernel {kernel:?}, stride {stride}, pad {pad} is empty"
                )));
            }
            full[axis] = span - 2 * pad;
        }
        let geom = Self::new(c_out, c_in, full, kernel, stride, pad)?;
        debug_assert_eq!(geom.output, input);
        Ok(geom)
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.output.iter().product::<usize>()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel.iter().product::<usize>()
    }
}

/// Output indices `o` with `o * stride + k - pad` inside `[0, n_in)`.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if n_in + pad > k {
        ((n_in - 1 + pad - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Tap {
    weight: usize,
    oz: (usize, usize),
    oy: (usize, usize),
    ox: (usize, usize),
    k: [usize; 3],
}

/// Calls `f` once per (c_out, c_in, kernel offset) with the valid output box.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, &Tap)) {
    let [kd, kh, kw] = g.kernel;
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for kz in 0..kd {
                let oz = valid_range(id, od, kz, g.stride, g.pad);
                for ky in 0..kh {
                    let oy = valid_range(ih, oh, ky, g.stride, g.pad);
                    for kx in 0..kw {
                        let ox = valid_range(iw, ow, kx, g.stride, g.pad);
                        let weight = (((co * g.c_in + ci) * kd + kz) * kh + ky) * kw + kx;
                        f(
                            co,
                            ci,
                            &Tap {
                                weight,
                                oz,
                                oy,
                                ox,
                                k: [kz, ky, kx],
                            },
                        );
                    }
                }
            }
        }
    }
}

/// Visits matched (output row offset, input row offset, run length) triples.
#[inline]
fn for_each_row(g: &ConvGeom, co: usize, ci: usize, tap: &Tap, mut f: impl FnMut(usize, usize)) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let s = g.stride;
    for oz in tap.oz.0..tap.oz.1 {
        let iz = oz * s + tap.k[0] - g.pad;
        for oy in tap.oy.0..tap.oy.1 {
            let iy = oy * s + tap.k[1] - g.pad;
            let out_row = ((co * od + oz) * oh + oy) * ow;
            let in_row = ((ci * id + iz) * ih + iy) * iw;
            f(out_row, in_row);
        }
    }
}

/// Visits, for every (c_in, kernel offset) row of the unfolded matrix, the
/// matched (column offset, input offset, run length) spans. Consecutive
/// columns of a span step through the input by the stride.
fn for_each_unfold(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let k: usize = g.kernel.iter().product();
    let one = ConvGeom {
        c_out: 1,
        c_in: 1,
        ..*g
    };
    for ci in 0..g.c_in {
        for_each_tap(&one, |_, _, tap| {
            let (lo, hi) = tap.ox;
            if hi == lo {
                return;
            }
            let row = ci * k + tap.weight;
            let ix0 = lo * g.stride + tap.k[2] - g.pad;
            let plane = ci * g.input.iter().product::<usize>();
            for_each_row(&one, 0, 0, tap, |orow, irow| {
                f(row, orow + lo, plane + irow + ix0, hi - lo);
            });
        });
    }
}

fn unfold(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let v: usize = g.output.iter().product();
    let k: usize = g.kernel.iter().product();
    let mut col = vec![0.0; g.c_in * k * v];
    let s = g.stride;
    for_each_unfold(g, |row, o, i, n| {
        let dst = &mut col[row * v + o..row * v + o + n];
        if s == 1 {
            dst.copy_from_slice(&x[i..i + n]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = x[i + j * s];
            }
        }
    });
    col
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ` with lane-parallel partial sums.
fn mm_nt_lanes(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut lanes = [0.0; 8];
            let (ac, bc) = (arow.chunks_exact(8), brow.chunks_exact(8));
            let tail: f64 = ac
                .remainder()
                .iter()
                .zip(bc.remainder())
                .map(|(x, y)| x * y)
                .sum();
            for (x, y) in ac.zip(bc) {
                for l in 0..8 {
                    lanes[l] += x[l] * y[l];
                }
            }
            out[i * k + p] += lanes.iter().sum::<f64>() + tail;
        }
    }
}

/// Convolutions run as matrix products against the unfolded input
/// `[c_in·K, V_out]`, so the inner loops walk long contiguous rows.
pub(crate) fn forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let v = g.output.iter().product();
    let col = unfold(x, g);
    mm_acc(w, &col, out, g.c_out, g.weight_len() / g.c_out, v);
}

pub(crate) fn backward_input(gout: &[f64], w: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let v: usize = g.output.iter().product();
    let rows = g.weight_len() / g.c_out;
    let mut gcol = vec![0.0; rows * v];
    mm_tn_acc(w, gout, &mut gcol, g.c_out, rows, v);
    let s = g.stride;
    for_each_unfold(g, |row, o, i, n| {
        let src = &gcol[row * v + o..row * v + o + n];
        for (j, v) in src.iter().enumerate() {
            gx[i + j * s] += v;
        }
    });
}

pub(crate) fn backward_weight(gout: &[f64], x: &[f64], g: &ConvGeom, gw: &mut [f64]) {
    let v = g.output.iter().product();
    let col = unfold(x, g);
    mm_nt_lanes(gout, &col, gw, g.c_out, v, g.weight_len() / g.c_out);
}
