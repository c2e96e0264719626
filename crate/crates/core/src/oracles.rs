//! Independent loop-based reference computations for tests.

use crate::tensor::{Init, Shape, Tensor};

pub fn rand(shape: Shape, seed: u64) -> Tensor {
    Tensor::new(shape, Init::Normal { seed, std: 1.0 }).unwrap()
}

/// Direct nested-loop oracle: zero-padded depthwise 3x3 then pointwise.
pub fn sepconv_oracle(x: &Tensor, dw: &Tensor, pw: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.height() as isize, s.width() as isize);
    let mut mid = Tensor::zeros(s);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (iy, ix) = (y + dy, xx + dx);
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += dw.at(c, 0, (dy + 1) as usize, (dx + 1) as usize)
                                    * x.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    mid.set(b, c, y as usize, xx as usize, acc);
                }
            }
        }
    }
    let cout = pw.shape().batch();
    let mut out = Tensor::zeros(s.with_channels(cout));
    for b in 0..s.batch() {
        for o in 0..cout {
            for y in 0..s.height() {
                for xx in 0..s.width() {
                    let v: f64 = (0..s.channels()).map(|c| pw.at(o, c, 0, 0) * mid.at(b, c, y, xx)).sum();
                    out.set(b, o, y, xx, v);
                }
            }
        }
    }
    out
}

pub fn bilinear_oracle(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.batch(), s.channels(), 2 * s.height(), 2 * s.width()));
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        (lo, (lo + 1).min(n - 1), src - lo as f64)
    };
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            for oy in 0..2 * s.height() {
                for ox in 0..2 * s.width() {
                    let (y0, y1, fy) = coord(oy, s.height());
                    let (x0, x1, fx) = coord(ox, s.width());
                    let v = x.at(b, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + x.at(b, c, y0, x1) * (1.0 - fy) * fx
                        + x.at(b, c, y1, x0) * fy * (1.0 - fx)
                        + x.at(b, c, y1, x1) * fy * fx;
                    out.set(b, c, oy, ox, v);
                }
            }
        }
    }
    out
}

/// Inference batch norm with given statistics, then ReLU, by direct loops.
pub fn bn_relu_oracle(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            for y in 0..s.height() {
                for xx in 0..s.width() {
                    let v = (x.at(b, c, y, xx) - mean[c]) / (var[c] + eps).sqrt() * gamma[c] + beta[c];
                    out.set(b, c, y, xx, v.max(0.0));
                }
            }
        }
    }
    out
}
