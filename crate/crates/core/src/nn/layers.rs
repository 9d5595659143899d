//! Pooling, broadcasting, pixel shuffle and batch normalization.

use crate::nn::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub(crate) fn dims4<T: Real>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected N×C×H×W, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Rearrange `N×(C·r²)×H×W` into `N×C×(H·r)×(W·r)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, cr, h, w) = dims4(x);
    assert_eq!(cr % (r * r), 0, "pixel shuffle needs channels divisible by r²");
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            od[((b * c + ci) * h * r + y * r + i) * w * r + xx * r + j] =
                                xd[((b * cr + src_c) * h + y) * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, hr, wr) = dims4(x);
    let (h, w) = (hr / r, wr / r);
    let cr = c * r * r;
    let mut out = Tensor::zeros(&[n, cr, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            od[((b * cr + dst_c) * h + y) * w + xx] =
                                xd[((b * c + ci) * hr + y * r + i) * wr + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batch-norm mode: per-batch statistics or frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    /// Global average pooling to `N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data).unwrap();
        self.push(out, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                plane.fill(gv * inv);
            }
            vec![Some(dx)]
        })
    }

    /// `x * s` with `s` of shape `N×C×1×1` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(s).shape(), &[n, c, 1, 1], "mul_channel scale shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        for (plane, &sv) in out.data_mut().chunks_mut(hw).zip(self.value(s).data()) {
            plane.iter_mut().for_each(|v| *v = *v * sv);
        }
        self.push(out, &[x, s], move |g, p, _| {
            let mut dx = g.clone();
            for (plane, &sv) in dx.data_mut().chunks_mut(hw).zip(p[1].data()) {
                plane.iter_mut().for_each(|v| *v = *v * sv);
            }
            let ds: Vec<T> = g
                .data()
                .chunks(hw)
                .zip(p[0].data().chunks(hw))
                .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                .collect();
            vec![Some(dx), Some(Tensor::new(&[n, c, 1, 1], ds).unwrap())]
        })
    }

    /// `x + s` with `s` of shape `N×C×1×1` broadcast over space.
    pub fn add_channel(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(s).shape(), &[n, c, 1, 1], "add_channel shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        for (plane, &sv) in out.data_mut().chunks_mut(hw).zip(self.value(s).data()) {
            plane.iter_mut().for_each(|v| *v = *v + sv);
        }
        self.push(out, &[x, s], move |g, _, _| {
            let ds: Vec<T> = g.data().chunks(hw).map(|gp| gp.iter().copied().sum()).collect();
            vec![Some(g.clone()), Some(Tensor::new(&[n, c, 1, 1], ds).unwrap())]
        })
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let out = pixel_shuffle(self.value(x), r);
        self.push(out, &[x], move |g, _, _| vec![Some(pixel_unshuffle(g, r))])
    }

    /// Batch normalization with affine `gamma`/`beta` of length `C`.
    ///
    /// In `Train` mode the batch mean and biased variance are used and returned
    /// so the caller can update running statistics; in `Eval` mode the supplied
    /// running statistics are used and treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: (&[T], &[T]),
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let (n, c, h, w) = dims4(self.value(x));
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let eps = T::from_f64c(BN_EPS);
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xd[(b * c + ci) * hw..(b * c + ci + 1) * hw].iter().copied().sum();
                    }
                    mean[ci] = s / m;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xv in &xd[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                            v = v + (xv - mean[ci]) * (xv - mean[ci]);
                        }
                    }
                    var[ci] = v / m;
                }
                (mean, var)
            }
            NormMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let od = out.data_mut();
            for b in 0..n {
                for ci in 0..c {
                    let off = (b * c + ci) * hw;
                    for i in 0..hw {
                        od[off + i] = (xd[off + i] - mean[ci]) * inv_std[ci] * gd[ci] + bd[ci];
                    }
                }
            }
        }
        let stats = (mode == NormMode::Train).then(|| (mean.clone(), var.clone()));
        let v = self.push(out, &[x, gamma, beta], move |g, p, _| {
            let xd = p[0].data();
            let gamma = p[1].data();
            let gd = g.data();
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for b in 0..n {
                    let off = (b * c + ci) * hw;
                    for i in 0..hw {
                        let xhat = (xd[off + i] - mean[ci]) * inv_std[ci];
                        sum_g = sum_g + gd[off + i];
                        sum_gx = sum_gx + gd[off + i] * xhat;
                    }
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                let dxd = dx.data_mut();
                for b in 0..n {
                    let off = (b * c + ci) * hw;
                    for i in 0..hw {
                        dxd[off + i] = match mode {
                            NormMode::Train => {
                                let xhat = (xd[off + i] - mean[ci]) * inv_std[ci];
                                gamma[ci] * inv_std[ci] / m * (m * gd[off + i] - sum_g - xhat * sum_gx)
                            }
                            NormMode::Eval => gamma[ci] * inv_std[ci] * gd[off + i],
                        };
                    }
                }
            }
            vec![
                Some(dx),
                Some(Tensor::new(&[c], dgamma).unwrap()),
                Some(Tensor::new(&[c], dbeta).unwrap()),
            ]
        });
        (v, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_layout_and_inverse() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 1, 1], |i| i as f64);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        let z = Tensor::<f64>::from_fn(&[2, 8, 3, 5], |i| (i as f64).sin());
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, 2), 2), z);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[3, 2, 2, 2], |i| (i * 7 % 5) as f64));
        let g = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm(x, g, b, NormMode::Train, (&[], &[]));
        assert!(stats.is_some());
        let yv = tape.value(y);
        for ci in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| yv.data()[(n * 2 + ci) * 4..(n * 2 + ci + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }
}
