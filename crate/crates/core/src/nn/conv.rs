//! 2-D convolution via im2col + GEMM, batched over the leading axis.

use crate::nn::params::Bound;
use crate::nn::tape::{Tape, Var};
use crate::parallel;
use crate::tensor::{Real, Tensor};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// "Same" padding for odd kernels at stride 1.
    pub const fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2)
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<T> {
    let k = g.kernel;
    let mut col = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<T> {
    let k = g.kernel;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn dims4<T: Real>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected N×C×H×W, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Forward convolution. `x`: `N×C×H×W`, `w`: `O×C×k×k`, `b`: `O`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x);
    let ws = w.shape();
    assert!(
        ws.len() == 4 && ws[1] == c && ws[2] == g.kernel && ws[3] == g.kernel,
        "conv weight {ws:?} incompatible with input {:?} / {g:?}",
        x.shape()
    );
    let o = ws[0];
    let ho = g.out_len(h).expect("conv: input smaller than kernel");
    let wo = g.out_len(wd).expect("conv: input smaller than kernel");
    let kk = c * g.kernel * g.kernel;
    let per_in = c * h * wd;
    let per_out = o * ho * wo;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    parallel::for_each_chunk_mut(out.data_mut(), per_out.max(1), |i, dst| {
        let xi = &xd[i * per_in..(i + 1) * per_in];
        if let Some(b) = b {
            for (oc, row) in dst.chunks_mut(ho * wo).enumerate() {
                row.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(o, kk, ho * wo, T::one(), wdat, false, xi, false, beta, dst);
        } else {
            let col = im2col(xi, c, h, wd, g, ho, wo);
            T::gemm(o, kk, ho * wo, T::one(), wdat, false, &col, false, beta, dst);
        }
    });
    out
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is skipped unless requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, wd) = dims4(x);
    let (_, o, ho, wo) = dims4(gy);
    let kk = c * g.kernel * g.kernel;
    let per_in = c * h * wd;
    let per_out = o * ho * wo;
    let xd = x.data();
    let gyd = gy.data();
    let wdat = w.data();
    let per_item = parallel::map_range(n, |i| {
        let xi = &xd[i * per_in..(i + 1) * per_in];
        let gi = &gyd[i * per_out..(i + 1) * per_out];
        let dw = need_dw.then(|| {
            let col_owned;
            let col: &[T] = if g.is_pointwise() {
                xi
            } else {
                col_owned = im2col(xi, c, h, wd, g, ho, wo);
                &col_owned
            };
            let mut dw = vec![T::zero(); o * kk];
            T::gemm(o, ho * wo, kk, T::one(), gi, false, col, true, T::zero(), &mut dw);
            dw
        });
        let db: Vec<T> = gi.chunks(ho * wo).map(|r| r.iter().copied().sum()).collect();
        let dx = if need_dx {
            let mut dcol = vec![T::zero(); kk * ho * wo];
            T::gemm(kk, o, ho * wo, T::one(), wdat, true, gi, false, T::zero(), &mut dcol);
            Some(if g.is_pointwise() {
                dcol
            } else {
                col2im(&dcol, c, h, wd, g, ho, wo)
            })
        } else {
            None
        };
        (dx, dw, db)
    });
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = Tensor::zeros(&[o]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (dxi, dwi, dbi)) in per_item.into_iter().enumerate() {
        if let (Some(dw), Some(dwi)) = (dw.as_mut(), dwi) {
            for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
                *a = *a + b;
            }
        }
        for (a, b) in db.data_mut().iter_mut().zip(dbi) {
            *a = *a + b;
        }
        if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
            dx.data_mut()[i * per_in..(i + 1) * per_in].copy_from_slice(&dxi);
        }
    }
    (dx, dw, db)
}

impl<T: Real> Tape<T> {
    /// Differentiable convolution with optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), g);
        let x_grad = self.requires_grad(x);
        let w_grad = self.requires_grad(w);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(out, &parents, move |gy, p, _| {
            let (dx, dw, db) = conv2d_backward(p[0], p[1], gy, g, x_grad, w_grad);
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(Some(db));
            }
            res
        })
    }

    /// Convolution with the parameters `{name}.weight` and `{name}.bias`.
    pub fn conv_layer(&mut self, params: &Bound, name: &str, x: Var, g: ConvGeom) -> Var {
        let w = params.var(&format!("{name}.weight"));
        let b = params.try_var(&format!("{name}.bias"));
        self.conv2d(x, w, b, g)
    }
}
