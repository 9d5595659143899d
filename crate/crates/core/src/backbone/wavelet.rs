//! Orthonormal Haar wavelet transform and its inverse.
//!
//! For a 2×2 block `a b / c d` the four bands are
//! `LL = (a+b+c+d)/2`, `HL = (a−b+c−d)/2`, `LH = (a+b−c−d)/2`,
//! `HH = (a−b−c+d)/2`, stored at output channel `4c + band`.

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn split_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("expected C×H×W or N×C×H×W, got {:?}", x.shape()))),
    }
}

/// `(N×)C×H×W → (N×)4C×H/2×W/2`.
pub fn dwt_haar<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = split_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("DWT needs even spatial size, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::from_f64c(0.5);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &xd[(b * c + ch) * h * w..];
            let dst = (b * 4 * c + 4 * ch) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[2 * i * w + 2 * j];
                    let bb = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let p = i * ow + j;
                    out[dst + p] = (a + bb + cc + d) * half;
                    out[dst + oh * ow + p] = (a - bb + cc - d) * half;
                    out[dst + 2 * oh * ow + p] = (a + bb - cc - d) * half;
                    out[dst + 3 * oh * ow + p] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    let shape = if x.ndim() == 3 {
        vec![4 * c, oh, ow]
    } else {
        vec![n, 4 * c, oh, ow]
    };
    Tensor::new(&shape, out)
}

/// `(N×)4C×H×W → (N×)C×2H×2W`, the exact inverse of [`dwt_haar`].
pub fn iwt_haar<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, h, w) = split_dims(x)?;
    if c4 % 4 != 0 {
        return Err(Error::dim(format!("IWT needs a multiple of 4 channels, got {c4}")));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let half = T::from_f64c(0.5);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = (b * c4 + 4 * ch) * h * w;
            let dst = &mut out[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let ll = xd[src + p];
                    let hl = xd[src + h * w + p];
                    let lh = xd[src + 2 * h * w + p];
                    let hh = xd[src + 3 * h * w + p];
                    dst[2 * i * ow + 2 * j] = (ll + hl + lh + hh) * half;
                    dst[2 * i * ow + 2 * j + 1] = (ll - hl + lh - hh) * half;
                    dst[(2 * i + 1) * ow + 2 * j] = (ll + hl - lh - hh) * half;
                    dst[(2 * i + 1) * ow + 2 * j + 1] = (ll - hl - lh + hh) * half;
                }
            }
        }
    }
    let shape = if x.ndim() == 3 {
        vec![c, oh, ow]
    } else {
        vec![n, c, oh, ow]
    };
    Tensor::new(&shape, out)
}

impl<T: Real> Tape<T> {
    /// Both transforms are orthogonal, so each one's adjoint is the other.
    pub fn dwt_haar(&mut self, x: Var) -> Result<Var> {
        let out = dwt_haar(self.value(x))?;
        Ok(self.push(out, &[x], |g, _, _| vec![Some(iwt_haar(g).unwrap())]))
    }

    pub fn iwt_haar(&mut self, x: Var) -> Result<Var> {
        let out = iwt_haar(self.value(x))?;
        Ok(self.push(out, &[x], |g, _, _| vec![Some(dwt_haar(g).unwrap())]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_input;

    #[test]
    fn single_block_bands() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dwt_haar(&x).unwrap().data(), &[5.0, -1.0, -2.0, 0.0]);
    }

    #[test]
    fn constant_goes_to_ll() {
        let x = Tensor::full(&[2, 4, 6], 0.3f64);
        let y = dwt_haar(&x).unwrap();
        assert_eq!(y.shape(), &[8, 2, 3]);
        for c in 0..8 {
            let expect = if c % 4 == 0 { 0.6 } else { 0.0 };
            assert!(y.channels(c, c + 1).data().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn inverse_and_ll_only() {
        let x = Tensor::from_fn(&[2, 3, 8, 6], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let y = dwt_haar(&x).unwrap();
        assert!(iwt_haar(&y).unwrap().max_abs_diff(&x) < 1e-12);
        assert!(
            dwt_haar(&iwt_haar(&x.clone().reshape(&[2, 12, 4, 3]).unwrap()).unwrap())
                .unwrap()
                .max_abs_diff(&x.clone().reshape(&[2, 12, 4, 3]).unwrap())
                < 1e-12
        );
        let ll = Tensor::from_fn(&[4, 2, 2], |i| if i < 4 { i as f64 } else { 0.0 });
        let img = iwt_haar(&ll).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(img.at3(0, i, j), ll.at3(0, i / 2, j / 2) / 2.0);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(dwt_haar(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
        assert!(iwt_haar(&Tensor::<f32>::zeros(&[6, 2, 2])).is_err());
    }

    #[test]
    fn gradients() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let wts = Tensor::from_fn(&[1, 8, 2, 2], |i| (i as f64 * 0.91).cos());
        let r = check_input(
            &x,
            |t, v| {
                let y = t.dwt_haar(v).unwrap();
                let w = t.constant(wts.clone());
                let p = t.mul(y, w);
                let s = t.sigmoid(p);
                t.mean(s)
            },
            1e-5,
            usize::MAX,
        );
        assert!(r.passes(1e-4), "{r:?}");
        let r = check_input(
            &x.clone().reshape(&[1, 8, 2, 2]).unwrap(),
            |t, v| {
                let y = t.iwt_haar(v).unwrap();
                let s = t.sigmoid(y);
                let s = t.mul(s, y);
                t.mean(s)
            },
            1e-5,
            usize::MAX,
        );
        assert!(r.passes(1e-4), "{r:?}");
    }
}
