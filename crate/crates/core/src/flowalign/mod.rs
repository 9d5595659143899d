//! Flow fields, bilinear warping, validity masks, flow upsampling and the
//! target-alignment strategies.
//!
//! Convention: a [`FlowField`] `Ψ` warps an image by sampling it at `p + Ψ(p)`,
//! so `warp(y, Ψ)(p) = y(p + Ψ(p))`. A flow estimator called as
//! `estimate(anchor, moving)` returns the field for which
//! `warp(moving, Ψ) ≈ anchor`.

mod estimators;
mod external;

use serde::{Deserialize, Serialize};

pub use estimators::{
    block_match_flow, brute_force_translation, BlockMatch, BruteForceTranslation, CountingEstimator, FlowEstimator,
};
pub use external::{external_flow_adapter, resolve_asset_path, ExternalFlow, ASSET_CACHE_ENV};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::parallel;
use crate::tensor::{Image, Real, Tensor};

/// Default validity threshold `ε`.
pub const DEFAULT_EPSILON: f64 = 0.001;

/// Per-pixel displacement, `2×H×W`: channel 0 is horizontal `u`, channel 1 is
/// vertical `v`, both in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor<f32>);

impl FlowField {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 || t.dim(0) != 2 {
            return Err(Error::dim(format!("flow must be 2×H×W, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::param("flow contains non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[2, h, w]))
    }

    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.data_mut()[..h * w].fill(u);
        t.data_mut()[h * w..].fill(v);
        Self(t)
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f(y, x);
                t.set3(0, y, x, u);
                t.set3(1, y, x, v);
            }
        }
        Self(t)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.0.at3(0, y, x)
    }

    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.0.at3(1, y, x)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// Mean endpoint distance to another field of the same size.
    pub fn mean_endpoint_error(&self, other: &FlowField) -> f64 {
        let (h, w) = (self.height(), self.width());
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                let du = (self.u(y, x) - other.u(y, x)) as f64;
                let dv = (self.v(y, x) - other.v(y, x)) as f64;
                s += (du * du + dv * dv).sqrt();
            }
        }
        s / (h * w) as f64
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.mean_endpoint_error(&FlowField::zeros(self.height(), self.width()))
    }
}

/// Binary `1×H×W` mask of pixels whose warped value came entirely from
/// in-bounds samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask(Tensor<f32>);

impl ValidityMask {
    pub fn ones(h: usize, w: usize) -> Self {
        Self(Tensor::ones(&[1, h, w]))
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 || t.dim(0) != 1 {
            return Err(Error::dim(format!("mask must be 1×H×W, got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("mask values must be 0 or 1"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn valid_fraction(&self) -> f64 {
        self.0.data().iter().map(|&v| v as f64).sum::<f64>() / self.0.len() as f64
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.0.at3(0, y, x) == 1.0
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        Ok(Self(self.0.zip_map(&other.0, |a, b| a.min(b))?))
    }
}

/// Bilinear taps `(index, weight)` for every output pixel, shared by the
/// forward warp and its adjoint.
struct Taps<T> {
    idx: Vec<[usize; 4]>,
    wgt: Vec<[T; 4]>,
}

fn taps<T: Real>(flow: &[f32], h: usize, w: usize) -> Taps<T> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(hw);
    let mut wgt = Vec::with_capacity(hw);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = T::from_usize(x).unwrap() + T::from_f32(flow[p]).unwrap();
            let sy = T::from_usize(y).unwrap() + T::from_f32(flow[hw + p]).unwrap();
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0.to_i64().unwrap_or(i64::MIN / 2), y0.to_i64().unwrap_or(i64::MIN / 2));
            let one = T::one();
            let cand = [
                (y0, x0, (one - fx) * (one - fy)),
                (y0, x0 + 1, fx * (one - fy)),
                (y0 + 1, x0, (one - fx) * fy),
                (y0 + 1, x0 + 1, fx * fy),
            ];
            let mut ii = [0usize; 4];
            let mut ww = [T::zero(); 4];
            for (k, &(yy, xx, wt)) in cand.iter().enumerate() {
                if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                    ii[k] = yy as usize * w + xx as usize;
                    ww[k] = wt;
                }
            }
            idx.push(ii);
            wgt.push(ww);
        }
    }
    Taps { idx, wgt }
}

fn warp_planes<T: Real>(img: &[T], c: usize, t: &Taps<T>, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let src = &img[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for (p, d) in dst.iter_mut().enumerate() {
            let (ii, ww) = (&t.idx[p], &t.wgt[p]);
            let mut acc = T::zero();
            for k in 0..4 {
                if ww[k] != T::zero() {
                    acc = acc + ww[k] * src[ii[k]];
                }
            }
            *d = acc;
        }
    }
    out
}

fn warp_planes_adjoint<T: Real>(g: &[T], c: usize, t: &Taps<T>, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let gs = &g[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for (p, &gv) in gs.iter().enumerate() {
            let (ii, ww) = (&t.idx[p], &t.wgt[p]);
            for k in 0..4 {
                if ww[k] != T::zero() {
                    dst[ii[k]] = dst[ii[k]] + ww[k] * gv;
                }
            }
        }
    }
    out
}

/// Bilinearly sample `img` (`C×H×W`) at `p + Ψ(p)` with zero padding.
pub fn warp<T: Real>(img: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let (c, h, w) = img.chw();
    if img.ndim() != 3 || flow.height() != h || flow.width() != w {
        return Err(Error::dim(format!(
            "warp: image {:?} vs flow {:?}",
            img.shape(),
            flow.tensor().shape()
        )));
    }
    let t = taps::<T>(flow.tensor().data(), h, w);
    Tensor::new(&[c, h, w], warp_planes(img.data(), c, &t, h * w))
}

/// `1` where `warp(1, Ψ) ≥ 1 − ε`, else `0`.
pub fn valid_mask(flow: &FlowField, epsilon: f64) -> ValidityMask {
    let (h, w) = (flow.height(), flow.width());
    let ones = Tensor::<f64>::ones(&[1, h, w]);
    let warped = warp(&ones, flow).expect("shapes agree by construction");
    let thresh = 1.0 - epsilon;
    ValidityMask(Tensor::from_fn(&[1, h, w], |i| {
        if warped.data()[i] >= thresh {
            1.0
        } else {
            0.0
        }
    }))
}

/// Bilinear spatial upsampling (half-pixel centres, edge clamped) with the
/// displacements multiplied by `scale`.
pub fn upsample_flow(flow: &FlowField, scale: usize) -> Result<FlowField> {
    if scale < 2 {
        return Err(Error::param(format!("flow upsampling scale must be >= 2, got {scale}")));
    }
    let (h, w) = (flow.height(), flow.width());
    let (hh, ww) = (h * scale, w * scale);
    let s = scale as f64;
    let src = flow.tensor();
    let mut out = Tensor::zeros(&[2, hh, ww]);
    let coord = |o: usize, n: usize| {
        let p = ((o as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for y in 0..hh {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..ww {
            let (x0, x1, fx) = coord(x, w);
            for c in 0..2 {
                let v = (1.0 - fy) * ((1.0 - fx) * src.at3(c, y0, x0) as f64 + fx * src.at3(c, y0, x1) as f64)
                    + fy * ((1.0 - fx) * src.at3(c, y1, x0) as f64 + fx * src.at3(c, y1, x1) as f64);
                out.set3(c, y, x, (v * s) as f32);
            }
        }
    }
    FlowField::new(out)
}

impl<T: Real> Tape<T> {
    /// Warp a batch `N×C×H×W` by constant per-item flows; differentiable in the
    /// image only.
    pub fn warp(&mut self, img: Var, flows: &[FlowField]) -> Var {
        let s = self.value(img).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(flows.len(), n, "one flow per batch item");
        let hw = h * w;
        let taps: Vec<Taps<T>> = flows
            .iter()
            .map(|f| {
                assert_eq!((f.height(), f.width()), (h, w));
                taps(f.tensor().data(), h, w)
            })
            .collect();
        let src = self.value(img).data();
        let parts = parallel::map_range(n, |i| warp_planes(&src[i * c * hw..(i + 1) * c * hw], c, &taps[i], hw));
        let out = Tensor::new(&s, parts.concat()).unwrap();
        self.push(out, &[img], move |g, _, _| {
            let gd = g.data();
            let parts = parallel::map_range(n, |i| {
                warp_planes_adjoint(&gd[i * c * hw..(i + 1) * c * hw], c, &taps[i], hw)
            });
            vec![Some(Tensor::new(&[n, c, h, w], parts.concat()).unwrap())]
        })
    }
}

/// Which image the target is aligned to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStrategy {
    /// Use the target as-is with an all-ones mask.
    None,
    /// Align with the mapping network output `ŷ`.
    WithOutput,
    /// Align with the demosaicked raw `x̂`.
    WithDemosaicked,
    /// Align with the colour-mapped proxy `ỹ`.
    #[default]
    WithGcm,
}

impl AlignStrategy {
    pub fn label(self) -> &'static str {
        match self {
            AlignStrategy::None => "baseline-none",
            AlignStrategy::WithOutput => "align-with-ŷ",
            AlignStrategy::WithDemosaicked => "align-with-x̂",
            AlignStrategy::WithGcm => "align-with-ỹ",
        }
    }
}

/// References available for alignment; which one is used depends on the strategy.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlignRefs<'a> {
    pub demosaicked: Option<&'a Image>,
    pub gcm: Option<&'a Image>,
    pub output: Option<&'a Image>,
}

/// Warp `target` onto the strategy's reference. Returns the warped target, its
/// validity mask and the flow used.
pub fn align_target(
    strategy: AlignStrategy,
    refs: AlignRefs<'_>,
    target: &Image,
    estimator: &dyn FlowEstimator,
    epsilon: f64,
) -> Result<(Image, ValidityMask, FlowField)> {
    let (_, h, w) = target.chw();
    let reference = match strategy {
        AlignStrategy::None => {
            return Ok((target.clone(), ValidityMask::ones(h, w), FlowField::zeros(h, w)));
        }
        AlignStrategy::WithOutput => refs.output,
        AlignStrategy::WithDemosaicked => refs.demosaicked,
        AlignStrategy::WithGcm => refs.gcm,
    }
    .ok_or_else(|| {
        Error::config(format!(
            "strategy {strategy:?} needs a reference image that was not supplied"
        ))
    })?;
    reference.expect_same_shape(target)?;
    let flow = estimator.estimate(&reference.clamp01(), target)?;
    let warped = warp(target, &flow)?;
    let mask = valid_mask(&flow, epsilon);
    Ok((warped, mask, flow))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = ramp(3, 7, 9);
        assert_eq!(warp(&img, &FlowField::zeros(7, 9)).unwrap(), img);
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let img = ramp(2, 10, 12);
        let out = warp(&img, &FlowField::constant(10, 12, 3.0, -2.0)).unwrap();
        for c in 0..2 {
            for y in 0..10 {
                for x in 0..12 {
                    let (sy, sx) = (y as i64 - 2, x as i64 + 3);
                    let expect = if sy >= 0 && sx < 12 {
                        img.at3(c, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(out.at3(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages() {
        let img = Tensor::from_fn(&[1, 2, 6], |i| (i % 6) as f32);
        let out = warp(&img, &FlowField::constant(2, 6, 0.5, 0.0)).unwrap();
        for x in 0..5 {
            assert_eq!(out.at3(0, 0, x), x as f32 + 0.5);
        }
    }

    #[test]
    fn mask_cases() {
        assert!(valid_mask(&FlowField::zeros(4, 5), DEFAULT_EPSILON)
            .tensor()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(valid_mask(&FlowField::constant(4, 5, 9.0, 0.0), DEFAULT_EPSILON)
            .tensor()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // content moved one pixel right: sample one pixel to the left
        let m = valid_mask(&FlowField::constant(3, 4, -1.0, 0.0), DEFAULT_EPSILON);
        for y in 0..3 {
            assert!(!m.is_valid(y, 0));
            for x in 1..4 {
                assert!(m.is_valid(y, x));
            }
        }
    }

    #[test]
    fn upsample_constant_and_errors() {
        let f = FlowField::constant(3, 5, 1.0, 2.0);
        let up = upsample_flow(&f, 4).unwrap();
        assert_eq!((up.height(), up.width()), (12, 20));
        assert!(up.tensor().data()[..240].iter().all(|&v| v == 4.0));
        assert!(up.tensor().data()[240..].iter().all(|&v| v == 8.0));
        assert!(upsample_flow(&f, 0).is_err());
        assert!(upsample_flow(&f, 1).is_err());
        assert_eq!(
            upsample_flow(&FlowField::zeros(2, 2), 3).unwrap(),
            FlowField::zeros(6, 6)
        );
    }

    #[test]
    fn strategy_none_passthrough_and_missing_reference() {
        let y = ramp(3, 8, 8);
        let est = BruteForceTranslation { radius: 2 };
        let (yw, m, _) = align_target(AlignStrategy::None, AlignRefs::default(), &y, &est, 1e-3).unwrap();
        assert_eq!(yw, y);
        assert_eq!(m.valid_fraction(), 1.0);
        assert!(matches!(
            align_target(AlignStrategy::WithGcm, AlignRefs::default(), &y, &est, 1e-3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_flow_rejected() {
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()[0] = f32::NAN;
        assert!(FlowField::new(t).is_err());
    }
}
