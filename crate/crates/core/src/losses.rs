//! Training objectives: masked L1, multi-scale perceptual loss, LSGAN terms
//! and their weighted combination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvGeom, ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_vgg: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_vgg: 1.0,
            lambda_gan: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda_l1) && ok(self.lambda_vgg) && ok(self.lambda_gan) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )))
        }
    }
}

fn mask_dims<T: Real>(a: &Tensor<T>, m: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    let (n, c, hw) = match *s {
        [c, h, w] => (1, c, h * w),
        [n, c, h, w] => (n, c, h * w),
        _ => return Err(Error::dim(format!("masked_l1 expects (N×)C×H×W, got {s:?}"))),
    };
    if m.len() != n * hw || m.shape().last() != s.last() {
        return Err(Error::dim(format!(
            "mask {:?} does not broadcast over {s:?}",
            m.shape()
        )));
    }
    Ok((n, c, hw))
}

/// `Σ m·|a − b| / (Σm · C)` and whether the mask was empty (loss 0).
pub fn masked_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, m: &Tensor<T>) -> Result<(f64, bool)> {
    a.expect_same_shape(b)?;
    let (n, c, hw) = mask_dims(a, m)?;
    let (ad, bd, md) = (a.data(), b.data(), m.data());
    let msum: f64 = md.iter().map(|v| v.as_f64()).sum();
    if msum == 0.0 {
        return Ok((0.0, true));
    }
    let mut s = 0.0f64;
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for p in 0..hw {
                let mv = md[bi * hw + p].as_f64();
                if mv != 0.0 {
                    s += mv * (ad[off + p] - bd[off + p]).abs().as_f64();
                }
            }
        }
    }
    Ok((s / (msum * c as f64), false))
}

/// Output of the differentiable masked L1.
#[derive(Clone, Copy, Debug)]
pub struct MaskedL1 {
    pub loss: Var,
    pub empty_mask: bool,
}

impl<T: Real> Tape<T> {
    /// Differentiable [`masked_l1`]; the mask is a constant.
    pub fn masked_l1(&mut self, a: Var, b: Var, m: &Tensor<T>) -> Result<MaskedL1> {
        let (va, vb) = (self.value(a), self.value(b));
        let (value, empty) = masked_l1(va, vb, m)?;
        if empty {
            log::warn!("masked_l1: empty validity mask, loss set to 0");
        }
        let (n, c, hw) = mask_dims(va, m)?;
        let msum: f64 = m.data().iter().map(|v| v.as_f64()).sum();
        let m = m.clone();
        let shape = va.shape().to_vec();
        let loss = self.push(Tensor::scalar(T::from_f64c(value)), &[a, b], move |g, p, _| {
            if empty {
                return vec![None, None];
            }
            let k = g.item() / T::from_f64c(msum * c as f64);
            let mut da = Tensor::zeros(&shape);
            let (ad, bd, md) = (p[0].data(), p[1].data(), m.data());
            let dd = da.data_mut();
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for q in 0..hw {
                        let diff = ad[off + q] - bd[off + q];
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dd[off + q] = md[bi * hw + q] * sign * k;
                    }
                }
            }
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        });
        Ok(MaskedL1 {
            loss,
            empty_mask: empty,
        })
    }
}

/// `L_GCM = masked_l1(ỹ, yʷ, m)`.
pub fn loss_gcm<T: Real>(t: &mut Tape<T>, ytilde: Var, yw: Var, m: &Tensor<T>) -> Result<Var> {
    Ok(t.masked_l1(ytilde, yw, m)?.loss)
}

/// Min-pool a `(N×)1×H×W` mask over `scale×scale` windows.
pub fn downsample_mask<T: Real>(m: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = m.shape().to_vec();
    let (lead, h, w) = match *s.as_slice() {
        [1, h, w] => (vec![1], h, w),
        [n, 1, h, w] => (vec![n, 1], h, w),
        _ => return Err(Error::dim(format!("mask must be (N×)1×H×W, got {s:?}"))),
    };
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::dim(format!("mask {h}×{w} is not divisible by scale {scale}")));
    }
    let n: usize = lead.iter().product();
    let (oh, ow) = (h / scale, w / scale);
    let md = m.data();
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let mut v = T::one();
                for di in 0..scale {
                    for dj in 0..scale {
                        v = v.min(md[b * h * w + (i * scale + di) * w + j * scale + dj]);
                    }
                }
                out.push(v);
            }
        }
    }
    let mut shape = lead;
    shape.extend([oh, ow]);
    Tensor::new(&shape, out)
}

/// Frozen multi-scale feature extractor used by the perceptual loss.
pub trait PerceptualExtractor {
    fn name(&self) -> &str;

    /// Downsampling factor of each returned feature map.
    fn scales(&self) -> Vec<usize>;

    /// Feature maps of an `N×3×H×W` batch, in the order of [`Self::scales`].
    fn features_f32(&self, t: &mut Tape<f32>, img: Var) -> Vec<Var>;

    fn features_f64(&self, t: &mut Tape<f64>, img: Var) -> Vec<Var>;

    /// Hash of the frozen parameters.
    fn digest(&self) -> String;
}

/// Generic access to the extractor at either precision.
pub trait Features<T: Real> {
    fn features(&self, t: &mut Tape<T>, img: Var) -> Vec<Var>;
}

impl<E: PerceptualExtractor + ?Sized> Features<f32> for E {
    fn features(&self, t: &mut Tape<f32>, img: Var) -> Vec<Var> {
        self.features_f32(t, img)
    }
}

impl<E: PerceptualExtractor + ?Sized> Features<f64> for E {
    fn features(&self, t: &mut Tape<f64>, img: Var) -> Vec<Var> {
        self.features_f64(t, img)
    }
}

/// Desk-scale stand-in for a pretrained network: three seed-fixed random
/// 3×3 stride-2 convolutions (widths 16/32/64) with ReLU.
#[derive(Clone, Debug)]
pub struct RandomPyramid {
    params32: ParamStore<f32>,
    params64: ParamStore<f64>,
}

pub const PYRAMID_WIDTHS: [usize; 3] = [16, 32, 64];

impl RandomPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::<f64>::new();
        let mut cin = 3;
        for (i, &w) in PYRAMID_WIDTHS.iter().enumerate() {
            p.add_conv_he(&format!("perceptual.{i}"), w, cin, 3, &mut rng);
            cin = w;
        }
        Self {
            params32: p.cast(),
            params64: p,
        }
    }

    fn run<T: Real>(store: &ParamStore<T>, t: &mut Tape<T>, img: Var) -> Vec<Var> {
        let b = store.bind(t, false);
        let mut h = img;
        let mut out = Vec::with_capacity(PYRAMID_WIDTHS.len());
        for i in 0..PYRAMID_WIDTHS.len() {
            let c = t.conv_layer(&b, &format!("perceptual.{i}"), h, ConvGeom::new(3, 2, 1));
            h = t.relu(c);
            out.push(h);
        }
        out
    }
}

impl PerceptualExtractor for RandomPyramid {
    fn name(&self) -> &str {
        "random_pyramid"
    }

    fn scales(&self) -> Vec<usize> {
        vec![2, 4, 8]
    }

    fn features_f32(&self, t: &mut Tape<f32>, img: Var) -> Vec<Var> {
        Self::run(&self.params32, t, img)
    }

    fn features_f64(&self, t: &mut Tape<f64>, img: Var) -> Vec<Var> {
        Self::run(&self.params64, t, img)
    }

    fn digest(&self) -> String {
        self.params64.digest()
    }
}

/// `λ_l1·masked_l1(ŷ, yʷ, m) + λ_vgg·mean_s masked_l1(φ_s(ŷ), φ_s(yʷ), m↓s)`.
///
/// `m` is `N×1×H×W`; `yw` should be a constant on the tape.
pub fn loss_isp<T: Real, E>(t: &mut Tape<T>, yhat: Var, yw: Var, m: &Tensor<T>, phi: &E, w: &LossWeights) -> Result<Var>
where
    E: PerceptualExtractor + Features<T> + ?Sized,
{
    let l1 = t.masked_l1(yhat, yw, m)?.loss;
    let mut total = t.scale(l1, T::from_f64c(w.lambda_l1));
    if w.lambda_vgg > 0.0 {
        let fa = phi.features(t, yhat);
        let fb = phi.features(t, yw);
        let scales = phi.scales();
        let mut terms = Vec::with_capacity(fa.len());
        for ((a, b), s) in fa.into_iter().zip(fb).zip(scales) {
            let ms = downsample_mask(m, s)?;
            terms.push(t.masked_l1(a, b, &ms)?.loss);
        }
        let k = terms.len();
        let sum = t.sum_scalars(&terms);
        let avg = t.scale(sum, T::from_f64c(w.lambda_vgg / k as f64));
        total = t.sum_scalars(&[total, avg]);
    }
    Ok(total)
}

fn mean_sq_offset<T: Real>(t: &mut Tape<T>, d: Var, target: f64) -> Var {
    let shape = t.value(d).shape().to_vec();
    let c = t.constant(Tensor::full(&shape, T::from_f64c(target)));
    let diff = t.sub(d, c);
    let sq = t.mul(diff, diff);
    t.mean(sq)
}

/// LSGAN generator loss `½·mean((D(ŷ) − 1)²)`.
pub fn loss_gan_generator<T: Real>(t: &mut Tape<T>, d_fake: Var) -> Var {
    let m = mean_sq_offset(t, d_fake, 1.0);
    t.scale(m, T::from_f64c(0.5))
}

/// LSGAN discriminator loss `½·mean((D(y) − 1)²) + ½·mean(D(ŷ)²)`.
pub fn loss_discriminator<T: Real>(t: &mut Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let r = mean_sq_offset(t, d_real, 1.0);
    let f = mean_sq_offset(t, d_fake, 0.0);
    let s = t.sum_scalars(&[r, f]);
    t.scale(s, T::from_f64c(0.5))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Isp,
    Ispgan,
}

/// Loss terms of one step. `gcm` is absent when no GCM is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents<V> {
    pub gcm: Option<V>,
    pub isp: Option<V>,
    pub gan: Option<V>,
}

/// `L_GCM + L_ISP`, plus `λ_GAN·L_GAN` in `ispgan` mode.
pub fn loss_total(c: &LossComponents<f64>, mode: LossMode, w: &LossWeights) -> Result<f64> {
    let isp = c.isp.ok_or_else(|| Error::config("loss_total needs the ISP term"))?;
    let mut total = c.gcm.unwrap_or(0.0) + isp;
    if mode == LossMode::Ispgan {
        let gan = c.gan.ok_or_else(|| Error::config("mode ispgan needs the GAN term"))?;
        total += w.lambda_gan * gan;
    }
    Ok(total)
}

/// Tape version of [`loss_total`].
pub fn loss_total_var<T: Real>(
    t: &mut Tape<T>,
    c: &LossComponents<Var>,
    mode: LossMode,
    w: &LossWeights,
) -> Result<Var> {
    let isp = c.isp.ok_or_else(|| Error::config("loss_total needs the ISP term"))?;
    let mut terms = vec![isp];
    terms.extend(c.gcm);
    if mode == LossMode::Ispgan {
        let gan = c.gan.ok_or_else(|| Error::config("mode ispgan needs the GAN term"))?;
        terms.push(t.scale(gan, T::from_f64c(w.lambda_gan)));
    }
    Ok(t.sum_scalars(&terms))
}
