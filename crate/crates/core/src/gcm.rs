//! Global colour mapping: a stack of 1×1 convolutions (SPN) whose hidden
//! features are modulated by a global guidance vector from GuideNet.
//!
//! `ỹ = C(x̂, y, τ)`. Every SPN layer is pixel-wise, so the mapping can change
//! colours but never move content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvGeom, ParamStore, Tape, Var};
use crate::rawdata::coordinate_map;
use crate::tensor::{Real, Tensor};

pub const SPN_HIDDEN: usize = 64;
pub const GUIDE_HIDDEN: usize = 32;
const SPN_LAYERS: usize = 5;

/// GuideNet's 7×7 stride-2 entry conv (padding 1: 448 → 222).
pub const GUIDE_ENTRY: ConvGeom = ConvGeom::new(7, 2, 1);

/// How the guidance vector `g` acts on the SPN features `f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `f·g`
    #[default]
    Mul,
    /// `f + g`
    Add,
    /// `f·(1 + g) + g`
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcmConfig {
    /// Whether a GCM exists at all.
    pub spn: bool,
    /// GuideNet conditioned on the target `y`.
    pub use_target_guidance: bool,
    /// Feed the coordinate map to the SPN and GuideNet.
    pub use_coords: bool,
    pub modulation: Modulation,
}

impl Default for GcmConfig {
    fn default() -> Self {
        Self {
            spn: true,
            use_target_guidance: true,
            use_coords: true,
            modulation: Modulation::Mul,
        }
    }
}

impl GcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.spn && (self.use_target_guidance || self.use_coords) {
            return Err(Error::config(
                "gcm.use_target_guidance and gcm.use_coords require gcm.spn",
            ));
        }
        Ok(())
    }

    fn coord_channels(&self) -> usize {
        if self.use_coords {
            2
        } else {
            0
        }
    }
}

pub fn init_gcm<T: Real>(cfg: &GcmConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    if !cfg.spn {
        return Ok(s);
    }
    let cc = cfg.coord_channels();
    let spn = [
        (3 + cc, SPN_HIDDEN),
        (SPN_HIDDEN, SPN_HIDDEN),
        (SPN_HIDDEN, SPN_HIDDEN),
        (SPN_HIDDEN, SPN_HIDDEN),
        (SPN_HIDDEN, 3),
    ];
    for (i, (cin, cout)) in spn.into_iter().enumerate() {
        s.add_conv(&format!("gcm.spn.{i}"), cout, cin, 1, rng);
    }
    if cfg.use_target_guidance {
        let guide = [
            (6 + cc, GUIDE_HIDDEN, 7),
            (GUIDE_HIDDEN, GUIDE_HIDDEN, 3),
            (GUIDE_HIDDEN, GUIDE_HIDDEN, 3),
            (GUIDE_HIDDEN, SPN_HIDDEN, 1),
        ];
        for (i, (cin, cout, k)) in guide.into_iter().enumerate() {
            s.add_conv(&format!("gcm.guide.{i}"), cout, cin, k, rng);
        }
    }
    Ok(s)
}

/// Coordinate map repeated over a batch: `N×2×H×W`.
pub fn coords_batch<T: Real>(n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let one = coordinate_map(h, w)?.into_tensor().cast::<T>();
    Tensor::stack(&vec![one; n])
}

fn check_image<T: Real>(t: &Tape<T>, v: Var, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.value(v).shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim(format!("{what} must be N×3×H×W, got {s:?}")));
    }
    Ok((s[0], s[2], s[3]))
}

fn check_coords<T: Real>(t: &Tape<T>, tau: Var, n: usize, h: usize, w: usize) -> Result<()> {
    if t.value(tau).shape() != [n, 2, h, w] {
        return Err(Error::dim(format!(
            "coordinate map {:?} does not match {n}×2×{h}×{w}",
            t.value(tau).shape()
        )));
    }
    Ok(())
}

/// GuideNet on `(x̂, y[, τ])`: `N×64×1×1` guidance.
pub fn guidenet_forward<T: Real>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &GcmConfig,
    xhat: Var,
    y: Var,
    tau: Option<Var>,
) -> Result<Var> {
    let (n, h, w) = check_image(t, xhat, "x̂")?;
    if check_image(t, y, "y")? != (n, h, w) {
        return Err(Error::dim("GuideNet inputs x̂ and y differ in shape"));
    }
    if GUIDE_ENTRY.out_len(h).is_none() || GUIDE_ENTRY.out_len(w).is_none() {
        return Err(Error::dim(format!("GuideNet needs at least 5×5 inputs, got {h}×{w}")));
    }
    let mut parts = vec![xhat, y];
    if cfg.use_coords {
        let tau = tau.ok_or_else(|| Error::config("GuideNet configured with coordinates but none given"))?;
        check_coords(t, tau, n, h, w)?;
        parts.push(tau);
    }
    let input = t.concat_channels(&parts);
    let c0 = t.conv_layer(p, "gcm.guide.0", input, GUIDE_ENTRY);
    let r0 = t.relu(c0);
    let c1 = t.conv_layer(p, "gcm.guide.1", r0, ConvGeom::same(3));
    let r1 = t.relu(c1);
    let c2 = t.conv_layer(p, "gcm.guide.2", r1, ConvGeom::same(3));
    let pooled = t.global_avg_pool(c2);
    Ok(t.conv_layer(p, "gcm.guide.3", pooled, ConvGeom::same(1)))
}

/// SPN on `(x̂[, τ])`, modulated by `g` before the final projection when given.
pub fn spn_forward<T: Real>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &GcmConfig,
    xhat: Var,
    tau: Option<Var>,
    g: Option<Var>,
) -> Result<Var> {
    let (n, h, w) = check_image(t, xhat, "x̂")?;
    let mut h0 = xhat;
    if cfg.use_coords {
        let tau = tau.ok_or_else(|| Error::config("SPN configured with coordinates but none given"))?;
        check_coords(t, tau, n, h, w)?;
        h0 = t.concat_channels(&[xhat, tau]);
    }
    let g1 = ConvGeom::same(1);
    let mut f = h0;
    for i in 0..SPN_LAYERS - 1 {
        let c = t.conv_layer(p, &format!("gcm.spn.{i}"), f, g1);
        f = t.relu(c);
    }
    if let Some(g) = g {
        if t.value(g).shape() != [n, SPN_HIDDEN, 1, 1] {
            return Err(Error::config(format!(
                "guidance {:?} does not match the SPN hidden width {SPN_HIDDEN}",
                t.value(g).shape()
            )));
        }
        f = match cfg.modulation {
            Modulation::Mul => t.mul_channel(f, g),
            Modulation::Add => t.add_channel(f, g),
            Modulation::Affine => {
                let one = t.constant(Tensor::ones(&[n, SPN_HIDDEN, 1, 1]));
                let scale = t.add(g, one);
                let m = t.mul_channel(f, scale);
                t.add_channel(m, g)
            }
        };
    }
    Ok(t.conv_layer(p, &format!("gcm.spn.{}", SPN_LAYERS - 1), f, g1))
}

/// `ỹ = C(x̂, y, τ)`. `y` is only read when target guidance is enabled and
/// `tau` only when coordinates are.
pub fn gcm_forward<T: Real>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &GcmConfig,
    xhat: Var,
    y: Option<Var>,
    tau: Option<Var>,
) -> Result<Var> {
    if !cfg.spn {
        return Err(Error::config("GCM is disabled (gcm.spn = false)"));
    }
    let g = if cfg.use_target_guidance {
        let y = y.ok_or_else(|| Error::config("target guidance needs the target image"))?;
        Some(guidenet_forward(t, p, cfg, xhat, y, tau)?)
    } else {
        None
    };
    spn_forward(t, p, cfg, xhat, tau, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(n: usize, h: usize, w: usize, k: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 3, h, w], |i| (((i + k) * 37 % 101) as f64) / 101.0)
    }

    fn run(store: &ParamStore<f64>, cfg: &GcmConfig, x: &Tensor<f64>, y: &Tensor<f64>) -> Tensor<f64> {
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let mut t = Tape::inference();
        let b = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let tau = t.constant(coords_batch(n, h, w).unwrap());
        let out = gcm_forward(&mut t, &b, cfg, xv, Some(yv), Some(tau)).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn structure() {
        let cfg = GcmConfig::default();
        let s: ParamStore<f32> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..SPN_LAYERS {
            let w = s.get(&format!("gcm.spn.{i}.weight")).unwrap();
            assert_eq!(&w.shape()[2..], &[1, 1]);
        }
        assert_eq!(s.get("gcm.spn.0.weight").unwrap().shape(), &[64, 5, 1, 1]);
        assert_eq!(s.get("gcm.guide.0.weight").unwrap().shape(), &[32, 8, 7, 7]);
        assert_eq!(s.get("gcm.guide.3.weight").unwrap().shape(), &[64, 32, 1, 1]);
        assert!(GcmConfig {
            spn: false,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(GUIDE_ENTRY.out_len(448), Some(222));
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let cfg = GcmConfig::default();
        let mut s: ParamStore<f64> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s.map_all(|_, v| v.data_mut().fill(0.0));
        s.get_mut("gcm.spn.4.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3]);
        let out = run(&s, &cfg, &img(1, 8, 8, 0), &img(1, 8, 8, 3));
        for c in 0..3 {
            assert!(out.channels(c, c + 1).data().iter().all(|&v| v == [0.1, 0.2, 0.3][c]));
        }
        // guidance is the last bias when everything else is zero
        let mut t = Tape::inference();
        s.get_mut("gcm.guide.3.bias").unwrap().data_mut().fill(0.5);
        let b = s.bind(&mut t, false);
        let x = t.constant(img(1, 8, 8, 0));
        let tau = t.constant(coords_batch(1, 8, 8).unwrap());
        let g = guidenet_forward(&mut t, &b, &cfg, x, x, Some(tau)).unwrap();
        assert!(t.value(g).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unit_guidance_is_unmodulated() {
        let cfg = GcmConfig::default();
        let s: ParamStore<f64> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let x = t.constant(img(2, 6, 6, 0));
        let tau = t.constant(coords_batch(2, 6, 6).unwrap());
        let ones = t.constant(Tensor::ones(&[2, 64, 1, 1]));
        let a = spn_forward(&mut t, &b, &cfg, x, Some(tau), Some(ones)).unwrap();
        let plain = spn_forward(&mut t, &b, &cfg, x, Some(tau), None).unwrap();
        assert_eq!(t.value(a), t.value(plain));
        let bad = t.constant(Tensor::ones(&[2, 32, 1, 1]));
        assert!(spn_forward(&mut t, &b, &cfg, x, Some(tau), Some(bad))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn broadcast_equals_explicit_copies() {
        let cfg = GcmConfig::default();
        let s: ParamStore<f64> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let x = t.constant(img(1, 8, 8, 0));
        let y = t.constant(img(1, 8, 8, 9));
        let tau = t.constant(coords_batch(1, 8, 8).unwrap());
        let g = guidenet_forward(&mut t, &b, &cfg, x, y, Some(tau)).unwrap();
        let broadcast = spn_forward(&mut t, &b, &cfg, x, Some(tau), Some(g)).unwrap();
        // same SPN, but with g copied to every pixel and applied elementwise
        let gv = t.value(g).clone();
        let full = t.constant(Tensor::from_fn(&[1, 64, 8, 8], |i| gv.data()[i / 64]));
        let mut f = t.concat_channels(&[x, tau]);
        for i in 0..4 {
            let c = t.conv_layer(&b, &format!("gcm.spn.{i}"), f, ConvGeom::same(1));
            f = t.relu(c);
        }
        let m = t.mul(f, full);
        let explicit = t.conv_layer(&b, "gcm.spn.4", m, ConvGeom::same(1));
        assert_eq!(t.value(broadcast), t.value(explicit));
    }

    #[test]
    fn variants_run() {
        for (tg, co) in [(false, false), (true, false), (false, true), (true, true)] {
            for m in [Modulation::Mul, Modulation::Add, Modulation::Affine] {
                let cfg = GcmConfig {
                    use_target_guidance: tg,
                    use_coords: co,
                    modulation: m,
                    ..Default::default()
                };
                let s: ParamStore<f64> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
                let out = run(&s, &cfg, &img(2, 8, 10, 0), &img(2, 8, 10, 5));
                assert_eq!(out.shape(), &[2, 3, 8, 10]);
            }
        }
    }

    #[test]
    fn parameter_gradients() {
        for m in [Modulation::Mul, Modulation::Affine] {
            let cfg = GcmConfig {
                modulation: m,
                ..Default::default()
            };
            let s: ParamStore<f64> = init_gcm(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let (x, y) = (img(2, 9, 9, 0), img(2, 9, 9, 7));
            let reports = check_params(
                &s,
                |t, b| {
                    let xv = t.constant(x.clone());
                    let yv = t.constant(y.clone());
                    let tau = t.constant(coords_batch(2, 9, 9).unwrap());
                    let out = gcm_forward(t, b, &cfg, xv, Some(yv), Some(tau)).unwrap();
                    let d = t.sub(out, yv);
                    let d = t.mul(d, d);
                    t.mean(d)
                },
                1e-5,
                16,
            );
            for r in &reports {
                assert!(r.passes(1e-4), "{m:?} {r:?}");
            }
        }
    }
}
