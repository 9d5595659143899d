//! Synthetic misaligned pairs with a known colour pipeline and known flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowalign::{warp, FlowField};
use crate::rawdata::{BayerPattern, RawFrame};
use crate::tensor::{Image, Tensor};

/// Misalignment family used to produce the target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSpec {
    #[default]
    Zero,
    /// Constant sampling offset: `target(p) = scene(p + (u, v))`.
    Translate { u: f32, v: f32 },
    /// `u = a[0] + a[1]·x + a[2]·y`, `v = a[3] + a[4]·x + a[5]·y` with `(x, y)`
    /// measured from the image centre.
    Affine { a: [f32; 6] },
    /// Gaussian-smoothed white noise scaled so `max |Ψ| = amplitude`.
    Smooth { amplitude: f32, sigma: f32, seed: u64 },
}

impl FlowSpec {
    pub fn realize(&self, h: usize, w: usize) -> FlowField {
        match *self {
            FlowSpec::Zero => FlowField::zeros(h, w),
            FlowSpec::Translate { u, v } => FlowField::constant(h, w, u, v),
            FlowSpec::Affine { a } => {
                let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
                FlowField::from_fn(h, w, |y, x| {
                    let (xc, yc) = (x as f32 - cx, y as f32 - cy);
                    (a[0] + a[1] * xc + a[2] * yc, a[3] + a[4] * xc + a[5] * yc)
                })
            }
            FlowSpec::Smooth { amplitude, sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut planes = [0, 1].map(|_| {
                    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                    gaussian_blur(&noise, h, w, sigma.max(0.5) as f64)
                });
                let peak = planes.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
                if peak > 0.0 {
                    for p in planes.iter_mut() {
                        p.iter_mut().for_each(|v| *v *= amplitude as f64 / peak);
                    }
                }
                FlowField::from_fn(h, w, |y, x| (planes[0][y * w + x] as f32, planes[1][y * w + x] as f32))
            }
        }
    }
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |inp: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for (i, kv) in k.iter().enumerate() {
                    let d = i as i64 - r;
                    let (yy, xx) = if horizontal {
                        (y as i64, x as i64 + d)
                    } else {
                        (y as i64 + d, x as i64)
                    };
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        s += kv * inp[yy as usize * w + xx as usize];
                        n += kv;
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Everything needed to regenerate a pair from its scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    /// Maps linear camera RGB to linear target RGB; the raw is produced with
    /// its inverse.
    pub color_matrix: [[f32; 3]; 3],
    /// Target encoding is `linear^(1/gamma)`.
    pub gamma: f32,
    /// Vignette strength `s` in `g(r) = 1 − s·r²`, `r = 1` at the corners.
    pub vignette: f32,
    pub flow: FlowSpec,
    /// Read-noise standard deviation in normalized raw units.
    pub noise_std: f32,
    pub bayer_pattern: BayerPattern,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: 2.2,
            vignette: 0.0,
            flow: FlowSpec::Zero,
            noise_std: 0.0,
            bayer_pattern: BayerPattern::Rggb,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub raw: RawFrame,
    /// Misaligned target `y`.
    pub target: Image,
    /// Target-space image pixel-aligned with the raw.
    pub aligned_gt: Image,
    /// `warp(aligned_gt, true_flow) == target` wherever the flow is valid.
    pub true_flow: FlowField,
    pub gen_params: GenParams,
}

impl SyntheticPair {
    /// Crop all members to the same window; offsets and sizes must be even so
    /// the Bayer phase is preserved.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<SyntheticPair> {
        if y0 % 2 + x0 % 2 + h % 2 + w % 2 != 0 {
            return Err(Error::dim("pair crops need even offsets and sizes"));
        }
        if y0 + h > self.raw.height || x0 + w > self.raw.width {
            return Err(Error::dim(format!(
                "crop {h}×{w}+{y0}+{x0} exceeds {}×{}",
                self.raw.height, self.raw.width
            )));
        }
        let mosaic = (0..h * w).map(|i| self.raw.at(y0 + i / w, x0 + i % w)).collect();
        Ok(SyntheticPair {
            raw: RawFrame::new(
                mosaic,
                h,
                w,
                self.raw.bayer_pattern,
                self.raw.black_level,
                self.raw.white_level,
            )?,
            target: self.target.crop(y0, x0, h, w)?,
            aligned_gt: self.aligned_gt.crop(y0, x0, h, w)?,
            true_flow: FlowField::new(self.true_flow.tensor().crop(y0, x0, h, w)?)?,
            gen_params: self.gen_params.clone(),
        })
    }
}

fn invert3(m: &[[f32; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let a = m.map(|r| r.map(|v| v as f64));
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-9 {
        return Err(Error::param("colour matrix is singular"));
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    Ok(inv)
}

/// Radial gain `1 − s·r²` with `r² = (xn² + yn²)/2`, `xn, yn ∈ [−1, 1]`.
pub fn vignette_gain(y: usize, x: usize, h: usize, w: usize, s: f32) -> f32 {
    let xn = if w > 1 {
        2.0 * x as f32 / (w - 1) as f32 - 1.0
    } else {
        0.0
    };
    let yn = if h > 1 {
        2.0 * y as f32 / (h - 1) as f32 - 1.0
    } else {
        0.0
    };
    1.0 - s * (xn * xn + yn * yn) / 2.0
}

/// Render a raw frame from `scene`, and the target as `warp(scene, flow)`.
pub fn synth_pair(scene: &Image, gen: &GenParams, seed: u64) -> Result<SyntheticPair> {
    let (c, h, w) = scene.chw();
    if scene.ndim() != 3 || c != 3 {
        return Err(Error::dim(format!("scene must be 3×H×W, got {:?}", scene.shape())));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("scene size {h}×{w} must be even")));
    }
    if !(0.0..1.0).contains(&gen.vignette) {
        return Err(Error::param(format!(
            "vignette strength must lie in [0, 1), got {}",
            gen.vignette
        )));
    }
    if gen.gamma <= 0.0 || gen.noise_std < 0.0 {
        return Err(Error::param("gamma must be positive and noise_std non-negative"));
    }
    let inv = invert3(&gen.color_matrix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, gen.noise_std.max(0.0) as f64).map_err(|e| Error::param(e.to_string()))?;
    let gamma = gen.gamma as f64;
    let mut mosaic = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let lin = [0, 1, 2].map(|ch| (scene.at3(ch, y, x).clamp(0.0, 1.0) as f64).powf(gamma));
            let ch = gen.bayer_pattern.color_at(y, x).index();
            let cam = inv[ch][0] * lin[0] + inv[ch][1] * lin[1] + inv[ch][2] * lin[2];
            let mut v = cam * vignette_gain(y, x, h, w, gen.vignette) as f64;
            if gen.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            mosaic.push((v.clamp(0.0, 1.0) * 65535.0).round() as u16);
        }
    }
    let raw = RawFrame::new(mosaic, h, w, gen.bayer_pattern, 0, 65535)?;
    let flow = gen.flow.realize(h, w);
    Ok(SyntheticPair {
        raw,
        target: warp(scene, &flow)?,
        aligned_gt: scene.clone(),
        true_flow: flow,
        gen_params: gen.clone(),
    })
}

/// Scene content for [`random_scene`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStyle {
    /// Sum of random sinusoids per channel.
    Smooth,
    /// Random axis-aligned coloured rectangles.
    Blocks,
    #[default]
    Mixed,
}

/// Random textured scene in `[0.02, 0.98]`.
pub fn random_scene(h: usize, w: usize, style: SceneStyle, rng: &mut impl Rng) -> Image {
    let mut img = Tensor::zeros(&[3, h, w]);
    let bg: [f32; 3] = [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ];
    for (c, &b) in bg.iter().enumerate() {
        img.data_mut()[c * h * w..(c + 1) * h * w].fill(b);
    }
    if style != SceneStyle::Smooth {
        let n = rng.random_range(6..14);
        for _ in 0..n {
            let (bh, bw) = (rng.random_range(h / 8..=h / 2 + 1), rng.random_range(w / 8..=w / 2 + 1));
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let col: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    for (c, &v) in col.iter().enumerate() {
                        img.set3(c, y, x, v);
                    }
                }
            }
        }
    }
    if style != SceneStyle::Blocks {
        let amp = if style == SceneStyle::Smooth { 0.25 } else { 0.12 };
        for c in 0..3 {
            let waves: Vec<(f32, f32, f32)> = (0..4)
                .map(|_| {
                    let f = rng.random_range(0.05..0.6f32);
                    let th = rng.random_range(0.0..std::f32::consts::TAU);
                    (f * th.cos(), f * th.sin(), rng.random_range(0.0..std::f32::consts::TAU))
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let t: f32 = waves
                        .iter()
                        .map(|&(fx, fy, ph)| (fx * x as f32 + fy * y as f32 + ph).sin())
                        .sum();
                    let v = img.at3(c, y, x) + amp * t / 2.0;
                    img.set3(c, y, x, v);
                }
            }
        }
    }
    img.map(|v| v.clamp(0.02, 0.98))
}

/// Flow family for generated datasets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Zero,
    #[default]
    Translate,
    Affine,
    Smooth,
}

impl FlowKind {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown flow family {s:?} (zero|translate|affine|smooth)")))
    }
}

/// Dataset-level generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub flow: FlowKind,
    /// Largest displacement magnitude per axis, in pixels.
    pub max_shift: f32,
    /// Mean `(u, v)` added to translation flows, so the misalignment has a
    /// systematic part as well as a random one.
    pub shift_bias: [f32; 2],
    /// Round translations to whole pixels.
    pub integer_shift: bool,
    /// Extra scene border rendered and cropped away so targets carry real
    /// content at the edges.
    pub margin: usize,
    pub gamma: f32,
    pub vignette: f32,
    pub noise_std: f32,
    /// Off-diagonal strength of the shared camera matrix.
    pub color_strength: f32,
    /// Per-pair perturbation of the camera matrix.
    pub color_jitter: f32,
    pub style: SceneStyle,
    pub bayer_pattern: BayerPattern,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            size: 64,
            flow: FlowKind::Translate,
            max_shift: 6.0,
            shift_bias: [0.0, 0.0],
            integer_shift: true,
            margin: 8,
            gamma: 2.2,
            vignette: 0.3,
            noise_std: 0.0,
            color_strength: 0.2,
            color_jitter: 0.0,
            style: SceneStyle::Mixed,
            bayer_pattern: BayerPattern::Rggb,
            seed: 0,
        }
    }
}

/// Camera matrix with positive entries and rows summing to at most one, so
/// the raw stays in range without clipping.
fn camera_matrix(strength: f32, rng: &mut impl Rng) -> [[f32; 3]; 3] {
    let mut m = [[0.0f32; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        let gain = rng.random_range(0.6..0.9f32);
        let mut off = [0.0f32; 3];
        for (j, o) in off.iter_mut().enumerate() {
            if j != i {
                *o = strength * rng.random_range(0.2..1.0f32);
            }
        }
        let total: f32 = 1.0 + off.iter().sum::<f32>();
        for j in 0..3 {
            row[j] = gain * if i == j { 1.0 } else { off[j] } / total;
        }
    }
    m
}

fn invert_f32(m: &[[f32; 3]; 3]) -> Result<[[f32; 3]; 3]> {
    Ok(invert3(m)?.map(|r| r.map(|v| v as f32)))
}

/// Generate `cfg.n` pairs deterministically from `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticPair>> {
    if cfg.size < 8 || !cfg.size.is_multiple_of(2) || !cfg.margin.is_multiple_of(2) {
        return Err(Error::config(format!(
            "synthetic size must be even and >= 8, margin even (got {}, {})",
            cfg.size, cfg.margin
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = camera_matrix(cfg.color_strength, &mut rng);
    let big = cfg.size + 2 * cfg.margin;
    (0..cfg.n)
        .map(|i| {
            let mut cam = base;
            if cfg.color_jitter > 0.0 {
                for row in cam.iter_mut() {
                    for v in row.iter_mut() {
                        *v = (*v * (1.0 + cfg.color_jitter * rng.random_range(-1.0..1.0f32))).max(0.0);
                    }
                }
            }
            let m = cfg.max_shift;
            let shift = |rng: &mut ChaCha8Rng| {
                let s = rng.random_range(-m..=m);
                if cfg.integer_shift {
                    s.round()
                } else {
                    s
                }
            };
            let flow = match cfg.flow {
                FlowKind::Zero => FlowSpec::Zero,
                FlowKind::Translate => FlowSpec::Translate {
                    u: cfg.shift_bias[0] + shift(&mut rng),
                    v: cfg.shift_bias[1] + shift(&mut rng),
                },
                FlowKind::Affine => {
                    let lin = m / big as f32;
                    FlowSpec::Affine {
                        a: [
                            shift(&mut rng) / 2.0,
                            rng.random_range(-lin..=lin),
                            rng.random_range(-lin..=lin),
                            shift(&mut rng) / 2.0,
                            rng.random_range(-lin..=lin),
                            rng.random_range(-lin..=lin),
                        ],
                    }
                }
                FlowKind::Smooth => FlowSpec::Smooth {
                    amplitude: m,
                    sigma: big as f32 / 6.0,
                    seed: rng.random(),
                },
            };
            let scene = random_scene(big, big, cfg.style, &mut rng);
            let gen = GenParams {
                color_matrix: invert_f32(&cam)?,
                gamma: cfg.gamma,
                vignette: cfg.vignette,
                flow,
                noise_std: cfg.noise_std,
                bayer_pattern: cfg.bayer_pattern,
            };
            let noise_seed = rng.random::<u64>() ^ i as u64;
            let pair = synth_pair(&scene, &gen, noise_seed)?;
            if cfg.margin == 0 {
                return Ok(pair);
            }
            // vignette is defined on the delivered frame, so re-render the raw
            // on the cropped scene
            let mut cropped = pair.crop(cfg.margin, cfg.margin, cfg.size, cfg.size)?;
            let inner = scene.crop(cfg.margin, cfg.margin, cfg.size, cfg.size)?;
            cropped.raw = synth_pair(
                &inner,
                &GenParams {
                    flow: FlowSpec::Zero,
                    ..gen
                },
                noise_seed,
            )?
            .raw;
            Ok(cropped)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowalign::valid_mask;
    use crate::rawdata::demosaic_simple;

    fn scene(h: usize, w: usize) -> Image {
        random_scene(h, w, SceneStyle::Mixed, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn identity_pipeline() {
        let s = scene(16, 16);
        let gen = GenParams {
            gamma: 1.0,
            ..Default::default()
        };
        let p = synth_pair(&s, &gen, 0).unwrap();
        assert_eq!(p.target, s);
        assert_eq!(p.aligned_gt, s);
        assert_eq!(p.true_flow, FlowField::zeros(16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let c = gen.bayer_pattern.color_at(y, x).index();
                assert!((p.raw.normalized(y, x) - s.at3(c, y, x)).abs() <= 0.5 / 65535.0 + 1e-7);
            }
        }
    }

    #[test]
    fn zero_flow_any_colour() {
        let s = scene(16, 16);
        let gen = GenParams {
            color_matrix: [[1.2, -0.1, -0.1], [-0.2, 1.3, -0.1], [0.0, -0.3, 1.3]],
            vignette: 0.4,
            ..Default::default()
        };
        let p = synth_pair(&s, &gen, 0).unwrap();
        assert!(p.true_flow.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.target, p.aligned_gt);
    }

    #[test]
    fn translation_index_shift() {
        let s = scene(20, 20);
        let gen = GenParams {
            flow: FlowSpec::Translate { u: 3.0, v: -2.0 },
            ..Default::default()
        };
        let p = synth_pair(&s, &gen, 0).unwrap();
        // target(i, j) = gt(i + v, j + u)
        for i in 2..20 {
            for j in 0..17 {
                for c in 0..3 {
                    assert_eq!(p.target.at3(c, i, j), p.aligned_gt.at3(c, i - 2, j + 3));
                }
            }
        }
    }

    #[test]
    fn vignette_strength_checked() {
        let s = scene(8, 8);
        let gen = GenParams {
            vignette: 1.0,
            ..Default::default()
        };
        assert!(matches!(synth_pair(&s, &gen, 0), Err(Error::Parameter(_))));
        assert_eq!(vignette_gain(0, 0, 8, 8, 0.3), 0.7);
        assert_eq!(vignette_gain(7, 7, 8, 8, 0.3), 0.7);
    }

    #[test]
    fn vignette_darkens_corners() {
        let s = Tensor::full(&[3, 16, 16], 0.5f32);
        let gen = GenParams {
            gamma: 1.0,
            vignette: 0.5,
            ..Default::default()
        };
        let d = demosaic_simple(&synth_pair(&s, &gen, 0).unwrap().raw).unwrap();
        assert!(d.at3(1, 0, 0) < d.at3(1, 8, 8) - 0.15);
    }

    #[test]
    fn self_consistency_all_families() {
        for kind in [FlowKind::Zero, FlowKind::Translate, FlowKind::Affine, FlowKind::Smooth] {
            for margin in [0, 6] {
                let cfg = SynthConfig {
                    n: 3,
                    size: 24,
                    flow: kind,
                    margin,
                    integer_shift: false,
                    noise_std: 0.01,
                    ..Default::default()
                };
                for p in generate_dataset(&cfg).unwrap() {
                    let warped = warp(&p.aligned_gt, &p.true_flow).unwrap();
                    let m = valid_mask(&p.true_flow, 0.001);
                    for c in 0..3 {
                        for y in 0..24 {
                            for x in 0..24 {
                                if m.is_valid(y, x) {
                                    let d = (warped.at3(c, y, x) - p.target.at3(c, y, x)).abs();
                                    assert!(d <= 1e-6, "{kind:?} margin {margin}: {d}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn margin_removes_black_borders() {
        let cfg = SynthConfig {
            n: 4,
            size: 32,
            margin: 8,
            ..Default::default()
        };
        for p in generate_dataset(&cfg).unwrap() {
            assert!(p.target.data().iter().all(|&v| v >= 0.02 - 1e-6));
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SynthConfig {
            n: 2,
            size: 16,
            noise_std: 0.02,
            color_jitter: 0.1,
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.raw, y.raw);
            assert_eq!(x.target, y.target);
            assert_eq!(x.gen_params, y.gen_params);
        }
    }

    #[test]
    fn inverse_matrix() {
        let m = [[0.7, 0.1, 0.05], [0.08, 0.6, 0.1], [0.02, 0.12, 0.8]];
        let inv = invert3(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| m[i][k] as f64 * inv[k][j]).sum();
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        assert!(invert3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn smooth_flow_amplitude() {
        let f = FlowSpec::Smooth {
            amplitude: 3.0,
            sigma: 4.0,
            seed: 1,
        }
        .realize(32, 32);
        let peak = f.tensor().data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 3.0).abs() < 1e-5);
    }
}
