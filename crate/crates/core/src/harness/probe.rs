//! Marker-tracking probe for pixel shifts introduced by a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Models;
use crate::harness::config::TrainConfig;
use crate::harness::eval::infer_raw;
use crate::rawdata::{random_scene, synth_pair, FlowSpec, GenParams};
use crate::tensor::{Image, Tensor};

/// Flat grey scene with a Gaussian bump centred at `(y, x)`.
pub fn marker_scene(size: usize, (cy, cx): (f64, f64), background: f32, amplitude: f32, sigma: f64) -> Image {
    Tensor::from_fn(&[3, size, size], |i| {
        let p = i % (size * size);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let r2 = (y - cy).powi(2) + (x - cx).powi(2);
        background + amplitude * (-r2 / (2.0 * sigma * sigma)).exp() as f32
    })
}

/// Centroid `(y, x)` of the brightness excess over the window border median,
/// in a `(2r+1)²` window around `center`.
pub fn marker_centroid(img: &Image, center: (usize, usize), r: usize) -> (f64, f64) {
    let (c, h, w) = img.chw();
    let lum = |y: usize, x: usize| (0..c).map(|ch| img.at3(ch, y, x) as f64).sum::<f64>() / c as f64;
    let (y0, y1) = (center.0.saturating_sub(r), (center.0 + r).min(h - 1));
    let (x0, x1) = (center.1.saturating_sub(r), (center.1 + r).min(w - 1));
    let mut border: Vec<f64> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if y == y0 || y == y1 || x == x0 || x == x1 {
                border.push(lum(y, x));
            }
        }
    }
    border.sort_by(f64::total_cmp);
    let bg = border[border.len() / 2];
    let (mut s, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let e = (lum(y, x) - bg).max(0.0);
            s += e;
            sy += e * y as f64;
            sx += e * x as f64;
        }
    }
    if s == 0.0 {
        return (center.0 as f64, center.1 as f64);
    }
    (sy / s, sx / s)
}

/// Settings of [`marker_shift`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkerProbe {
    pub size: usize,
    pub trials: usize,
    pub amplitude: f32,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for MarkerProbe {
    fn default() -> Self {
        Self {
            size: 64,
            trials: 16,
            amplitude: 0.3,
            sigma: 4.0,
            seed: 0x6d61726b,
        }
    }
}

/// Mean marker displacement `(dx, dy)` introduced by the mapping network.
///
/// Each trial draws a scene in the configured style and a marker position,
/// renders the scene with and without an added Gaussian marker through `gen`
/// (no flow, no noise) and maps both raws. The centroid of the output
/// difference is compared with the centroid of the marker actually added.
pub fn marker_shift(models: &Models, cfg: &TrainConfig, gen: &GenParams, probe: &MarkerProbe) -> Result<(f64, f64)> {
    let MarkerProbe {
        size,
        trials,
        amplitude,
        sigma,
        seed,
    } = *probe;
    if size < 16 || trials == 0 {
        return Err(Error::param("marker probe needs size >= 16 and at least one trial"));
    }
    let g = GenParams {
        flow: FlowSpec::Zero,
        noise_std: 0.0,
        ..gen.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = size / 4;
    let (mut dx, mut dy) = (0.0, 0.0);
    for _ in 0..trials {
        let scene = random_scene(size, size, cfg.data.synth.style, &mut rng);
        let (cy, cx) = (rng.random_range(r..size - r), rng.random_range(r..size - r));
        let bump = marker_scene(size, (cy as f64, cx as f64), 0.0, amplitude, sigma);
        let marked = scene.zip_map(&bump, |a, b| (a + b).min(1.0))?;
        let added = marked.zip_map(&scene, |a, b| a - b)?;
        let plain = infer_raw(models, cfg, &synth_pair(&scene, &g, 0)?.raw)?;
        let with = infer_raw(models, cfg, &synth_pair(&marked, &g, 0)?.raw)?;
        let response = with.zip_map(&plain, |a, b| a - b)?;
        let (ry, rx) = marker_centroid(&added, (cy, cx), r);
        let (oy, ox) = marker_centroid(&response, (cy, cx), r);
        dx += ox - rx;
        dy += oy - ry;
    }
    Ok((dx / trials as f64, dy / trials as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowalign::{warp, FlowField};

    #[test]
    fn centroid_tracks_translation() {
        let s = marker_scene(32, (16.0, 16.0), 0.3, 0.5, 1.5);
        let (y, x) = marker_centroid(&s, (16, 16), 8);
        assert!((y - 16.0).abs() < 1e-6 && (x - 16.0).abs() < 1e-6);
        // sampling at p + (−2, 1) moves content by (+2, −1)
        let moved = warp(&s, &FlowField::constant(32, 32, -2.0, 1.0)).unwrap();
        let (y, x) = marker_centroid(&moved, (16, 16), 8);
        assert!((x - 18.0).abs() < 1e-3 && (y - 15.0).abs() < 1e-3, "{x} {y}");
    }
}
