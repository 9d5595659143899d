//! Inference with trained models and split-level evaluation.

use serde::Serialize;

use crate::backbone::liteisp_forward;
use crate::error::{Error, Result};
use crate::flowalign::{valid_mask, warp, FlowEstimator};
use crate::gcm::{coords_batch, gcm_forward};
use crate::harness::checkpoint::Models;
use crate::harness::config::TrainConfig;
use crate::harness::data::model_inputs;
use crate::metrics::{evaluate_set, psnr, EvalItem, EvalReport, LpipsSlot, Protocol};
use crate::nn::Tape;
use crate::rawdata::{pack_bayer, RawFrame, SyntheticPair};
use crate::tensor::{Image, Tensor};

/// Edge-replicate a `C×H×W` tensor up to multiples of `k`.
fn pad_to_multiple(x: &Image, k: usize) -> Image {
    let (c, h, w) = x.chw();
    let (ph, pw) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    Tensor::from_fn(&[c, ph, pw], |i| {
        let ch = i / (ph * pw);
        let p = i % (ph * pw);
        x.at3(ch, (p / pw).min(h - 1), (p % pw).min(w - 1))
    })
}

/// Mapping-network output for a packed `4×H×W` raw; sizes that are not
/// multiples of 8 are edge-padded and the output cropped back.
pub fn map_packed(models: &Models, cfg: &TrainConfig, packed: &Image) -> Result<Image> {
    let (_, h, w) = packed.chw();
    let padded = pad_to_multiple(packed, 8);
    let mut t = Tape::<f32>::inference();
    let b = models.gen.bind(&mut t, false);
    let x = t.constant(padded.reshape(&[1, 4, h.div_ceil(8) * 8, w.div_ceil(8) * 8])?);
    let y = liteisp_forward(&mut t, &b, &cfg.liteisp, x)?;
    let out = t.take_value(y);
    let (oh, ow) = (out.dim(2), out.dim(3));
    out.reshape(&[3, oh, ow])?.crop(0, 0, 2 * h, 2 * w)
}

/// RAW frame to sRGB.
pub fn infer_raw(models: &Models, cfg: &TrainConfig, raw: &RawFrame) -> Result<Image> {
    map_packed(models, cfg, &pack_bayer(raw)?)
}

/// GCM output `ỹ` for a demosaicked raw and its target.
pub fn run_gcm(models: &Models, cfg: &TrainConfig, demosaicked: &Image, target: &Image) -> Result<Image> {
    if !cfg.gcm.spn {
        return Err(Error::config("the model has no GCM"));
    }
    demosaicked.expect_same_shape(target)?;
    let (_, h, w) = demosaicked.chw();
    let mut t = Tape::<f32>::inference();
    let b = models.gen.bind(&mut t, false);
    let x = t.constant(demosaicked.clone().reshape(&[1, 3, h, w])?);
    let y = t.constant(target.clone().reshape(&[1, 3, h, w])?);
    let tau = if cfg.gcm.use_coords {
        Some(t.constant(coords_batch(1, h, w)?))
    } else {
        None
    };
    let out = gcm_forward(&mut t, &b, &cfg.gcm, x, Some(y), tau)?;
    t.take_value(out).reshape(&[3, h, w])
}

/// `ŷ` and, when the model has a GCM, `ỹ` for one pair.
pub fn run_pair(models: &Models, cfg: &TrainConfig, pair: &SyntheticPair) -> Result<(Image, Option<Image>)> {
    let (packed, dem) = model_inputs(pair)?;
    let out = map_packed(models, cfg, &packed)?;
    let gcm = if cfg.gcm.spn {
        Some(run_gcm(models, cfg, &dem, &pair.target)?)
    } else {
        None
    };
    Ok((out, gcm))
}

/// Scores against the pixel-aligned ground truth, available for synthetic data.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TruthMetrics {
    /// PSNR of `ŷ` against the aligned ground truth.
    pub psnr_output: f64,
    /// PSNR of `ỹ` against the aligned ground truth.
    pub psnr_gcm: Option<f64>,
    /// Mean `|ỹ − yʷ|` over valid pixels, `yʷ` aligned to `ỹ`.
    pub gcm_l1_warped: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitEval {
    pub report: EvalReport,
    pub truth: TruthMetrics,
}

/// Run the models on `indices` and score them under `protocol`.
pub fn evaluate_split(
    models: &Models,
    cfg: &TrainConfig,
    pairs: &[SyntheticPair],
    indices: &[usize],
    estimator: &dyn FlowEstimator,
    protocol: Protocol,
    lpips: &LpipsSlot,
) -> Result<SplitEval> {
    let mut outputs = Vec::with_capacity(indices.len());
    let mut truth = TruthMetrics::default();
    let (mut gcm_psnr, mut gcm_l1) = (Vec::new(), Vec::new());
    for &i in indices {
        let pair = pairs
            .get(i)
            .ok_or_else(|| Error::param(format!("pair index {i} out of range")))?;
        let (out, gcm) = run_pair(models, cfg, pair)?;
        truth.psnr_output += psnr(&out, &pair.aligned_gt, None)?;
        if let Some(g) = &gcm {
            gcm_psnr.push(psnr(g, &pair.aligned_gt, None)?);
            let flow = estimator.estimate(&g.clamp01(), &pair.target)?;
            let yw = warp(&pair.target, &flow)?;
            let m = valid_mask(&flow, cfg.flow.epsilon);
            let (c, h, w) = g.chw();
            let (mut s, mut k) = (0.0f64, 0usize);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if m.is_valid(y, x) {
                            s += (g.at3(ch, y, x) - yw.at3(ch, y, x)).abs() as f64;
                            k += 1;
                        }
                    }
                }
            }
            if k > 0 {
                gcm_l1.push(s / k as f64);
            }
        }
        outputs.push((out, gcm));
    }
    let n = indices.len().max(1) as f64;
    truth.psnr_output /= n;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    truth.psnr_gcm = mean(&gcm_psnr);
    truth.gcm_l1_warped = mean(&gcm_l1);
    let items: Vec<EvalItem<'_>> = indices
        .iter()
        .zip(&outputs)
        .map(|(&i, (out, gcm))| EvalItem {
            output: out,
            target: &pairs[i].target,
            gcm: gcm.as_ref(),
        })
        .collect();
    let mut report = evaluate_set(&items, estimator, protocol, lpips)?;
    for (m, &i) in report.images.iter_mut().zip(indices) {
        m.index = i;
    }
    Ok(SplitEval { report, truth })
}
