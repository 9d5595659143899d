//! PSNR / SSIM and the three ground-truth alignment protocols used for
//! evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowalign::{resolve_asset_path, valid_mask, warp, FlowEstimator, ValidityMask, DEFAULT_EPSILON};
use crate::rawdata::io::write_png;
use crate::tensor::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_mask(img: &Image, m: Option<&ValidityMask>) -> Result<()> {
    if let Some(m) = m {
        let (_, h, w) = img.chw();
        if m.tensor().shape() != [1, h, w] {
            return Err(Error::dim(format!(
                "mask {:?} does not match image {:?}",
                m.tensor().shape(),
                img.shape()
            )));
        }
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over the RGB elements of the masked pixels, inputs
/// clamped to `[0, 1]`.
pub fn psnr(a: &Image, b: &Image, m: Option<&ValidityMask>) -> Result<f64> {
    a.expect_same_shape(b)?;
    check_mask(a, m)?;
    let (c, h, w) = a.chw();
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut se = 0.0f64;
    let mut count = 0usize;
    for p in 0..hw {
        if m.is_some_and(|m| m.tensor().data()[p] == 0.0) {
            continue;
        }
        for ch in 0..c {
            let i = ch * hw + p;
            let d = ad[i].clamp(0.0, 1.0) as f64 - bd[i].clamp(0.0, 1.0) as f64;
            se += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("PSNR over an empty mask".into()));
    }
    if se == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (count as f64 / se).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Weighted sums of `plane` over every full `11×11` window (row-major
/// top-left positions).
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Windows whose pixels are all valid.
fn full_windows(m: &ValidityMask, h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let md = m.tensor().data();
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).all(|dy| (0..SSIM_WINDOW).all(|dx| md[(y + dy) * w + x + dx] == 1.0));
        }
    }
    out
}

/// Channel-averaged mean SSIM over the Gaussian windows lying entirely inside
/// the image (and inside the mask, when one is given).
pub fn ssim(a: &Image, b: &Image, m: Option<&ValidityMask>) -> Result<f64> {
    a.expect_same_shape(b)?;
    check_mask(a, m)?;
    let (c, h, w) = a.chw();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let keep = m.map(|m| full_windows(m, h, w));
    let nwin = keep
        .as_ref()
        .map_or((h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW), |k| {
            k.iter().filter(|&&v| v).count()
        });
    if nwin == 0 {
        return Err(Error::UndefinedMetric("SSIM mask contains no complete window".into()));
    }
    let g = gaussian_window();
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|v| v.clamp(0.0, 1.0) as f64)
            .collect();
        let pb: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|v| v.clamp(0.0, 1.0) as f64)
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &g);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &g);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &g);
        let mut s = 0.0;
        for i in 0..mu_a.len() {
            if keep.as_ref().is_some_and(|k| !k[i]) {
                continue;
            }
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            s += ((2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / nwin as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Metrics against the unaligned target.
    #[default]
    Original,
    /// Target warped onto the colour-mapped proxy of the input.
    AlignGtWithRaw,
    /// Target warped onto the model output.
    AlignGtWithResult,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::Original,
        Protocol::AlignGtWithRaw,
        Protocol::AlignGtWithResult,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Original => "original",
            Protocol::AlignGtWithRaw => "align_gt_with_raw",
            Protocol::AlignGtWithResult => "align_gt_with_result",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown protocol {s:?} (original | align_gt_with_raw | align_gt_with_result)"
            ))
        })
    }
}

/// One image to score.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    /// Model output `ŷ`.
    pub output: &'a Image,
    /// Ground-truth target `y`.
    pub target: &'a Image,
    /// GCM output `ỹ`, required by [`Protocol::AlignGtWithRaw`].
    pub gcm: Option<&'a Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// Position in the evaluated set (the pair index for split evaluations).
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub valid_fraction: f64,
}

/// Score one image under `protocol`.
pub fn evaluate(item: EvalItem<'_>, estimator: &dyn FlowEstimator, protocol: Protocol) -> Result<ImageMetrics> {
    let (y, mask) = aligned_target(item, estimator, protocol)?;
    let m = mask.as_ref();
    Ok(ImageMetrics {
        index: 0,
        psnr: psnr(item.output, &y, m)?,
        ssim: ssim(item.output, &y, m)?,
        lpips: None,
        valid_fraction: m.map_or(1.0, |m| m.valid_fraction()),
    })
}

/// The target as seen by `protocol` and its validity mask (`None` = all valid).
pub fn aligned_target(
    item: EvalItem<'_>,
    estimator: &dyn FlowEstimator,
    protocol: Protocol,
) -> Result<(Image, Option<ValidityMask>)> {
    item.output.expect_same_shape(item.target)?;
    let reference = match protocol {
        Protocol::Original => return Ok((item.target.clone(), None)),
        Protocol::AlignGtWithRaw => item
            .gcm
            .ok_or_else(|| Error::config("protocol align_gt_with_raw needs the GCM output of the model"))?,
        Protocol::AlignGtWithResult => item.output,
    };
    reference.expect_same_shape(item.target)?;
    let flow = estimator.estimate(&reference.clamp01(), item.target)?;
    Ok((warp(item.target, &flow)?, Some(valid_mask(&flow, DEFAULT_EPSILON))))
}

/// Per-image records plus means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_lpips: Option<f64>,
    pub mean_valid_fraction: f64,
    /// Why LPIPS is missing, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips_note: Option<String>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Image {
        protocol: Protocol,
        #[serde(flatten)]
        m: &'a ImageMetrics,
    },
    Summary {
        protocol: Protocol,
        n: usize,
        mean_psnr: f64,
        mean_ssim: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        mean_lpips: Option<f64>,
        mean_valid_fraction: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        lpips_note: Option<&'a str>,
    },
}

impl EvalReport {
    pub fn from_images(protocol: Protocol, images: Vec<ImageMetrics>, lpips_note: Option<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::UndefinedMetric("no images to evaluate".into()));
        }
        let n = images.len() as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        let mean_lpips = images
            .iter()
            .map(|m| m.lpips)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(Self {
            protocol,
            mean_psnr: mean(&|m| m.psnr),
            mean_ssim: mean(&|m| m.ssim),
            mean_valid_fraction: mean(&|m| m.valid_fraction),
            lpips_note: if mean_lpips.is_some() { None } else { lpips_note },
            mean_lpips,
            images,
        })
    }

    /// One JSON object per image followed by a summary object.
    pub fn write_json_lines(&self, out: &mut impl Write) -> Result<()> {
        for m in &self.images {
            serde_json::to_writer(
                &mut *out,
                &Line::Image {
                    protocol: self.protocol,
                    m,
                },
            )?;
            writeln!(out)?;
        }
        let summary = Line::Summary {
            protocol: self.protocol,
            n: self.images.len(),
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            mean_lpips: self.mean_lpips,
            mean_valid_fraction: self.mean_valid_fraction,
            lpips_note: self.lpips_note.as_deref(),
        };
        serde_json::to_writer(&mut *out, &summary)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn to_json_lines(&self) -> String {
        let mut buf = Vec::new();
        self.write_json_lines(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Score a set of images; LPIPS is added when a plugin is loaded.
pub fn evaluate_set(
    items: &[EvalItem<'_>],
    estimator: &dyn FlowEstimator,
    protocol: Protocol,
    lpips: &LpipsSlot,
) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(items.len());
    let mut note = lpips.absent_reason().map(str::to_owned);
    for (i, item) in items.iter().enumerate() {
        let mut m = evaluate(*item, estimator, protocol)?;
        m.index = i;
        if let LpipsSlot::Loaded(metric) = lpips {
            match metric.distance(item.output, item.target) {
                Ok(d) => m.lpips = Some(d),
                Err(e) => {
                    log::warn!("LPIPS plugin failed on image {i}: {e}");
                    note = Some(format!("plugin {} failed: {e}", metric.name()));
                }
            }
        }
        images.push(m);
    }
    if note.is_some() {
        images.iter_mut().for_each(|m| m.lpips = None);
    }
    EvalReport::from_images(protocol, images, note)
}

/// Learned perceptual distance provided by an external artifact.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Optional LPIPS implementation.
pub enum LpipsSlot {
    Loaded(Box<dyn PerceptualMetric>),
    Absent { reason: String },
}

impl LpipsSlot {
    pub fn absent(reason: impl Into<String>) -> Self {
        LpipsSlot::Absent { reason: reason.into() }
    }

    pub fn absent_reason(&self) -> Option<&str> {
        match self {
            LpipsSlot::Loaded(_) => None,
            LpipsSlot::Absent { reason } => Some(reason),
        }
    }
}

#[derive(Debug, Deserialize)]
struct PluginManifest {
    name: String,
    command: String,
    #[serde(default)]
    args: Vec<String>,
}

/// External metric invoked as `command [args..] --a A.png --b B.png`; it
/// prints the distance on stdout.
#[derive(Debug)]
pub struct ExternalMetric {
    name: String,
    command: PathBuf,
    args: Vec<String>,
}

static METRIC_CALLS: AtomicUsize = AtomicUsize::new(0);

impl PerceptualMetric for ExternalMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.expect_same_shape(b)?;
        let id = METRIC_CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("isp-align-metric-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let (pa, pb) = (dir.join("a.png"), dir.join("b.png"));
        let run = || -> Result<f64> {
            write_png(&pa, &a.clamp01())?;
            write_png(&pb, &b.clamp01())?;
            let out = Command::new(&self.command)
                .args(&self.args)
                .arg("--a")
                .arg(&pa)
                .arg("--b")
                .arg(&pb)
                .output()?;
            if !out.status.success() {
                return Err(Error::Format(format!("metric plugin exited with {}", out.status)));
            }
            let text = String::from_utf8_lossy(&out.stdout);
            text.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("metric plugin printed {:?}: {e}", text.trim())))
        };
        let r = run();
        let _ = std::fs::remove_dir_all(&dir);
        r
    }
}

/// Load the LPIPS plugin manifest at `path`. Failures are reported as an
/// absent slot with a warning, never as an error.
pub fn lpips_plugin(path: Option<&Path>) -> LpipsSlot {
    let Some(path) = path else {
        return LpipsSlot::absent("no LPIPS plugin configured");
    };
    let path = resolve_asset_path(path);
    let loaded = std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str::<PluginManifest>(&s).map_err(|e| e.to_string()));
    match loaded {
        Ok(m) => {
            let base = path.parent().unwrap_or(Path::new("."));
            let command = if Path::new(&m.command).is_relative() && base.join(&m.command).exists() {
                base.join(&m.command)
            } else {
                PathBuf::from(&m.command)
            };
            LpipsSlot::Loaded(Box::new(ExternalMetric {
                name: m.name,
                command,
                args: m.args,
            }))
        }
        Err(e) => {
            log::warn!("LPIPS plugin {} unavailable: {e}", path.display());
            LpipsSlot::absent(format!("cannot load {}: {e}", path.display()))
        }
    }
}
