//! Ablation suites: alignment strategy, GCM components, RCAB count.

use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::param_count;
use crate::error::{Error, Result};
use crate::flowalign::AlignStrategy;
use crate::harness::config::TrainConfig;
use crate::harness::data::load_pairs;
use crate::harness::eval::evaluate_split;
use crate::harness::train::{fit_with, Trainer};
use crate::metrics::{LpipsSlot, Protocol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Alignment,
    GcmComponents,
    RcabCount,
}

impl AblationSuite {
    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::Alignment => "alignment",
            AblationSuite::GcmComponents => "gcm_components",
            AblationSuite::RcabCount => "rcab_count",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            AblationSuite::Alignment,
            AblationSuite::GcmComponents,
            AblationSuite::RcabCount,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::config(format!("unknown suite {s:?} (alignment | gcm_components | rcab_count)")))
    }
}

pub const RCAB_COUNTS: [usize; 4] = [2, 4, 8, 20];

/// One configuration per table row, all sharing `base`'s data and seed.
pub fn ablation_variants(suite: AblationSuite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        AblationSuite::Alignment => [
            AlignStrategy::None,
            AlignStrategy::WithOutput,
            AlignStrategy::WithDemosaicked,
            AlignStrategy::WithGcm,
        ]
        .into_iter()
        .map(|s| {
            (
                s.label().to_string(),
                with(&|c| {
                    c.align_strategy = s;
                    c.gcm.spn = true;
                }),
            )
        })
        .collect(),
        AblationSuite::GcmComponents => vec![
            (
                "N/A".into(),
                with(&|c| {
                    c.gcm.spn = false;
                    c.gcm.use_target_guidance = false;
                    c.gcm.use_coords = false;
                    c.align_strategy = AlignStrategy::None;
                }),
            ),
            (
                "SPN".into(),
                with(&|c| {
                    c.gcm.spn = true;
                    c.gcm.use_target_guidance = false;
                    c.gcm.use_coords = false;
                    c.align_strategy = AlignStrategy::WithGcm;
                }),
            ),
            (
                "SPN+y".into(),
                with(&|c| {
                    c.gcm.spn = true;
                    c.gcm.use_target_guidance = true;
                    c.gcm.use_coords = false;
                    c.align_strategy = AlignStrategy::WithGcm;
                }),
            ),
            (
                "SPN+y+τ".into(),
                with(&|c| {
                    c.gcm.spn = true;
                    c.gcm.use_target_guidance = true;
                    c.gcm.use_coords = true;
                    c.align_strategy = AlignStrategy::WithGcm;
                }),
            ),
        ],
        AblationSuite::RcabCount => RCAB_COUNTS
            .into_iter()
            .map(|n| (format!("{n}"), with(&|c| c.liteisp.n_rcab = n)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    /// `ŷ` against the aligned ground truth, held-out mean.
    pub psnr_output: f64,
    /// `ỹ` against the aligned ground truth, held-out mean.
    pub psnr_gcm: Option<f64>,
    /// `ŷ` under the align-GT-with-result protocol.
    pub psnr_protocol: f64,
    pub ssim_protocol: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>11} {:>11} {:>11} {:>8} {:>7}",
            self.suite.name(),
            "params",
            "PSNR(ŷ)",
            "PSNR(ỹ)",
            "PSNR(res)",
            "SSIM",
            "steps"
        );
        for r in &self.rows {
            let gcm = r.psnr_gcm.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>11.2} {:>11} {:>11.2} {:>8.4} {:>7}",
                r.label, r.params, r.psnr_output, gcm, r.psnr_protocol, r.ssim_protocol, r.steps
            );
        }
        s
    }
}

/// Train one model per variant on the same data and seed and score each on
/// the held-out pairs.
pub fn run_ablation(suite: AblationSuite, base: &TrainConfig) -> Result<AblationReport> {
    base.validate()?;
    let pairs = load_pairs(&base.data)?;
    let mut rows = Vec::new();
    for (label, cfg) in ablation_variants(suite, base) {
        let mut cfg = cfg;
        if let Some(out) = &base.out {
            cfg.out = Some(out.join(label.replace(['/', ' '], "_")));
        }
        let start = Instant::now();
        let trainer = Trainer::new(cfg.clone())?;
        let est = cfg.flow.build()?;
        let fit = fit_with(trainer, &pairs)?;
        let held = fit.split.held_out();
        let e = evaluate_split(
            &fit.checkpoint.models,
            &cfg,
            &pairs,
            &held,
            est.as_ref(),
            Protocol::AlignGtWithResult,
            &LpipsSlot::absent("not evaluated in ablations"),
        )?;
        rows.push(AblationRow {
            label,
            params: param_count(&fit.checkpoint.models.gen.filter_prefix("liteisp.")),
            psnr_output: e.truth.psnr_output,
            psnr_gcm: e.truth.psnr_gcm,
            psnr_protocol: e.report.mean_psnr,
            ssim_protocol: e.report.mean_ssim,
            steps: fit.checkpoint.step,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "{}: {}",
            suite.name(),
            rows.last().map(|r| r.label.as_str()).unwrap_or("")
        );
    }
    Ok(AblationReport { suite, rows })
}
