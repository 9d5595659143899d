//! Joint training of the colour mapper and the mapping network.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{
    discriminator_forward, init_discriminator, init_liteisp, liteisp_forward, update_running_stats, DiscriminatorConfig,
};
use crate::error::{Error, Result};
use crate::flowalign::{align_target, AlignRefs, AlignStrategy, FlowEstimator};
use crate::gcm::{coords_batch, gcm_forward, init_gcm};
use crate::harness::checkpoint::{Checkpoint, Models};
use crate::harness::config::TrainConfig;
use crate::harness::data::{load_pairs, make_batch, Batch, Split};
use crate::harness::eval::{evaluate_split, SplitEval};
use crate::losses::{
    loss_discriminator, loss_gan_generator, loss_gcm, loss_isp, loss_total_var, LossComponents, LossMode,
    PerceptualExtractor, RandomPyramid,
};
use crate::metrics::{LpipsSlot, Protocol};
use crate::nn::{Adam, AdamConfig, NormMode, Tape};
use crate::rawdata::SyntheticPair;
use crate::tensor::{Image, Tensor};

/// Fresh parameters for every network the configuration trains.
pub fn init_models(cfg: &TrainConfig) -> Result<Models> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = init_gcm(&cfg.gcm, &mut rng)?;
    gen.extend(init_liteisp(&cfg.liteisp, &mut rng)?);
    let disc = (cfg.mode == LossMode::Ispgan).then(|| {
        init_discriminator(
            &DiscriminatorConfig {
                base_width: cfg.gan.disc_width,
            },
            &mut rng,
        )
    });
    Ok(Models { gen, disc })
}

/// Losses and bookkeeping of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_gcm: Option<f64>,
    pub loss_isp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_gan: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_disc: Option<f64>,
    pub valid_fraction: f64,
    pub empty_masks: usize,
}

/// Expand an `N×1×H×W` mask to `N×c×H×W`.
fn expand_mask(m: &Tensor<f32>, c: usize) -> Tensor<f32> {
    let (n, hw) = (m.dim(0), m.dim(2) * m.dim(3));
    Tensor::from_fn(&[n, c, m.dim(2), m.dim(3)], |i| {
        let b = i / (c * hw);
        m.data()[b * hw + i % hw]
    })
}

/// Training state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub step: usize,
    pub epoch: usize,
    /// Data-order and augmentation stream.
    pub rng: ChaCha8Rng,
    gen_opt: Adam,
    disc_opt: Adam,
    phi: RandomPyramid,
    phi_digest: String,
    estimator: Box<dyn FlowEstimator>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let est = cfg.flow.build()?;
        Self::with_estimator(cfg, est)
    }

    pub fn with_estimator(cfg: TrainConfig, estimator: Box<dyn FlowEstimator>) -> Result<Self> {
        let models = init_models(&cfg)?;
        let adam = AdamConfig {
            beta1: cfg.optimizer.beta1,
            beta2: cfg.optimizer.beta2,
            ..Default::default()
        };
        let phi = RandomPyramid::new(cfg.perceptual.seed);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            models,
            step: 0,
            epoch: 0,
            gen_opt: Adam::new(adam),
            disc_opt: Adam::new(adam),
            phi_digest: phi.digest(),
            phi,
            estimator,
            cfg,
        })
    }

    pub fn estimator(&self) -> &dyn FlowEstimator {
        self.estimator.as_ref()
    }

    pub fn perceptual(&self) -> &RandomPyramid {
        &self.phi
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            step: self.step,
            config: self.cfg.clone(),
            rng: self.rng.clone(),
            models: self.models.clone(),
        }
    }

    /// Frozen components must not change during training.
    pub fn check_frozen(&self) -> Result<()> {
        if self.phi.digest() != self.phi_digest {
            return Err(Error::param("perceptual extractor parameters changed during training"));
        }
        Ok(())
    }

    /// One generator update (plus one discriminator update in `ispgan` mode).
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let cfg = &self.cfg;
        let lr = cfg.optimizer.lr_at(self.epoch);
        let (n, _, h, w) = (batch.target.dim(0), 3, batch.target.dim(2), batch.target.dim(3));
        let mut t = Tape::<f32>::new();
        let gb = self.models.gen.bind(&mut t, true);
        let xhat = t.constant(batch.demosaicked.clone());
        let yv = t.constant(batch.target.clone());
        let ytilde = if cfg.gcm.spn {
            let tau = if cfg.gcm.use_coords {
                Some(t.constant(coords_batch(n, h, w)?))
            } else {
                None
            };
            Some(gcm_forward(&mut t, &gb, &cfg.gcm, xhat, Some(yv), tau)?)
        } else {
            None
        };
        let packed = t.constant(batch.packed.clone());
        let yhat = liteisp_forward(&mut t, &gb, &cfg.liteisp, packed)?;
        if t.value(yhat).shape() != batch.target.shape() {
            return Err(Error::dim(format!(
                "output {:?} does not match target {:?}",
                t.value(yhat).shape(),
                batch.target.shape()
            )));
        }

        // alignment sees values only: y^w and m enter the graph as constants
        let mut warped = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let target = batch.target.batch_item(i);
            let dem = batch.demosaicked.batch_item(i);
            let gcm_i = ytilde.map(|v| t.value(v).batch_item(i));
            let out_i = (cfg.align_strategy == AlignStrategy::WithOutput).then(|| t.value(yhat).batch_item(i));
            let refs = AlignRefs {
                demosaicked: Some(&dem),
                gcm: gcm_i.as_ref(),
                output: out_i.as_ref(),
            };
            let (yw, m, _) = align_target(
                cfg.align_strategy,
                refs,
                &target,
                self.estimator.as_ref(),
                cfg.flow.epsilon,
            )?;
            warped.push(yw);
            masks.push(m.into_tensor());
        }
        let yw = Tensor::stack(&warped)?;
        let m = Tensor::stack(&masks)?;
        let valid_fraction = m.data().iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64;
        let empty_masks = masks.iter().filter(|mi| mi.data().iter().all(|&v| v == 0.0)).count();
        let ywv = t.constant(yw.clone());

        let l_gcm = match ytilde {
            Some(yt) => Some(loss_gcm(&mut t, yt, ywv, &m)?),
            None => None,
        };
        let l_isp = loss_isp(&mut t, yhat, ywv, &m, &self.phi, &cfg.loss)?;
        let gan_on = cfg.mode == LossMode::Ispgan && self.epoch >= cfg.gan.start_epoch;
        let m3 = expand_mask(&m, 3);
        let l_gan = match (&self.models.disc, gan_on) {
            (Some(disc), true) => {
                let db = disc.bind(&mut t, false);
                let mv = t.constant(m3.clone());
                let fake = t.mul(yhat, mv);
                let (d, _) = discriminator_forward(&mut t, &db, disc, fake, NormMode::Train)?;
                Some(loss_gan_generator(&mut t, d))
            }
            _ => None,
        };
        let comps = LossComponents {
            gcm: l_gcm,
            isp: Some(l_isp),
            gan: l_gan,
        };
        let mode = if l_gan.is_some() {
            LossMode::Ispgan
        } else {
            LossMode::Isp
        };
        let total = loss_total_var(&mut t, &comps, mode, &cfg.loss)?;
        let loss = t.value(total).item() as f64;
        if !loss.is_finite() {
            self.dump_nonfinite(batch, loss);
            return Err(Error::NonFiniteLoss {
                step: self.step,
                seed: cfg.seed,
                loss,
            });
        }
        let scalar = |v: Option<crate::nn::Var>| v.map(|v| t.value(v).item() as f64);
        let (loss_gcm, loss_isp, loss_gan) = (scalar(l_gcm), t.value(l_isp).item() as f64, scalar(l_gan));
        let grads = t.backward(total);
        let g = gb.grads(&self.models.gen, &grads);
        self.gen_opt.step(&mut self.models.gen, &g, lr)?;

        let mut loss_disc = None;
        if let (Some(disc), true) = (self.models.disc.as_mut(), cfg.mode == LossMode::Ispgan) {
            let fake = t.value(yhat).zip_map(&m3, |a, b| a * b)?;
            let real = yw.zip_map(&m3, |a, b| a * b)?;
            drop(t);
            let mut dt = Tape::<f32>::new();
            let db = disc.bind(&mut dt, true);
            let rv = dt.constant(real);
            let fv = dt.constant(fake);
            let (dr, sr) = discriminator_forward(&mut dt, &db, disc, rv, NormMode::Train)?;
            let (df, sf) = discriminator_forward(&mut dt, &db, disc, fv, NormMode::Train)?;
            let ld = loss_discriminator(&mut dt, dr, df);
            let v = dt.value(ld).item() as f64;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    seed: cfg.seed,
                    loss: v,
                });
            }
            let grads = dt.backward(ld);
            let g = db.grads(disc, &grads);
            self.disc_opt.step(disc, &g, lr)?;
            update_running_stats(disc, &sr);
            update_running_stats(disc, &sf);
            loss_disc = Some(v);
        }
        let report = StepReport {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss,
            loss_gcm,
            loss_isp,
            loss_gan,
            loss_disc,
            valid_fraction,
            empty_masks,
        };
        self.step += 1;
        Ok(report)
    }

    fn dump_nonfinite(&self, batch: &Batch, loss: f64) {
        log::error!("non-finite loss {loss} at step {} (seed {})", self.step, self.cfg.seed);
        let Some(out) = &self.cfg.out else { return };
        let stats = |img: &Image| {
            let d = img.data();
            let finite = d.iter().all(|v| v.is_finite());
            let (lo, hi) = d
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            serde_json::json!({"shape": img.shape(), "min": lo, "max": hi, "finite": finite})
        };
        let dump = serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "seed": self.cfg.seed,
            "loss": loss.to_string(),
            "pairs": batch.indices,
            "packed": stats(&batch.packed),
            "demosaicked": stats(&batch.demosaicked),
            "target": stats(&batch.target),
            "params_finite": self.models.gen.iter().all(|(_, v)| v.is_finite()),
        });
        let _ = std::fs::create_dir_all(out);
        let _ = std::fs::write(out.join("nonfinite_dump.json"), dump.to_string());
    }
}

/// Result of [`fit`].
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepReport>,
    /// Validation results, one per evaluated epoch.
    pub evals: Vec<(usize, SplitEval)>,
    pub split: Split,
}

/// Train on the configured data.
pub fn fit(cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let pairs = load_pairs(&cfg.data)?;
    let trainer = Trainer::new(cfg.clone())?;
    fit_with(trainer, &pairs)
}

/// Train `trainer` on `pairs` using its configuration's schedule and split.
pub fn fit_with(mut trainer: Trainer, pairs: &[SyntheticPair]) -> Result<FitOutput> {
    let cfg = trainer.cfg.clone();
    let split = Split::new(pairs.len(), cfg.data.split, cfg.seed)?;
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut log_file = match &cfg.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.json"), cfg.to_json())?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                out.join("train_log.jsonl"),
            )?))
        }
        None => None,
    };
    let done = |t: &Trainer| cfg.optimizer.max_steps.is_some_and(|m| t.step >= m);
    while trainer.epoch < cfg.optimizer.epochs && !done(&trainer) {
        let mut order = split.train.clone();
        order.shuffle(&mut trainer.rng);
        for chunk in order.chunks(cfg.optimizer.batch) {
            if done(&trainer) {
                break;
            }
            let batch = make_batch(pairs, chunk, &cfg.data, &mut trainer.rng)?;
            let r = trainer.train_step(&batch)?;
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &r)?;
                writeln!(f)?;
            }
            history.push(r);
        }
        trainer.epoch += 1;
        trainer.check_frozen()?;
        if cfg.eval_every > 0 && trainer.epoch.is_multiple_of(cfg.eval_every) && !split.val.is_empty() {
            let protocol = if cfg.gcm.spn {
                Protocol::AlignGtWithRaw
            } else {
                Protocol::Original
            };
            let e = evaluate_split(
                &trainer.models,
                &cfg,
                pairs,
                &split.val,
                trainer.estimator(),
                protocol,
                &LpipsSlot::absent("not evaluated during training"),
            )?;
            log::info!(
                "epoch {}: val PSNR {:.2} dB ({})",
                trainer.epoch,
                e.report.mean_psnr,
                protocol.name()
            );
            evals.push((trainer.epoch, e));
        }
        if let Some(out) = &cfg.out {
            trainer.checkpoint().save(&out.join("checkpoint"))?;
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(out) = &cfg.out {
        trainer.checkpoint().save(&out.join("checkpoint"))?;
    }
    Ok(FitOutput {
        checkpoint: trainer.checkpoint(),
        history,
        evals,
        split,
    })
}
