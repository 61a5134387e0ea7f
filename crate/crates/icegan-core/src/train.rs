//! Alternating adversarial training: a discriminator step on real apex
//! frames plus detached synthetic frames, then a generator step on the
//! adversarial and identity-preserving objectives, with Adam under a
//! cosine learning-rate schedule. Also hosts the trained-model classifier
//! used by the LOSO evaluation harness.

use crate::capsule::{DiscKind, Discriminator, DiscriminatorCfg};
use crate::config::{GenArchCfg, RunConfig};
use crate::data::{augment_neighbors, Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::generator::{one_hot_rows, GenArch, Generator, GeneratorCfg};
use crate::loss::{self, PerceptualNet};
use crate::metrics::{ClassifierFactory, FoldClassifier, Prediction};
use crate::nn::{save_checkpoint, ForwardCtx, LrSchedule, ParamRegistry};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 128;

/// Everything needed to run forward passes: module definitions, the shared
/// parameter registry and the frozen perceptual net.
pub struct Models {
    pub generator: Option<Generator>,
    pub discriminator: Discriminator,
    pub registry: ParamRegistry,
    pub perceptual: PerceptualNet,
}

fn generator_cfg(cfg: &RunConfig) -> Option<GeneratorCfg> {
    let arch = match cfg.model.gen_arch {
        GenArchCfg::None => return None,
        GenArchCfg::DecoderOnly => GenArch::DecoderOnly,
        GenArchCfg::EncDec => GenArch::EncDec,
    };
    Some(GeneratorCfg {
        channel_plan: cfg.model.channel_plan.clone(),
        noise_dim: cfg.model.noise_dim,
        n_classes: N_CLASSES,
        grm_mode: cfg.model.grm_mode,
        arch,
    })
}

fn discriminator_cfg(cfg: &RunConfig) -> DiscriminatorCfg {
    DiscriminatorCfg {
        patch_plan: cfg.model.patch_plan.clone(),
        n_prim: cfg.model.n_prim,
        d_prim: cfg.model.d_prim,
        d_adv: cfg.model.d_adv,
        d_exp: cfg.model.d_exp,
        routing_iters: cfg.model.routing_iters,
        n_classes: N_CLASSES,
        kind: cfg.model.discriminator,
        cnn_width: cfg.model.cnn_width,
        cnn_large_width: cfg.model.cnn_large_width,
    }
}

/// Builds models with freshly initialized parameters from the run seed.
pub fn build_models(cfg: &RunConfig) -> Models {
    let mut init_rng = rng::stream(cfg.optim.seed, "init");
    let mut registry = ParamRegistry::new();
    let generator = generator_cfg(cfg).map(Generator::new);
    if let Some(g) = &generator {
        g.register(&mut registry, &mut init_rng);
    }
    let discriminator = Discriminator::new(discriminator_cfg(cfg));
    discriminator.register(&mut registry, &mut init_rng);
    Models {
        generator,
        discriminator,
        registry,
        perceptual: PerceptualNet::new(cfg.perceptual_seed()),
    }
}

/// Rebuilds the model structure and loads trained weights; the checkpoint
/// must carry exactly the parameters the config defines.
pub fn load_models(cfg: &RunConfig, checkpoint: &Path) -> Result<Models> {
    let mut models = build_models(cfg);
    let loaded = crate::nn::load_checkpoint(checkpoint)?;
    if loaded.len() != models.registry.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model defines {}",
            loaded.len(),
            models.registry.len()
        )));
    }
    for (name, p) in loaded.iter() {
        let slot = models.registry.get_mut(name)?;
        if slot.tensor.shape != p.tensor.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                slot.tensor.shape, p.tensor.shape
            )));
        }
        slot.tensor.data.copy_from_slice(&p.tensor.data);
    }
    Ok(models)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StepLosses {
    pub d_adv: f64,
    pub g_adv: f64,
    pub l_pixel: f64,
    pub l_per: f64,
    pub l_margin: f64,
    pub l_rec: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [
            self.d_adv,
            self.g_adv,
            self.l_pixel,
            self.l_per,
            self.l_margin,
            self.l_rec,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub steps: usize,
    pub wall_secs: f64,
}

/// One base training pair plus its neighbor variants.
struct TrainGroup {
    variants: Vec<Sample>,
}

pub struct Trainer {
    cfg: RunConfig,
    pub models: Models,
    schedule: LrSchedule,
    groups: Vec<TrainGroup>,
    run_dir: PathBuf,
    checkpoints: Vec<PathBuf>,
    steps_done: usize,
}

impl Trainer {
    /// Prepares a run directory, augments the training samples and writes
    /// the config snapshot.
    pub fn new(cfg: RunConfig, train_samples: &[Sample], run_dir: &Path) -> Result<Self> {
        crate::tune_allocator();
        cfg.validate()?;
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        std::fs::write(run_dir.join("config.json"), cfg.to_json()?)
            .map_err(|e| Error::io(run_dir.join("config.json"), e))?;
        let groups: Vec<TrainGroup> = train_samples
            .iter()
            .map(|s| TrainGroup {
                variants: augment_neighbors(s),
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::Corpus("empty training set".into()));
        }
        let models = build_models(&cfg);
        let schedule = LrSchedule {
            base_lr: cfg.optim.lr,
            t_max: cfg.optim.epochs,
            min_lr: cfg.optim.min_lr,
        };
        Ok(Trainer {
            cfg,
            models,
            schedule,
            groups,
            run_dir: run_dir.to_path_buf(),
            checkpoints: Vec::new(),
            steps_done: 0,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn checkpoints(&self) -> &[PathBuf] {
        &self.checkpoints
    }

    fn seed(&self) -> u64 {
        self.cfg.optim.seed
    }

    fn save_ckpt(&mut self, tag: &str) -> Result<PathBuf> {
        let path = self.run_dir.join(format!("ckpt_{tag}.ckpt"));
        save_checkpoint(&self.models.registry, &path)?;
        self.checkpoints.push(path.clone());
        Ok(path)
    }

    /// Full training run: initial checkpoint, per-epoch passes over the
    /// base pairs (each discriminator batch drawing a random neighbor
    /// variant), periodic checkpoints, loss CSV, run manifest.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let started = std::time::Instant::now();
        let csv_path = self.run_dir.join("losses.csv");
        let mut csv = csv::Writer::from_path(&csv_path).map_err(Error::Csv)?;
        csv.write_record([
            "epoch", "step", "d_adv", "g_adv", "l_pixel", "l_per", "l_margin", "l_rec", "lr",
        ])
        .map_err(Error::Csv)?;

        self.save_ckpt("e000")?;
        let epochs = self.cfg.optim.epochs;
        for epoch in 0..epochs {
            let lr = self.schedule.cosine_lr(epoch)?;
            let mut order: Vec<usize> = (0..self.groups.len()).collect();
            let mut shuffle_rng = rng::stream(self.seed(), &format!("epoch{epoch}/order"));
            order.shuffle(&mut shuffle_rng);
            let mut variant_rng = rng::stream(self.seed(), &format!("epoch{epoch}/variants"));

            let batch_size = self.cfg.optim.batch;
            for (step, chunk) in order.chunks(batch_size).enumerate() {
                let picks: Vec<(usize, usize)> = chunk
                    .iter()
                    .map(|&g| (g, variant_rng.gen_range(0..self.groups[g].variants.len())))
                    .collect();
                let losses = match self.train_batch(epoch, step, &picks, lr) {
                    Ok(l) => l,
                    Err(e) => {
                        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                        return Err(Error::TrainingAborted {
                            reason: format!("epoch {epoch} step {step}: {e}"),
                            last_checkpoint: self.checkpoints.last().cloned(),
                        });
                    }
                };
                if !losses.all_finite() {
                    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                    return Err(Error::TrainingAborted {
                        reason: format!("non-finite loss at epoch {epoch} step {step}: {losses:?}"),
                        last_checkpoint: self.checkpoints.last().cloned(),
                    });
                }
                csv.write_record([
                    epoch.to_string(),
                    step.to_string(),
                    format!("{:.12e}", losses.d_adv),
                    format!("{:.12e}", losses.g_adv),
                    format!("{:.12e}", losses.l_pixel),
                    format!("{:.12e}", losses.l_per),
                    format!("{:.12e}", losses.l_margin),
                    format!("{:.12e}", losses.l_rec),
                    format!("{:.12e}", lr),
                ])
                .map_err(Error::Csv)?;
                self.steps_done += 1;
            }
            let done = epoch + 1;
            if done % self.cfg.optim.checkpoint_every == 0 && done != epochs {
                self.save_ckpt(&format!("e{done:03}"))?;
            }
        }
        let final_path = self.save_ckpt("final")?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;

        let summary = TrainSummary {
            run_dir: self.run_dir.clone(),
            checkpoints: self.checkpoints.clone(),
            final_checkpoint: final_path,
            steps: self.steps_done,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        let manifest = serde_json::json!({
            "config": self.cfg,
            "corpus_seed": self.cfg.corpus_seed(),
            "perceptual_seed": self.models.perceptual.seed,
            "steps": summary.steps,
            "wall_secs": summary.wall_secs,
            "checkpoints": summary.checkpoints,
        });
        std::fs::write(
            self.run_dir.join("run.json"),
            serde_json::to_string_pretty(&manifest)?,
        )
        .map_err(|e| Error::io(self.run_dir.join("run.json"), e))?;
        Ok(summary)
    }

    /// One discriminator step followed by one generator step on the same
    /// batch picks.
    pub fn train_batch(
        &mut self,
        epoch: usize,
        step: usize,
        picks: &[(usize, usize)],
        lr: f64,
    ) -> Result<StepLosses> {
        let mut losses = self.d_step(epoch, step, picks, lr)?;
        if self.models.generator.is_some() {
            let g = self.g_step(epoch, step, picks, lr)?;
            losses.g_adv = g.g_adv;
            losses.l_pixel = g.l_pixel;
            losses.l_per = g.l_per;
        }
        Ok(losses)
    }

    fn batch_tensors(&self, picks: &[(usize, usize)]) -> (Tensor, Tensor, Tensor, Vec<usize>) {
        let b = picks.len();
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let mut onset = vec![0.0; b * n];
        let mut apex_variant = vec![0.0; b * n];
        let mut apex_base = vec![0.0; b * n];
        let mut classes = Vec::with_capacity(b);
        for (row, &(g, v)) in picks.iter().enumerate() {
            let group = &self.groups[g];
            let variant = &group.variants[v];
            let base = &group.variants[2]; // neighbor index 0 sits in the middle
            debug_assert_eq!(base.neighbor_index, 0);
            onset[row * n..(row + 1) * n].copy_from_slice(&variant.onset.data);
            apex_variant[row * n..(row + 1) * n].copy_from_slice(&variant.apex.data);
            apex_base[row * n..(row + 1) * n].copy_from_slice(&base.apex.data);
            classes.push(variant.class.index());
        }
        let shape = vec![b, 1, IMAGE_SIZE, IMAGE_SIZE];
        (
            Tensor::new(shape.clone(), onset).expect("static dims"),
            Tensor::new(shape.clone(), apex_variant).expect("static dims"),
            Tensor::new(shape, apex_base).expect("static dims"),
            classes,
        )
    }

    fn draw_noise(&self, tag: &str, batch: usize) -> Tensor {
        let nz = self.cfg.model.noise_dim;
        let mut r = rng::stream(self.seed(), tag);
        Tensor::new(vec![batch, nz], rng::normal_vec(&mut r, batch * nz, 1.0)).expect("static dims")
    }

    /// Discriminator update: adversarial term on real apex frames vs
    /// detached synthetics, classification loss on the real branch, and
    /// after the warm-up the margin loss on conditioned synthetics.
    pub fn d_step(
        &mut self,
        epoch: usize,
        step: usize,
        picks: &[(usize, usize)],
        lr: f64,
    ) -> Result<StepLosses> {
        let (onset, apex_variant, _, classes) = self.batch_tensors(picks);
        let b = picks.len();
        let one_hot = one_hot_rows(&classes, N_CLASSES)?;
        let weights = self.cfg.loss;

        let mut ctx = ForwardCtx::new(false);
        let reg = &self.models.registry;
        // Synthetics are built with frozen generator bindings, so they are
        // detached from the discriminator objective.
        let x_syn = match &self.models.generator {
            Some(generator) => {
                let x_on = ctx.tape.leaf(&onset);
                let z = self.draw_noise(&format!("epoch{epoch}/step{step}/dz"), b);
                Some(generator.forward_train(&mut ctx, reg, x_on, &z, &one_hot, None)?)
            }
            None => None,
        };
        ctx.trainable = true;
        let x_real = ctx.tape.leaf(&apex_variant);
        let disc = &self.models.discriminator;
        let out_real = disc.discriminate(&mut ctx, reg, x_real)?;

        let margin_real = loss::l_margin(&mut ctx.tape, out_real.exp_lengths, &classes, &weights)?;
        let (cls_loss, rec_val) = if let Some(poses) = out_real.exp_poses {
            let recon = disc.reconstruct(&mut ctx, reg, poses, &classes)?;
            let shifted = ctx.tape.add_scalar(x_real, 1.0);
            let target01 = ctx.tape.scale(shifted, 0.5);
            let rec = loss::l_mse(&mut ctx.tape, recon, target01)?;
            let rec_scaled = ctx.tape.scale(rec, weights.beta);
            let total = ctx.tape.add(margin_real, rec_scaled)?;
            (total, ctx.tape.value(rec)[0])
        } else {
            (margin_real, 0.0)
        };

        let mut total = ctx.tape.scale(cls_loss, weights.lambda_mer);
        let mut d_adv_val = 0.0;
        if let Some(x_syn) = x_syn {
            let out_fake = disc.discriminate(&mut ctx, reg, x_syn)?;
            let (d_term, _) = loss::l_gan(&mut ctx.tape, out_real.adv_len, out_fake.adv_len)?;
            d_adv_val = ctx.tape.value(d_term)[0];
            let adv_scaled = ctx.tape.scale(d_term, weights.lambda_adv);
            total = ctx.tape.add(total, adv_scaled)?;
            if epoch >= self.cfg.optim.warmup_epochs {
                let margin_fake =
                    loss::l_margin(&mut ctx.tape, out_fake.exp_lengths, &classes, &weights)?;
                let fake_scaled = ctx.tape.scale(margin_fake, weights.lambda_mer);
                total = ctx.tape.add(total, fake_scaled)?;
            }
        }

        let margin_val = ctx.tape.value(margin_real)[0];
        ctx.tape.backward(total)?;
        ctx.apply_grads(&mut self.models.registry)?;
        self.models.registry.adam_step_prefix("disc.", lr)?;
        self.models.registry.zero_grads();

        Ok(StepLosses {
            d_adv: d_adv_val,
            l_margin: margin_val,
            l_rec: rec_val,
            ..StepLosses::default()
        })
    }

    /// Generator update: non-saturating adversarial term plus the
    /// identity-preserving loss (pixel target = real apex, perceptual
    /// target = onset).
    pub fn g_step(
        &mut self,
        epoch: usize,
        step: usize,
        picks: &[(usize, usize)],
        lr: f64,
    ) -> Result<StepLosses> {
        let generator = self
            .models
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("generator step without a generator".into()))?;
        let (onset, _, apex_base, classes) = self.batch_tensors(picks);
        let b = picks.len();
        let one_hot = one_hot_rows(&classes, N_CLASSES)?;
        let weights = self.cfg.loss;

        let mut ctx = ForwardCtx::new(true);
        let reg = &self.models.registry;
        let x_on = ctx.tape.leaf(&onset);
        let z = self.draw_noise(&format!("epoch{epoch}/step{step}/gz"), b);
        let x_syn = generator.forward_train(&mut ctx, reg, x_on, &z, &one_hot, None)?;

        ctx.trainable = false;
        let disc = &self.models.discriminator;
        let out_fake = disc.discriminate(&mut ctx, reg, x_syn)?;
        let g_term = loss::gan_log_prob(&mut ctx.tape, out_fake.adv_len, false)?;
        let g_adv_val = ctx.tape.value(g_term)[0];
        let mut total = ctx.tape.scale(g_term, weights.lambda_adv);

        let (mut pix_val, mut per_val) = (0.0, 0.0);
        if generator.cfg.arch == GenArch::EncDec {
            let target = ctx.tape.leaf(&apex_base);
            let pix = loss::l_pixel(&mut ctx.tape, x_syn, target)?;
            let per = self.models.perceptual.loss(&mut ctx.tape, x_on, x_syn)?;
            pix_val = ctx.tape.value(pix)[0];
            per_val = ctx.tape.value(per)[0];
            let per_scaled = ctx.tape.scale(per, weights.alpha);
            let ip = ctx.tape.add(pix, per_scaled)?;
            let ip_scaled = ctx.tape.scale(ip, weights.lambda_mes);
            total = ctx.tape.add(total, ip_scaled)?;
        }

        ctx.tape.backward(total)?;
        ctx.apply_grads(&mut self.models.registry)?;
        self.models.registry.adam_step_prefix("gen.", lr)?;
        self.models.registry.zero_grads();

        Ok(StepLosses {
            g_adv: g_adv_val,
            l_pixel: pix_val,
            l_per: per_val,
            ..StepLosses::default()
        })
    }
}

// ---- trained-model classification ----

/// Wraps trained weights for held-out prediction via the discriminator's
/// expression capsules.
pub struct TrainedClassifier {
    pub discriminator: Discriminator,
    pub registry: ParamRegistry,
}

impl TrainedClassifier {
    pub fn from_models(models: Models) -> Self {
        TrainedClassifier {
            discriminator: models.discriminator,
            registry: models.registry,
        }
    }
}

impl FoldClassifier for TrainedClassifier {
    fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf(&sample.apex);
        let out = self.discriminator.discriminate(&mut ctx, &self.registry, x)?;
        let lengths = ctx.tape.value(out.exp_lengths).to_vec();
        let adv = ctx.tape.value(out.adv_len)[0];
        let class = lengths
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite lengths"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(Prediction {
            class,
            exp_lengths: lengths,
            adv_len: Some(adv),
        })
    }
}

/// Trains one full model per LOSO fold. Each fold derives its own seed, so
/// folds are independent but reproducible.
pub struct GanFoldFactory<'a> {
    pub cfg: &'a RunConfig,
    /// When set, per-fold run artifacts are written under this root.
    pub run_root: Option<PathBuf>,
}

impl ClassifierFactory for GanFoldFactory<'_> {
    fn train_fold(
        &self,
        corpus: &[Sample],
        fold: &crate::data::LosoSplit,
        fold_idx: usize,
    ) -> Result<Box<dyn FoldClassifier>> {
        let mut cfg = self.cfg.clone();
        cfg.optim.seed = rng::derive_seed(self.cfg.optim.seed, &format!("fold{fold_idx}"));
        let train: Vec<Sample> = fold.train.iter().map(|&i| corpus[i].clone()).collect();
        let dir = match &self.run_root {
            Some(root) => root.join(format!("fold_{}", fold.held_out)),
            None => std::env::temp_dir().join(format!(
                "icegan_fold_{}_{}",
                fold.held_out,
                cfg.optim.seed
            )),
        };
        let mut trainer = Trainer::new(cfg, &train, &dir)?;
        trainer.run()?;
        let models = std::mem::replace(&mut trainer.models, build_empty());
        Ok(Box::new(TrainedClassifier::from_models(models)))
    }
}

fn build_empty() -> Models {
    Models {
        generator: None,
        discriminator: Discriminator::new(DiscriminatorCfg {
            patch_plan: vec![1, 1, 1, 1],
            kind: DiscKind::Cnn,
            cnn_width: 1,
            cnn_large_width: 1,
            ..DiscriminatorCfg::default()
        }),
        registry: ParamRegistry::new(),
        perceptual: PerceptualNet::new(0),
    }
}

/// Convenience wrapper: deterministic no-grad synthesis from trained
/// models for a batch of onset frames.
pub fn synthesize_images(
    models: &Models,
    onsets: &[&Sample],
    class: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let generator = models
        .generator
        .as_ref()
        .ok_or_else(|| Error::Config("synthesis requires a generator".into()))?;
    let mut out = Vec::with_capacity(onsets.len());
    for (i, s) in onsets.iter().enumerate() {
        let mut z_rng = rng::stream(seed, &format!("synthesize/{}/{}", s.id, i));
        out.push(generator.synthesize(&models.registry, &s.onset, class, &mut z_rng, None)?);
    }
    Ok(out)
}
