//! Group-relative fine-tuning of the flow model against a scalar reward.
//!
//! Each update snapshots the current parameters as the behavior policy,
//! rolls out groups of stochastic trajectories, scores and normalizes them,
//! turns advantages into per-position advantages, and takes one Adam step
//! on the clipped surrogate over a random subset of sampling steps.

mod loss;
mod metrics;

use std::path::PathBuf;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow_model::{save_checkpoint, DatasetConfig, VelocityField, IMAGE_CHANNELS};
use crate::numerics::{Adam, RngStream, Tensor};
use crate::psm::{build_allocation_map, FeatureSource, PsmConfig};
use crate::rewards::RewardSpec;
use crate::sde_sampler::{rollout_group, SampleGroup, SamplerConfig, Trajectory};

pub use loss::{
    build_pixel_advantages, clipped_surrogate, grpo_loss, vipo_loss, Algorithm, LossOutput, MapTarget, PixelAdvantage,
    PolicyLoss,
};
pub use metrics::{MetricsLog, MetricsRow, METRICS_COLUMNS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub clip_eps: f64,
    pub timestep_fraction: f64,
    pub lr: f64,
    pub group_size: usize,
    pub groups_per_update: usize,
    pub total_updates: usize,
    pub map_target: MapTarget,
    pub psm: PsmConfig,
    pub sampler: SamplerConfig,
    pub reward: RewardSpec,
    /// Conditions groups are drawn from; empty means every class.
    pub classes: Vec<usize>,
    /// Save a checkpoint every this many updates; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// First update index, for resuming from a saved checkpoint.
    pub start_update: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vipo,
            clip_eps: 1e-4,
            timestep_fraction: 0.6,
            lr: 1e-3,
            group_size: 8,
            groups_per_update: 4,
            total_updates: 200,
            map_target: MapTarget::Advantage,
            psm: PsmConfig::default(),
            sampler: SamplerConfig::default(),
            reward: RewardSpec::default(),
            classes: Vec::new(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            start_update: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.psm.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.timestep_fraction > 0.0 && self.timestep_fraction <= 1.0) {
            return bad(format!(
                "timestep_fraction must lie in (0, 1], got {}",
                self.timestep_fraction
            ));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.group_size < 2 || self.groups_per_update == 0 {
            return bad("need group_size ≥ 2 and groups_per_update ≥ 1".into());
        }
        if self.sampler.eta <= 0.0 {
            return bad("training needs a stochastic sampler (eta > 0)".into());
        }
        Ok(())
    }

    /// Steps per update that contribute to the loss.
    pub fn subset_size(&self) -> usize {
        ((self.timestep_fraction * self.sampler.num_steps as f64).round() as usize).clamp(1, self.sampler.num_steps)
    }
}

/// Draw the per-update step subset, sorted.
pub fn timestep_subset(cfg: &TrainConfig, rng: &mut RngStream) -> Vec<usize> {
    rng.choose_distinct(cfg.sampler.num_steps, cfg.subset_size())
}

/// Everything one update consumes: scored groups and their pixel advantages.
#[derive(Clone, Debug)]
pub struct UpdateBatch {
    pub groups: Vec<SampleGroup>,
    pub subset: Vec<usize>,
    /// One per trajectory, in group-major order.
    pub advantages: Vec<PixelAdvantage>,
    /// The allocation maps behind `advantages` (all ones when unused).
    pub maps: Vec<Tensor>,
}

impl UpdateBatch {
    pub fn trajectories(&self) -> Vec<&Trajectory> {
        self.groups.iter().flat_map(|g| g.trajectories.iter()).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.rewards.iter().copied()).collect()
    }

    pub fn degenerate_groups(&self) -> usize {
        self.groups.iter().filter(|g| g.degenerate).count()
    }

    pub fn loss<'a>(
        &'a self,
        algorithm: Algorithm,
        model: &'a VelocityField,
        trajectories: &'a [&'a Trajectory],
        cfg: &'a TrainConfig,
    ) -> PolicyLoss<'a> {
        PolicyLoss {
            algorithm,
            model,
            sampler: &cfg.sampler,
            trajectories,
            advantages: &self.advantages,
            subset: &self.subset,
            clip_eps: cfg.clip_eps,
        }
    }
}

/// Roll out, score and attribute one update's batch.
///
/// All randomness comes from `rng.derive(&[update])`, so a batch depends only
/// on the model, the configuration and the update index.
pub fn collect_batch(
    model: &VelocityField,
    cfg: &TrainConfig,
    data: &DatasetConfig,
    update: usize,
    rng: &RngStream,
) -> Result<UpdateBatch> {
    let mut urng = rng.derive(&[update as u64]);
    let subset = timestep_subset(cfg, &mut urng);
    let side = model.arch().side;
    let shape = [IMAGE_CHANNELS, side, side];
    let classes: Vec<usize> = if cfg.classes.is_empty() {
        (0..model.arch().num_classes).collect()
    } else {
        cfg.classes.clone()
    };
    let use_maps = cfg.algorithm == Algorithm::Vipo && cfg.map_target != MapTarget::Uniform;
    let mut groups = Vec::with_capacity(cfg.groups_per_update);
    let mut advantages = Vec::new();
    let mut maps = Vec::new();
    for g in 0..cfg.groups_per_update {
        let class = classes[urng.below(classes.len())];
        let mut grng = urng.derive(&[g as u64]);
        let mut group = rollout_group(model, class, &cfg.sampler, cfg.group_size, &shape, &mut grng)?;
        let images: Vec<Tensor> = group.trajectories.iter().map(|t| t.image()).collect();
        let rewards = images
            .iter()
            .map(|img| cfg.reward.score(img, class, data))
            .collect::<Result<Vec<_>>>()?;
        group.set_rewards(rewards)?;
        let group_maps: Vec<Tensor> = if use_maps {
            images
                .iter()
                .map(|img| build_allocation_map(img, &cfg.psm, FeatureSource::Toy).map(|m| m.weights))
                .collect::<Result<_>>()?
        } else {
            vec![Tensor::ones(&[side, side]); group.len()]
        };
        let target = match cfg.algorithm {
            Algorithm::Grpo => MapTarget::Uniform,
            Algorithm::Vipo => cfg.map_target,
        };
        advantages.extend(build_pixel_advantages(&group, &group_maps, target)?);
        maps.extend(group_maps);
        groups.push(group);
    }
    Ok(UpdateBatch {
        groups,
        subset,
        advantages,
        maps,
    })
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub metrics: MetricsLog,
}

/// Fine-tune `model` in place.
///
/// `observe(u, model)` runs before update `u` and once more after the last
/// update with `u = total_updates`.
pub fn train_with_observer(
    model: &mut VelocityField,
    cfg: &TrainConfig,
    data: &DatasetConfig,
    rng: &RngStream,
    mut observe: impl FnMut(usize, &VelocityField) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(model.num_params(), cfg.lr);
    let mut report = TrainReport::default();
    for update in cfg.start_update..cfg.total_updates {
        observe(update, model)?;
        let started = Instant::now();
        let batch = collect_batch(model, cfg, data, update, rng)?;
        let trajectories = batch.trajectories();
        let out = match batch
            .loss(cfg.algorithm, model, &trajectories, cfg)
            .evaluate(model.params(), true)
        {
            Ok(o) => o,
            Err(Error::NonFiniteLoss | Error::NonFiniteGradient(_)) => {
                return Err(Error::DivergedTraining {
                    step: update,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        adam.step(model.params_mut(), &out.grad);
        if !model.params().iter().all(|p| p.is_finite()) {
            return Err(Error::DivergedTraining {
                step: update,
                loss: out.loss,
            });
        }
        let rewards = batch.rewards();
        let row = MetricsRow {
            update,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            std_reward: population_std(&rewards),
            loss: out.loss,
            clip_frac: out.clip_frac,
            degenerate_groups: batch.degenerate_groups(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!(
            "{} update {update}: reward {:.4} ± {:.4}",
            cfg.algorithm,
            row.mean_reward,
            row.std_reward
        );
        report.metrics.push(row)?;
        if cfg.checkpoint_every > 0 && (update + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(model, &dir.join(format!("update_{:05}.vipc", update + 1)))?;
            }
        }
    }
    observe(cfg.total_updates.max(cfg.start_update), model)?;
    Ok(report)
}

pub fn train(
    model: &mut VelocityField,
    cfg: &TrainConfig,
    data: &DatasetConfig,
    rng: &RngStream,
) -> Result<TrainReport> {
    train_with_observer(model, cfg, data, rng, |_, _| Ok(()))
}

/// Gradients of both objectives on the first update's batch, with a uniform
/// map for the per-position objective.
#[derive(Clone, Debug)]
pub struct GradientCrossCheck {
    pub grpo: LossOutput,
    pub vipo_uniform: LossOutput,
    pub positions: usize,
}

impl GradientCrossCheck {
    /// Largest relative deviation of `vipo_uniform.grad` from `grpo.grad / |P|`.
    pub fn max_rel_err(&self) -> f64 {
        let p = self.positions as f64;
        let scale = self
            .grpo
            .grad
            .iter()
            .map(|g| (g / p).abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        self.grpo
            .grad
            .iter()
            .zip(&self.vipo_uniform.grad)
            .map(|(g, v)| (g / p - v).abs() / scale)
            .fold(0.0, f64::max)
    }
}

pub fn first_update_cross_check(
    model: &VelocityField,
    cfg: &TrainConfig,
    data: &DatasetConfig,
    rng: &RngStream,
) -> Result<GradientCrossCheck> {
    let uniform = TrainConfig {
        algorithm: Algorithm::Vipo,
        map_target: MapTarget::Uniform,
        ..cfg.clone()
    };
    let batch = collect_batch(model, &uniform, data, cfg.start_update, rng)?;
    let trajectories = batch.trajectories();
    let grpo = batch
        .loss(Algorithm::Grpo, model, &trajectories, &uniform)
        .evaluate(model.params(), true)?;
    let vipo_uniform = batch
        .loss(Algorithm::Vipo, model, &trajectories, &uniform)
        .evaluate(model.params(), true)?;
    let side = model.arch().side;
    Ok(GradientCrossCheck {
        grpo,
        vipo_uniform,
        positions: side * side,
    })
}
