//! Clipped group-relative surrogates and pixel advantages.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow_model::VelocityField;
use crate::numerics::{Differentiable, Tensor};
use crate::sde_sampler::{normalize_advantages, recompute_step, SampleGroup, SamplerConfig, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// One joint likelihood ratio per step, scalar advantage.
    Grpo,
    /// One likelihood ratio per position, map-weighted advantage.
    Vipo,
}

/// How an allocation map enters the advantages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapTarget {
    /// `A_i^p = M_i(p)·A_i`.
    Advantage,
    /// Group-normalize `M_i(p)·r_i` separately at each position.
    Reward,
    /// `A_i^p = A_i`.
    Uniform,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "grpo" => Ok(Algorithm::Grpo),
            "vipo" => Ok(Algorithm::Vipo),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Vipo => "vipo",
        })
    }
}

impl FromStr for MapTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "advantage" => Ok(MapTarget::Advantage),
            "reward" => Ok(MapTarget::Reward),
            "uniform" => Ok(MapTarget::Uniform),
            other => Err(Error::Config(format!("unknown map target {other:?}"))),
        }
    }
}

impl fmt::Display for MapTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapTarget::Advantage => "advantage",
            MapTarget::Reward => "reward",
            MapTarget::Uniform => "uniform",
        })
    }
}

/// Per-position advantages of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAdvantage {
    /// The trajectory's scalar group advantage.
    pub scalar: f64,
    /// `H×W` per-position advantages.
    pub values: Tensor,
}

impl PixelAdvantage {
    /// Every position carries the scalar advantage.
    pub fn uniform(scalar: f64, h: usize, w: usize) -> Self {
        Self {
            scalar,
            values: Tensor::full(&[h, w], scalar),
        }
    }
}

/// Pixel advantages for a scored group, one `H×W` map per trajectory.
pub fn build_pixel_advantages(group: &SampleGroup, maps: &[Tensor], target: MapTarget) -> Result<Vec<PixelAdvantage>> {
    let g = group.len();
    if group.advantages.len() != g || group.rewards.len() != g {
        return Err(Error::InvalidArgument("group has no rewards yet".into()));
    }
    if maps.len() != g {
        return Err(Error::ShapeMismatch(format!(
            "{} maps for {g} trajectories",
            maps.len()
        )));
    }
    let (h, w) = group.trajectories[0].spatial();
    for m in maps {
        if m.shape() != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} does not match latent {h}×{w}",
                m.shape()
            )));
        }
    }
    match target {
        MapTarget::Uniform => Ok(group
            .advantages
            .iter()
            .map(|&a| PixelAdvantage::uniform(a, h, w))
            .collect()),
        MapTarget::Advantage => Ok(group
            .advantages
            .iter()
            .zip(maps)
            .map(|(&a, m)| PixelAdvantage {
                scalar: a,
                values: m.map(|v| v * a),
            })
            .collect()),
        MapTarget::Reward => {
            let mut values = vec![vec![0.0; h * w]; g];
            let mut column = vec![0.0; g];
            for p in 0..h * w {
                for (i, c) in column.iter_mut().enumerate() {
                    *c = maps[i].data()[p] * group.rewards[i];
                }
                for (row, a) in values.iter_mut().zip(normalize_advantages(&column)) {
                    row[p] = a;
                }
            }
            values
                .into_iter()
                .zip(&group.advantages)
                .map(|(v, &a)| {
                    Ok(PixelAdvantage {
                        scalar: a,
                        values: Tensor::new(vec![h, w], v)?,
                    })
                })
                .collect()
        }
    }
}

/// Value of `min(ρA, clip(ρ)·A)` and its derivative with respect to `ρ`.
///
/// The derivative is zero exactly when the clipped branch is selected.
pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv, false)
    } else {
        (clipped, 0.0, true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Share of surrogate terms on the clipped branch.
    pub clip_frac: f64,
}

/// Surrogate loss over recorded trajectories and a fixed step subset.
///
/// The stored log-densities are the behavior evidence; the current
/// log-densities are recomputed from the parameters being evaluated.
pub struct PolicyLoss<'a> {
    pub algorithm: Algorithm,
    pub model: &'a VelocityField,
    pub sampler: &'a SamplerConfig,
    pub trajectories: &'a [&'a Trajectory],
    pub advantages: &'a [PixelAdvantage],
    pub subset: &'a [usize],
    pub clip_eps: f64,
}

impl PolicyLoss<'_> {
    pub fn evaluate(&self, params: &[f64], want_grad: bool) -> Result<LossOutput> {
        if self.trajectories.len() != self.advantages.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trajectories with {} advantages",
                self.trajectories.len(),
                self.advantages.len()
            )));
        }
        if self.trajectories.is_empty() || self.subset.is_empty() {
            return Err(Error::InvalidArgument(
                "loss needs trajectories and a step subset".into(),
            ));
        }
        let model = self.model.with_params(params);
        let (h, w) = self.trajectories[0].spatial();
        let positions = h * w;
        let pairs = (self.trajectories.len() * self.subset.len()) as f64;
        let norm = match self.algorithm {
            Algorithm::Grpo => pairs,
            Algorithm::Vipo => pairs * positions as f64,
        };
        let mut grad = if want_grad { vec![0.0; params.len()] } else { Vec::new() };
        let mut total = 0.0;
        let mut clipped_terms = 0usize;
        let mut terms = 0usize;
        let mut d_logp = vec![0.0; positions];
        for (traj, adv) in self.trajectories.iter().zip(self.advantages) {
            if adv.values.shape() != [h, w] || traj.spatial() != (h, w) {
                return Err(Error::ShapeMismatch("advantage map does not match the latent".into()));
            }
            for &k in self.subset {
                let rec = recompute_step(&model, traj, self.sampler, k)?;
                let cur = rec.logp.data();
                let old = traj.logp_map[k].data();
                match self.algorithm {
                    Algorithm::Grpo => {
                        let log_ratio = cur.iter().zip(old).fold(0.0, |acc, (c, o)| acc + (c - o));
                        let rho = log_ratio.exp();
                        let (term, slope, clipped) = clipped_surrogate(rho, adv.scalar, self.clip_eps);
                        total += term;
                        clipped_terms += clipped as usize;
                        terms += 1;
                        d_logp.fill(-slope * rho / norm);
                    }
                    Algorithm::Vipo => {
                        let mut step_total = 0.0;
                        for p in 0..positions {
                            let rho = (cur[p] - old[p]).exp();
                            let (term, slope, clipped) = clipped_surrogate(rho, adv.values.data()[p], self.clip_eps);
                            step_total += term;
                            clipped_terms += clipped as usize;
                            d_logp[p] = -slope * rho / norm;
                        }
                        terms += positions;
                        total += step_total;
                    }
                }
                if want_grad && d_logp.iter().any(|&d| d != 0.0) {
                    let d_v = logp_to_velocity(
                        traj,
                        k,
                        &rec.gaussian.mean,
                        rec.gaussian.std,
                        rec.gaussian.mean_velocity_slope,
                        &d_logp,
                    );
                    model.backward(&rec.cache, &d_v, &mut grad);
                }
            }
        }
        let loss = -total / norm;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        Ok(LossOutput {
            loss,
            grad,
            clip_frac: clipped_terms as f64 / terms as f64,
        })
    }
}

/// Chain `∂L/∂logp_p` through the Gaussian step to `∂L/∂v`.
fn logp_to_velocity(traj: &Trajectory, k: usize, mean: &Tensor, std: f64, slope: f64, d_logp: &[f64]) -> Vec<f64> {
    let positions = d_logp.len();
    if std == 0.0 {
        return vec![0.0; mean.len()];
    }
    let inv_var = 1.0 / (std * std);
    traj.states[k + 1]
        .data()
        .iter()
        .zip(mean.data())
        .enumerate()
        .map(|(i, (x, mu))| d_logp[i % positions] * (x - mu) * inv_var * slope)
        .collect()
}

impl Differentiable for PolicyLoss<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        self.evaluate(params, false).map(|o| o.loss)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(params, true).map(|o| (o.loss, o.grad))
    }
}

/// Joint-ratio objective at `model`'s parameters.
pub fn grpo_loss(
    model: &VelocityField,
    trajectories: &[&Trajectory],
    advantages: &[PixelAdvantage],
    subset: &[usize],
    sampler: &SamplerConfig,
    clip_eps: f64,
) -> Result<LossOutput> {
    PolicyLoss {
        algorithm: Algorithm::Grpo,
        model,
        sampler,
        trajectories,
        advantages,
        subset,
        clip_eps,
    }
    .evaluate(model.params(), true)
}

/// Per-position-ratio objective at `model`'s parameters.
pub fn vipo_loss(
    model: &VelocityField,
    trajectories: &[&Trajectory],
    advantages: &[PixelAdvantage],
    subset: &[usize],
    sampler: &SamplerConfig,
    clip_eps: f64,
) -> Result<LossOutput> {
    PolicyLoss {
        algorithm: Algorithm::Vipo,
        model,
        sampler,
        trajectories,
        advantages,
        subset,
        clip_eps,
    }
    .evaluate(model.params(), true)
}
