//! Stochastic sampling of the rectified flow and the per-step evidence
//! needed for likelihood ratios.
//!
//! Sampling runs backward in time over a uniform grid from `t = 1` to
//! `t_floor`. Each Euler–Maruyama step draws
//!
//! ```text
//! z' = z − (v − ½·ε_t²·score)·Δt + ε_t·√Δt·g,   ε_t = η·√Δt,   g ~ N(0, I)
//! ```
//!
//! so the transition is a diagonal Gaussian with mean `μ` and per-element
//! standard deviation `s = ε_t·√Δt`. A spatial position owns all channels at
//! that pixel, and its log-density sums over those channels.

mod advantage;
mod dump;

use crate::error::{Error, Result};
use crate::flow_model::{FlowSchedule, ForwardCache, VelocityField, DEFAULT_T_FLOOR, IMAGE_CHANNELS};
use crate::numerics::{RngStream, Tensor};

pub use advantage::{normalize_advantages, normalize_advantages_checked, DEGENERATE_STD};
pub use dump::{read_trajectory, write_trajectory};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub t_floor: f64,
    /// All members of a group start from one noise draw.
    pub shared_init: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 8,
            eta: 0.3,
            t_floor: DEFAULT_T_FLOOR,
            shared_init: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("sampler needs ≥ 1 step".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_floor must lie in (0, 1), got {}",
                self.t_floor
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> FlowSchedule {
        FlowSchedule { t_floor: self.t_floor }
    }

    /// Strictly decreasing grid `t_0 = 1 > … > t_T = t_floor`.
    pub fn t_grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        let span = 1.0 - self.t_floor;
        (0..=n)
            .map(|k| {
                if k == n {
                    self.t_floor
                } else {
                    1.0 - span * k as f64 / n as f64
                }
            })
            .collect()
    }

    /// Exploration level `ε_t = η·√Δt`.
    pub fn noise_level(&self, dt: f64) -> f64 {
        self.eta * dt.sqrt()
    }
}

/// Transition statistics of one backward step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGaussian {
    pub mean: Tensor,
    pub std: f64,
    /// `d mean / d v`, identical for every element.
    pub mean_velocity_slope: f64,
}

/// Mean and spread of the step from `t` to `t − dt` given predicted velocity `v`.
pub fn step_gaussian(z: &Tensor, t: f64, dt: f64, v: &Tensor, cfg: &SamplerConfig) -> Result<StepGaussian> {
    let schedule = cfg.schedule();
    schedule.check_time(t)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let eps = cfg.noise_level(dt);
    let half_eps2 = 0.5 * eps * eps;
    let mean = z.zip_map(v, |zv, vv| {
        let score = schedule.score_scalar(zv, t, vv);
        zv - (vv - half_eps2 * score) * dt
    })?;
    // score = −(z + (1 − t)·v)/t, so d(score)/dv = −(1 − t)/t.
    let slope = -dt * (1.0 + half_eps2 * (1.0 - t) / t);
    Ok(StepGaussian {
        mean,
        std: eps * dt.sqrt(),
        mean_velocity_slope: slope,
    })
}

/// Per-position log-density of `next` under `N(mean, std²)`, summed over channels.
pub fn position_logp(next: &Tensor, mean: &Tensor, std: f64) -> Result<Tensor> {
    next.expect_same_shape(mean)?;
    let (c, h, w) = match *next.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::ShapeMismatch(format!("expected C×H×W, got {s:?}"))),
    };
    let hw = h * w;
    if std == 0.0 {
        // Deterministic transition: no density to report.
        return Ok(Tensor::zeros(&[h, w]));
    }
    let inv_var = 1.0 / (std * std);
    let norm = c as f64 * (std.ln() + HALF_LN_2PI);
    let (nd, md) = (next.data(), mean.data());
    let data = (0..hw)
        .map(|p| {
            let mut quad = 0.0;
            for ch in 0..c {
                let d = nd[ch * hw + p] - md[ch * hw + p];
                quad += d * d;
            }
            -0.5 * quad * inv_var - norm
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub z_next: Tensor,
    pub mean: Tensor,
    pub std: f64,
    pub noise: Tensor,
}

/// One Euler–Maruyama step from `t` to `t − dt`.
pub fn sde_step(
    z: &Tensor,
    t: f64,
    dt: f64,
    model: &VelocityField,
    class: usize,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<StepOutput> {
    let v = model.forward(z, t, class)?;
    let g = step_gaussian(z, t, dt, &v, cfg)?;
    let noise = rng.normal_tensor(z.shape());
    let z_next = g.mean.zip_map(&noise, |m, n| m + g.std * n)?;
    Ok(StepOutput {
        z_next,
        mean: g.mean,
        std: g.std,
        noise,
    })
}

/// Full record of one stochastic rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub class: usize,
    pub t_grid: Vec<f64>,
    /// `T + 1` states; `states[0]` is the initial noise, the last is the sample.
    pub states: Vec<Tensor>,
    pub step_means: Vec<Tensor>,
    pub step_std: Vec<f64>,
    pub noise_draws: Vec<Tensor>,
    /// Per-step `H×W` log-densities of the recorded transitions.
    pub logp_map: Vec<Tensor>,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.step_means.len()
    }

    pub fn init_noise(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory has states")
    }

    /// Generated image, clamped to the displayable box.
    pub fn image(&self) -> Tensor {
        self.final_state().map(|v| v.clamp(0.0, 1.0))
    }

    /// Spatial size `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.states[0].shape();
        (s[1], s[2])
    }
}

/// Roll out one trajectory from `init`, drawing step noise from `rng`.
pub fn rollout(
    model: &VelocityField,
    class: usize,
    init: Tensor,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    cfg.validate()?;
    let t_grid = cfg.t_grid();
    let n = cfg.num_steps;
    let mut traj = Trajectory {
        class,
        t_grid: t_grid.clone(),
        states: Vec::with_capacity(n + 1),
        step_means: Vec::with_capacity(n),
        step_std: Vec::with_capacity(n),
        noise_draws: Vec::with_capacity(n),
        logp_map: Vec::with_capacity(n),
    };
    traj.states.push(init);
    for k in 0..n {
        let (t, dt) = (t_grid[k], t_grid[k] - t_grid[k + 1]);
        let step = sde_step(&traj.states[k], t, dt, model, class, cfg, rng)?;
        traj.logp_map.push(position_logp(&step.z_next, &step.mean, step.std)?);
        traj.states.push(step.z_next);
        traj.step_means.push(step.mean);
        traj.step_std.push(step.std);
        traj.noise_draws.push(step.noise);
    }
    Ok(traj)
}

/// Rollouts from one condition whose rewards and advantages are filled later.
#[derive(Clone, Debug)]
pub struct SampleGroup {
    pub class: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Reward spread was too small to normalize; advantages are all zero.
    pub degenerate: bool,
}

impl SampleGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Store rewards and their group-normalized advantages.
    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rewards for {} trajectories",
                rewards.len(),
                self.len()
            )));
        }
        let (adv, degenerate) = normalize_advantages_checked(&rewards);
        self.rewards = rewards;
        self.advantages = adv;
        self.degenerate = degenerate;
        Ok(())
    }
}

/// `group_size` rollouts for one condition.
///
/// Initial noise is drawn from `rng`; member `i` draws its step noise from
/// `rng.derive(&[i])`.
pub fn rollout_group(
    model: &VelocityField,
    class: usize,
    cfg: &SamplerConfig,
    group_size: usize,
    shape: &[usize],
    rng: &mut RngStream,
) -> Result<SampleGroup> {
    if group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size must be ≥ 2, got {group_size}"
        )));
    }
    if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "latent shape must be 3×H×W, got {shape:?}"
        )));
    }
    let shared = cfg.shared_init.then(|| rng.normal_tensor(shape));
    let mut trajectories = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let init = match &shared {
            Some(noise) => noise.clone(),
            None => rng.normal_tensor(shape),
        };
        let mut member_rng = rng.derive(&[i as u64]);
        trajectories.push(rollout(model, class, init, cfg, &mut member_rng)?);
    }
    Ok(SampleGroup {
        class,
        trajectories,
        rewards: Vec::new(),
        advantages: Vec::new(),
        degenerate: false,
    })
}

/// Log-densities of the recorded actions under `model`, for the chosen steps.
pub fn logp_under(
    model: &VelocityField,
    traj: &Trajectory,
    cfg: &SamplerConfig,
    subset: &[usize],
) -> Result<Vec<Tensor>> {
    subset
        .iter()
        .map(|&k| recompute_step(model, traj, cfg, k).map(|r| r.logp))
        .collect()
}

/// A recorded step re-evaluated under the current parameters.
pub struct RecomputedStep {
    pub logp: Tensor,
    pub gaussian: StepGaussian,
    pub cache: ForwardCache,
}

pub fn recompute_step(
    model: &VelocityField,
    traj: &Trajectory,
    cfg: &SamplerConfig,
    k: usize,
) -> Result<RecomputedStep> {
    if k >= traj.num_steps() {
        return Err(Error::InvalidArgument(format!(
            "step {k} outside recorded range 0..{}",
            traj.num_steps()
        )));
    }
    let (t, dt) = (traj.t_grid[k], traj.t_grid[k] - traj.t_grid[k + 1]);
    let (v, cache) = model.forward_cached(&traj.states[k], t, traj.class)?;
    let gaussian = step_gaussian(&traj.states[k], t, dt, &v, cfg)?;
    let logp = position_logp(&traj.states[k + 1], &gaussian.mean, gaussian.std)?;
    Ok(RecomputedStep { logp, gaussian, cache })
}

/// Deterministic Euler path `z ← z − v·Δt` over the sampler's grid.
pub fn ode_sample(model: &VelocityField, class: usize, init: &Tensor, cfg: &SamplerConfig) -> Result<Vec<Tensor>> {
    let grid = cfg.t_grid();
    let mut states = vec![init.clone()];
    for k in 0..cfg.num_steps {
        let (t, dt) = (grid[k], grid[k] - grid[k + 1]);
        let z = &states[k];
        let v = model.forward(z, t, class)?;
        states.push(z.zip_map(&v, |zv, vv| zv - vv * dt)?);
    }
    Ok(states)
}
