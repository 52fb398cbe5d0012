//! Flow-matching pretraining.

use super::dataset::ShapeDataset;
use super::network::VelocityField;
use super::schedule::FlowSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Differentiable, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: FlowSchedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 3e-3,
            schedule: FlowSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub loss_curve: Vec<f64>,
}

impl PretrainReport {
    /// Trailing moving average of the loss curve.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        moving_average(&self.loss_curve, window)
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// One flow-matching regression example: `(x, ε, t, class)`.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub image: Tensor,
    pub noise: Tensor,
    pub t: f64,
    pub class: usize,
}

/// Mean squared error between predicted velocity and `ε − x`, over a batch.
pub struct FlowMatchingLoss<'a> {
    pub model: &'a VelocityField,
    pub batch: &'a [FlowExample],
    pub schedule: FlowSchedule,
}

impl FlowMatchingLoss<'_> {
    fn eval(&self, params: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let model = self.model.with_params(params);
        let mut grad = if want_grad { vec![0.0; params.len()] } else { Vec::new() };
        let n_total: usize = self.batch.iter().map(|e| e.image.len()).sum();
        let mut loss = 0.0;
        for ex in self.batch {
            let (z, target) = self.schedule.interpolate(ex.image.data(), ex.noise.data(), ex.t);
            let z = Tensor::new(ex.image.shape().to_vec(), z)?;
            let (v, cache) = model.forward_cached(&z, ex.t, ex.class)?;
            let resid: Vec<f64> = v.data().iter().zip(&target).map(|(a, b)| a - b).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>();
            if want_grad {
                let d: Vec<f64> = resid.iter().map(|r| 2.0 * r / n_total as f64).collect();
                model.backward(&cache, &d, &mut grad);
            }
        }
        Ok((loss / n_total as f64, grad))
    }
}

impl Differentiable for FlowMatchingLoss<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        self.eval(params, false).map(|(l, _)| l)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(params, true)
    }
}

/// Draw a training batch: random images, fresh noise, `t ~ U[t_floor, 1]`.
pub fn sample_batch(
    data: &ShapeDataset,
    batch: usize,
    schedule: &FlowSchedule,
    rng: &mut RngStream,
) -> Result<Vec<FlowExample>> {
    let side = data.config.side;
    (0..batch)
        .map(|_| {
            let i = rng.below(data.len());
            let image = Tensor::new(vec![3, side, side], data.image(i).to_vec())?;
            let noise = rng.normal_tensor(&[3, side, side]);
            let t = rng.uniform_in(schedule.t_floor, 1.0);
            Ok(FlowExample {
                image,
                noise,
                t,
                class: data.labels[i],
            })
        })
        .collect()
}

pub fn pretrain_flow(
    model: &mut VelocityField,
    data: &ShapeDataset,
    cfg: &PretrainConfig,
    rng: &mut RngStream,
) -> Result<PretrainReport> {
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs lr > 0 and batch ≥ 1, got lr={} batch={}",
            cfg.lr, cfg.batch
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut adam = Adam::new(model.num_params(), cfg.lr);
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch, &cfg.schedule, rng)?;
        let objective = FlowMatchingLoss {
            model,
            batch: &batch,
            schedule: cfg.schedule,
        };
        let (loss, grad) = objective.value_and_grad(model.params())?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedTraining { step, loss });
        }
        adam.step(model.params_mut(), &grad);
        report.loss_curve.push(loss);
        if step % 250 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_model::{render_dataset, Architecture, DatasetConfig};
    use crate::numerics::grad_check;

    fn tiny_model(side: usize) -> VelocityField {
        let arch = Architecture {
            side,
            hidden: 4,
            layers: 3,
            kernel: 3,
            num_classes: 12,
        };
        VelocityField::new(arch, &mut RngStream::new(0)).unwrap()
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let data = render_dataset(&DatasetConfig::default(), &mut RngStream::new(1)).unwrap();
        let mut model = tiny_model(16);
        let before = model.params().to_vec();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let report = pretrain_flow(&mut model, &data, &cfg, &mut RngStream::new(2)).unwrap();
        assert!(report.loss_curve.is_empty());
        assert_eq!(model.params(), before.as_slice());
    }

    #[test]
    fn loss_gradient_passes_grad_check() {
        let data = render_dataset(&DatasetConfig::default(), &mut RngStream::new(1)).unwrap();
        let model = tiny_model(16);
        let mut rng = RngStream::new(5);
        let mut batch = sample_batch(&data, 2, &FlowSchedule::default(), &mut rng).unwrap();
        // Crop to 4×4 so the full-parameter check stays quick.
        for ex in &mut batch {
            let crop = |t: &Tensor| {
                Tensor::from_fn(&[3, 4, 4], |i| {
                    let (c, y, x) = (i / 16, (i / 4) % 4, i % 4);
                    t.data()[(c * 16 + y + 6) * 16 + x + 6]
                })
            };
            ex.image = crop(&ex.image);
            ex.noise = crop(&ex.noise);
        }
        let objective = FlowMatchingLoss {
            model: &model,
            batch: &batch,
            schedule: FlowSchedule::default(),
        };
        let err = grad_check(&objective, model.params(), 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn short_run_is_deterministic_and_decreasing() {
        let data = render_dataset(&DatasetConfig::default(), &mut RngStream::new(1)).unwrap();
        let cfg = PretrainConfig {
            steps: 60,
            batch: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let mut a = tiny_model(16);
        let mut b = tiny_model(16);
        let ra = pretrain_flow(&mut a, &data, &cfg, &mut RngStream::new(9)).unwrap();
        let rb = pretrain_flow(&mut b, &data, &cfg, &mut RngStream::new(9)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.loss_curve, rb.loss_curve);
        let s = ra.smoothed(20);
        assert!(s[59] < s[19]);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
