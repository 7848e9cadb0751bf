use super::ModelParams;
use crate::{Error, Result};

/// SGD with heavy-ball momentum and a polynomial learning-rate decay
/// `rate(step) = base_rate * (1 - step / total_steps)^power`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub base_rate: f64,
    pub momentum: f64,
    pub power: f64,
    pub step: usize,
    pub total_steps: usize,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(base_rate: f64, momentum: f64, power: f64, total_steps: usize) -> Result<Self> {
        if !(base_rate >= 0.0 && base_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {base_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        if !(power >= 0.0) {
            return Err(Error::Config(format!("schedule power {power} must be >= 0")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        Ok(Self {
            base_rate,
            momentum,
            power,
            step: 0,
            total_steps,
            velocity: Vec::new(),
        })
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        let frac = 1.0 - (step.min(self.total_steps) as f64) / self.total_steps as f64;
        if frac <= 0.0 {
            0.0
        } else {
            self.base_rate * frac.powf(self.power)
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate_at(self.step)
    }
}

/// One momentum update from the accumulated gradients; clears them and
/// advances the schedule.
pub fn sgd_step(params: &mut ModelParams, state: &mut OptimizerState) -> Result<()> {
    if params.tensors().iter().any(|t| t.grad().is_none()) {
        return Err(Error::Autodiff("sgd_step called without gradients".into()));
    }
    if state.velocity.is_empty() {
        state.velocity = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    }
    let rate = state.rate();
    let mu = state.momentum;
    for (t, v) in params.tensors_mut().iter_mut().zip(state.velocity.iter_mut()) {
        let g = t.grad().expect("checked above").to_vec();
        for ((w, vel), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vel = mu * *vel + gi;
            *w -= rate * *vel;
        }
        t.clear_grad();
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{LayerSpec, Tensor};

    fn scalar_model(w: f64) -> ModelParams {
        // a 1x1 head with one input and one class holds exactly two scalars
        let spec = LayerSpec {
            in_channels: 1,
            hidden_channels: 0,
            hidden_layers: 0,
            classes: 1,
        };
        ModelParams::from_tensors(
            spec,
            vec![Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(), Tensor::zeros(vec![1])],
        )
        .unwrap()
    }

    fn set_grad(p: &mut ModelParams, g: f64) {
        for t in p.tensors_mut() {
            let n = t.len();
            t.set_grad(vec![g; n]).unwrap();
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_model(0.7);
        let before = p.flatten();
        let mut s = OptimizerState::new(0.1, 0.9, 0.9, 10).unwrap();
        set_grad(&mut p, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.flatten(), before);
        assert_eq!(s.step, 1);
        assert!(p.tensors()[0].grad().is_none());
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_model(1.0);
        let mut s = OptimizerState::new(0.1, 0.0, 0.0, 10).unwrap();
        set_grad(&mut p, 2.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.flatten()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = scalar_model(0.0);
        let mut s = OptimizerState::new(0.1, 0.9, 0.0, 100).unwrap();
        for _ in 0..2 {
            set_grad(&mut p, 1.0);
            sgd_step(&mut p, &mut s).unwrap();
        }
        assert!((p.flatten()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn missing_gradients() {
        let mut p = scalar_model(0.0);
        let mut s = OptimizerState::new(0.1, 0.9, 0.9, 10).unwrap();
        assert!(sgd_step(&mut p, &mut s).is_err());
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = OptimizerState::new(0.5, 0.9, 0.9, 37).unwrap();
        assert_eq!(s.rate_at(0), 0.5);
        assert_eq!(s.rate_at(37), 0.0);
        assert_eq!(s.rate_at(100), 0.0);
        for k in 0..37 {
            assert!(s.rate_at(k + 1) <= s.rate_at(k));
            assert!(s.rate_at(k) >= 0.0);
        }
    }

    #[test]
    fn bad_config() {
        assert!(OptimizerState::new(-1.0, 0.9, 0.9, 10).is_err());
        assert!(OptimizerState::new(0.1, 1.0, 0.9, 10).is_err());
        assert!(OptimizerState::new(0.1, 0.9, 0.9, 0).is_err());
    }
}
