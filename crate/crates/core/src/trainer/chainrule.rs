//! Numerical check that a gradient step on `E(f(theta))` splits into a
//! step in output space followed by a least-squares fit of the network.
//!
//! With `J` the Jacobian of `f` at `theta_t` and `g = grad E(f(theta_t))`:
//!
//! * direct step: `d_theta = -alpha J^T g`
//! * output step: `d_s = -alpha g`, then `d_theta = J^T d_s`
//! * the same `d_theta` is a unit gradient step on
//!   `1/2 || f(theta_t) + d_s - f(theta) ||^2` at `theta_t`.

use crate::diffcore::{forward_vars, ModelParams, Tape, Tensor, Var};
use crate::{Error, Result};

/// Differentiable map recorded on a tape.
pub type DiffFn<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRuleReport {
    pub outputs: usize,
    pub params: usize,
    pub direct: Vec<f64>,
    pub two_stage: Vec<f64>,
    pub least_squares: Vec<f64>,
    /// `max |direct - two_stage|`.
    pub decomposition_residual: f64,
    /// `max |least_squares - two_stage|`.
    pub least_squares_residual: f64,
}

impl ChainRuleReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.decomposition_residual < tol && self.least_squares_residual < tol
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Generic form: `model` maps a flat parameter vector to a flat output,
/// `loss` maps that output to a scalar.
pub fn check_decomposition(theta: &[f64], model: &DiffFn<'_>, loss: &DiffFn<'_>, alpha: f64) -> Result<ChainRuleReport> {
    let m = theta.len();
    let theta_t = Tensor::new(vec![m], theta.to_vec())?;

    let eval = |tape: &mut Tape| -> Result<(Var, Var)> {
        let p = tape.param(theta_t.clone())?;
        let s = model(tape, p)?;
        Ok((p, s))
    };
    let param_grad = |tape: &Tape, p: Var| -> Vec<f64> { tape.grad(p).map_or(vec![0.0; m], <[f64]>::to_vec) };

    // s_t and grad E(s_t)
    let mut tape = Tape::new();
    let (_, s) = eval(&mut tape)?;
    let s_t = tape.value(s).clone();
    let n = s_t.len();
    let mut tape = Tape::new();
    let sv = tape.param(s_t.clone())?;
    let e = loss(&mut tape, sv)?;
    tape.backward(e)?;
    let g = tape
        .grad(sv)
        .ok_or_else(|| Error::Autodiff("loss does not depend on the model output".into()))?
        .to_vec();

    // direct
    let mut tape = Tape::new();
    let (p, s) = eval(&mut tape)?;
    let e = loss(&mut tape, s)?;
    tape.backward(e)?;
    let direct: Vec<f64> = param_grad(&tape, p).iter().map(|v| -alpha * v).collect();

    // Jacobian rows by one backward pass per output
    let mut jac = vec![0.0; n * m];
    for j in 0..n {
        let mut tape = Tape::new();
        let (p, s) = eval(&mut tape)?;
        let sj = tape.gather(s, vec![j])?;
        let sj = tape.sum(sj)?;
        tape.backward(sj)?;
        jac[j * m..(j + 1) * m].copy_from_slice(&param_grad(&tape, p));
    }
    let ds: Vec<f64> = g.iter().map(|v| -alpha * v).collect();
    let mut two_stage = vec![0.0; m];
    for j in 0..n {
        for (t, &jv) in two_stage.iter_mut().zip(&jac[j * m..(j + 1) * m]) {
            *t += ds[j] * jv;
        }
    }

    // unit gradient step on the least-squares fit to s_t + d_s
    let target: Vec<f64> = s_t.data().iter().zip(&ds).map(|(a, b)| a + b).collect();
    let mut tape = Tape::new();
    let (p, s) = eval(&mut tape)?;
    let s_flat = tape.reshape(s, vec![n])?;
    let tv = tape.constant(Tensor::new(vec![n], target)?)?;
    let d = tape.sub(s_flat, tv)?;
    let sq = tape.sum_squares(d)?;
    let half = tape.scale(sq, 0.5)?;
    tape.backward(half)?;
    let least_squares: Vec<f64> = param_grad(&tape, p).iter().map(|v| -v).collect();

    Ok(ChainRuleReport {
        outputs: n,
        params: m,
        decomposition_residual: max_abs_diff(&direct, &two_stage),
        least_squares_residual: max_abs_diff(&least_squares, &two_stage),
        direct,
        two_stage,
        least_squares,
    })
}

/// The check for the segmentation network: `f` is the per-pixel softmax of
/// the network on `image`, flattened.
pub fn verify_chainrule_decomposition(
    params: &ModelParams,
    image: &Tensor,
    loss: &DiffFn<'_>,
    alpha: f64,
) -> Result<ChainRuleReport> {
    let spec = params.spec();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let image = image.clone();
    let model = move |tape: &mut Tape, theta: Var| -> Result<Var> {
        let mut vars = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for shape in &shapes {
            let len: usize = shape.iter().product();
            let piece = tape.gather(theta, (at..at + len).collect())?;
            vars.push(tape.reshape(piece, shape.clone())?);
            at += len;
        }
        let x = tape.constant(image.clone())?;
        let logits = forward_vars(tape, spec, &vars, x)?;
        let probs = tape.softmax(logits)?;
        let n = tape.value(probs).len();
        tape.reshape(probs, vec![n])
    };
    check_decomposition(&params.flatten(), &model, loss, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_quadratic_loss() {
        // f(theta) = A theta, E(s) = |s|^2
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
        let model = |tape: &mut Tape, theta: Var| -> Result<Var> {
            let av = tape.constant(a.clone())?;
            let t = tape.reshape(theta, vec![2, 1])?;
            let s = tape.matmul(av, t)?;
            tape.reshape(s, vec![3])
        };
        let loss = |tape: &mut Tape, s: Var| tape.sum_squares(s);
        let r = check_decomposition(&[0.3, -0.7], &model, &loss, 0.05).unwrap();
        assert!(r.passes(1e-12), "{r:?}");
        let r = check_decomposition(&[0.3, -0.7], &model, &loss, 0.0).unwrap();
        assert!(r.direct.iter().chain(&r.two_stage).chain(&r.least_squares).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_loss_is_rejected() {
        let model = |tape: &mut Tape, theta: Var| tape.scale(theta, 2.0);
        let loss = |tape: &mut Tape, _s: Var| tape.constant(Tensor::scalar(1.0)?);
        assert!(check_decomposition(&[1.0], &model, &loss, 0.1).is_err());
    }
}
