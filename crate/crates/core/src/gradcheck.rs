//! Central finite-difference checks of reverse-mode gradients.
//!
//! A check builds a scalar from a set of input tensors, runs `backward`, and
//! compares every gradient entry with `(f(x + h e) - f(x - h e)) / 2h`. The
//! error is measured norm-wise: `max |ad - fd| / max(max |ad|, max |fd|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{HardLabeling, PartialLabeling, PottsGrid};
use crate::diffcore::{forward_vars, LayerSpec, ModelParams, NllTerm, Tape, Tensor, Var};
use crate::losses::{
    bilinear_potts_grid, cross_entropy, forward_corrected_ce, mixed_robust_kl, pce, robust_ce, LogProbs, NoiseModel,
    TransitionMatrix,
};
use crate::{Error, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Instances per check used by [`op_suite`] and [`loss_suite`] by default.
pub const INSTANCES: usize = 20;

/// Scalar function of the leaves, recorded on a tape.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn evaluate(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Relative error of the tape gradient of `build` at `inputs`.
pub fn relative_error(inputs: &[Tensor], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    tape.backward(out)?;
    let ad: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut probe = inputs.to_vec();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (which, grads) in ad.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let x = inputs[which].data()[j];
            probe[which].data_mut()[j] = x + STEP;
            let up = evaluate(&probe, build)?;
            probe[which].data_mut()[j] = x - STEP;
            let down = evaluate(&probe, build)?;
            probe[which].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * STEP);
            diff = diff.max((g - fd).abs());
            scale = scale.max(g.abs()).max(fd.abs());
        }
    }
    Ok(if diff == 0.0 { 0.0 } else { diff / scale })
}

/// Runs `instance` for `n` seeds and keeps the worst error.
pub fn check(
    name: &str,
    n: usize,
    seed: u64,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        worst = worst.max(instance(&mut rng)?);
    }
    Ok(GradCheck {
        name: name.to_string(),
        instances: n,
        max_rel_error: worst,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi)).expect("valid shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

/// `sum(c * x)` for a fixed random `c`, reducing any tensor to a scalar so the
/// full Jacobian is exercised.
fn project(tape: &mut Tape, x: Var, c: &Tensor) -> Result<Var> {
    let cv = tape.constant(c.clone())?;
    let p = tape.mul(x, cv)?;
    tape.sum(p)
}

fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.05..1.0)).collect();
    for row in t.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;

/// Every differentiable tape operation and the network layers, each on
/// `n` random instances.
pub fn op_suite(n: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let shape = [3, 4];

    let binary: [(&str, fn(&mut Tape, Var, Var) -> Result<Var>); 3] =
        [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    for (name, op) in binary {
        out.push(check(name, n, seed, |rng| {
            let (a, b, c) = (
                uniform(rng, &shape, -1.0, 1.0),
                uniform(rng, &shape, -1.0, 1.0),
                uniform(rng, &shape, -1.0, 1.0),
            );
            relative_error(&[a, b], &|t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, &c)
            })
        })?);
    }

    let unary: [(&str, Unary, f64, f64); 5] = [
        ("scale", |t, x| t.scale(x, -1.7), -1.0, 1.0),
        ("exp", Tape::exp, -2.0, 2.0),
        ("log", Tape::log, 0.2, 3.0),
        ("log_softmax", Tape::log_softmax, -3.0, 3.0),
        ("softmax", Tape::softmax, -3.0, 3.0),
    ];
    for (name, op, lo, hi) in unary {
        out.push(check(name, n, seed, |rng| {
            let (x, c) = (uniform(rng, &shape, lo, hi), uniform(rng, &shape, -1.0, 1.0));
            relative_error(&[x], &|t, v| {
                let y = op(t, v[0])?;
                project(t, y, &c)
            })
        })?);
    }

    out.push(check("relu", n, seed, |rng| {
        let (x, c) = (off_zero(rng, &shape), uniform(rng, &shape, -1.0, 1.0));
        relative_error(&[x], &|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &c)
        })
    })?);
    out.push(check("reshape", n, seed, |rng| {
        let (x, c) = (uniform(rng, &shape, -1.0, 1.0), uniform(rng, &[4, 3], -1.0, 1.0));
        relative_error(&[x], &|t, v| {
            let y = t.reshape(v[0], vec![4, 3])?;
            project(t, y, &c)
        })
    })?);
    out.push(check("sum", n, seed, |rng| {
        let x = uniform(rng, &shape, -1.0, 1.0);
        relative_error(&[x], &|t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        })
    })?);
    out.push(check("sum_squares", n, seed, |rng| {
        let x = uniform(rng, &shape, -1.0, 1.0);
        relative_error(&[x], &|t, v| t.sum_squares(v[0]))
    })?);
    out.push(check("gather", n, seed, |rng| {
        let x = uniform(rng, &shape, -1.0, 1.0);
        let idx: Vec<usize> = (0..8).map(|_| rng.gen_range(0..12)).collect();
        let c = uniform(rng, &[8], -1.0, 1.0);
        relative_error(&[x], &|t, v| {
            let y = t.gather(v[0], idx.clone())?;
            project(t, y, &c)
        })
    })?);
    out.push(check("matmul", n, seed, |rng| {
        let (a, b, c) = (
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 2], -1.0, 1.0),
            uniform(rng, &[3, 2], -1.0, 1.0),
        );
        relative_error(&[a, b], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, &c)
        })
    })?);
    out.push(check("add_row_bias", n, seed, |rng| {
        let (x, b, c) = (
            uniform(rng, &shape, -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
            uniform(rng, &shape, -1.0, 1.0),
        );
        relative_error(&[x, b], &|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            project(t, y, &c)
        })
    })?);
    for k in [1, 3] {
        out.push(check(&format!("conv2d_{k}x{k}"), n, seed, |rng| {
            let (x, w, b, c) = (
                uniform(rng, &[5, 4, 2], -1.0, 1.0),
                uniform(rng, &[k, k, 2, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
                uniform(rng, &[5, 4, 3], -1.0, 1.0),
            );
            relative_error(&[x, w, b], &|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, &c)
            })
        })?);
    }
    out.push(check("floored_nll", n, seed, |rng| {
        let x = uniform(rng, &shape, -2.0, 2.0);
        let terms: Vec<NllTerm> = (0..3)
            .map(|row| NllTerm {
                row,
                label: rng.gen_range(0..4),
                floor: if row == 0 { 0.0 } else { rng.gen_range(0.0..0.3) },
                scale: rng.gen_range(0.2..1.0),
            })
            .collect();
        relative_error(&[x], &|t, v| {
            let lp = t.log_softmax(v[0])?;
            t.floored_nll(lp, terms.clone())
        })
    })?);
    out.push(check("corrected_nll", n, seed, |rng| {
        let x = uniform(rng, &shape, -2.0, 2.0);
        let tm = random_stochastic(rng, 4);
        let picks: Vec<(usize, usize)> = (0..3).map(|r| (r, rng.gen_range(0..4))).collect();
        relative_error(&[x], &|t, v| {
            let lp = t.log_softmax(v[0])?;
            t.corrected_nll(lp, tm.clone(), picks.clone())
        })
    })?);
    out.push(check("bilinear_potts", n, seed, |rng| {
        let x = uniform(rng, &shape, -2.0, 2.0);
        let pairs: Vec<(usize, usize, f64)> = vec![(0, 1, rng.gen_range(0.1..2.0)), (1, 2, rng.gen_range(0.1..2.0)), (0, 2, rng.gen_range(0.1..2.0))];
        relative_error(&[x], &|t, v| {
            let q = t.softmax(v[0])?;
            t.bilinear_potts(q, pairs.clone())
        })
    })?);

    // network layers: hidden conv + relu, and the 1x1 head
    out.push(check("layer_conv3x3_relu", n, seed, |rng| {
        let (x, w, b, c) = (
            uniform(rng, &[4, 4, 3], -1.0, 1.0),
            uniform(rng, &[3, 3, 3, 4], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
            uniform(rng, &[4, 4, 4], -1.0, 1.0),
        );
        relative_error(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            let y = t.relu(y)?;
            project(t, y, &c)
        })
    })?);
    out.push(check("layer_head", n, seed, |rng| {
        let (x, w, b, c) = (
            uniform(rng, &[4, 4, 4], -1.0, 1.0),
            uniform(rng, &[1, 1, 4, 3], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
            uniform(rng, &[4, 4, 3], -1.0, 1.0),
        );
        relative_error(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, &c)
        })
    })?);
    Ok(out)
}

/// Network used by [`loss_suite`]: the micro-net layer stack at reduced
/// width so that a difference quotient over every parameter stays cheap.
pub fn check_spec(classes: usize) -> LayerSpec {
    LayerSpec {
        in_channels: 3,
        hidden_channels: 4,
        hidden_layers: 2,
        classes,
    }
}

const H: usize = 4;
const W: usize = 5;
const K: usize = 3;
/// Network instances are redrawn until every hidden pre-activation is at
/// least this far from zero.
const RELU_MARGIN: f64 = 1e-3;

fn random_labels(rng: &mut ChaCha8Rng) -> HardLabeling {
    HardLabeling::new(H, W, (0..H * W).map(|_| rng.gen_range(0..K as u8)).collect()).expect("valid labels")
}

fn random_seeds(rng: &mut ChaCha8Rng) -> PartialLabeling {
    let mut labels: Vec<Option<u8>> = vec![None; H * W];
    for _ in 0..5 {
        labels[rng.gen_range(0..H * W)] = Some(rng.gen_range(0..K as u8));
    }
    PartialLabeling::new(H, W, labels).expect("valid seeds")
}

/// Smallest |pre-activation| of any hidden ReLU on `image`.
pub fn relu_margin(params: &ModelParams, image: &Tensor) -> Result<f64> {
    let spec = params.spec();
    let mut tape = Tape::new();
    let mut h = tape.constant(image.clone())?;
    let mut margin = f64::INFINITY;
    for l in 0..spec.hidden_layers {
        let w = tape.constant(params.tensors()[2 * l].clone())?;
        let b = tape.constant(params.tensors()[2 * l + 1].clone())?;
        let z = tape.conv2d(h, w, b)?;
        margin = tape.value(z).data().iter().fold(margin, |m, v| m.min(v.abs()));
        h = tape.relu(z)?;
    }
    Ok(margin)
}

/// Network parameters (plus the image) as the checked inputs, a loss on the
/// resulting log-probabilities as the output.
fn net_loss_error(
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&mut Tape, &LogProbs) -> Result<Var>,
) -> Result<f64> {
    let spec = check_spec(K);
    // central differences are meaningless across a ReLU kink
    let (params, image) = loop {
        let params = ModelParams::init(spec, rng.gen())?;
        let image = uniform(rng, &[H, W, 3], 0.0, 1.0);
        if relu_margin(&params, &image)? >= RELU_MARGIN {
            break (params, image);
        }
    };
    let mut inputs = params.tensors().to_vec();
    inputs.push(image);
    relative_error(&inputs, &|t, v| {
        let (theta, x) = v.split_at(v.len() - 1);
        let logits = forward_vars(t, spec, theta, x[0])?;
        let q = LogProbs::from_logits(t, logits)?;
        loss(t, &q)
    })
}

/// Every loss composed with the network, gradients over every parameter.
pub fn loss_suite(n: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    out.push(check("pce", n, seed, |rng| {
        let seeds = random_seeds(rng);
        net_loss_error(rng, &|t, q| pce(t, q, &seeds))
    })?);
    out.push(check("cross_entropy", n, seed, |rng| {
        let labels = random_labels(rng);
        net_loss_error(rng, &|t, q| cross_entropy(t, q, &labels))
    })?);
    out.push(check("robust_ce", n, seed, |rng| {
        let labels = random_labels(rng);
        let noise = NoiseModel::new(rng.gen_range(0.0..0.6), K)?;
        net_loss_error(rng, &|t, q| robust_ce(t, q, &labels, &noise))
    })?);
    out.push(check("forward_corrected_ce", n, seed, |rng| {
        let labels = random_labels(rng);
        let tm = TransitionMatrix::new(K, random_stochastic(rng, K))?;
        net_loss_error(rng, &|t, q| forward_corrected_ce(t, q, &labels, &tm))
    })?);
    out.push(check("mixed_robust_kl", n, seed, |rng| {
        let labels = random_labels(rng);
        let mut seeds = random_seeds(rng);
        for (i, l) in labels.labels().iter().enumerate() {
            if seeds.get(i).is_some() {
                seeds.set(i, Some(*l));
            }
        }
        let noise = NoiseModel::new(rng.gen_range(0.0..0.6), K)?;
        net_loss_error(rng, &|t, q| mixed_robust_kl(t, q, &labels, &seeds, &noise))
    })?);
    out.push(check("bilinear_potts_grid", n, seed, |rng| {
        let image = uniform(rng, &[H, W, 3], 0.0, 1.0);
        let crf = PottsGrid::<f64>::from_image(&image, 0.3, 1.5, K)?;
        net_loss_error(rng, &|t, q| bilinear_potts_grid(t, q, &crf))
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_factor_is_detected() {
        // x * stop(x): the tape sees x, the difference quotient sees 2x
        let x = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let err = relative_error(&[x], &|t, v| {
            let c = t.constant(t.value(v[0]).clone())?;
            let y = t.mul(v[0], c)?;
            t.sum(y)
        })
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn suites_pass_on_few_instances() {
        for c in op_suite(3, 7).unwrap().into_iter().chain(loss_suite(2, 7).unwrap()) {
            assert!(c.passed(), "{c:?}");
        }
    }
}
