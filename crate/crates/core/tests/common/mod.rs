#![allow(dead_code)]

use detfed::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// |a − n| / max(|a|, |n|, 1e-5); the floor sits above central-difference cancellation noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output coordinate contributes a distinct amount.
fn scalarize(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).numel();
    if n == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.5 + ((i * 7919) % 101) as f64 / 101.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarize(&mut tape, out);
    tape.value(s).item()
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every coordinate of every input.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarize(&mut tape, out);
    tape.backward(s).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

/// Gradcheck on a random subset of coordinates: `per_input` coordinates from each input.
pub fn gradcheck_sampled(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    per_input: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarize(&mut tape, out);
    tape.backward(s).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for _ in 0..per_input.min(inputs[k].numel()) {
            let e = rng.gen_range(0..inputs[k].numel());
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
