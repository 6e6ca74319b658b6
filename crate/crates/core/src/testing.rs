//! Finite-difference gradient oracles, compiled only for tests and the
//! `testing` feature.
//!
//! Everything here evaluates in `f64` and perturbs one coordinate at a time
//! with central differences, independently of the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::model::{Architecture, DiffusionNoise, Family, InputDims, LossWeights, Model, ModelSpec};
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
    /// Coordinates skipped because the ±h window crossed a ReLU kink.
    pub kinks: usize,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], away_from_zero: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        if away_from_zero {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        } else {
            rng.gen_range(-1.0..1.0)
        }
    })
    .with_requires_grad(true)
}

/// Checks `d/d inputs sum(r ⊙ op(inputs))` for a fixed random `r`.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let weighted = |tape: &mut Tape<f64>, out: Var, r: &[f64]| -> Result<Var> {
        let shape = tape.shape(out).to_vec();
        let rv = tape.constant(&shape, r.to_vec())?;
        let prod = tape.mul(out, rv)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let r: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = weighted(&mut tape, out, &r)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        match tape.grad(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(tape.value(v).len())),
        }
    }

    let base_pattern = tape.relu_pattern();
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted(&mut tape, out, &r)?;
        Ok((tape.value(loss)[0], tape.relu_pattern()))
    };
    let mut kept = Vec::with_capacity(analytic.len());
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut kinks = 0;
    let mut work = inputs.to_vec();
    let mut flat = 0;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let (up, pu) = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let (down, pd) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if pu != base_pattern || pd != base_pattern {
                kinks += 1;
            } else {
                kept.push(analytic[flat]);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            flat += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_error: relative_error(&kept, &numeric),
        coords: numeric.len(),
        kinks,
    })
}

/// Every differentiable tape operation on random shapes with all dims ≤ 6.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let dim = |rng: &mut Xoshiro256PlusPlus| rng.gen_range(1..=6usize);
    let mut checks = Vec::new();

    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let a = random_tensor(&mut rng, &[m, k], false);
    let b = random_tensor(&mut rng, &[k, n], false);
    checks.push(check_op("matmul", &[a, b], seed, |t, v| t.matmul(v[0], v[1]))?);

    let x = random_tensor(&mut rng, &[m, k], false);
    let w = random_tensor(&mut rng, &[n, k], false);
    let bias = random_tensor(&mut rng, &[n], false);
    checks.push(check_op("linear", &[x, w, bias], seed, |t, v| t.linear(v[0], v[1], v[2]))?);

    for transposed in [false, true] {
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let kernel = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1).min(kernel - 1);
        let h = rng.gen_range(kernel.max(2)..=6);
        let wd = rng.gen_range(kernel.max(2)..=6);
        let batch = rng.gen_range(1..=2);
        let x = random_tensor(&mut rng, &[batch, c_in, h, wd], false);
        let b = random_tensor(&mut rng, &[c_out], false);
        if transposed {
            let w = random_tensor(&mut rng, &[c_in, c_out, kernel, kernel], false);
            checks.push(check_op("conv_transpose2d", &[x, w, b], seed, |t, v| {
                t.conv_transpose2d(v[0], v[1], v[2], stride, pad)
            })?);
        } else {
            let w = random_tensor(&mut rng, &[c_out, c_in, kernel, kernel], false);
            checks.push(check_op("conv2d", &[x, w, b], seed, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad))?);
        }
    }

    let shape = [dim(&mut rng), dim(&mut rng)];
    let x = random_tensor(&mut rng, &shape, true);
    checks.push(check_op("relu", &[x], seed, |t, v| Ok(t.relu(v[0])))?);
    let x = random_tensor(&mut rng, &shape, false);
    checks.push(check_op("sigmoid", &[x.clone()], seed, |t, v| Ok(t.sigmoid(v[0])))?);
    checks.push(check_op("exp", &[x.clone()], seed, |t, v| Ok(t.exp(v[0])))?);
    checks.push(check_op("square", &[x.clone()], seed, |t, v| Ok(t.square(v[0])))?);
    checks.push(check_op("scale", &[x.clone()], seed, |t, v| Ok(t.scale(v[0], -1.7)))?);
    checks.push(check_op("add_scalar", &[x.clone()], seed, |t, v| Ok(t.add_scalar(v[0], 0.3)))?);
    checks.push(check_op("mean", &[x.clone()], seed, |t, v| Ok(t.mean(v[0])))?);
    checks.push(check_op("sum", &[x.clone()], seed, |t, v| Ok(t.sum(v[0])))?);
    checks.push(check_op("flatten", &[x.clone()], seed, |t, v| Ok(t.flatten(v[0])))?);
    let flat = x.len();
    checks.push(check_op("reshape", &[x.clone()], seed, move |t, v| t.reshape(v[0], &[flat]))?);
    let y = random_tensor(&mut rng, &shape, false);
    checks.push(check_op("add", &[x.clone(), y.clone()], seed, |t, v| t.add(v[0], v[1]))?);
    checks.push(check_op("sub", &[x.clone(), y.clone()], seed, |t, v| t.sub(v[0], v[1]))?);
    checks.push(check_op("mul", &[x.clone(), y.clone()], seed, |t, v| t.mul(v[0], v[1]))?);
    checks.push(check_op("mse", &[x.clone(), y.clone()], seed, |t, v| t.mse(v[0], v[1]))?);
    let cols = dim(&mut rng);
    let z = random_tensor(&mut rng, &[shape[0], cols], false);
    checks.push(check_op("concat_cols", &[x, z], seed, |t, v| t.concat_cols(&[v[0], v[1]]))?);

    let c = rng.gen_range(1..=2);
    let x = random_tensor(&mut rng, &[c, 5, 5], false);
    let w = random_tensor(&mut rng, &[2, c, 3, 3], false);
    let b = random_tensor(&mut rng, &[2], false);
    checks.push(check_op("conv2d->relu->mean", &[x, w, b], seed, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        let r = t.relu(y);
        Ok(t.mean(r))
    })?);
    Ok(checks)
}

/// Full-model spec at 8×8 used for gradient checks.
pub fn gradcheck_spec(family: Family) -> ModelSpec {
    let mut spec = ModelSpec::for_family(family, InputDims::rgb(8, 8));
    if let Architecture::Diffusion { diffusion, .. } = &mut spec.arch {
        // A couple of extra blocks exercise the dynamic-depth path too.
        diffusion.extra_blocks = 1;
    }
    spec
}

/// Checks the family's full training objective w.r.t. the input image and a
/// random sample of parameter coordinates (`per_tensor` from each tensor).
///
/// The diffusion noise term sees a detached latent, so finite differences of
/// the total loss only agree with backprop for denoiser parameters. That
/// family is therefore checked in two passes: everything with the noise term
/// off, then the denoiser alone with it on.
pub fn model_check(family: Family, seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let spec = gradcheck_spec(family);
    let mut model = Model::<f64>::build(&spec, seed)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen::<f64>()).with_requires_grad(true);
    let noise = (family == Family::Diffusion).then(|| DiffusionNoise::sample(2, spec.latent_dim, 100, &mut rng));

    let passes: Vec<(LossWeights, bool, fn(&str) -> bool)> = if family == Family::Diffusion {
        vec![
            (LossWeights { noise: 0.0, kl: 0.5 }, true, |_| true),
            (LossWeights { noise: 1.0, kl: 0.5 }, false, |n| n.starts_with("denoiser.")),
        ]
    } else {
        vec![(LossWeights::default(), true, |_| true)]
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut kinks = 0;
    for (weights, check_input, select) in passes {
        let loss_of = |model: &Model<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let xv = tape.leaf(x);
            let out = model.forward_with_noise(&mut tape, &bound, xv, noise.as_ref())?;
            let loss = model.loss(&mut tape, &out, xv, weights)?;
            Ok((tape.value(loss)[0], tape.relu_pattern()))
        };

        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = model.forward_with_noise(&mut tape, &bound, xv, noise.as_ref())?;
        let loss = model.loss(&mut tape, &out, xv, weights)?;
        tape.backward(loss)?;
        let base_pattern = tape.relu_pattern();

        let mut record = |a: f64, (up, pu): (f64, Vec<bool>), (down, pd): (f64, Vec<bool>)| {
            if pu != base_pattern || pd != base_pattern {
                kinks += 1;
            } else {
                analytic.push(a);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
        };
        if check_input {
            let x_grad = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
            let mut xw = x.clone();
            for j in 0..x.len() {
                if !rng.gen_bool(0.25) {
                    continue;
                }
                let orig = xw.data()[j];
                xw.data_mut()[j] = orig + FD_STEP;
                let up = loss_of(&model, &xw)?;
                xw.data_mut()[j] = orig - FD_STEP;
                let down = loss_of(&model, &xw)?;
                xw.data_mut()[j] = orig;
                record(x_grad[j], up, down);
            }
        }
        let param_grads: Vec<Vec<f64>> = bound
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let names = model.params().names().to_vec();
        for (i, grads) in param_grads.iter().enumerate() {
            if !select(&names[i]) {
                continue;
            }
            let len = grads.len();
            for _ in 0..per_tensor.min(len) {
                let j = rng.gen_range(0..len);
                let orig = model.params().tensors()[i].data()[j];
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
                let up = loss_of(&model, &x)?;
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
                let down = loss_of(&model, &x)?;
                model.params_mut().tensors_mut()[i].data_mut()[j] = orig;
                record(grads[j], up, down);
            }
        }
    }
    Ok(GradCheck {
        name: format!("{family} model"),
        rel_error: relative_error(&analytic, &numeric),
        coords: numeric.len(),
        kinks,
    })
}
