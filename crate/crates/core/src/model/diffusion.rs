use rand::Rng;
use rand_distr::StandardNormal;

use super::{ForwardOutput, Model, Network, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Sequential;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Diagonal Gaussian over the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution<E: Element = f32> {
    pub mean: Tensor<E>,
    pub logvar: Tensor<E>,
}

/// Every random quantity of one diffusion-family forward pass, row-major
/// `[N, latent]` for the two noise draws.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionNoise {
    /// Reparameterization noise for sampling `z0`.
    pub latent_eps: Vec<f64>,
    /// One timestep per batch row.
    pub t: Vec<usize>,
    /// Forward-process noise added to `z0`.
    pub diffusion_eps: Vec<f64>,
}

impl DiffusionNoise {
    pub fn sample<R: Rng + ?Sized>(batch: usize, latent: usize, timesteps: usize, rng: &mut R) -> Self {
        let latent_eps = (0..batch * latent).map(|_| rng.sample(StandardNormal)).collect();
        let t = (0..batch).map(|_| rng.gen_range(0..timesteps)).collect();
        let diffusion_eps = (0..batch * latent).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            latent_eps,
            t,
            diffusion_eps,
        }
    }
}

/// Intermediate values recorded by a diffusion-family forward pass.
#[derive(Clone, Debug)]
pub struct DiffusionAux {
    pub mean: Var,
    pub logvar: Var,
    pub z0: Var,
    pub t: Vec<usize>,
    pub eps: Var,
    pub eps_hat: Var,
}

/// Anything that can predict the noise in a latent at timestep `t`.
pub trait NoisePredictor<E: Element> {
    fn predict_noise(&self, z_t: &Tensor<E>, t: usize) -> Result<Tensor<E>>;
}

impl<E: Element> NoisePredictor<E> for Model<E> {
    fn predict_noise(&self, z_t: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
        self.denoise_predict(z_t, t)
    }
}

/// `z = mean + exp(0.5 * logvar) * eps`
pub fn reparameterize<E: Element>(dist: &LatentDistribution<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    if dist.mean.shape() != dist.logvar.shape() || eps.shape() != dist.mean.shape() {
        return Err(Error::shape(format!(
            "reparameterize: mean {:?}, logvar {:?}, eps {:?}",
            dist.mean.shape(),
            dist.logvar.shape(),
            eps.shape()
        )));
    }
    let half = E::lit(0.5);
    let data = dist
        .mean
        .data()
        .iter()
        .zip(dist.logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Tensor::new(dist.mean.shape(), data)
}

/// Closed-form forward marginal `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn diffuse_forward<E: Element>(z0: &Tensor<E>, t: usize, schedule: &NoiseSchedule, eps: &Tensor<E>) -> Result<Tensor<E>> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!("diffuse_forward: z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar()[t];
    let (a, b) = (E::lit(ab.sqrt()), E::lit((1.0 - ab).sqrt()));
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::new(z0.shape(), data)
}

/// Features for timestep `t`: `t / T` followed by `features / 2` sin/cos pairs.
pub fn timestep_embedding(t: usize, timesteps: usize, features: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + features);
    out.push(t as f64 / timesteps as f64);
    let pairs = features / 2;
    for i in 0..pairs {
        let freq = 10_000f64.powf(-(i as f64) / pairs as f64);
        out.push((t as f64 * freq).sin());
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Ancestral sampling from `z_T` down to `z_0`. With `rng = None` the
/// injected noise is zero at every step.
pub fn reverse_diffusion<E, P, R>(
    predictor: &P,
    z_last: &Tensor<E>,
    schedule: &NoiseSchedule,
    mut rng: Option<&mut R>,
) -> Result<Tensor<E>>
where
    E: Element,
    P: NoisePredictor<E> + ?Sized,
    R: Rng + ?Sized,
{
    let mut z = z_last.clone();
    for t in (0..schedule.timesteps()).rev() {
        let eps_hat = predictor.predict_noise(&z, t)?;
        if eps_hat.shape() != z.shape() {
            return Err(Error::shape(format!(
                "noise predictor returned {:?} for latent {:?}",
                eps_hat.shape(),
                z.shape()
            )));
        }
        let beta = schedule.beta()[t];
        let inv_sqrt_alpha = 1.0 / schedule.alpha()[t].sqrt();
        let coef = beta / (1.0 - schedule.alpha_bar()[t]).sqrt();
        let sigma = beta.sqrt();
        let next = z
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&zt, &e)| {
                let mean = inv_sqrt_alpha * (zt.as_f64() - coef * e.as_f64());
                let xi = match rng.as_deref_mut() {
                    Some(r) if t > 0 => r.sample::<f64, _>(StandardNormal),
                    _ => 0.0,
                };
                E::lit(mean + sigma * xi)
            })
            .collect();
        z = Tensor::new(z.shape(), next)?;
    }
    Ok(z)
}

/// Runs the denoiser on the tape for per-row timesteps `ts`.
pub(super) fn denoise<E: Element>(
    model: &Model<E>,
    denoiser: &Sequential,
    tape: &mut Tape<E>,
    bound: &[Var],
    z_t: Var,
    ts: &[usize],
) -> Result<Var> {
    let geo = model.spec.diffusion_geometry().expect("diffusion model");
    let width = 1 + geo.time_features;
    let emb: Vec<E> = ts
        .iter()
        .flat_map(|&t| timestep_embedding(t, geo.timesteps, geo.time_features))
        .map(E::lit)
        .collect();
    let emb = tape.constant(&[ts.len(), width], emb)?;
    let input = tape.concat_cols(&[z_t, emb])?;
    denoiser.forward(tape, bound, input)
}

pub(super) fn forward<E: Element>(
    model: &Model<E>,
    tape: &mut Tape<E>,
    bound: &[Var],
    x: Var,
    noise: &DiffusionNoise,
) -> Result<ForwardOutput> {
    let Network::Diffusion {
        encoder,
        mean_head,
        logvar_head,
        denoiser,
        decoder,
        schedule,
    } = &model.net
    else {
        unreachable!("caller matched the diffusion network");
    };
    let n = tape.shape(x)[0];
    let d = model.spec.latent_dim;
    if noise.latent_eps.len() != n * d || noise.diffusion_eps.len() != n * d || noise.t.len() != n {
        return Err(Error::shape(format!(
            "diffusion noise sized for {} rows, batch has {n}",
            noise.t.len()
        )));
    }
    for &t in &noise.t {
        schedule.check_t(t)?;
    }

    let h = encoder.forward(tape, bound, x)?;
    let mean = mean_head.forward(tape, bound, h)?;
    let logvar = logvar_head.forward(tape, bound, h)?;

    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let latent_eps = tape.constant(&[n, d], noise.latent_eps.iter().map(|&v| E::lit(v)).collect())?;
    let spread = tape.mul(std, latent_eps)?;
    let z0 = tape.add(mean, spread)?;
    let recon = decoder.forward(tape, bound, z0)?;

    // The noise objective trains the denoiser only; it does not reach the encoder.
    let z0_fixed = tape.detach(z0);
    let mut signal = Vec::with_capacity(n * d);
    let mut spread = Vec::with_capacity(n * d);
    for &t in &noise.t {
        let ab = schedule.alpha_bar()[t];
        signal.extend(std::iter::repeat(E::lit(ab.sqrt())).take(d));
        spread.extend(std::iter::repeat(E::lit((1.0 - ab).sqrt())).take(d));
    }
    let signal = tape.constant(&[n, d], signal)?;
    let spread = tape.constant(&[n, d], spread)?;
    let eps = tape.constant(&[n, d], noise.diffusion_eps.iter().map(|&v| E::lit(v)).collect())?;
    let kept = tape.mul(signal, z0_fixed)?;
    let added = tape.mul(spread, eps)?;
    let z_t = tape.add(kept, added)?;
    let eps_hat = denoise(model, denoiser, tape, bound, z_t, &noise.t)?;

    Ok(ForwardOutput {
        recon,
        aux: Some(DiffusionAux {
            mean,
            logvar,
            z0,
            t: noise.t.clone(),
            eps,
            eps_hat,
        }),
    })
}

/// `KL(N(mean, exp(logvar)) || N(0, I))`, summed over latent dimensions and
/// averaged over the batch.
pub(super) fn kl_to_standard_normal<E: Element>(tape: &mut Tape<E>, mean: Var, logvar: Var) -> Result<Var> {
    let n = tape.shape(mean)[0];
    let one_plus = tape.add_scalar(logvar, 1.0);
    let m2 = tape.square(mean);
    let var = tape.exp(logvar);
    let a = tape.sub(one_plus, m2)?;
    let b = tape.sub(a, var)?;
    let s = tape.sum(b);
    Ok(tape.scale(s, -0.5 / n as f64))
}
