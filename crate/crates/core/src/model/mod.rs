//! The three autoencoder families and the latent diffusion process.
//!
//! * feedforward: flatten, fully connected encoder/decoder, sigmoid output
//! * convolutional: strided conv encoder, linear bottleneck, mirrored
//!   transposed-conv decoder
//! * diffusion: the convolutional encoder with mean/log-variance heads, a
//!   DDPM-style noise process over the latent, a fully connected noise
//!   predictor, and the convolutional decoder

mod diffusion;
mod schedule;
mod spec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvTranspose2d, Layer, Linear, ParamSet, Sequential};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use diffusion::{
    diffuse_forward, reparameterize, reverse_diffusion, timestep_embedding, DiffusionAux, DiffusionNoise,
    LatentDistribution, NoisePredictor,
};
pub use schedule::NoiseSchedule;
pub use spec::{
    Architecture, ConvChain, DiffusionGeometry, Family, InputDims, ModelSpec, DEFAULT_FEEDFORWARD_HIDDEN,
    DEFAULT_LATENT,
};

/// Relative weights of the diffusion training objective's terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub noise: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { noise: 1.0, kl: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Network {
    Plain {
        encoder: Sequential,
        decoder: Sequential,
    },
    Diffusion {
        encoder: Sequential,
        mean_head: Linear,
        logvar_head: Linear,
        denoiser: Sequential,
        decoder: Sequential,
        schedule: NoiseSchedule,
    },
}

/// A constructed autoencoder: its spec, parameters and layer graph.
#[derive(Clone, Debug)]
pub struct Model<E: Element = f32> {
    spec: ModelSpec,
    params: ParamSet<E>,
    net: Network,
}

/// Result of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub recon: Var,
    pub aux: Option<DiffusionAux>,
}

fn conv_encoder<E: Element>(
    params: &mut ParamSet<E>,
    spec: &ModelSpec,
    conv: &ConvChain,
    rng: &mut impl Rng,
) -> Result<Sequential> {
    let mut enc = Sequential::new();
    let mut prev = spec.input.channels;
    for (i, &ch) in conv.channels.iter().enumerate() {
        let layer = Conv2d::new(params, &format!("encoder.conv{}", i + 1), prev, ch, conv.kernel, conv.stride, conv.pad, rng)?;
        enc.push(Layer::Conv(layer)).push(Layer::Activation(Activation::Relu));
        prev = ch;
    }
    enc.push(Layer::Flatten);
    Ok(enc)
}

fn conv_decoder<E: Element>(
    params: &mut ParamSet<E>,
    spec: &ModelSpec,
    conv: &ConvChain,
    rng: &mut impl Rng,
) -> Result<Sequential> {
    let (bc, bh, bw) = conv.bottleneck(&spec.input);
    let mut dec = Sequential::new();
    dec.push(Layer::Linear(Linear::new(params, "decoder.fc", spec.latent_dim, bc * bh * bw, rng)?))
        .push(Layer::Unflatten(vec![bc, bh, bw]));
    let mut chain: Vec<usize> = conv.channels.iter().rev().copied().collect();
    chain.push(spec.input.channels);
    let last = chain.len() - 2;
    for (i, pair) in chain.windows(2).enumerate() {
        let layer = ConvTranspose2d::new(
            params,
            &format!("decoder.deconv{}", i + 1),
            pair[0],
            pair[1],
            conv.kernel,
            conv.stride,
            conv.pad,
            rng,
        )?;
        dec.push(Layer::ConvTranspose(layer));
        dec.push(Layer::Activation(if i == last { Activation::Sigmoid } else { Activation::Relu }));
    }
    Ok(dec)
}

impl<E: Element> Model<E> {
    /// Builds and initializes a model; identical `(spec, seed)` gives
    /// identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = match &spec.arch {
            Architecture::Feedforward { hidden } => {
                let n = spec.input.numel();
                let mut enc = Sequential::new();
                enc.push(Layer::Flatten);
                let mut prev = n;
                for (i, &h) in hidden.iter().enumerate() {
                    enc.push(Layer::Linear(Linear::new(&mut params, &format!("encoder.fc{}", i + 1), prev, h, &mut rng)?))
                        .push(Layer::Activation(Activation::Relu));
                    prev = h;
                }
                enc.push(Layer::Linear(Linear::new(&mut params, "encoder.latent", prev, spec.latent_dim, &mut rng)?));

                let mut dec = Sequential::new();
                prev = spec.latent_dim;
                for (i, &h) in hidden.iter().rev().enumerate() {
                    dec.push(Layer::Linear(Linear::new(&mut params, &format!("decoder.fc{}", i + 1), prev, h, &mut rng)?))
                        .push(Layer::Activation(Activation::Relu));
                    prev = h;
                }
                dec.push(Layer::Linear(Linear::new(&mut params, "decoder.out", prev, n, &mut rng)?))
                    .push(Layer::Activation(Activation::Sigmoid))
                    .push(Layer::Unflatten(spec.input.shape().to_vec()));
                Network::Plain {
                    encoder: enc,
                    decoder: dec,
                }
            }
            Architecture::Convolutional { conv } => {
                let mut enc = conv_encoder(&mut params, spec, conv, &mut rng)?;
                let (bc, bh, bw) = conv.bottleneck(&spec.input);
                enc.push(Layer::Linear(Linear::new(&mut params, "encoder.fc", bc * bh * bw, spec.latent_dim, &mut rng)?));
                let dec = conv_decoder(&mut params, spec, conv, &mut rng)?;
                Network::Plain {
                    encoder: enc,
                    decoder: dec,
                }
            }
            Architecture::Diffusion { conv, diffusion } => {
                let enc = conv_encoder(&mut params, spec, conv, &mut rng)?;
                let (bc, bh, bw) = conv.bottleneck(&spec.input);
                let flat = bc * bh * bw;
                let mean_head = Linear::new(&mut params, "encoder.mean", flat, spec.latent_dim, &mut rng)?;
                let logvar_head = Linear::new(&mut params, "encoder.logvar", flat, spec.latent_dim, &mut rng)?;

                let mut denoiser = Sequential::new();
                let mut prev = spec.latent_dim + 1 + diffusion.time_features;
                let hidden = diffusion.primary_layers + diffusion.extra_blocks;
                for i in 0..hidden {
                    let name = if i < diffusion.primary_layers {
                        format!("denoiser.primary{}", i + 1)
                    } else {
                        format!("denoiser.extra{}", i + 1 - diffusion.primary_layers)
                    };
                    denoiser
                        .push(Layer::Linear(Linear::new(&mut params, &name, prev, diffusion.denoiser_width, &mut rng)?))
                        .push(Layer::Activation(Activation::Relu));
                    prev = diffusion.denoiser_width;
                }
                denoiser.push(Layer::Linear(Linear::new(&mut params, "denoiser.out", prev, spec.latent_dim, &mut rng)?));

                let decoder = conv_decoder(&mut params, spec, conv, &mut rng)?;
                let schedule = NoiseSchedule::linear(diffusion.timesteps, diffusion.beta_start, diffusion.beta_end)?;
                Network::Diffusion {
                    encoder: enc,
                    mean_head,
                    logvar_head,
                    denoiser,
                    decoder,
                    schedule,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            net,
        })
    }

    /// Rebuilds the layer graph for `spec` around existing parameters.
    pub fn from_parts(spec: &ModelSpec, params: ParamSet<E>) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if model.params.names() != params.names() {
            return Err(Error::Checkpoint {
                field: "manifest".into(),
                reason: "parameter names do not match the model spec".into(),
            });
        }
        for ((name, want), have) in model.params.iter().zip(params.tensors()) {
            if want.shape() != have.shape() {
                return Err(Error::Checkpoint {
                    field: name.to_string(),
                    reason: format!("expected shape {:?}, found {:?}", want.shape(), have.shape()),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family()
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<E> {
        self.params
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        match &self.net {
            Network::Diffusion { schedule, .. } => Some(schedule),
            Network::Plain { .. } => None,
        }
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input.shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(format!(
                "model expects input [N, {}, {}, {}], got {shape:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Records a forward pass for a `[N, C, H, W]` batch, drawing diffusion
    /// noise from `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<E>, bound: &[Var], x: Var, rng: &mut R) -> Result<ForwardOutput> {
        self.check_input(tape.shape(x))?;
        let noise = match &self.net {
            Network::Diffusion { schedule, .. } => {
                Some(DiffusionNoise::sample(tape.shape(x)[0], self.spec.latent_dim, schedule.timesteps(), rng))
            }
            Network::Plain { .. } => None,
        };
        self.forward_with_noise(tape, bound, x, noise.as_ref())
    }

    /// Forward pass with explicitly supplied diffusion noise.
    pub fn forward_with_noise(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        x: Var,
        noise: Option<&DiffusionNoise>,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.shape(x))?;
        match &self.net {
            Network::Plain { encoder, decoder } => {
                let z = encoder.forward(tape, bound, x)?;
                let recon = decoder.forward(tape, bound, z)?;
                Ok(ForwardOutput { recon, aux: None })
            }
            Network::Diffusion { .. } => {
                let noise = noise.ok_or_else(|| Error::Contract("diffusion forward needs noise".into()))?;
                diffusion::forward(self, tape, bound, x, noise)
            }
        }
    }

    /// The family-appropriate training objective for a recorded forward.
    pub fn loss(&self, tape: &mut Tape<E>, out: &ForwardOutput, x: Var, weights: LossWeights) -> Result<Var> {
        let recon = tape.mse(out.recon, x)?;
        let Some(aux) = &out.aux else { return Ok(recon) };
        let mut total = recon;
        if weights.noise != 0.0 {
            let noise = tape.mse(aux.eps_hat, aux.eps)?;
            let noise = tape.scale(noise, weights.noise);
            total = tape.add(total, noise)?;
        }
        if weights.kl != 0.0 {
            let kl = diffusion::kl_to_standard_normal(tape, aux.mean, aux.logvar)?;
            let kl = tape.scale(kl, weights.kl);
            total = tape.add(total, kl)?;
        }
        Ok(total)
    }

    /// Deterministic reconstruction of a `[N, C, H, W]` batch.
    ///
    /// The diffusion family encodes to the posterior mean, runs the
    /// noiseless forward process to the last timestep and denoises back with
    /// deterministic reverse diffusion before decoding.
    pub fn reconstruct(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x.shape())?;
        match &self.net {
            Network::Plain { encoder, decoder } => {
                let mut tape = Tape::new();
                let bound = self.bind_frozen(&mut tape);
                let xv = tape.leaf(x);
                let z = encoder.forward(&mut tape, &bound, xv)?;
                let out = decoder.forward(&mut tape, &bound, z)?;
                Ok(tape.tensor(out))
            }
            Network::Diffusion { schedule, .. } => {
                let dist = self.encode_diffusion(x)?;
                let last = schedule.timesteps() - 1;
                let zeros = Tensor::zeros(dist.mean.shape());
                let z_t = diffuse_forward(&dist.mean, last, schedule, &zeros)?;
                let z0 = reverse_diffusion::<E, _, Xoshiro256PlusPlus>(self, &z_t, schedule, None)?;
                self.decode(&z0)
            }
        }
    }

    fn bind_frozen(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(&t.clone().with_requires_grad(false))).collect()
    }

    /// Encoder mean and log-variance for a `[N, C, H, W]` batch.
    pub fn encode_diffusion(&self, x: &Tensor<E>) -> Result<LatentDistribution<E>> {
        self.check_input(x.shape())?;
        let Network::Diffusion {
            encoder,
            mean_head,
            logvar_head,
            ..
        } = &self.net
        else {
            return Err(Error::Contract("encode_diffusion needs a diffusion model".into()));
        };
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.leaf(x);
        let h = encoder.forward(&mut tape, &bound, xv)?;
        let mean = mean_head.forward(&mut tape, &bound, h)?;
        let logvar = logvar_head.forward(&mut tape, &bound, h)?;
        Ok(LatentDistribution {
            mean: tape.tensor(mean),
            logvar: tape.tensor(logvar),
        })
    }

    /// Maps `[N, latent]` codes to images.
    pub fn decode(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let decoder = match &self.net {
            Network::Plain { decoder, .. } | Network::Diffusion { decoder, .. } => decoder,
        };
        if z.shape().len() != 2 || z.shape()[1] != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "decode expects [N, {}], got {:?}",
                self.spec.latent_dim,
                z.shape()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let zv = tape.leaf(z);
        let out = decoder.forward(&mut tape, &bound, zv)?;
        Ok(tape.tensor(out))
    }

    /// Predicted noise for `[N, latent]` codes at a shared timestep.
    pub fn denoise_predict(&self, z_t: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
        let Network::Diffusion { denoiser, schedule, .. } = &self.net else {
            return Err(Error::Contract("denoise_predict needs a diffusion model".into()));
        };
        schedule.check_t(t)?;
        if z_t.shape().len() != 2 || z_t.shape()[1] != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "denoiser expects [N, {}], got {:?}",
                self.spec.latent_dim,
                z_t.shape()
            )));
        }
        let n = z_t.shape()[0];
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let zv = tape.leaf(z_t);
        let ts = vec![t; n];
        let out = diffusion::denoise(self, denoiser, &mut tape, &bound, zv, &ts)?;
        Ok(tape.tensor(out))
    }
}

/// Exact number of scalar parameters in a built model.
pub fn count_parameters<E: Element>(model: &Model<E>) -> usize {
    model.params().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: Family) -> ModelSpec {
        let mut spec = ModelSpec::for_family(family, InputDims::rgb(16, 16));
        spec.latent_dim = 8;
        match &mut spec.arch {
            Architecture::Feedforward { hidden } => *hidden = vec![32],
            Architecture::Convolutional { conv } => conv.channels = vec![4, 8, 8],
            Architecture::Diffusion { conv, diffusion } => {
                conv.channels = vec![4, 8, 8];
                diffusion.denoiser_width = 16;
                diffusion.timesteps = 10;
            }
        }
        spec
    }

    #[test]
    fn parameter_counts_match_spec_formula() {
        for f in Family::ALL {
            let spec = small(f);
            let m = Model::<f32>::build(&spec, 1).unwrap();
            assert_eq!(count_parameters(&m), spec.parameter_count(), "{f}");
        }
        let conv = Model::<f32>::build(&ModelSpec::convolutional(InputDims::rgb(200, 200)), 0).unwrap();
        assert_eq!(count_parameters(&conv), 10_651_139);
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for f in Family::ALL {
            let spec = small(f);
            let m = Model::<f32>::build(&spec, 2).unwrap();
            let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen::<f32>());
            let mut tape = Tape::new();
            let bound = m.params().bind(&mut tape);
            let xv = tape.leaf(&x);
            let out = m.forward(&mut tape, &bound, xv, &mut rng).unwrap();
            assert_eq!(tape.shape(out.recon), x.shape());
            assert!(tape.value(out.recon).iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(out.aux.is_some(), f == Family::Diffusion);
            let r = m.reconstruct(&x).unwrap();
            assert_eq!(r.shape(), x.shape());
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let spec = small(Family::Diffusion);
        let a = Model::<f32>::build(&spec, 5).unwrap();
        let b = Model::<f32>::build(&spec, 5).unwrap();
        let c = Model::<f32>::build(&spec, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = Model::<f32>::build(&small(Family::Convolutional), 0).unwrap();
        assert!(matches!(m.reconstruct(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn from_parts_rejects_shape_disagreement() {
        let spec = small(Family::Convolutional);
        let mut other = small(Family::Convolutional);
        if let Architecture::Convolutional { conv } = &mut other.arch {
            conv.channels = vec![4, 8, 16];
        }
        let params = Model::<f32>::build(&other, 0).unwrap().into_params();
        let err = Model::from_parts(&spec, params).unwrap_err();
        assert!(err.to_string().contains("encoder.conv3.weight"), "{err}");
    }
}
