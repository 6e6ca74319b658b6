//! Parameterized layers, initialization, the reconstruction loss, and Adam.

mod adam;
mod layers;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use adam::{AdamConfig, AdamState};
pub use layers::{Activation, Conv2d, ConvTranspose2d, Layer, Linear, Sequential};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<E: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Adds the tape's leaf gradients for `bound` into the parameter tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape<E>, bound: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Resets every gradient buffer to zeros (allocating where absent).
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            match t.grad_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = E::zero()),
                None => {
                    let zeros = vec![E::zero(); t.len()];
                    t.accumulate_grad(&zeros).expect("matching length");
                }
            }
        }
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Fills a weight tensor with `Uniform(-a, a)`, `a = sqrt(1 / fan_in)`.
pub fn uniform_fan_in<E: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<E> {
    let a = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::lit((2.0 * rng.gen::<f64>() - 1.0) * a))
}

/// Mean squared error over all elements.
pub fn mse_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    use super::*;

    #[test]
    fn uniform_init_is_seed_deterministic() {
        let a: Tensor<f32> = uniform_fan_in(&[4, 5], 5, &mut Xoshiro256PlusPlus::seed_from_u64(9));
        let b: Tensor<f32> = uniform_fan_in(&[4, 5], 5, &mut Xoshiro256PlusPlus::seed_from_u64(9));
        let c: Tensor<f32> = uniform_fan_in(&[4, 5], 5, &mut Xoshiro256PlusPlus::seed_from_u64(10));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        let bound = (1.0f32 / 5.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn uniform_init_moments() {
        // Var of U(-a, a) is a²/3.
        let fan_in = 100;
        let t: Tensor<f64> = uniform_fan_in(&[100_000], fan_in, &mut Xoshiro256PlusPlus::seed_from_u64(1));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = (1.0 / fan_in as f64).sqrt() / 3f64.sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.05, "std {} vs {want}", var.sqrt());
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap().with_requires_grad(true));
        let t = tape.leaf(&Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l), &[1.0]);
        tape.backward(l).unwrap();
        // 2 (p - t) / N
        assert_eq!(tape.grad(p).unwrap(), &[-1.0, -1.0]);

        let same = mse_loss(&mut tape, t, t).unwrap();
        assert_eq!(tape.value(same), &[0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_two_to_three_has_nine_parameters() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        Linear::new(&mut ps, "fc", 2, 3, &mut rng).unwrap();
        assert_eq!(ps.count(), 9);
    }

    #[test]
    fn wide_linear_shapes() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let l = Linear::new(&mut ps, "fc", 80_000, 64, &mut rng).unwrap();
        assert_eq!(ps.get(l.weight).shape(), &[64, 80_000]);
        assert_eq!(ps.get(l.bias).shape(), &[64]);
        assert!(ps.get(l.bias).data().iter().all(|&b| b == 0.0));
    }
}
