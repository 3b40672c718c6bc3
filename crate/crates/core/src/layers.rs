//! Parameterised convolution layer shared by the backbone, SiT blocks and head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Convolution weights `(out, in/groups, k, k)` plus a `(1, out, 1, 1)` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    /// Weights drawn from `N(0, std^2)`, zero bias.
    pub fn init<R: Rng + ?Sized>(spec: ConvSpec, std: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| crate::Error::arg(e.to_string()))?;
        let weight = Tensor::from_fn(spec.weight_shape(), |_| T::of(normal.sample(rng)));
        Ok(Conv {
            spec,
            weight,
            bias: Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)),
        })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Conv {
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            bias: Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundConv {
        self.bind_with(&mut |t| tape.param(t.clone()))
    }

    /// Bind with caller-chosen variables, weight first.
    pub fn bind_with(&self, var: &mut dyn FnMut(&Tensor<T>) -> Var) -> BoundConv {
        BoundConv {
            spec: self.spec,
            weight: var(&self.weight),
            bias: var(&self.bias),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// A [`Conv`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub spec: ConvSpec,
    pub weight: Var,
    pub bias: Var,
}

impl BoundConv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.spec)
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Run `bind` with variables taken from `vars` in order; every variable must be used.
pub(crate) fn bind_from_slice<T, B>(vars: &[Var], bind: impl FnOnce(&mut dyn FnMut(&Tensor<T>) -> Var) -> B) -> Result<B> {
    let mut it = vars.iter().copied();
    let mut used = 0usize;
    let mut missing = false;
    let bound = bind(&mut |_| {
        used += 1;
        it.next().unwrap_or_else(|| {
            missing = true;
            Var::DANGLING
        })
    });
    if missing || used != vars.len() {
        return Err(crate::Error::arg(format!("{} variables supplied, {used} parameters to bind", vars.len())));
    }
    Ok(bound)
}
