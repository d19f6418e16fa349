//! Named parameters, forward contexts and the small set of layers every
//! transformer in the model is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::shape("set_param", current.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

/// Per-forward state: the tape, the bound parameter leaves and, in training
/// mode, the dropout rate and its random stream.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    vars: &'a [Var],
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(tape: &'a mut Tape, vars: &'a [Var]) -> Self {
        Self {
            tape,
            vars,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(tape: &'a mut Tape, vars: &'a [Var], dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            vars,
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; the identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Parameter initialization stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(vec![fan_in, fan_out], |_| rng.gen_range(-limit..limit))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std is positive");
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x . W + b` over the last axis of `x`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.weight))?;
        match self.bias {
            Some(b) => ctx.tape.add(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, s) = (ctx.p(self.gain), ctx.p(self.shift));
        ctx.tape.layer_norm(x, g, s, self.eps)
    }
}

/// Two-layer perceptron with an exact-GELU hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}
