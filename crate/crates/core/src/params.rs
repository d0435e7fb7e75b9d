//! Named parameter storage, initialization, and the per-pass forward context
//! that binds parameters onto a fresh tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Result, Tape, Tensor};

/// Index of a parameter inside a [`ParamSet`].
pub type ParamId = usize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl PTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Flat arena of model parameters; model structs hold `ParamId`s into it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<PTensor>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn alloc(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut ChaCha20Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        self.params.push(PTensor {
            name: name.to_string(),
            shape,
            values,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &PTensor {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut PTensor {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &PTensor)> {
        self.params.iter().enumerate()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// One forward pass: a fresh tape plus a cache so each parameter becomes a
/// single tape leaf no matter how often it is requested.
pub struct Forward {
    pub tape: Tape,
    cache: RefCell<BTreeMap<ParamId, Tensor>>,
}

impl Forward {
    pub fn new() -> Forward {
        Forward::with_tape(Tape::new())
    }

    /// Wrap an existing tape, e.g. to run model code inside a grad-check
    /// closure whose probe tensor already lives on that tape.
    pub fn with_tape(tape: Tape) -> Forward {
        Forward {
            tape,
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn param(&self, set: &ParamSet, id: ParamId) -> Result<Tensor> {
        if let Some(t) = self.cache.borrow().get(&id) {
            return Ok(t.clone());
        }
        let p = set.get(id);
        let t = self.tape.param_leaf(id, p.values.clone(), p.shape.clone())?;
        self.cache.borrow_mut().insert(id, t.clone());
        Ok(t)
    }

    pub fn input(&self, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.tape.constant(values, shape)
    }
}

impl Default for Forward {
    fn default() -> Self {
        Forward::new()
    }
}

/// Per-step linear map `x @ w (+ b)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Linear {
        let w = set.alloc(
            &format!("{name}.w"),
            vec![in_dim, out_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            rng,
        );
        let b = bias.then(|| set.alloc(&format!("{name}.b"), vec![out_dim], Init::Zeros, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, fwd: &Forward, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = fwd.param(set, self.w)?;
        let y = x.matmul(&w)?;
        match self.b {
            Some(b) => y.add_row(&fwd.param(set, b)?),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

/// Two-layer perceptron head with ReLU hidden activation: in -> hidden -> out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Mlp {
        Mlp {
            l1: Linear::new(set, rng, &format!("{name}.l1"), in_dim, hidden, true),
            l2: Linear::new(set, rng, &format!("{name}.l2"), hidden, out_dim, true),
        }
    }

    pub fn forward(&self, fwd: &Forward, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(fwd, set, x)?.relu()?;
        self.l2.forward(fwd, set, &h)
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }
}
