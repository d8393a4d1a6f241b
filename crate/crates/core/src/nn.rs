//! Parameters, perceptrons and the SGD optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered registry of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Records every parameter on `tape`: trainable ones as leaves, the rest
    /// as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = trainable(&p.name);
            vars.push(if t {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            });
            flags.push(t);
        }
        Binding {
            vars,
            trainable: flags,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-tape view of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Routes a parameter through `var` instead, e.g. a probe leaf in a
    /// gradient check.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
        self.trainable[id.0] = true;
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bind.var(self.weight))?;
        tape.add_row(h, bind.var(self.bias))
    }

    pub fn forward_detached(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.matmul(store.get(self.weight))?.add_row(store.get(self.bias))
    }
}

/// Two-layer perceptron with a tanh hidden layer and linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, rng, &format!("{name}.l1"), input, hidden),
            output: Linear::new(store, rng, &format!("{name}.l2"), hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out
    }

    /// Returns (hidden activation, output).
    pub fn forward_with_hidden(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, bind, x)?;
        let h = tape.tanh(h)?;
        let out = self.output.forward(tape, bind, h)?;
        Ok((h, out))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        Ok(self.forward_with_hidden(tape, bind, x)?.1)
    }

    pub fn forward_detached(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward_detached(store, x)?.map(f64::tanh);
        self.output.forward_detached(store, &h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.output.weight, self.output.bias]
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that received gradient.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, bind: &Binding) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            let id = ParamId(i);
            if !bind.is_trainable(id) {
                continue;
            }
            let Some(g) = tape.grad(bind.var(id)) else { continue };
            if self.learning_rate == 0.0 {
                continue;
            }
            let data = p.value.data_mut();
            if self.momentum > 0.0 {
                let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
                for ((w, vel), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = self.momentum * *vel + gi;
                    *w -= self.learning_rate * *vel;
                }
            } else {
                for (w, gi) in data.iter_mut().zip(g) {
                    *w -= self.learning_rate * gi;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn mlp_tape_and_detached_paths_agree() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "nn");
        let mlp = Mlp::new(&mut store, &mut rng, "m", 3, 5, 2);
        let x = crate::rng::gaussian_tensor(&mut rng, 4, 3, 1.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let out = mlp.forward(&mut tape, &bind, xv).unwrap();
        let detached = mlp.forward_detached(&store, &x).unwrap();
        assert_eq!(tape.value(out).data(), detached.data());
    }

    #[test]
    fn sgd_skips_frozen_and_zero_rate() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(1, 2, 1.0));
        let b = store.add("b", Tensor::filled(1, 2, 1.0));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |n| n == "a");
        let s = tape.add(bind.var(a), bind.var(b)).unwrap();
        let l = tape.l2_norm_sq(s).unwrap();
        tape.backward(l).unwrap();
        let before = store.clone();
        Sgd::new(0.0, 0.0).step(&mut store, &tape, &bind);
        assert_eq!(store, before);
        Sgd::new(0.1, 0.0).step(&mut store, &tape, &bind);
        assert_eq!(store.get(b), before.get(b));
        assert_eq!(store.get(a).data(), &[0.6, 0.6]);
    }
}
