//! Parameter storage and the small layers shared by every module.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{MpnError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Load every tensor onto `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replace tensor values by name. Every name must exist with the same shape.
    pub fn load_named(&mut self, entries: &[NamedTensor]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(MpnError::Data(format!(
                "parameter file holds {} tensors, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for e in entries {
            let idx = self
                .names
                .iter()
                .position(|n| n == &e.name)
                .ok_or_else(|| MpnError::Data(format!("unknown parameter {:?}", e.name)))?;
            if self.tensors[idx].shape() != e.shape.as_slice() {
                return Err(MpnError::dim("load_named", self.tensors[idx].shape(), &e.shape));
            }
            let data: Vec<F> = e.data.iter().map(|&x| F::from_f(x as f64)).collect();
            self.tensors[idx] = Tensor::new(&e.shape, data)?;
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|x| x.to_f() as f32).collect(),
            })
            .collect()
    }
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A tape plus the variables that parameters were bound to.
pub struct Graph<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    vars: &'a [Var],
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, vars: &'a [Var]) -> Self {
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<F: Scalar> Deref for Graph<'_, F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        self.tape
    }
}

impl<F: Scalar> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        self.tape
    }
}

/// Allocates parameters with seeded initial values.
pub struct Init<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut Rng,
}

impl<F: Scalar> Init<'_, F> {
    /// Glorot-uniform `[fan_in × fan_out]` matrix.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f(self.rng.uniform(-a, a)))
            .collect();
        let t = Tensor::new(&[fan_in, fan_out], data).expect("glorot shape");
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        Linear {
            weight: self.glorot(&format!("{name}.weight"), fan_in, fan_out),
            bias: bias.then(|| self.zeros(&format!("{name}.bias"), &[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Mlp {
        Mlp {
            hidden: self.linear(&format!("{name}.0"), fan_in, hidden, true),
            out: self.linear(&format!("{name}.1"), hidden, fan_out, true),
        }
    }
}

/// Affine map `x · W + b` applied to the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if d != self.fan_in {
            return Err(MpnError::dim("linear", &shape, &[self.fan_in, self.fan_out]));
        }
        let rows = shape.iter().product::<usize>() / d;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, d])? };
        let w = g.p(self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.p(b);
            y = g.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.fan_out;
            g.reshape(y, &out_shape)
        }
    }
}

/// Two affine layers with a ReLU between them; the output is left linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}
