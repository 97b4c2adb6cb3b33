//! Parameter storage and the handful of layers the models are built from.
//!
//! Layers are plain descriptors holding [`ParamId`]s; the weights live in a
//! [`Params`] store and are bound onto a tape for each forward pass. The same
//! layer therefore runs at 32-bit for training and at 64-bit for gradient
//! verification.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces every tensor by the same-named tensor of `other`.
    pub fn assign_from(&mut self, other: &Params<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(Error::shape("assign_from", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameters loaded onto a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<T: Real> Tape<T> {
    /// Records every parameter as a leaf; `trainable` controls whether
    /// gradients are produced for them.
    pub fn bind(&self, params: &Params<T>, trainable: bool) -> Bound<'_, T> {
        Bound {
            vars: params
                .tensors
                .iter()
                .map(|t| self.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps already-recorded variables, in parameter-store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients aligned with the parameter store order.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }
}

/// Weight initialization helpers (uniform ±1/√fan_in; zero biases; unit gains).
pub struct Init<'a, T: Real> {
    pub params: &'a mut Params<T>,
    pub rng: &'a mut Rng,
}

impl<T: Real> Init<'_, T> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of((self.rng.uniform() * 2.0 - 1.0) * bound)).collect();
        self.params.add(name, Tensor::new(shape, data).expect("shape from caller"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::full(shape, T::one()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = init.uniform(&format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p.p(self.w))?;
        match self.b {
            Some(b) => y.add(p.p(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize) -> Self {
        Self {
            gain: init.ones(&format!("{name}.gain"), &[width]),
            bias: init.zeros(&format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm()?.mul(p.p(self.gain))?.add(p.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((kernel * cin) as f64).sqrt();
        Self {
            w: init.uniform(&format!("{name}.w"), &[kernel, cin, cout], bound),
            b: init.zeros(&format!("{name}.b"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv1d(p.p(self.w), self.stride, self.pad)?.add(p.p(self.b))
    }
}

/// Pre-norm transformer block: multi-head self-attention and a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub width: usize,
}

impl TransformerBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize, heads: usize, mlp: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), width),
            qkv: Linear::new(init, &format!("{name}.qkv"), width, 3 * width, true),
            proj: Linear::new(init, &format!("{name}.proj"), width, width, true),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), width),
            fc1: Linear::new(init, &format!("{name}.fc1"), width, mlp, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), mlp, width, true),
            heads,
            width,
        }
    }

    /// `x [b, l, width]`; `score_bias` (if any) has shape `[b·heads, l, l]` and
    /// is added to the attention logits.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        score_bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[2] != self.width {
            return Err(Error::shape("transformer_block", &sh, &[self.width]));
        }
        let (b, l) = (sh[0], sh[1]);
        let (h, dh) = (self.heads, self.width / self.heads);

        let qkv = self.qkv.forward(p, self.ln1.forward(p, x)?)?;
        let qkv = qkv
            .reshape(&[b, l, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3 * b * h, l, dh])?;
        let q = qkv.slice(0, 0, b * h)?;
        let k = qkv.slice(0, b * h, b * h)?;
        let v = qkv.slice(0, 2 * b * h, b * h)?;
        let mut scores = q.matmul_nt(k)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(bias) = score_bias {
            scores = scores.add(bias)?;
        }
        let att = scores.softmax()?.matmul(v)?;
        let att = att
            .reshape(&[b, h, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, self.width])?;
        let x = x.add(self.proj.forward(p, att)?)?;

        let m = self.fc1.forward(p, self.ln2.forward(p, x)?)?.gelu()?;
        x.add(self.fc2.forward(p, m)?)
    }
}

/// Additive attention bias that hides padded key positions.
pub fn key_padding_bias<T: Real>(valid: &[usize], heads: usize, len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(valid.len() * heads * len * len);
    for &v in valid {
        for _ in 0..heads * len {
            data.extend((0..len).map(|j| if j < v { T::zero() } else { T::of(-1e9) }));
        }
    }
    Tensor::new(vec![valid.len() * heads, len, len], data).expect("consistent by construction")
}
