//! Composite blocks shared by the models.

use diffcore::{Bound, Conv1d, Init, LayerNorm, Linear, Real, Result, Tensor, Var};

/// `x + conv(gelu(conv(gelu(x))))` with kernel 3, same length.
#[derive(Clone, Debug)]
pub struct ConvResBlock {
    pub c1: Conv1d,
    pub c2: Conv1d,
}

impl ConvResBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize) -> Self {
        Self {
            c1: Conv1d::new(init, &format!("{name}.c1"), 3, width, width, 1, 1),
            c2: Conv1d::new(init, &format!("{name}.c2"), 3, width, width, 1, 1),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.c1.forward(p, x.gelu()?)?;
        let h = self.c2.forward(p, h.gelu()?)?;
        x.add(h)
    }
}

/// Pre-norm residual MLP block.
#[derive(Clone, Debug)]
pub struct MlpResBlock {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpResBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            ln: LayerNorm::new(init, &format!("{name}.ln"), width),
            fc1: Linear::new(init, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(p, self.ln.forward(p, x)?)?.gelu()?;
        x.add(self.fc2.forward(p, h)?)
    }
}

/// Sinusoidal features of scalars `t ∈ [0, 1]`: `[n, dim]`.
pub fn timestep_features<T: Real>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (1000.0f64).powf(-(k as f64) / half.max(1) as f64);
            let a = 1000.0 * t * freq;
            data.push(T::of(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("consistent by construction")
}

/// Learned `[len, width]` table added to `[b, len, width]` activations.
pub fn add_positions<'t, T: Real>(x: Var<'t, T>, table: Var<'t, T>) -> Result<Var<'t, T>> {
    let len = x.shape()[1];
    x.add(table.slice(0, 0, len)?)
}
