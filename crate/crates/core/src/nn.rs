//! Parameterized layers. Layers store parameter ids only, so one layout
//! serves every precision.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tensor::Real;

/// Registers named parameters under a dotted prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, std: f64) -> Self {
        Self {
            store,
            rng,
            std,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            std: self.std,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, shape, init, self.rng)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let std = self.std;
        self.param(name, shape, Init::TruncNormal(std))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let mut b = self.sub(name);
        let w = b.weight("weight", &[fan_in, fan_out])?;
        let bias = if bias {
            Some(b.param("bias", &[fan_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b: bias })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize, eps: f64) -> Result<LayerNorm> {
        let mut b = self.sub(name);
        Ok(LayerNorm {
            gamma: b.param("weight", &[dim], Init::Ones)?,
            beta: b.param("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, eps: f64) -> Result<GroupNorm> {
        let mut b = self.sub(name);
        Ok(GroupNorm {
            gamma: b.param("weight", &[channels], Init::Ones)?,
            beta: b.param("bias", &[channels], Init::Zeros)?,
            groups: if channels < 8 { channels } else { 8 },
            eps,
        })
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<Conv2d> {
        let mut b = self.sub(name);
        Ok(Conv2d {
            w: b.weight("weight", &[cout, cin, k, k])?,
            b: b.param("bias", &[cout], Init::Zeros)?,
        })
    }
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = t.param(ps, self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(ps, b);
                t.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = t.param(ps, self.gamma);
        let b = t.param(ps, self.beta);
        t.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = t.param(ps, self.gamma);
        let b = t.param(ps, self.beta);
        t.group_norm(x, g, b, self.groups, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        t.conv2d(x, w, Some(b))
    }
}

/// Linear -> GELU -> Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            fc1: b.linear("fc1", dim, dim * ratio, true)?,
            fc2: b.linear("fc2", dim * ratio, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, ps, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, ps, h)
    }
}

/// `[B, N, C]` tokens on an `h x w` grid to a `[B, C, h, w]` map.
pub fn tokens_to_map<T: Real>(t: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(x).to_vec();
    let p = t.permute(x, &[0, 2, 1])?;
    t.reshape(p, &[s[0], s[2], h, w])
}

/// `[B, C, h, w]` map to `[B, h*w, C]` tokens.
pub fn map_to_tokens<T: Real>(t: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    let r = t.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    t.permute(r, &[0, 2, 1])
}
