//! Parameter bundles for the transformer sublayers and their forward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{AttnMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), randn(rng, vec![d_in, d_out], std))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![d]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, T::of(LN_EPS))
    }
}

/// Multi-head attention projections; keys carry no bias.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        out_std: f64,
    ) -> Result<Self> {
        let std = (1.0 / d as f64).sqrt();
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true, std)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, false, std)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true, std)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true, out_std)?,
        })
    }

    pub fn project_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, x)?, self.v.forward(g, x)?))
    }

    /// Attends `x` (already normalized) over the given keys and values.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let a = g.attention(q, k, v, heads, mask)?;
        self.o.forward(g, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        out_std: f64,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(
                store,
                rng,
                &format!("{name}.up"),
                d,
                d_ff,
                true,
                (1.0 / d as f64).sqrt(),
            )?,
            down: Linear::new(store, rng, &format!("{name}.down"), d_ff, d, true, out_std)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.up.params().into_iter().chain(self.down.params()).collect()
    }
}

/// Pre-norm encoder block: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        out_std: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: Norm::new(store, &format!("{name}.ln_attn"), d)?,
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, out_std)?,
            ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ff, out_std)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
        let n = g.value(x).rows();
        let h = self.ln_attn.forward(g, x)?;
        let (k, v) = self.attn.project_kv(g, h)?;
        let a = self.attn.forward(g, h, k, v, heads, AttnMask::full(n, n))?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Output of one decoder block over `P` new positions.
pub(crate) struct BlockOut {
    pub x: Var,
    /// Keys and values of the new positions only.
    pub k_new: Var,
    pub v_new: Var,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        out_std: f64,
    ) -> Result<Self> {
        Ok(Self {
            ln_self: Norm::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: Attention::new(store, rng, &format!("{name}.self"), d, out_std)?,
            ln_cross: Norm::new(store, &format!("{name}.ln_cross"), d)?,
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), d, out_std)?,
            ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ff, out_std)?,
        })
    }

    /// Runs `x [P×d]` at positions `start..start+P`, attending over
    /// `past_k`/`past_v` (`start` rows) plus the new positions.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        start: usize,
        past: Option<(Var, Var)>,
        cross: (Var, Var),
        heads: usize,
    ) -> Result<BlockOut> {
        let p = g.value(x).rows();
        let h = self.ln_self.forward(g, x)?;
        let (k_new, v_new) = self.self_attn.project_kv(g, h)?;
        let (k, v) = match past {
            Some((pk, pv)) if start > 0 => (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?),
            _ => (k_new, v_new),
        };
        let a = self
            .self_attn
            .forward(g, h, k, v, heads, AttnMask::causal(start, p, start + p))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, x)?;
        let s = g.value(cross.0).rows();
        let c = self
            .cross_attn
            .forward(g, h, cross.0, cross.1, heads, AttnMask::full(p, s))?;
        let x = g.add(x, c)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let x = g.add(x, f)?;
        Ok(BlockOut { x, k_new, v_new })
    }
}

/// Fixed sinusoidal position table `[n×d]`.
pub fn sinusoids<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..half {
            let rate = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let a = pos as f64 * rate;
            data[pos * d + i] = T::of(a.sin());
            data[pos * d + half + i] = T::of(a.cos());
        }
    }
    Tensor::matrix(n, d, data).expect("shape matches")
}
