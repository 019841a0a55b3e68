use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Graph, Mask, Real, Rng, Tensor, Var};

use super::params::{Binding, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of token and position embedding tables at init.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_std(store, name, d_in, d_out, bias, 1.0 / (d_in.max(1) as f64).sqrt(), rng)
    }

    /// Like [`Linear::new`] with weights drawn from N(0, std²).
    pub fn with_std<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), vec![d_in, d_out], std, rng)?;
        let bias = if bias {
            Some(store.add_full(format!("{name}.bias"), vec![d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Learned gain and bias of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add_full(format!("{name}.gain"), vec![width], 1.0)?,
            bias: store.add_full(format!("{name}.bias"), vec![width], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], T::from_f64(LN_EPS))
    }
}

/// Multi-head attention with bias-free projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub width: usize,
    pub causal: bool,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        causal: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionBlock {
            w_q: Linear::new(store, &format!("{name}.q"), width, width, false, rng)?,
            w_k: Linear::new(store, &format!("{name}.k"), width, width, false, rng)?,
            w_v: Linear::new(store, &format!("{name}.v"), width, width, false, rng)?,
            w_o: Linear::new(store, &format!("{name}.o"), width, width, false, rng)?,
            heads,
            width,
            causal,
        })
    }

    pub fn d_k(&self) -> usize {
        self.width / self.heads
    }

    /// `σ(Q(K·kv)ᵀ/√d_k)(V·kv)` per head, concatenated, then `W_o`.
    ///
    /// Self-attention is the case `kv_src == queries_src`. When `mask` is
    /// `None` and the block is causal, a causal mask is implied.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        queries_src: Var,
        kv_src: Var,
        mask: Option<Rc<Mask>>,
    ) -> Result<Var> {
        let (lq, wq) = g.value(queries_src).dims2();
        let (lkv, wkv) = g.value(kv_src).dims2();
        if wq != self.width || wkv != self.width {
            return Err(dim_err!(
                "attention width {} but queries {:?} and keys {:?}",
                self.width,
                g.value(queries_src).shape(),
                g.value(kv_src).shape()
            ));
        }
        let mask = match mask {
            Some(m) => {
                if m.shape() != (lq, lkv) {
                    return Err(dim_err!("mask {:?} does not match {}×{}", m.shape(), lq, lkv));
                }
                Some(m)
            }
            None if self.causal => {
                if lq != lkv {
                    return Err(dim_err!("causal attention needs equal lengths, got {lq} and {lkv}"));
                }
                Some(Rc::new(Mask::causal(lq)))
            }
            None => None,
        };
        let q = self.w_q.forward(g, p, queries_src)?;
        let k = self.w_k.forward(g, p, kv_src)?;
        let v = self.w_v.forward(g, p, kv_src)?;
        let dk = self.d_k();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, mask.clone())?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.w_o.forward(g, p, cat)
    }
}

/// Two affine maps with a GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Shape of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub causal: bool,
    pub cross: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossBlock {
    pub norm: Norm,
    pub attn: AttentionBlock,
}

/// Pre-norm residual layer: self-attention, optional cross-attention, FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub self_norm: Norm,
    pub self_attn: AttentionBlock,
    pub cross: Option<CrossBlock>,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        let self_norm = Norm::new(store, &format!("{name}.self_norm"), spec.width)?;
        let self_attn = AttentionBlock::new(store, &format!("{name}.self_attn"), spec.width, spec.heads, spec.causal, rng)?;
        let cross = if spec.cross {
            Some(CrossBlock {
                norm: Norm::new(store, &format!("{name}.cross_norm"), spec.width)?,
                attn: AttentionBlock::new(store, &format!("{name}.cross_attn"), spec.width, spec.heads, false, rng)?,
            })
        } else {
            None
        };
        let ffn_norm = Norm::new(store, &format!("{name}.ffn_norm"), spec.width)?;
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), spec.width, spec.ffn_hidden, rng)?;
        Ok(TransformerLayer {
            self_norm,
            self_attn,
            cross,
            ffn_norm,
            ffn,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var, cross_kv: Option<Var>) -> Result<Var> {
        let n = self.self_norm.forward(g, p, x)?;
        let a = self.self_attn.attend(g, p, n, n, None)?;
        let mut x = g.add(x, a)?;
        match (&self.cross, cross_kv) {
            (Some(cross), Some(kv)) => {
                let n = cross.norm.forward(g, p, x)?;
                let a = cross.attn.attend(g, p, n, kv, None)?;
                x = g.add(x, a)?;
            }
            (None, Some(_)) => {
                return Err(Error::Usage("cross_kv given to a layer without cross-attention".into()))
            }
            (Some(_), None) => {
                return Err(Error::Usage("layer with cross-attention needs cross_kv".into()))
            }
            (None, None) => {}
        }
        let n = self.ffn_norm.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(x, f)
    }
}

/// A stack of identical-shape layers.
pub fn build_stack<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    count: usize,
    spec: LayerSpec,
    rng: &mut Rng,
) -> Result<Vec<TransformerLayer>> {
    (0..count)
        .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), spec, rng))
        .collect()
}

pub fn run_stack<T: Real>(
    layers: &[TransformerLayer],
    g: &mut Graph<T>,
    p: &Binding,
    mut x: Var,
    cross_kv: Option<Var>,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(g, p, x, cross_kv)?;
    }
    Ok(x)
}

/// Sin/cos positional table with base 10000: even columns `sin`, odd `cos`.
pub fn sinusoidal_positions<T: Real>(length: usize, width: usize) -> Result<Tensor<T>> {
    if width % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal width must be even, got {width}")));
    }
    let mut data = vec![T::zero(); length * width];
    for pos in 0..length {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / width as f64);
            let angle = pos as f64 * freq;
            data[pos * width + 2 * i] = T::from_f64(angle.sin());
            data[pos * width + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![length, width], data)
}
