use crate::error::{dim_err, Error, Result};
use crate::nnblocks::{build_stack, EMBED_INIT_STD, run_stack, Binding, LayerSpec, Norm, ParamId, ParamStore, TransformerLayer};
use crate::numcore::{log_softmax, Graph, Real, Rng, Tensor, Var};

use super::corpus::EOS;

/// Dimensions of the teacher LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmSpec {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
}

/// Decoder-only LM with learned absolute positions and an output matrix `O`
/// untied from the input embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm {
    pub spec: LmSpec,
    pub embed: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
    pub output: ParamId,
    pub frozen: bool,
}

impl ToyLm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: LmSpec, rng: &mut Rng) -> Result<Self> {
        let h = spec.width;
        let embed = store.add_normal(format!("{prefix}.embed"), vec![spec.vocab, h], EMBED_INIT_STD, rng)?;
        let positions = store.add_normal(format!("{prefix}.positions"), vec![spec.max_positions, h], EMBED_INIT_STD, rng)?;
        let layer_spec = LayerSpec {
            width: h,
            heads: spec.heads,
            ffn_hidden: spec.ffn_hidden,
            causal: true,
            cross: false,
        };
        let layers = build_stack(store, &format!("{prefix}.layers"), spec.layers, layer_spec, rng)?;
        let final_norm = Norm::new(store, &format!("{prefix}.final_norm"), h)?;
        let output = store.add_normal(format!("{prefix}.output"), vec![spec.vocab, h], 1.0 / (h as f64).sqrt(), rng)?;
        Ok(ToyLm {
            spec,
            embed,
            positions,
            layers,
            final_norm,
            output,
            frozen: false,
        })
    }

    /// Binds the LM's parameters; frozen models bind as constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Binding {
        store.bind(g, !self.frozen)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.spec.vocab) {
            Some(t) => Err(Error::Data(format!(
                "token {t} is outside the vocabulary of {}",
                self.spec.vocab
            ))),
            None => Ok(()),
        }
    }

    /// Rows of the input embedding table `E`, `N × H`, without positions.
    pub fn embed_text<T: Real>(&self, g: &mut Graph<T>, p: &Binding, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        g.gather_rows(p[self.embed], tokens)
    }

    pub fn embed_tokens<T: Real>(&self, store: &ParamStore<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        let table = store.get(self.embed);
        let mut data = Vec::with_capacity(tokens.len() * self.spec.width);
        for &t in tokens {
            data.extend_from_slice(table.row(t));
        }
        Tensor::new(vec![tokens.len(), self.spec.width], data)
    }

    pub fn add_positions<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let len = g.value(x).rows();
        if len > self.spec.max_positions {
            return Err(dim_err!(
                "sequence of {} exceeds {} positions",
                len,
                self.spec.max_positions
            ));
        }
        let pos = g.slice_rows(p[self.positions], 0, len)?;
        g.add(x, pos)
    }

    /// Causal stack and final norm over already-positioned inputs.
    pub fn forward_hidden<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let w = g.value(x).cols();
        if w != self.spec.width {
            return Err(dim_err!("LM width {} but input {:?}", self.spec.width, g.value(x).shape()));
        }
        let h = run_stack(&self.layers, g, p, x, None)?;
        self.final_norm.forward(g, p, h)
    }

    /// Positions added to raw token-embedding rows, then [`Self::forward_hidden`].
    pub fn forward_embeds<T: Real>(&self, g: &mut Graph<T>, p: &Binding, raw: Var) -> Result<Var> {
        let x = self.add_positions(g, p, raw)?;
        self.forward_hidden(g, p, x)
    }

    pub fn forward_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Binding, tokens: &[usize]) -> Result<Var> {
        let e = self.embed_text(g, p, tokens)?;
        self.forward_embeds(g, p, e)
    }

    /// `embed(prefix) ⊕ injected ⊕ embed(suffix)`, positions, causal stack.
    pub fn forward_mixed<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        prefix: &[usize],
        injected: Var,
        suffix: &[usize],
    ) -> Result<Var> {
        let (m, w) = g.value(injected).dims2();
        if w != self.spec.width {
            return Err(dim_err!(
                "injected embeddings have width {}, LM expects {}",
                w,
                self.spec.width
            ));
        }
        let mut parts = Vec::with_capacity(3);
        if !prefix.is_empty() {
            parts.push(self.embed_text(g, p, prefix)?);
        }
        if m > 0 {
            parts.push(injected);
        }
        if !suffix.is_empty() {
            parts.push(self.embed_text(g, p, suffix)?);
        }
        let raw = g.concat_rows(&parts)?;
        self.forward_embeds(g, p, raw)
    }

    /// `hidden · Oᵀ`, `L × V`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, p: &Binding, hidden: Var) -> Result<Var> {
        g.matmul_nt(hidden, p[self.output])
    }

    /// Final hidden states for raw (position-free) embeddings.
    pub fn hidden_states<T: Real>(&self, store: &ParamStore<T>, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(raw.clone());
        let h = self.forward_embeds(&mut g, &p, x)?;
        Ok(g.value(h).clone())
    }

    /// `O · h`.
    pub fn next_token_logits<T: Real>(&self, store: &ParamStore<T>, h: &[T]) -> Result<Vec<T>> {
        if h.len() != self.spec.width {
            return Err(dim_err!("hidden state of width {} for LM width {}", h.len(), self.spec.width));
        }
        let o = store.get(self.output);
        Ok((0..self.spec.vocab)
            .map(|v| o.row(v).iter().zip(h).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Log-probability of each label continuation after `context` (raw
    /// embeddings): `Σ_i log P(label_i | context ⊕ label_<i)`.
    pub fn score_labels<T: Real>(
        &self,
        store: &ParamStore<T>,
        context: &Tensor<T>,
        labels: &[Vec<usize>],
    ) -> Result<Vec<f64>> {
        if labels.is_empty() {
            return Err(Error::Data("no labels to score".into()));
        }
        let ctx_len = context.rows();
        if ctx_len == 0 {
            return Err(Error::Data("label scoring needs a nonempty context".into()));
        }
        labels
            .iter()
            .map(|label| {
                if label.is_empty() {
                    return Err(Error::Data("empty label".into()));
                }
                self.check_tokens(label)?;
                let mut g = Graph::new();
                let p = store.bind(&mut g, false);
                let ctx = g.constant(context.clone());
                let mut parts = vec![ctx];
                if label.len() > 1 {
                    parts.push(self.embed_text(&mut g, &p, &label[..label.len() - 1])?);
                }
                let raw = g.concat_rows(&parts)?;
                let h = self.forward_embeds(&mut g, &p, raw)?;
                let logits = self.logits(&mut g, &p, h)?;
                let lv = g.value(logits);
                Ok(label
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| log_softmax(lv.row(ctx_len - 1 + i))[tok])
                    .sum())
            })
            .collect()
    }

    /// Appends the argmax token (ties to the lowest index) until `EOS` or
    /// `max_len` tokens; the `EOS` is included when produced.
    pub fn greedy_decode<T: Real>(&self, store: &ParamStore<T>, context: &Tensor<T>, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Usage("greedy_decode needs max_len >= 1".into()));
        }
        let mut out = Vec::new();
        let mut seq = context.clone();
        while out.len() < max_len {
            let h = self.hidden_states(store, &seq)?;
            let logits = self.next_token_logits(store, h.row(h.rows() - 1))?;
            let tok = argmax(&logits);
            out.push(tok);
            if tok == EOS {
                break;
            }
            let row = self.embed_tokens(store, &[tok])?;
            let mut data = seq.into_data();
            data.extend_from_slice(row.data());
            let rows = data.len() / self.spec.width;
            seq = Tensor::new(vec![rows, self.spec.width], data)?;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
