use crate::error::{dim_err, Error, Result};
use crate::nnblocks::{build_stack, EMBED_INIT_STD, run_stack, Binding, LayerSpec, Linear, Norm, ParamId, ParamStore, TransformerLayer};
use crate::numcore::{Graph, Real, Rng, Var};

use super::donor::DonorDecoder;

/// Standard deviation of freshly initialized query vectors.
pub const QUERY_INIT_STD: f64 = 0.02;
/// Keeps initial audio tokens on the scale of the LM's token embeddings.
pub const PROJECTION_INIT_STD: f64 = 0.02;

/// Shape of the Q-Former adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QFormerSpec {
    pub n_queries: usize,
    /// Adapter width `h`.
    pub width: usize,
    /// LM width `H`.
    pub lm_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

/// Where the adapter's transformer weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Decoder,
    Scratch,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(InitMode::Decoder),
            "scratch" => Ok(InitMode::Scratch),
            other => Err(Error::Config(format!("unknown init mode {other:?} (decoder | scratch)"))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Decoder => "decoder",
            InitMode::Scratch => "scratch",
        })
    }
}

/// Static queries, decoder-style layers (causal self-attention plus
/// cross-attention to the audio embeddings) and the projection `P: h → H`.
#[derive(Clone, Debug, PartialEq)]
pub struct QFormerAdapter {
    pub spec: QFormerSpec,
    pub queries: ParamId,
    /// Learned positions added to the queries, one row per query.
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
    pub projection: Linear,
}

impl QFormerAdapter {
    /// Every weight freshly initialized.
    pub fn scratch<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: QFormerSpec, rng: &mut Rng) -> Result<Self> {
        if spec.n_queries == 0 {
            return Err(Error::Config("a Q-Former needs at least one query".into()));
        }
        let h = spec.width;
        let queries = store.add_normal(format!("{prefix}.queries"), vec![spec.n_queries, h], QUERY_INIT_STD, rng)?;
        let positions = store.add_normal(format!("{prefix}.positions"), vec![spec.n_queries, h], EMBED_INIT_STD, rng)?;
        let layer_spec = LayerSpec {
            width: h,
            heads: spec.heads,
            ffn_hidden: spec.ffn_hidden,
            causal: true,
            cross: true,
        };
        let layers = build_stack(store, &format!("{prefix}.layers"), spec.layers, layer_spec, rng)?;
        let final_norm = Norm::new(store, &format!("{prefix}.final_norm"), h)?;
        let projection = Linear::with_std(
            store,
            &format!("{prefix}.projection"),
            h,
            spec.lm_width,
            true,
            PROJECTION_INIT_STD,
            rng,
        )?;
        Ok(QFormerAdapter {
            spec,
            queries,
            positions,
            layers,
            final_norm,
            projection,
        })
    }

    /// Output tokens `t^audio`, `|Q| × H`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, audio: Var) -> Result<Var> {
        let w = g.value(audio).cols();
        if w != self.spec.width {
            return Err(dim_err!(
                "audio embeddings have width {}, adapter expects {}",
                w,
                self.spec.width
            ));
        }
        let x = g.add(p[self.queries], p[self.positions])?;
        let x = run_stack(&self.layers, g, p, x, Some(audio))?;
        let x = self.final_norm.forward(g, p, x)?;
        self.projection.forward(g, p, x)
    }
}

/// Builds an adapter whose layers and final norm are copies of the donor's,
/// with the donor's first `n_queries` position rows; queries and `P` are
/// fresh and the donor's token embeddings and output head are not used.
pub fn init_from_decoder<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: QFormerSpec,
    donor: &DonorDecoder,
    donor_store: &ParamStore<T>,
    rng: &mut Rng,
) -> Result<QFormerAdapter> {
    let d = donor.spec;
    if d.width != spec.width || d.layers != spec.layers || d.heads != spec.heads || d.ffn_hidden != spec.ffn_hidden {
        return Err(Error::Config(format!(
            "donor decoder (width {}, {} layers, {} heads, ffn {}) does not match the adapter (width {}, {} layers, {} heads, ffn {})",
            d.width, d.layers, d.heads, d.ffn_hidden, spec.width, spec.layers, spec.heads, spec.ffn_hidden
        )));
    }
    if spec.n_queries > d.max_positions {
        return Err(Error::Config(format!(
            "{} queries exceed the donor's {} positions",
            spec.n_queries, d.max_positions
        )));
    }
    let adapter = QFormerAdapter::scratch(store, prefix, spec, rng)?;
    let donor_positions = donor_store.get(donor.positions).slice_rows(0, spec.n_queries)?;
    store.set(adapter.positions, donor_positions)?;
    for part in [".layers.", ".final_norm."] {
        store.copy_prefixed(&format!("{prefix}{part}"), donor_store, &format!("{}{part}", donor.prefix))?;
    }
    Ok(adapter)
}
