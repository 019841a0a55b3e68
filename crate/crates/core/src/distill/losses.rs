use crate::error::{dim_err, Error, Result};
use crate::numcore::{kl_from_logits, Graph, Real, Tensor, Var};

/// Variants of the token alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignOptions {
    /// Sum squared per-row distances instead of Euclidean norms.
    pub squared: bool,
    /// When `N ≥ |Q|`, align only the first `|Q| − 1` text rows instead of
    /// failing.
    pub truncate: bool,
}

/// `Σ_n ‖t_text[n] − t_audio[|Q|−N+n]‖₂` over `n = 0..N`: the last `N` audio
/// tokens are aligned with the `N` text tokens, in order.
pub fn token_alignment_loss<T: Real>(g: &mut Graph<T>, t_audio: Var, t_text: Var, opts: AlignOptions) -> Result<Var> {
    let (q, wa) = g.value(t_audio).dims2();
    let (n, wt) = g.value(t_text).dims2();
    if wa != wt {
        return Err(dim_err!("audio tokens have width {}, text tokens {}", wa, wt));
    }
    let (text, n) = if n >= q {
        if !opts.truncate {
            return Err(Error::Alignment(format!(
                "{n} text tokens need more than {n} audio tokens, the adapter has {q}"
            )));
        }
        let keep = q.saturating_sub(1);
        (g.slice_rows(t_text, 0, keep)?, keep)
    } else {
        (t_text, n)
    };
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let tail = g.slice_rows(t_audio, q - n, n)?;
    let diff = g.sub(text, tail)?;
    let per_row = if opts.squared {
        g.mul(diff, diff)?
    } else {
        g.row_norms(diff)
    };
    Ok(g.sum(per_row))
}

/// Evaluates [`token_alignment_loss`] on plain tensors.
pub fn token_alignment_value<T: Real>(t_audio: &Tensor<T>, t_text: &Tensor<T>, opts: AlignOptions) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(t_audio.clone());
    let t = g.constant(t_text.clone());
    let l = token_alignment_loss(&mut g, a, t, opts)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// `‖h_s − h_t‖₂` (or its square). `h_t` is expected to be a constant.
pub fn distill_loss<T: Real>(g: &mut Graph<T>, h_s: Var, h_t: Var, squared: bool) -> Result<Var> {
    let (s, t) = (g.value(h_s).shape().to_vec(), g.value(h_t).shape().to_vec());
    if s != t {
        return Err(dim_err!("student hidden {:?} vs teacher hidden {:?}", s, t));
    }
    let diff = g.sub(h_s, h_t)?;
    if squared {
        let sq = g.mul(diff, diff)?;
        Ok(g.sum(sq))
    } else {
        g.norm(diff)
    }
}

/// `KL(σ(O·h_t) ‖ σ(O·h_s))` with floored logs.
pub fn reference_kl<T: Real>(h_t: &[T], h_s: &[T], o: &Tensor<T>) -> Result<f64> {
    let (v, w) = o.dims2();
    if h_t.len() != w || h_s.len() != w {
        return Err(dim_err!(
            "reference_kl: O is {}×{}, hidden states have {} and {}",
            v,
            w,
            h_t.len(),
            h_s.len()
        ));
    }
    let logits = |h: &[T]| -> Vec<T> {
        (0..v)
            .map(|r| o.row(r).iter().zip(h).map(|(&a, &b)| a * b).sum())
            .collect()
    };
    Ok(kl_from_logits(&logits(h_t), &logits(h_s)))
}
