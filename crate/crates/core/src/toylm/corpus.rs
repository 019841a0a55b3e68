use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// End of sequence; also the greedy decoder's stop token.
pub const EOS: usize = 0;
pub const BOS: usize = 1;
/// Marks the start of the user turn.
pub const USER: usize = 2;
/// Marks the start of the assistant turn.
pub const ASSISTANT: usize = 3;
/// First token id available to transcripts.
pub const FIRST_CONTENT: usize = 4;

/// Tokens before the transcript (or audio) in the dialogue template.
pub const PROMPT_PREFIX: [usize; 2] = [BOS, USER];
/// Tokens after the transcript (or audio).
pub const PROMPT_SUFFIX: [usize; 1] = [ASSISTANT];

/// The synthetic language: a sparse first-order Markov chain over content
/// tokens plus a dialogue template whose reply is a fixed permutation of the
/// first and last transcript tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    pub vocab: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    reply: Vec<usize>,
}

impl Language {
    pub fn new(vocab: usize, successors: usize, rng: &mut Rng) -> Result<Self> {
        if vocab <= FIRST_CONTENT + 1 {
            return Err(Error::Config(format!("vocabulary of {vocab} leaves no content tokens")));
        }
        let content: Vec<usize> = (FIRST_CONTENT..vocab).collect();
        let k = successors.clamp(1, content.len());
        let transitions = content
            .iter()
            .map(|_| {
                let mut pool = content.clone();
                rng.shuffle(&mut pool);
                let weights: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform().powi(2)).collect();
                let total: f64 = weights.iter().sum();
                pool[..k].iter().zip(weights).map(|(&t, w)| (t, w / total)).collect()
            })
            .collect();
        let mut reply = content.clone();
        rng.shuffle(&mut reply);
        Ok(Language {
            vocab,
            transitions,
            reply,
        })
    }

    pub fn content_tokens(&self) -> std::ops::Range<usize> {
        FIRST_CONTENT..self.vocab
    }

    pub fn is_content(&self, t: usize) -> bool {
        (FIRST_CONTENT..self.vocab).contains(&t)
    }

    /// Reply token for a content token.
    pub fn reply_to(&self, t: usize) -> usize {
        self.reply[t - FIRST_CONTENT]
    }

    pub fn successors(&self, t: usize) -> &[(usize, f64)] {
        &self.transitions[t - FIRST_CONTENT]
    }

    fn next(&self, t: usize, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        let succ = self.successors(t);
        for &(tok, p) in succ {
            acc += p;
            if u < acc {
                return tok;
            }
        }
        succ.last().unwrap().0
    }

    /// Transcript of length in `min_len..=max_len` starting at `first`, or a
    /// uniform first token when `None`.
    pub fn transcript(&self, rng: &mut Rng, min_len: usize, max_len: usize, first: Option<usize>) -> Vec<usize> {
        let len = min_len + rng.below(max_len - min_len + 1);
        let n_content = self.vocab - FIRST_CONTENT;
        let mut t = first.unwrap_or_else(|| FIRST_CONTENT + rng.below(n_content));
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                t = self.next(t, rng);
            }
            out.push(t);
        }
        out
    }

    /// `BOS USER x… ASSISTANT`.
    pub fn prompt(&self, transcript: &[usize]) -> Vec<usize> {
        let mut s = PROMPT_PREFIX.to_vec();
        s.extend_from_slice(transcript);
        s.extend_from_slice(&PROMPT_SUFFIX);
        s
    }

    /// The reply the template prescribes, ending in `EOS`.
    pub fn reply(&self, transcript: &[usize]) -> Vec<usize> {
        match (transcript.first(), transcript.last()) {
            (Some(&a), Some(&b)) => vec![self.reply_to(a), self.reply_to(b), EOS],
            _ => vec![EOS],
        }
    }

    pub fn dialogue(&self, transcript: &[usize]) -> Vec<usize> {
        let mut s = self.prompt(transcript);
        s.extend(self.reply(transcript));
        s
    }

    /// `BOS x… EOS` free-running chain.
    pub fn plain(&self, rng: &mut Rng, min_len: usize, max_len: usize) -> Vec<usize> {
        let mut s = vec![BOS];
        s.extend(self.transcript(rng, min_len, max_len, None));
        s.push(EOS);
        s
    }
}

/// Sizes and lengths of the teacher's pretraining corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train_sequences: usize,
    pub held_out_sequences: usize,
    pub dialogue_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
}

/// Train and held-out token sequences; held-out never repeats a training
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub language: Language,
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    pub fn generate(language: Language, spec: CorpusSpec, rng: &mut Rng) -> Result<Self> {
        if spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::Config(format!(
                "transcript lengths {}..={} are invalid",
                spec.min_len, spec.max_len
            )));
        }
        let draw = |rng: &mut Rng| {
            if rng.uniform() < spec.dialogue_fraction {
                let t = language.transcript(rng, spec.min_len, spec.max_len, None);
                language.dialogue(&t)
            } else {
                language.plain(rng, spec.min_len, spec.max_len)
            }
        };
        let train: Vec<Vec<usize>> = (0..spec.train_sequences).map(|_| draw(rng)).collect();
        let seen: HashSet<&Vec<usize>> = train.iter().collect();
        let mut held_out = Vec::with_capacity(spec.held_out_sequences);
        let mut attempts = 0;
        while held_out.len() < spec.held_out_sequences {
            attempts += 1;
            if attempts > 100 * (spec.held_out_sequences + 1) {
                return Err(Error::Data("cannot draw enough held-out sequences disjoint from train".into()));
            }
            let s = draw(rng);
            if !seen.contains(&s) {
                held_out.push(s);
            }
        }
        Ok(SyntheticCorpus {
            language,
            train,
            held_out,
        })
    }

    /// Perplexity of the add-one-smoothed unigram model fit on `train`,
    /// evaluated on the predicted positions (all but the first) of `held_out`.
    pub fn unigram_perplexity(&self) -> f64 {
        let v = self.language.vocab;
        let mut counts = vec![1.0f64; v];
        for s in &self.train {
            for &t in &s[1..] {
                counts[t] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let (mut nll, mut n) = (0.0, 0usize);
        for s in &self.held_out {
            for &t in &s[1..] {
                nll -= (counts[t] / total).ln();
                n += 1;
            }
        }
        (nll / n.max(1) as f64).exp()
    }
}
