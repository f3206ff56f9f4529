//! Sequence generation: greedy, beam search and best-of-N sampling.
//!
//! All strategies work on a [`Conditioned`] model (a model primed on one
//! image or input sequence). Scores are cumulative natural-log
//! probabilities without length normalization.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::RecurrentState;
use crate::error::{Error, Result};
use crate::model::Conditioned;
use crate::tensor::{argmax, log_softmax_slice, softmax_slice};

/// A partial or complete output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after `<BOS>`, including `<EOS>` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Per-token log-probabilities; their sum is `log_prob`.
    pub step_log_probs: Vec<f64>,
    pub state: RecurrentState,
    /// `<EOS>` was emitted.
    pub finished: bool,
}

impl Hypothesis {
    fn root(state: RecurrentState) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            step_log_probs: Vec::new(),
            state,
            finished: false,
        }
    }

    fn extend(&self, token: usize, lp: f64, state: RecurrentState, eos: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut step_log_probs = self.step_log_probs.clone();
        step_log_probs.push(lp);
        Hypothesis {
            tokens,
            log_prob: self.log_prob + lp,
            step_log_probs,
            state,
            finished: token == eos,
        }
    }

    fn prev_token(&self, bos: usize) -> usize {
        self.tokens.last().copied().unwrap_or(bos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam,
    Sample,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "sample" => Ok(Strategy::Sample),
            other => Err(Error::Invalid(format!("unknown decoding strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Beam width, or number of samples.
    pub width: usize,
    /// Logit scale factor (inverse temperature) for sampling.
    pub tau: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            width: 1,
            tau: 1.0,
            max_len: 20,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Invalid("beam width / sample count must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid("logit scale must be a positive number".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Invalid("maximum length must be positive".into()));
        }
        Ok(())
    }
}

/// Highest-scoring hypothesis under `cfg`'s strategy.
pub fn decode(ctx: &Conditioned<'_>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(ctx, cfg.max_len),
        Strategy::Beam => Ok(beam_search(ctx, cfg.width, cfg.max_len)?.swap_remove(0)),
        Strategy::Sample => Ok(sample_decode(ctx, cfg.width, cfg.tau, cfg.max_len, cfg.seed)?.best),
    }
}

/// Most probable token at every step (lowest index on ties) until `<EOS>`
/// or `max_len` tokens.
pub fn greedy_decode(ctx: &Conditioned<'_>, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis::root(ctx.start_state().clone());
    for k in 0..max_len {
        let (logits, state) = ctx.step(&hyp.state, hyp.prev_token(ctx.bos()), k)?;
        let lsm = log_softmax_slice(&logits);
        let tok = argmax(&lsm);
        hyp = hyp.extend(tok, lsm[tok], state, ctx.eos());
        if hyp.finished {
            break;
        }
    }
    Ok(hyp)
}

/// Beam search keeping the `width` most probable partial sequences.
///
/// Each step expands every live hypothesis over the whole vocabulary and
/// keeps the best `width` candidates (ties broken by token sequence).
/// Candidates ending in `<EOS>` move to a completed pool and are not
/// expanded further. The search stops once the pool holds `width`
/// hypotheses that no live hypothesis can still overtake (scores only
/// decrease), or no live hypothesis remains; hypotheses still live at
/// `max_len` join the pool unfinished. The result is the pool ranked by
/// score, earlier-finished first on ties, truncated to `width`.
pub fn beam_search(ctx: &Conditioned<'_>, width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Invalid("beam width must be positive".into()));
    }
    let eos = ctx.eos();
    let mut live = vec![Hypothesis::root(ctx.start_state().clone())];
    // (hypothesis, finishing step)
    let mut pool: Vec<(Hypothesis, usize)> = Vec::new();

    for k in 0..max_len {
        let mut candidates: Vec<(f64, Vec<usize>, usize, usize, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (pi, hyp) in live.iter().enumerate() {
            let (logits, state) = ctx.step(&hyp.state, hyp.prev_token(ctx.bos()), k)?;
            let lsm = log_softmax_slice(&logits);
            for (tok, &lp) in lsm.iter().enumerate() {
                let mut seq = hyp.tokens.clone();
                seq.push(tok);
                candidates.push((hyp.log_prob + lp, seq, pi, tok, lp));
            }
            next_states.push(state);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for (_, _, pi, tok, lp) in candidates {
            let hyp = live[pi].extend(tok, lp, next_states[pi].clone(), eos);
            if hyp.finished {
                pool.push((hyp, k));
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() || (pool.len() >= width && settled(&pool, &live, width)) {
            break;
        }
        if k + 1 == max_len {
            pool.extend(live.drain(..).map(|h| (h, max_len)));
        }
    }
    if max_len == 0 {
        pool.extend(live.drain(..).map(|h| (h, 0)));
    }

    pool.sort_by(|(a, ka), (b, kb)| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(Ordering::Equal)
            .then(ka.cmp(kb))
    });
    pool.truncate(width);
    Ok(pool.into_iter().map(|(h, _)| h).collect())
}

/// Whether the `width`-th best pooled score already beats every live one.
fn settled(pool: &[(Hypothesis, usize)], live: &[Hypothesis], width: usize) -> bool {
    let mut scores: Vec<f64> = pool.iter().map(|(h, _)| h.log_prob).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
    scores[width - 1] >= best_live
}

/// Output of [`sample_decode`].
#[derive(Clone, Debug)]
pub struct Samples {
    pub best: Hypothesis,
    pub all: Vec<Hypothesis>,
}

/// Index drawn from `probs` by inverse-CDF with one uniform variate.
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Draws `n` sequences token by token from `softmax(tau * logits)` and
/// returns the one with the highest unscaled log-probability (first drawn
/// on ties). Scores always use the model's own (`tau = 1`) distribution.
pub fn sample_decode(ctx: &Conditioned<'_>, n: usize, tau: f64, max_len: usize, seed: u64) -> Result<Samples> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be positive".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Invalid("logit scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(n);
    for _ in 0..n {
        let mut hyp = Hypothesis::root(ctx.start_state().clone());
        for k in 0..max_len {
            let (logits, state) = ctx.step(&hyp.state, hyp.prev_token(ctx.bos()), k)?;
            let scaled: Vec<f64> = logits.iter().map(|z| tau * z).collect();
            let tok = draw(&softmax_slice(&scaled), &mut rng);
            let lp = log_softmax_slice(&logits)[tok];
            hyp = hyp.extend(tok, lp, state, ctx.eos());
            if hyp.finished {
                break;
            }
        }
        all.push(hyp);
    }
    let mut best = 0;
    for (i, h) in all.iter().enumerate().skip(1) {
        if h.log_prob > all[best].log_prob {
            best = i;
        }
    }
    Ok(Samples {
        best: all[best].clone(),
        all,
    })
}
