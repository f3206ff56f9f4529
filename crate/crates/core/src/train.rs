//! Maximum-likelihood training: the mean per-sequence negative
//! log-likelihood, minibatch SGD with backpropagation through time,
//! inverted dropout, and a finite-difference gradient check.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dropout, Example, Input, Lrcn, Target};
use crate::tensor::{finite_diff_grad, Tensor};

/// Gradient check: absolute differences below this count as agreement.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drop probability on stack inputs and between layers.
    pub dropout: f64,
    /// Train classification on random windows of this many frames.
    pub clip_len: Option<usize>,
    pub seed: u64,
    /// Global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
    /// Parameter blocks held fixed. A trailing `*` matches a prefix.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 16,
            epochs: 10,
            dropout: 0.0,
            clip_len: None,
            seed: 0,
            grad_clip: None,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be a non-negative number".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid("dropout must lie in [0, 1)".into()));
        }
        if self.clip_len == Some(0) {
            return Err(Error::Invalid("clip length must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Invalid("gradient clip threshold must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn is_frozen(&self, block: &str) -> bool {
        self.frozen.iter().any(|pat| match pat.strip_suffix('*') {
            Some(prefix) => block.starts_with(prefix),
            None => block == pat,
        })
    }
}

/// Mean negative log-likelihood over a set of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// `-(1/|D|) Σ_seq Σ_t log p(y_t | ...)`.
    pub mean_nll: f64,
    /// Step-indexed sums over sequences, divided by the sequence count.
    pub per_step: Vec<f64>,
    pub sequences: usize,
    /// Number of predicted labels or tokens.
    pub targets: usize,
}

impl LossReport {
    fn accumulate(losses: &[crate::model::SequenceLoss]) -> Self {
        let n = losses.len().max(1) as f64;
        let max_len = losses.iter().map(|l| l.per_step.len()).max().unwrap_or(0);
        let mut per_step = vec![0.0; max_len];
        let mut total = 0.0;
        let mut targets = 0;
        for l in losses {
            total += l.total;
            targets += l.count;
            for (acc, v) in per_step.iter_mut().zip(&l.per_step) {
                *acc += v;
            }
        }
        per_step.iter_mut().for_each(|v| *v /= n);
        LossReport {
            mean_nll: total / n,
            per_step,
            sequences: losses.len(),
            targets,
        }
    }

    /// Mean loss per predicted target.
    pub fn per_target(&self) -> f64 {
        self.mean_nll * self.sequences as f64 / self.targets.max(1) as f64
    }
}

/// The training objective on `batch`, without gradients.
pub fn sequence_nll(m: &Lrcn, batch: &[Example]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let losses = batch.iter().map(|ex| m.sequence_loss(ex)).collect::<Result<Vec<_>>>()?;
    Ok(LossReport::accumulate(&losses))
}

/// Gradient of [`sequence_nll`]'s mean loss with respect to every block.
pub fn analytic_gradient(m: &Lrcn, batch: &[Example]) -> Result<(LossReport, Lrcn)> {
    batch_gradient(m, batch, 0.0, &[])
}

fn batch_gradient(m: &Lrcn, batch: &[Example], dropout: f64, seeds: &[u64]) -> Result<(LossReport, Lrcn)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let parts: Vec<Result<(crate::model::SequenceLoss, Lrcn)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = m.zeros_like();
            let loss = if dropout > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                m.loss_and_grad(ex, Some(Dropout { p: dropout, rng: &mut rng }), &mut g)?
            } else {
                m.loss_and_grad::<ChaCha8Rng>(ex, None, &mut g)?
            };
            Ok((loss, g))
        })
        .collect();
    // Fixed-order reduction keeps the sum bit-reproducible.
    let mut total = m.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    for part in parts {
        let (loss, g) = part?;
        for ((_, acc), (_, t)) in total.blocks_mut().into_iter().zip(g.blocks()) {
            acc.axpy(1.0, t);
        }
        losses.push(loss);
    }
    let scale = 1.0 / batch.len() as f64;
    for (_, t) in total.blocks_mut() {
        t.scale(scale);
    }
    Ok((LossReport::accumulate(&losses), total))
}

/// Inverted dropout with an explicit keep mask: kept entries are scaled by
/// `1 / (1 - p)`, dropped entries become zero.
pub fn apply_dropout(x: &Tensor, p: f64, keep: &[bool]) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if keep.len() != x.len() {
        return Err(Error::Shape {
            op: "apply_dropout",
            left: x.shape().to_vec(),
            right: vec![keep.len()],
        });
    }
    let scale = 1.0 / (1.0 - p);
    let data = x
        .data()
        .iter()
        .zip(keep)
        .map(|(&v, &k)| if k { v * scale } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Keep mask with each entry dropped independently with probability `p`.
pub fn dropout_keep_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() >= p).collect()
}

fn crop_clip<R: Rng + ?Sized>(ex: &Example, clip_len: usize, rng: &mut R) -> Example {
    match (&ex.input, &ex.target) {
        (Input::Frames(frames), Target::Class(_)) if frames.len() > clip_len => {
            let start = rng.gen_range(0..=frames.len() - clip_len);
            Example {
                input: Input::Frames(frames[start..start + clip_len].to_vec()),
                target: ex.target.clone(),
            }
        }
        _ => ex.clone(),
    }
}

/// One pass of minibatch SGD over `data` in a seeded random order.
///
/// All randomness (shuffling, clip windows, dropout masks) comes from `rng`,
/// so a fixed seed reproduces the parameter trajectory exactly.
pub fn train_epoch(m: &mut Lrcn, data: &[Example], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut losses_all = Vec::with_capacity(data.len());
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<Example> = match cfg.clip_len {
            Some(c) => chunk.iter().map(|&i| crop_clip(&data[i], c, rng)).collect(),
            None => chunk.iter().map(|&i| data[i].clone()).collect(),
        };
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
        let (report, mut grad) = batch_gradient(m, &batch, cfg.dropout, &seeds)?;

        for (name, g) in grad.blocks_mut() {
            if cfg.is_frozen(&name) {
                g.fill(0.0);
            } else if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of block {name}")));
            }
        }
        if !report.mean_nll.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if let Some(limit) = cfg.grad_clip {
            let norm = grad.blocks().iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
            if norm > limit {
                for (_, g) in grad.blocks_mut() {
                    g.scale(limit / norm);
                }
            }
        }
        for ((_, p), (_, g)) in m.blocks_mut().into_iter().zip(grad.blocks()) {
            p.axpy(-cfg.learning_rate, g);
        }
        losses_all.push((report.mean_nll, batch.len(), report.targets, report.per_step));
    }

    let sequences: usize = losses_all.iter().map(|l| l.1).sum();
    let targets: usize = losses_all.iter().map(|l| l.2).sum();
    let mean = losses_all.iter().map(|l| l.0 * l.1 as f64).sum::<f64>() / sequences as f64;
    let max_len = losses_all.iter().map(|l| l.3.len()).max().unwrap_or(0);
    let mut per_step = vec![0.0; max_len];
    for (_, n, _, ps) in &losses_all {
        for (acc, v) in per_step.iter_mut().zip(ps) {
            *acc += v * *n as f64 / sequences as f64;
        }
    }
    Ok(LossReport {
        mean_nll: mean,
        per_step,
        sequences,
        targets,
    })
}

/// Runs `cfg.epochs` epochs, writing `epoch <i> loss <mean> time <secs>`
/// per epoch to `log`.
pub fn train(m: &mut Lrcn, data: &[Example], cfg: &TrainConfig, log: &mut dyn Write) -> Result<Vec<LossReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let report = train_epoch(m, data, cfg, &mut rng)?;
        writeln!(
            log,
            "epoch {} loss {:.6} time {:.3}",
            epoch + 1,
            report.mean_nll,
            start.elapsed().as_secs_f64()
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Result of comparing one parameter block against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` in the block.
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

/// Relative disagreement of two derivative estimates, zero when they differ
/// by less than [`GRADCHECK_ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRADCHECK_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares [`analytic_gradient`] against central differences of
/// [`sequence_nll`] for every non-empty parameter block.
pub fn gradient_check(m: &Lrcn, batch: &[Example], eps: f64, tol: f64) -> Result<GradCheckReport> {
    gradient_check_with(m, batch, eps, tol, |m, b| analytic_gradient(m, b).map(|(_, g)| g))
}

/// [`gradient_check`] against a caller-supplied gradient routine.
pub fn gradient_check_with<F>(m: &Lrcn, batch: &[Example], eps: f64, tol: f64, analytic: F) -> Result<GradCheckReport>
where
    F: Fn(&Lrcn, &[Example]) -> Result<Lrcn>,
{
    let grad = analytic(m, batch)?;
    let names: Vec<String> = m.blocks().into_iter().map(|(n, _)| n).collect();
    let mut blocks = Vec::new();
    for (bi, name) in names.iter().enumerate() {
        let base = m.blocks()[bi].1.clone();
        if base.is_empty() {
            continue;
        }
        let mut probe = m.clone();
        let numeric = finite_diff_grad(
            |x| {
                *probe.blocks_mut().swap_remove(bi).1 = x.clone();
                sequence_nll(&probe, batch).map_or(f64::NAN, |r| r.mean_nll)
            },
            &base,
            eps,
        )?;
        let analytic_block = grad.blocks()[bi].1;
        let max_rel_error = analytic_block
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        let max_abs_error = analytic_block
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| (a - n).abs())
            .fold(0.0, f64::max);
        blocks.push(BlockCheck {
            name: name.clone(),
            size: base.len(),
            max_rel_error,
            max_abs_error,
            passed: max_rel_error <= tol,
        });
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport { blocks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::features::FeatureExtractorSpec;
    use crate::model::{CaptionVariant, ModelSpec};
    use crate::vocab::Vocabulary;

    fn tiny_caption(seed: u64) -> (Lrcn, Vec<Example>) {
        let spec = ModelSpec::caption(
            CaptionVariant::OneLayer,
            CellKind::Lstm,
            4,
            3,
            FeatureExtractorSpec::linear(3, 3),
            Vocabulary::symbols(3),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Lrcn::init(spec, &mut rng).unwrap();
        let eos = m.vocab().unwrap().eos();
        let data = vec![
            Example {
                input: Input::Static(Tensor::uniform(&[3], 1.0, &mut rng)),
                target: Target::Tokens(vec![0, 2, eos]),
            },
            Example {
                input: Input::Static(Tensor::uniform(&[3], 1.0, &mut rng)),
                target: Target::Tokens(vec![1, eos]),
            },
        ];
        (m, data)
    }

    #[test]
    fn zero_model_nll_is_n_log_k() {
        let (m, data) = tiny_caption(1);
        let z = m.zeros_like();
        let r = sequence_nll(&z, &data[..1]).unwrap();
        let k = z.spec.output_size() as f64;
        assert!((r.mean_nll - 3.0 * k.ln()).abs() < 1e-12);
        assert_eq!(r.targets, 3);
    }

    #[test]
    fn batch_nll_is_mean_of_sequences() {
        let (m, data) = tiny_caption(2);
        let a = sequence_nll(&m, &data[..1]).unwrap().mean_nll;
        let b = sequence_nll(&m, &data[1..]).unwrap().mean_nll;
        let both = sequence_nll(&m, &data).unwrap().mean_nll;
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn confident_model_loss_goes_to_zero() {
        // A huge bias on the gold token of a one-token caption.
        let (mut m, _) = tiny_caption(3);
        for (_, t) in m.blocks_mut() {
            t.fill(0.0);
        }
        let eos = m.vocab().unwrap().eos();
        let ex = Example {
            input: Input::Static(Tensor::zeros(&[3])),
            target: Target::Tokens(vec![eos]),
        };
        let mut last = f64::INFINITY;
        for bias in [1.0, 5.0, 10.0, 30.0] {
            m.prediction.b_z.fill(0.0);
            m.prediction.b_z.data_mut()[eos] = bias;
            let l = sequence_nll(&m, std::slice::from_ref(&ex)).unwrap().mean_nll;
            assert!(l < last && l >= 0.0);
            last = l;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let (m, _) = tiny_caption(4);
        let ex = Example {
            input: Input::Static(Tensor::zeros(&[3])),
            target: Target::Tokens(vec![99, m.vocab().unwrap().eos()]),
        };
        assert!(matches!(sequence_nll(&m, &[ex]), Err(Error::TokenRange { .. })));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (m, data) = tiny_caption(5);
        let mut trained = m.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 1,
            ..TrainConfig::default()
        };
        train_epoch(&mut trained, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trained, m);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (m, data) = tiny_caption(6);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            batch_size: 1,
            epochs: 3,
            dropout: 0.2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (m.clone(), m);
        train(&mut a, &data, &cfg, &mut std::io::sink()).unwrap();
        train(&mut b, &data, &cfg, &mut std::io::sink()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn memorization_loss_decreases_monotonically() {
        let (mut m, data) = tiny_caption(7);
        let single = &data[..1];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = sequence_nll(&m, single).unwrap().mean_nll;
        for _ in 0..10 {
            train_epoch(&mut m, single, &cfg, &mut rng).unwrap();
            let now = sequence_nll(&m, single).unwrap().mean_nll;
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let (m, data) = tiny_caption(8);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 2,
            frozen: vec!["phi.*".into(), "pred.b_z".into()],
            ..TrainConfig::default()
        };
        let mut t = m.clone();
        train_epoch(&mut t, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.extractor, m.extractor);
        assert_eq!(t.prediction.b_z, m.prediction.b_z);
        assert_ne!(t.prediction.w_z, m.prediction.w_z);
    }

    #[test]
    fn dropout_definition() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_dropout(&x, 0.0, &[true; 4]).unwrap(), x);
        let y = apply_dropout(&x, 0.75, &[true, false, true, false]).unwrap();
        assert_eq!(y.data(), &[4.0, 0.0, 12.0, 0.0]);
        assert!(apply_dropout(&x, 1.0, &[true; 4]).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let x = Tensor::filled(&[n], 1.5);
        let mask = dropout_keep_mask(n, 0.5, &mut rng);
        let y = apply_dropout(&x, 0.5, &mask).unwrap();
        let mean = y.sum() / n as f64;
        assert!((mean - 1.5).abs() / 1.5 < 0.02, "{mean}");
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let (mut m, data) = tiny_caption(9);
        m.prediction.w_z.data_mut()[0] = f64::NAN;
        let err = train_epoch(&mut m, &data, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn gradcheck_detects_sign_flip() {
        let (m, data) = tiny_caption(10);
        let ok = gradient_check(&m, &data, 1e-5, 1e-4).unwrap();
        assert!(ok.passed, "{:?}", ok.failures().collect::<Vec<_>>());
        let bad = gradient_check_with(&m, &data, 1e-5, 1e-4, |m, b| {
            let (_, mut g) = analytic_gradient(m, b)?;
            g.prediction.w_z.scale(-1.0);
            Ok(g)
        })
        .unwrap();
        let failed: Vec<&str> = bad.failures().map(|b| b.name.as_str()).collect();
        assert_eq!(failed, vec!["pred.w_z"]);
    }

    #[test]
    fn identity_extractor_blocks_are_skipped() {
        let spec = ModelSpec::classify(CellKind::Lstm, 1, 3, FeatureExtractorSpec::identity(2), 2);
        let m = Lrcn::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ex = Example {
            input: Input::Frames(vec![Tensor::vector(vec![0.1, 0.2]); 2]),
            target: Target::Class(1),
        };
        let r = gradient_check(&m, &[ex], 1e-5, 1e-4).unwrap();
        assert!(r.blocks.iter().all(|b| !b.name.starts_with("phi.")));
        assert!(r.passed);
    }
}
