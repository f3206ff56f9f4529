//! Seeded toy datasets. Every generator is a pure function of its arguments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::CellKind;
use crate::error::Result;
use crate::features::FeatureExtractorSpec;
use crate::model::{CaptionVariant, CrfLayout, CrfMode, Example, Input, Lrcn, ModelSpec, Target, Task};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "black", "white", "orange", "purple"];
pub const SHAPES: [&str; 8] = ["square", "circle", "triangle", "star", "heart", "cross", "diamond", "ring"];

/// Frames per order-task sequence and the size of its one-hot alphabet
/// (symbol 0 is A, 1 is B, the rest are distractors).
pub const ORDER_LEN: usize = 8;
pub const ORDER_SYMBOLS: usize = 6;
pub const ORDER_A: usize = 0;
pub const ORDER_B: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub examples: Vec<Example>,
    pub vocab: Option<Vocabulary>,
}

/// Random symbol strings to be reproduced: one-hot input frames, target the
/// same symbols followed by `<EOS>`. Symbols are vocabulary indices
/// `0..vocab_size`.
pub fn gen_copy_task(seed: u64, vocab_size: usize, seq_len: usize, count: usize) -> SynthSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::symbols(vocab_size);
    let examples = (0..count)
        .map(|_| {
            let seq: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..vocab_size)).collect();
            let frames = seq.iter().map(|&s| Tensor::one_hot(vocab_size, s)).collect();
            let mut target = seq;
            target.push(vocab.eos());
            Example {
                input: Input::Frames(frames),
                target: Target::Tokens(target),
            }
        })
        .collect();
    SynthSet {
        examples,
        vocab: Some(vocab),
    }
}

/// Toy images and "<color> <shape>" captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCaptions {
    pub set: SynthSet,
    /// `(color, shape)` index of each example.
    pub attributes: Vec<(usize, usize)>,
}

pub fn toy_caption_vocabulary() -> Vocabulary {
    Vocabulary::new(COLORS.iter().chain(SHAPES.iter()).copied(), false)
}

/// Each image is `[one-hot color ‖ one-hot shape]` plus uniform noise in
/// `[-noise, noise]`. The 64 attribute combinations are visited in a
/// seed-dependent order, cycling when `count > 64`.
pub fn gen_toy_captioning(seed: u64, count: usize, noise: f64) -> ToyCaptions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = toy_caption_vocabulary();
    let mut combos: Vec<(usize, usize)> = (0..COLORS.len()).flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s))).collect();
    combos.shuffle(&mut rng);
    let attributes: Vec<(usize, usize)> = combos.iter().copied().cycle().take(count).collect();
    let examples = attributes
        .iter()
        .map(|&(c, s)| {
            let mut img = vec![0.0; COLORS.len() + SHAPES.len()];
            img[c] = 1.0;
            img[COLORS.len() + s] = 1.0;
            if noise > 0.0 {
                for x in &mut img {
                    *x += rng.gen_range(-noise..=noise);
                }
            }
            let target = vec![
                vocab.get(COLORS[c]).expect("color word"),
                vocab.get(SHAPES[s]).expect("shape word"),
                vocab.eos(),
            ];
            Example {
                input: Input::Static(Tensor::vector(img)),
                target: Target::Tokens(target),
            }
        })
        .collect();
    ToyCaptions {
        set: SynthSet {
            examples,
            vocab: Some(vocab),
        },
        attributes,
    }
}

/// Label of an order-task frame sequence: 1 when A comes before B.
pub fn order_label(frames: &[Tensor]) -> Option<usize> {
    let pos = |sym: usize| frames.iter().position(|f| f.argmax() == sym && f.data()[sym] == 1.0);
    Some(usize::from(pos(ORDER_A)? < pos(ORDER_B)?))
}

/// Sequences holding one A, one B and distractors at uniformly random
/// positions. The bag of frames has the same distribution in both classes,
/// so only the order separates them.
pub fn gen_order_task(seed: u64, count: usize) -> SynthSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|_| {
            let mut syms: Vec<usize> = (0..ORDER_LEN).map(|_| rng.gen_range(2..ORDER_SYMBOLS)).collect();
            let a = rng.gen_range(0..ORDER_LEN);
            let mut b = rng.gen_range(0..ORDER_LEN - 1);
            if b >= a {
                b += 1;
            }
            syms[a] = ORDER_A;
            syms[b] = ORDER_B;
            Example {
                input: Input::Frames(syms.iter().map(|&s| Tensor::one_hot(ORDER_SYMBOLS, s)).collect()),
                target: Target::Class(usize::from(a < b)),
            }
        })
        .collect();
    SynthSet { examples, vocab: None }
}

/// A cue symbol followed by `lag` random symbols; only the last step is
/// scored, and its label is the cue.
pub fn gen_lag_task(seed: u64, count: usize, lag: usize, vocab_size: usize) -> SynthSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|_| {
            let syms: Vec<usize> = (0..=lag).map(|_| rng.gen_range(0..vocab_size)).collect();
            let mut labels = vec![None; lag + 1];
            labels[lag] = Some(syms[0]);
            Example {
                input: Input::Frames(syms.iter().map(|&s| Tensor::one_hot(vocab_size, s)).collect()),
                target: Target::PerStep(labels),
            }
        })
        .collect();
    SynthSet { examples, vocab: None }
}

/// A small random model of the given topology with every parameter drawn
/// from U(-0.5, 0.5), and a batch of two random examples for it: hidden size
/// 4, inputs of at most 6 values, 5 output symbols, sequences of 3 steps.
/// `variant` selects the caption stack and is ignored by other tasks.
pub fn gradcheck_problem(task: Task, variant: CaptionVariant, cell: CellKind, seed: u64) -> Result<(Lrcn, Vec<Example>)> {
    const N: usize = 4;
    const T: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::symbols(3);
    let rand_vec = |n: usize, rng: &mut ChaCha8Rng| Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let rand_caption = |rng: &mut ChaCha8Rng| {
        let mut t: Vec<usize> = (0..T - 1).map(|_| rng.gen_range(0..3)).collect();
        t.push(vocab.eos());
        t
    };
    let spec = match task {
        Task::Classify => ModelSpec::classify(cell, 2, N, FeatureExtractorSpec::linear(6, 4), 3),
        Task::Caption => {
            let phi = match variant {
                CaptionVariant::OneLayer => FeatureExtractorSpec::mlp1(6, 4, 4),
                _ => FeatureExtractorSpec::linear(6, 4),
            };
            ModelSpec::caption(variant, cell, N, 3, phi, vocab.clone())
        }
        Task::EncodeDecode => ModelSpec::encode_decode(cell, 1, N, 3, FeatureExtractorSpec::linear(4, 3), vocab.clone()),
        Task::PerstepDecode => ModelSpec::perstep_decode(
            cell,
            1,
            N,
            3,
            CrfLayout {
                blocks: vec![2, 3],
                mode: CrfMode::Prob,
            },
            vocab.clone(),
        ),
    };
    let mut m = Lrcn::init(spec, &mut rng)?;
    for (_, t) in m.blocks_mut() {
        *t = Tensor::uniform(t.shape(), 0.5, &mut rng);
    }
    let examples = (0..2)
        .map(|_| match task {
            Task::Classify => Example {
                input: Input::Frames((0..T).map(|_| rand_vec(6, &mut rng)).collect()),
                target: Target::Class(rng.gen_range(0..3)),
            },
            Task::Caption => Example {
                input: Input::Static(rand_vec(6, &mut rng)),
                target: Target::Tokens(rand_caption(&mut rng)),
            },
            Task::EncodeDecode => Example {
                input: Input::Frames((0..T).map(|_| rand_vec(4, &mut rng)).collect()),
                target: Target::Tokens(rand_caption(&mut rng)),
            },
            Task::PerstepDecode => {
                let a: f64 = rng.gen_range(0.1..0.9);
                let (b, c): (f64, f64) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
                Example {
                    input: Input::Static(Tensor::vector(vec![a, 1.0 - a, b, c, 1.0 - b - c])),
                    target: Target::Tokens(rand_caption(&mut rng)),
                }
            }
        })
        .collect();
    Ok((m, examples))
}
