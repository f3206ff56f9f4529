//! Fixtures shared by the benchmarks.

use lrcn::io::synth::gen_copy_task;
use lrcn::model::Example;
use lrcn::{CellKind, FeatureExtractorSpec, Lrcn, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Copy-task encoder-decoder with `hidden` LSTM units and its training set.
pub fn copy_fixture(hidden: usize, count: usize) -> (Lrcn, Vec<Example>) {
    let data = gen_copy_task(0, 6, 3, count);
    let vocab = data.vocab.expect("copy task has a vocabulary");
    let spec = ModelSpec::encode_decode(CellKind::Lstm, 1, hidden, 8, FeatureExtractorSpec::identity(6), vocab);
    let model = Lrcn::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid spec");
    (model, data.examples)
}
