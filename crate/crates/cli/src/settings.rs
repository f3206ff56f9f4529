//! Config keys understood by `lrcn train`.

use anyhow::{bail, Result};
use lrcn::io::config::Config;
use lrcn::io::formats::TaskData;
use lrcn::{CaptionVariant, CellKind, ExtractorKind, FeatureExtractorSpec, ModelSpec, Task, TrainConfig};

pub const MODEL_KEYS: &[&str] = &[
    "cell",
    "layers",
    "hidden",
    "embed_dim",
    "variant",
    "extractor",
    "extractor_output",
    "extractor_hidden",
    "extractor_kernel",
    "extractor_input_shape",
    "classes",
];

pub const TRAIN_KEYS: &[&str] = &["lr", "batch", "epochs", "dropout", "clip_len", "grad_clip", "seed", "frozen"];

pub fn check_keys(cfg: &Config) -> Result<()> {
    for k in cfg.keys() {
        if k != "task" && !MODEL_KEYS.contains(&k) && !TRAIN_KEYS.contains(&k) {
            bail!("unknown config key '{k}'");
        }
    }
    Ok(())
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let frozen = cfg
        .get("frozen")
        .map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    let tc = TrainConfig {
        learning_rate: cfg.get_or("lr", d.learning_rate)?,
        batch_size: cfg.get_or("batch", d.batch_size)?,
        epochs: cfg.get_or("epochs", d.epochs)?,
        dropout: cfg.get_or("dropout", d.dropout)?,
        clip_len: cfg.get_opt("clip_len")?,
        seed: cfg.get_or("seed", d.seed)?,
        grad_clip: cfg.get_opt("grad_clip")?,
        frozen,
    };
    tc.validate()?;
    Ok(tc)
}

fn extractor(cfg: &Config, input_dim: usize) -> Result<FeatureExtractorSpec> {
    let kind = ExtractorKind::parse(cfg.get("extractor").unwrap_or("identity"))?;
    let output = cfg.get_or("extractor_output", 16usize)?;
    let hidden = cfg.get_or("extractor_hidden", 16usize)?;
    Ok(match kind {
        ExtractorKind::Identity => FeatureExtractorSpec::identity(input_dim),
        ExtractorKind::Linear => FeatureExtractorSpec::linear(input_dim, output),
        ExtractorKind::Mlp1 => FeatureExtractorSpec::mlp1(input_dim, hidden, output),
        ExtractorKind::SmallConv => {
            let shape: Vec<usize> = cfg
                .get("extractor_input_shape")
                .unwrap_or("")
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| anyhow::anyhow!("smallconv needs extractor_input_shape=channels,height,width"))?;
            let [c, h, w] = shape[..] else {
                bail!("smallconv needs extractor_input_shape=channels,height,width");
            };
            if c * h * w != input_dim {
                bail!("extractor_input_shape {c}x{h}x{w} does not match {input_dim} features per frame");
            }
            FeatureExtractorSpec::smallconv(c, h, w, hidden, cfg.get_or("extractor_kernel", 3usize)?, output)
        }
    })
}

pub fn model_spec(cfg: &Config, data: &TaskData) -> Result<ModelSpec> {
    let cell = CellKind::parse(cfg.get("cell").unwrap_or("lstm"))?;
    let layers = cfg.get_or("layers", 1usize)?;
    let hidden = cfg.get_or("hidden", 16usize)?;
    let embed_dim = cfg.get_or("embed_dim", 8usize)?;
    let phi = extractor(cfg, data.input_dim)?;
    let vocab = || data.vocab.clone().ok_or_else(|| anyhow::anyhow!("dataset has no vocabulary"));
    let spec = match data.task {
        Task::Classify => ModelSpec::classify(cell, layers, hidden, phi, cfg.get_or("classes", data.num_classes)?),
        Task::Caption => {
            let variant = CaptionVariant::parse(cfg.get("variant").unwrap_or("lrcn1u"))?;
            ModelSpec::caption(variant, cell, hidden, embed_dim, phi, vocab()?)
        }
        Task::EncodeDecode => ModelSpec::encode_decode(cell, layers, hidden, embed_dim, phi, vocab()?),
        Task::PerstepDecode => bail!("perstep_decode cannot be trained from the command line"),
    };
    spec.validate()?;
    Ok(spec)
}
