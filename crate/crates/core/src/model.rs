//! Task topologies built from a feature extractor, an optional word
//! embedding, a recurrent stack and a linear prediction layer.
//!
//! Every topology is unrolled into a list of [`Step`]s. A step may take an
//! embedded previous token, a visual vector (the output of the extractor for
//! one frame), or both, and may emit a prediction. The same unrolled plan
//! drives inference, the training loss and its gradient, which keeps the
//! four tasks on one code path:
//!
//! * `Classify`: frame `t` enters at step `t`; every step predicts the label,
//!   and inference averages the per-step distributions (late fusion).
//! * `Caption`: the image vector is repeated at every step next to the
//!   previous word; it enters layer 1 (unfactored) or layer ℓ ≥ 2 (factored).
//! * `EncodeDecode`: one stack runs `T + T' - 1` steps. Steps `1..T` read the
//!   input frames, step `T` additionally reads `<BOS>` and predicts the first
//!   output, later steps read only the previous output token.
//! * `PerstepDecode`: like an unfactored caption model whose "image" is a
//!   semantic label vector (one-hot or probability blocks) given every step.
//!
//! Layer inputs are concatenated as `[embedded token ‖ visual vector]` for
//! layer 1 and `[h of layer below ‖ visual vector]` above it; absent parts
//! are zero.

use rand::Rng;

use crate::cells::{Cell, CellCache, CellKind, RecurrentState};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureExtractorSpec, PhiCache};
use crate::tensor::{gemv_acc, gemv_t_acc, ger_acc, log_softmax_slice, softmax_slice, Tensor};
use crate::vocab::Vocabulary;

/// Captioning paper-hidden-size default; desk-scale configs use far less.
pub const CAPTION_HIDDEN_DEFAULT: usize = 1000;
/// Classification hidden sizes for RGB and flow inputs.
pub const RGB_HIDDEN_DEFAULT: usize = 256;
pub const FLOW_HIDDEN_DEFAULT: usize = 1024;

/// Forget-gate bias of a stateless LSTM; the sigmoid of it is exactly 0.
pub const CLOSED_FORGET_BIAS: f64 = -1000.0;

/// Tolerance on each probability block of a CRF-prob input.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Caption,
    EncodeDecode,
    PerstepDecode,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Caption => "caption",
            Task::EncodeDecode => "encode_decode",
            Task::PerstepDecode => "perstep_decode",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "caption" => Ok(Task::Caption),
            "encode_decode" => Ok(Task::EncodeDecode),
            "perstep_decode" => Ok(Task::PerstepDecode),
            other => Err(Error::Spec(format!("unknown task '{other}'"))),
        }
    }

    pub fn uses_tokens(self) -> bool {
        !matches!(self, Task::Classify)
    }
}

/// The three caption stacks: one layer, two layers with the image at the
/// bottom, two layers with the image entering the second layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionVariant {
    OneLayer,
    TwoUnfactored,
    TwoFactored,
}

impl CaptionVariant {
    pub const ALL: [CaptionVariant; 3] = [
        CaptionVariant::OneLayer,
        CaptionVariant::TwoUnfactored,
        CaptionVariant::TwoFactored,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptionVariant::OneLayer => "lrcn1u",
            CaptionVariant::TwoUnfactored => "lrcn2u",
            CaptionVariant::TwoFactored => "lrcn2f",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CaptionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown caption variant '{s}'")))
    }

    fn layers_and_injection(self) -> (usize, bool, usize) {
        match self {
            CaptionVariant::OneLayer => (1, false, 1),
            CaptionVariant::TwoUnfactored => (2, false, 1),
            CaptionVariant::TwoFactored => (2, true, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfMode {
    /// Each block is a one-hot label.
    Max,
    /// Each block is a probability distribution.
    Prob,
}

/// Block structure of a semantic input vector for `PerstepDecode`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfLayout {
    pub blocks: Vec<usize>,
    pub mode: CrfMode,
}

impl CrfLayout {
    pub fn len(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Checks that `v` is a concatenation of valid blocks.
    pub fn validate(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::Shape {
                op: "crf input",
                left: self.blocks.clone(),
                right: vec![v.len()],
            });
        }
        let mut off = 0;
        for (b, &size) in self.blocks.iter().enumerate() {
            let block = &v[off..off + size];
            off += size;
            match self.mode {
                CrfMode::Max => {
                    let ones = block.iter().filter(|&&x| x == 1.0).count();
                    let zeros = block.iter().filter(|&&x| x == 0.0).count();
                    if ones != 1 || zeros != size - 1 {
                        return Err(Error::Invalid(format!("CRF-max block {b} is not one-hot")));
                    }
                }
                CrfMode::Prob => {
                    let s: f64 = block.iter().sum();
                    if block.iter().any(|&x| !(0.0..=1.0 + SIMPLEX_TOL).contains(&x)) || (s - 1.0).abs() > SIMPLEX_TOL {
                        return Err(Error::Invalid(format!("CRF-prob block {b} sums to {s}, not 1")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Converts probability blocks into one-hot blocks of their argmax.
    pub fn to_max(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        let mut off = 0;
        for &size in &self.blocks {
            let k = crate::tensor::argmax(&v[off..off + size]);
            out[off + k] = 1.0;
            off += size;
        }
        out
    }
}

/// Topology descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub task: Task,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub factored: bool,
    /// 1-based layer that receives the visual vector.
    pub injection_layer: usize,
    pub extractor: FeatureExtractorSpec,
    /// Word embedding width; unused by `Classify`.
    pub embed_dim: usize,
    /// Label count for `Classify`.
    pub num_classes: usize,
    /// Output vocabulary for token tasks.
    pub vocab: Option<Vocabulary>,
    /// Input layout for `PerstepDecode`.
    pub crf: Option<CrfLayout>,
}

impl ModelSpec {
    pub fn classify(cell: CellKind, layers: usize, hidden: usize, extractor: FeatureExtractorSpec, num_classes: usize) -> Self {
        ModelSpec {
            task: Task::Classify,
            cell,
            layers,
            hidden,
            factored: false,
            injection_layer: 1,
            extractor,
            embed_dim: 0,
            num_classes,
            vocab: None,
            crf: None,
        }
    }

    pub fn caption(
        variant: CaptionVariant,
        cell: CellKind,
        hidden: usize,
        embed_dim: usize,
        extractor: FeatureExtractorSpec,
        vocab: Vocabulary,
    ) -> Self {
        let (layers, factored, injection_layer) = variant.layers_and_injection();
        ModelSpec {
            task: Task::Caption,
            cell,
            layers,
            hidden,
            factored,
            injection_layer,
            extractor,
            embed_dim,
            num_classes: 0,
            vocab: Some(vocab),
            crf: None,
        }
    }

    pub fn encode_decode(
        cell: CellKind,
        layers: usize,
        hidden: usize,
        embed_dim: usize,
        extractor: FeatureExtractorSpec,
        vocab: Vocabulary,
    ) -> Self {
        ModelSpec {
            task: Task::EncodeDecode,
            cell,
            layers,
            hidden,
            factored: false,
            injection_layer: 1,
            extractor,
            embed_dim,
            num_classes: 0,
            vocab: Some(vocab),
            crf: None,
        }
    }

    pub fn perstep_decode(cell: CellKind, layers: usize, hidden: usize, embed_dim: usize, crf: CrfLayout, vocab: Vocabulary) -> Self {
        ModelSpec {
            task: Task::PerstepDecode,
            cell,
            layers,
            hidden,
            factored: false,
            injection_layer: 1,
            extractor: FeatureExtractorSpec::identity(crf.len()),
            embed_dim,
            num_classes: 0,
            vocab: Some(vocab),
            crf: Some(crf),
        }
    }

    /// The caption variant this spec describes, if any.
    pub fn caption_variant(&self) -> Option<CaptionVariant> {
        match (self.task, self.layers, self.factored) {
            (Task::Caption, 1, false) => Some(CaptionVariant::OneLayer),
            (Task::Caption, 2, false) => Some(CaptionVariant::TwoUnfactored),
            (Task::Caption, 2, true) => Some(CaptionVariant::TwoFactored),
            _ => None,
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.extractor.output_len()
    }

    pub fn output_size(&self) -> usize {
        match &self.vocab {
            Some(v) if self.task.uses_tokens() => v.len(),
            _ => self.num_classes,
        }
    }

    fn embed_width(&self) -> usize {
        if self.task.uses_tokens() {
            self.embed_dim
        } else {
            0
        }
    }

    /// Input width of 0-based layer `l`.
    pub fn layer_input_size(&self, l: usize) -> usize {
        let visual = if self.injection_layer == l + 1 { self.visual_dim() } else { 0 };
        if l == 0 {
            self.embed_width() + visual
        } else {
            self.hidden + visual
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.layers == 0 || self.hidden == 0 {
            return bad("layer count and hidden size must be positive");
        }
        if self.injection_layer == 0 || self.injection_layer > self.layers {
            return bad("injection layer outside 1..=L");
        }
        if self.factored != (self.injection_layer >= 2) {
            return bad("factored models inject at layer >= 2, unfactored at layer 1");
        }
        if self.factored && self.layers < 2 {
            return bad("factored models need at least two layers");
        }
        match self.task {
            Task::Classify => {
                if self.num_classes == 0 {
                    return bad("classification needs at least one class");
                }
                if self.factored {
                    return bad("classification is unfactored");
                }
            }
            Task::Caption => {
                if self.caption_variant().is_none() {
                    return bad("caption models are one layer, or two layers factored or unfactored");
                }
            }
            Task::EncodeDecode | Task::PerstepDecode => {
                if self.factored {
                    return bad("sequence decoders are unfactored");
                }
            }
        }
        if self.task.uses_tokens() {
            match &self.vocab {
                None => return bad("token tasks need a vocabulary"),
                Some(v) if v.bos() == v.eos() => return bad("BOS and EOS must differ"),
                _ => {}
            }
            if self.embed_dim == 0 {
                return bad("token tasks need a positive embedding width");
            }
        }
        if self.task == Task::PerstepDecode {
            match &self.crf {
                None => return bad("perstep decoding needs a CRF layout"),
                Some(c) if c.len() != self.extractor.input_len() => return bad("CRF layout does not match extractor input"),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Word embedding `W_e` of shape `d_e × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub w_e: Tensor,
}

impl EmbeddingParams {
    pub fn vocab_size(&self) -> usize {
        self.w_e.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.w_e.shape()[0]
    }

    /// Column `token` of `W_e`, i.e. `W_e · onehot(token)`.
    pub fn embed(&self, token: usize) -> Result<Tensor> {
        let k = self.vocab_size();
        if token >= k {
            return Err(Error::TokenRange { index: token, size: k });
        }
        Ok(Tensor::vector((0..self.dim()).map(|r| self.w_e.data()[r * k + token]).collect()))
    }
}

/// Embedding lookup for one token.
pub fn embed(e: &EmbeddingParams, token: usize) -> Result<Tensor> {
    e.embed(token)
}

/// Linear prediction layer `W_z h + b_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionParams {
    pub w_z: Tensor,
    pub b_z: Tensor,
}

impl PredictionParams {
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.b_z.data().to_vec();
        gemv_acc(&self.w_z, h, &mut z);
        z
    }
}

/// What a sequence consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    /// One raw frame per time step.
    Frames(Vec<Tensor>),
    /// A single image, repeated at every step.
    Static(Tensor),
}

/// What a sequence is trained to predict.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// One label for the whole sequence, predicted at every step.
    Class(usize),
    /// A label per step; `None` steps carry no loss.
    PerStep(Vec<Option<usize>>),
    /// Output tokens ending in `<EOS>`, teacher forced.
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Input,
    pub target: Target,
}

/// One unrolled time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub token: Option<usize>,
    /// Index into the sequence's extractor outputs.
    pub visual: Option<usize>,
    pub target: Option<usize>,
    /// Whether the step produces a distribution at all.
    pub emits: bool,
}

/// Negative log-likelihood of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLoss {
    pub total: f64,
    /// `-log p(target)` per unrolled step, zero where no target.
    pub per_step: Vec<f64>,
    pub count: usize,
}

/// Inverted-dropout masks drawn per layer input during training.
pub struct Dropout<'a, R: Rng> {
    pub p: f64,
    pub rng: &'a mut R,
}

/// Mask with entries 0 (probability `p`) or `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

struct StepTrace {
    caches: Vec<CellCache>,
    masks: Vec<Option<Vec<f64>>>,
    top_h: Vec<f64>,
    probs: Option<Vec<f64>>,
}

/// A full model: extractor `V`, embedding, stack and prediction layer `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lrcn {
    pub spec: ModelSpec,
    pub extractor: FeatureExtractor,
    pub embedding: Option<EmbeddingParams>,
    pub layers: Vec<Cell>,
    pub prediction: PredictionParams,
}

impl Lrcn {
    /// Randomly initialized model.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let extractor = spec.extractor.build(rng)?;
        let k = spec.output_size();
        let embedding = spec.task.uses_tokens().then(|| EmbeddingParams {
            w_e: Tensor::uniform(&[spec.embed_dim, k], 1.0 / (spec.embed_dim as f64).sqrt(), rng),
        });
        let layers = (0..spec.layers)
            .map(|l| Cell::init(spec.cell, spec.layer_input_size(l), spec.hidden, rng))
            .collect();
        let prediction = PredictionParams {
            w_z: Tensor::uniform(&[k, spec.hidden], 1.0 / (spec.hidden as f64).sqrt(), rng),
            b_z: Tensor::zeros(&[k]),
        };
        Ok(Lrcn {
            spec,
            extractor,
            embedding,
            layers,
            prediction,
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let extractor = spec.extractor.build_zeros()?;
        let k = spec.output_size();
        let embedding = spec.task.uses_tokens().then(|| EmbeddingParams {
            w_e: Tensor::zeros(&[spec.embed_dim, k]),
        });
        let layers = (0..spec.layers)
            .map(|l| Cell::zeros(spec.cell, spec.layer_input_size(l), spec.hidden))
            .collect();
        let prediction = PredictionParams {
            w_z: Tensor::zeros(&[k, spec.hidden]),
            b_z: Tensor::zeros(&[k]),
        };
        Ok(Lrcn {
            spec,
            extractor,
            embedding,
            layers,
            prediction,
        })
    }

    /// Same structure, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.blocks_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named parameter blocks in a fixed order: extractor, embedding,
    /// layers bottom-up, prediction.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.extractor.blocks() {
            out.push((format!("phi.{n}"), t));
        }
        if let Some(e) = &self.embedding {
            out.push(("embed.w_e".into(), &e.w_e));
        }
        for (l, cell) in self.layers.iter().enumerate() {
            for (n, t) in cell.blocks() {
                out.push((format!("layer{}.{n}", l + 1), t));
            }
        }
        out.push(("pred.w_z".into(), &self.prediction.w_z));
        out.push(("pred.b_z".into(), &self.prediction.b_z));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.extractor.blocks_mut() {
            out.push((format!("phi.{n}"), t));
        }
        if let Some(e) = &mut self.embedding {
            out.push(("embed.w_e".into(), &mut e.w_e));
        }
        for (l, cell) in self.layers.iter_mut().enumerate() {
            for (n, t) in cell.blocks_mut() {
                out.push((format!("layer{}.{n}", l + 1), t));
            }
        }
        out.push(("pred.w_z".into(), &mut self.prediction.w_z));
        out.push(("pred.b_z".into(), &mut self.prediction.b_z));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    /// Names of every hidden-to-hidden block in the stack.
    pub fn recurrent_block_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, c)| c.recurrent_block_names().iter().map(move |n| format!("layer{}.{n}", l + 1)))
            .collect()
    }

    /// Zeroes the hidden-to-hidden weights. LSTM memory cells still carry
    /// over; see [`Lrcn::make_stateless`].
    pub fn zero_recurrent(&mut self) {
        let names = self.recurrent_block_names();
        for (n, t) in self.blocks_mut() {
            if names.contains(&n) {
                t.fill(0.0);
            }
        }
    }

    /// Blocks fixed by [`Lrcn::make_stateless`]: the hidden-to-hidden
    /// weights plus, for LSTM layers, the forget gate's input weights and
    /// bias.
    pub fn stateless_block_names(&self) -> Vec<String> {
        let mut names = self.recurrent_block_names();
        for (l, c) in self.layers.iter().enumerate() {
            if c.is_lstm() {
                names.push(format!("layer{}.w_xf", l + 1));
                names.push(format!("layer{}.b_f", l + 1));
            }
        }
        names
    }

    /// Cuts every path between time steps: hidden-to-hidden weights become
    /// zero and LSTM forget gates are shut (`f = 0` exactly), so each step's
    /// output depends only on that step's input. Freeze
    /// [`Lrcn::stateless_block_names`] to keep it that way during training.
    pub fn make_stateless(&mut self) {
        self.zero_recurrent();
        for (n, t) in self.blocks_mut() {
            if n.ends_with(".w_xf") {
                t.fill(0.0);
            } else if n.ends_with(".b_f") {
                t.fill(CLOSED_FORGET_BIAS);
            }
        }
    }

    pub fn vocab(&self) -> Option<&Vocabulary> {
        self.spec.vocab.as_ref()
    }

    fn bos_eos(&self) -> Result<(usize, usize)> {
        let v = self
            .vocab()
            .ok_or_else(|| Error::Spec(format!("{} model has no vocabulary", self.spec.task.name())))?;
        Ok((v.bos(), v.eos()))
    }

    fn require(&self, task: Task) -> Result<()> {
        if self.spec.task != task {
            return Err(Error::Spec(format!(
                "operation needs a {} model, got {}",
                task.name(),
                self.spec.task.name()
            )));
        }
        Ok(())
    }

    /// Unrolls `ex` into extractor inputs and steps.
    pub fn plan<'e>(&self, ex: &'e Example) -> Result<(Vec<&'e Tensor>, Vec<Step>)> {
        let k = self.spec.output_size();
        let check = |t: usize| -> Result<usize> {
            if t >= k {
                if self.spec.task == Task::Classify {
                    Err(Error::LabelRange { label: t, classes: k })
                } else {
                    Err(Error::TokenRange { index: t, size: k })
                }
            } else {
                Ok(t)
            }
        };
        match (self.spec.task, &ex.input, &ex.target) {
            (Task::Classify, Input::Frames(frames), target) => {
                if frames.is_empty() {
                    return Err(Error::Empty("classification sequence"));
                }
                let labels: Vec<Option<usize>> = match target {
                    Target::Class(c) => vec![Some(check(*c)?); frames.len()],
                    Target::PerStep(v) => {
                        if v.len() != frames.len() {
                            return Err(Error::Shape {
                                op: "per-step labels",
                                left: vec![frames.len()],
                                right: vec![v.len()],
                            });
                        }
                        v.iter().map(|l| l.map(check).transpose()).collect::<Result<_>>()?
                    }
                    Target::Tokens(_) => return Err(Error::Invalid("classification targets are labels".into())),
                };
                let steps = labels
                    .into_iter()
                    .enumerate()
                    .map(|(t, target)| Step {
                        token: None,
                        visual: Some(t),
                        target,
                        emits: true,
                    })
                    .collect();
                Ok((frames.iter().collect(), steps))
            }
            (Task::Caption | Task::PerstepDecode, Input::Static(image), Target::Tokens(tokens)) => {
                let (bos, eos) = self.bos_eos()?;
                if tokens.is_empty() {
                    return Err(Error::Empty("caption"));
                }
                if *tokens.last().unwrap() != eos {
                    return Err(Error::Invalid("caption must end with <EOS>".into()));
                }
                if let Some(crf) = &self.spec.crf {
                    crf.validate(image.data())?;
                }
                let mut prev = bos;
                let mut steps = Vec::with_capacity(tokens.len());
                for &y in tokens {
                    steps.push(Step {
                        token: Some(prev),
                        visual: Some(0),
                        target: Some(check(y)?),
                        emits: true,
                    });
                    prev = y;
                }
                Ok((vec![image], steps))
            }
            (Task::EncodeDecode, Input::Frames(frames), Target::Tokens(tokens)) => {
                let (bos, eos) = self.bos_eos()?;
                if frames.is_empty() {
                    return Err(Error::Empty("encoder input"));
                }
                if tokens.is_empty() || *tokens.last().unwrap() != eos {
                    return Err(Error::Invalid("decoder target must be non-empty and end with <EOS>".into()));
                }
                let t_in = frames.len();
                let mut steps: Vec<Step> = (0..t_in - 1)
                    .map(|t| Step {
                        token: None,
                        visual: Some(t),
                        target: None,
                        emits: false,
                    })
                    .collect();
                let mut prev = bos;
                for (j, &y) in tokens.iter().enumerate() {
                    steps.push(Step {
                        token: Some(prev),
                        visual: (j == 0).then_some(t_in - 1),
                        target: Some(check(y)?),
                        emits: true,
                    });
                    prev = y;
                }
                Ok((frames.iter().collect(), steps))
            }
            (task, _, _) => Err(Error::Invalid(format!("input/target kinds do not fit a {} model", task.name()))),
        }
    }

    /// Concatenated input of 0-based layer `l`.
    fn layer_input(&self, l: usize, token: Option<usize>, visual: Option<&[f64]>, below: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.spec.layer_input_size(l));
        if l == 0 {
            if let Some(e) = &self.embedding {
                match token {
                    Some(t) => x.extend_from_slice(e.embed(t)?.data()),
                    None => x.resize(e.dim(), 0.0),
                }
            }
        } else {
            x.extend_from_slice(below.expect("layer above the first has an input from below"));
        }
        if self.spec.injection_layer == l + 1 {
            let d = self.spec.visual_dim();
            match visual {
                Some(v) => {
                    if v.len() != d {
                        return Err(Error::Shape {
                            op: "visual input",
                            left: vec![d],
                            right: vec![v.len()],
                        });
                    }
                    x.extend_from_slice(v)
                }
                None => x.resize(x.len() + d, 0.0),
            }
        }
        Ok(x)
    }

    fn forward_step<R: Rng>(
        &self,
        state: &RecurrentState,
        token: Option<usize>,
        visual: Option<&[f64]>,
        emits: bool,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<(RecurrentState, Option<Vec<f64>>, StepTrace)> {
        let mut next = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut below: Option<Vec<f64>> = None;
        for (l, cell) in self.layers.iter().enumerate() {
            let mut x = self.layer_input(l, token, visual, below.as_deref())?;
            let mask = match dropout {
                Some(d) if d.p > 0.0 => {
                    let m = dropout_mask(x.len(), d.p, &mut *d.rng);
                    x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            let (layer_state, cache) = cell.step(&x, &state.layers[l])?;
            below = Some(layer_state.h.data().to_vec());
            next.push(layer_state);
            caches.push(cache);
            masks.push(mask);
        }
        let top_h = below.expect("at least one layer");
        let logits = emits.then(|| self.prediction.logits(&top_h));
        let probs = logits.as_deref().map(softmax_slice);
        Ok((
            RecurrentState { layers: next },
            logits,
            StepTrace {
                caches,
                masks,
                top_h,
                probs,
            },
        ))
    }

    /// One inference step: returns output logits (if the step emits) and the
    /// next state.
    pub fn step_logits(
        &self,
        state: &RecurrentState,
        token: Option<usize>,
        visual: Option<&[f64]>,
    ) -> Result<(Vec<f64>, RecurrentState)> {
        let (next, logits, _) = self.forward_step::<rand_chacha::ChaCha8Rng>(state, token, visual, true, &mut None)?;
        Ok((logits.expect("emitting step"), next))
    }

    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState::zeros(&self.layers)
    }

    /// Extractor output for one frame or image.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.forward(x).map(|(y, _)| y)
    }

    /// Per-step output distributions of a classification sequence.
    pub fn step_distributions(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        self.require(Task::Classify)?;
        if frames.is_empty() {
            return Err(Error::Empty("classification sequence"));
        }
        let mut state = self.zero_state();
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let v = self.features(frame)?;
            let (logits, next) = self.step_logits(&state, None, Some(v.data()))?;
            out.push(Tensor::vector(softmax_slice(&logits)));
            state = next;
        }
        Ok(out)
    }

    /// Late fusion: the arithmetic mean of the per-step distributions.
    pub fn classify_sequence(&self, frames: &[Tensor]) -> Result<Tensor> {
        let dists = self.step_distributions(frames)?;
        let mut avg = Tensor::zeros(&[self.spec.output_size()]);
        for d in &dists {
            avg.axpy(1.0, d);
        }
        avg.scale(1.0 / dists.len() as f64);
        Ok(avg)
    }

    /// One caption step. `img_feat` is the extractor output, repeated by the
    /// caller at every step.
    pub fn caption_step(&self, img_feat: &Tensor, prev_token: usize, state: &RecurrentState) -> Result<(Tensor, RecurrentState)> {
        self.require(Task::Caption)?;
        self.token_step(img_feat.data(), prev_token, state)
    }

    fn token_step(&self, visual: &[f64], prev_token: usize, state: &RecurrentState) -> Result<(Tensor, RecurrentState)> {
        let k = self.spec.output_size();
        if prev_token >= k {
            return Err(Error::TokenRange { index: prev_token, size: k });
        }
        let (logits, next) = self.step_logits(state, Some(prev_token), Some(visual))?;
        Ok((Tensor::vector(softmax_slice(&logits)), next))
    }

    /// One step of a per-step-input decoder. `visual_vec` is validated
    /// against the model's CRF layout.
    pub fn perstep_decode_step(&self, visual_vec: &Tensor, prev_token: usize, state: &RecurrentState) -> Result<(Tensor, RecurrentState)> {
        self.require(Task::PerstepDecode)?;
        if let Some(crf) = &self.spec.crf {
            crf.validate(visual_vec.data())?;
        }
        let v = self.features(visual_vec)?;
        self.token_step(v.data(), prev_token, state)
    }

    /// `Σ_t log p(y_t | y_<t, image)` with `y_0 = <BOS>`. The image goes
    /// through the extractor first.
    pub fn caption_log_likelihood(&self, image: &Tensor, caption: &[usize]) -> Result<f64> {
        if !matches!(self.spec.task, Task::Caption | Task::PerstepDecode) {
            return Err(Error::Spec("caption likelihood needs a caption or perstep model".into()));
        }
        let ex = Example {
            input: Input::Static(image.clone()),
            target: Target::Tokens(caption.to_vec()),
        };
        Ok(-self.sequence_loss(&ex)?.total)
    }

    /// Runs the encoder over `input_seq` and decodes greedily, returning the
    /// output distribution at every decoder step (through `<EOS>` or
    /// `max_out_len` steps).
    pub fn encode_decode(&self, input_seq: &[Tensor], max_out_len: usize) -> Result<Vec<Tensor>> {
        self.require(Task::EncodeDecode)?;
        let ctx = self.condition(&Input::Frames(input_seq.to_vec()))?;
        let (_, eos) = self.bos_eos()?;
        let mut state = ctx.start_state().clone();
        let mut prev = ctx.bos();
        let mut out = Vec::new();
        for k in 0..max_out_len {
            let (logits, next) = ctx.step(&state, prev, k)?;
            let p = softmax_slice(&logits);
            prev = crate::tensor::argmax(&p);
            out.push(Tensor::vector(p));
            state = next;
            if prev == eos {
                break;
            }
        }
        Ok(out)
    }

    /// Everything a decoder needs to generate from `input`.
    pub fn condition(&self, input: &Input) -> Result<Conditioned<'_>> {
        let (bos, eos) = self.bos_eos()?;
        match (self.spec.task, input) {
            (Task::Caption, Input::Static(x)) => Ok(Conditioned {
                model: self,
                start: self.zero_state(),
                visual: self.features(x)?.into_data(),
                every_step: true,
                bos,
                eos,
            }),
            (Task::PerstepDecode, Input::Static(x)) => {
                if let Some(crf) = &self.spec.crf {
                    crf.validate(x.data())?;
                }
                Ok(Conditioned {
                    model: self,
                    start: self.zero_state(),
                    visual: self.features(x)?.into_data(),
                    every_step: true,
                    bos,
                    eos,
                })
            }
            (Task::EncodeDecode, Input::Frames(frames)) => {
                let (last, head) = frames.split_last().ok_or(Error::Empty("encoder input"))?;
                let mut state = self.zero_state();
                for frame in head {
                    let v = self.features(frame)?;
                    let (next, _, _) =
                        self.forward_step::<rand_chacha::ChaCha8Rng>(&state, None, Some(v.data()), false, &mut None)?;
                    state = next;
                }
                Ok(Conditioned {
                    model: self,
                    start: state,
                    visual: self.features(last)?.into_data(),
                    every_step: false,
                    bos,
                    eos,
                })
            }
            (task, _) => Err(Error::Invalid(format!("cannot decode from this input with a {} model", task.name()))),
        }
    }

    /// Loss of one sequence without gradients.
    pub fn sequence_loss(&self, ex: &Example) -> Result<SequenceLoss> {
        self.run::<rand_chacha::ChaCha8Rng>(ex, None, None)
    }

    /// Loss of one sequence; parameter gradients are accumulated into
    /// `grads`, which must come from [`Lrcn::zeros_like`].
    pub fn loss_and_grad<R: Rng>(&self, ex: &Example, dropout: Option<Dropout<'_, R>>, grads: &mut Lrcn) -> Result<SequenceLoss> {
        self.run(ex, dropout, Some(grads))
    }

    fn run<R: Rng>(&self, ex: &Example, mut dropout: Option<Dropout<'_, R>>, grads: Option<&mut Lrcn>) -> Result<SequenceLoss> {
        let (raw, steps) = self.plan(ex)?;
        let mut phi_out = Vec::with_capacity(raw.len());
        let mut phi_caches = Vec::with_capacity(raw.len());
        for x in raw {
            let (y, cache) = self.extractor.forward(x)?;
            phi_out.push(y.into_data());
            phi_caches.push(cache);
        }

        let mut state = self.zero_state();
        let mut traces = Vec::with_capacity(steps.len());
        let mut per_step = Vec::with_capacity(steps.len());
        let mut total = 0.0;
        let mut count = 0;
        for step in &steps {
            let visual = step.visual.map(|i| phi_out[i].as_slice());
            let (next, logits, trace) = self.forward_step(&state, step.token, visual, step.emits, &mut dropout)?;
            let nll = match (step.target, &logits) {
                (Some(y), Some(z)) => {
                    count += 1;
                    -log_softmax_slice(z)[y]
                }
                _ => 0.0,
            };
            total += nll;
            per_step.push(nll);
            state = next;
            if grads.is_some() {
                traces.push(trace);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("sequence loss".into()));
        }

        if let Some(grads) = grads {
            self.backward(&steps, &traces, &phi_out, &phi_caches, grads)?;
        }
        Ok(SequenceLoss { total, per_step, count })
    }

    fn backward(
        &self,
        steps: &[Step],
        traces: &[StepTrace],
        phi_out: &[Vec<f64>],
        phi_caches: &[PhiCache],
        grads: &mut Lrcn,
    ) -> Result<()> {
        let depth = self.layers.len();
        let n = self.spec.hidden;
        let k = self.spec.output_size();
        let d_e = self.embedding.as_ref().map_or(0, |e| e.dim());
        let d_v = self.spec.visual_dim();
        let inject = self.spec.injection_layer - 1;

        let mut dh_carry = vec![vec![0.0; n]; depth];
        let mut dc_carry = vec![vec![0.0; n]; depth];
        let mut d_visual: Vec<Vec<f64>> = phi_out.iter().map(|v| vec![0.0; v.len()]).collect();

        for (step, trace) in steps.iter().zip(traces).rev() {
            let mut from_above = vec![0.0; n];
            if let (Some(y), Some(p)) = (step.target, &trace.probs) {
                let mut dz = p.clone();
                dz[y] -= 1.0;
                ger_acc(&mut grads.prediction.w_z, &dz, &trace.top_h);
                for (b, d) in grads.prediction.b_z.data_mut().iter_mut().zip(&dz) {
                    *b += d;
                }
                gemv_t_acc(&self.prediction.w_z, &dz, &mut from_above);
            }
            for l in (0..depth).rev() {
                let cell = &self.layers[l];
                let dh: Vec<f64> = from_above.iter().zip(&dh_carry[l]).map(|(a, b)| a + b).collect();
                let mut dx = vec![0.0; cell.input_size()];
                let mut dh_prev = vec![0.0; n];
                let mut dc_prev = vec![0.0; n];
                cell.backward_into(
                    &trace.caches[l],
                    &dh,
                    &dc_carry[l],
                    &mut grads.layers[l],
                    &mut dx,
                    &mut dh_prev,
                    &mut dc_prev,
                )?;
                if let Some(mask) = &trace.masks[l] {
                    dx.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
                dh_carry[l] = dh_prev;
                dc_carry[l] = dc_prev;

                let lead = if l == 0 { d_e } else { n };
                if l == inject {
                    if let Some(vi) = step.visual {
                        for (acc, d) in d_visual[vi].iter_mut().zip(&dx[lead..lead + d_v]) {
                            *acc += d;
                        }
                    }
                }
                if l == 0 {
                    if let (Some(tok), Some(ge)) = (step.token, grads.embedding.as_mut()) {
                        let w = ge.w_e.data_mut();
                        for (r, d) in dx[..d_e].iter().enumerate() {
                            w[r * k + tok] += d;
                        }
                    }
                } else {
                    from_above = dx[..n].to_vec();
                }
            }
        }

        for ((cache, d), _) in phi_caches.iter().zip(&d_visual).zip(phi_out) {
            self.extractor.backward(cache, d, &mut grads.extractor)?;
        }
        Ok(())
    }
}

/// A model primed on one input, ready to generate tokens.
pub struct Conditioned<'m> {
    model: &'m Lrcn,
    start: RecurrentState,
    visual: Vec<f64>,
    every_step: bool,
    bos: usize,
    eos: usize,
}

impl Conditioned<'_> {
    pub fn start_state(&self) -> &RecurrentState {
        &self.start
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn vocab_size(&self) -> usize {
        self.model.spec.output_size()
    }

    /// Logits for decoder step `k` (0-based) after `prev_token`.
    pub fn step(&self, state: &RecurrentState, prev_token: usize, k: usize) -> Result<(Vec<f64>, RecurrentState)> {
        let size = self.vocab_size();
        if prev_token >= size {
            return Err(Error::TokenRange { index: prev_token, size });
        }
        let visual = (self.every_step || k == 0).then_some(self.visual.as_slice());
        self.model.step_logits(state, Some(prev_token), visual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::lstm_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn caption_spec(variant: CaptionVariant) -> ModelSpec {
        ModelSpec::caption(
            variant,
            CellKind::Lstm,
            4,
            3,
            FeatureExtractorSpec::linear(5, 3),
            Vocabulary::symbols(3),
        )
    }

    fn assert_simplex(p: &Tensor) {
        assert!(p.data().iter().all(|&v| v >= 0.0));
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut s = caption_spec(CaptionVariant::TwoFactored);
        assert!(s.validate().is_ok());
        s.injection_layer = 1;
        assert!(s.validate().is_err());
        let mut s = caption_spec(CaptionVariant::OneLayer);
        s.layers = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::classify(CellKind::Lstm, 1, 4, FeatureExtractorSpec::identity(3), 2);
        s.factored = true;
        assert!(s.validate().is_err());
    }

    #[test]
    fn embed_is_column_lookup() {
        let e = EmbeddingParams { w_e: Tensor::eye(4) };
        assert_eq!(embed(&e, 2).unwrap(), Tensor::one_hot(4, 2));
        let w = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        let e = EmbeddingParams { w_e: w.clone() };
        assert_eq!(embed(&e, 2).unwrap().data(), &[2.0, 6.0, 10.0]);
        let explicit = crate::tensor::matvec(&w, Tensor::one_hot(4, 1).data()).unwrap();
        assert_eq!(embed(&e, 1).unwrap(), explicit);
        assert_eq!(embed(&e, 4), Err(Error::TokenRange { index: 4, size: 4 }));
    }

    #[test]
    fn classify_single_step_equals_softmax() {
        let spec = ModelSpec::classify(CellKind::Lstm, 1, 4, FeatureExtractorSpec::linear(3, 3), 5);
        let m = Lrcn::init(spec, &mut rng(1)).unwrap();
        let x = Tensor::uniform(&[3], 1.0, &mut rng(2));
        let avg = m.classify_sequence(std::slice::from_ref(&x)).unwrap();
        assert_eq!(avg, m.step_distributions(&[x]).unwrap()[0]);
        assert_simplex(&avg);
        assert_eq!(m.classify_sequence(&[]), Err(Error::Empty("classification sequence")));
    }

    #[test]
    fn classify_averages_steps() {
        let spec = ModelSpec::classify(CellKind::Lstm, 2, 4, FeatureExtractorSpec::identity(3), 4);
        let m = Lrcn::init(spec, &mut rng(3)).unwrap();
        let mut r = rng(4);
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        let dists = m.step_distributions(&frames).unwrap();
        let avg = m.classify_sequence(&frames).unwrap();
        for c in 0..4 {
            let want = (dists[0].data()[c] + dists[1].data()[c] + dists[2].data()[c]) / 3.0;
            assert!((avg.data()[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn stateless_identical_frames_average_equals_single_step() {
        // Zero stack weights with a nonzero prediction bias: every step sees
        // the same (zero) hidden state.
        let spec = ModelSpec::classify(CellKind::Rnn, 1, 3, FeatureExtractorSpec::identity(2), 3);
        let mut m = Lrcn::zeros(spec).unwrap();
        m.prediction.b_z = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let f = Tensor::vector(vec![0.5, 0.5]);
        let one = m.classify_sequence(std::slice::from_ref(&f)).unwrap();
        let many = m.classify_sequence(&vec![f; 5]).unwrap();
        for (a, b) in one.data().iter().zip(many.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stateless_lstm_steps_ignore_history() {
        let spec = ModelSpec::classify(CellKind::Lstm, 2, 4, FeatureExtractorSpec::linear(3, 3), 3);
        let mut m = Lrcn::init(spec, &mut rng(8)).unwrap();
        m.make_stateless();
        let frames: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[3], 1.0, &mut rng(9))).collect::<Vec<_>>();
        let frames: Vec<Tensor> = frames.iter().enumerate().map(|(i, f)| f.map(|x| x * (i + 1) as f64)).collect();
        let seq = m.step_distributions(&frames).unwrap();
        for (f, p) in frames.iter().zip(&seq) {
            let alone = m.step_distributions(std::slice::from_ref(f)).unwrap();
            assert_eq!(alone[0].data(), p.data());
        }
        assert_eq!(m.stateless_block_names().len(), 2 * 6);
    }

    #[test]
    fn zero_caption_model_is_uniform() {
        let m = Lrcn::zeros(caption_spec(CaptionVariant::OneLayer)).unwrap();
        let k = m.spec.output_size();
        let feat = Tensor::vector(vec![0.4, -0.1, 0.9]);
        let (p, _) = m.caption_step(&feat, 0, &m.zero_state()).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / k as f64).abs() < 1e-15);
        }
        let image = Tensor::uniform(&[5], 1.0, &mut rng(5));
        let eos = m.vocab().unwrap().eos();
        let ll = m.caption_log_likelihood(&image, &[0, 1, eos]).unwrap();
        assert!((ll - 3.0 * (1.0 / k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn caption_step_rejects_bad_token() {
        let m = Lrcn::zeros(caption_spec(CaptionVariant::OneLayer)).unwrap();
        let k = m.spec.output_size();
        let err = m.caption_step(&Tensor::zeros(&[3]), k, &m.zero_state()).unwrap_err();
        assert_eq!(err, Error::TokenRange { index: k, size: k });
    }

    #[test]
    fn factored_lower_layer_ignores_image() {
        let m = Lrcn::init(caption_spec(CaptionVariant::TwoFactored), &mut rng(6)).unwrap();
        let a = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let b = Tensor::vector(vec![-0.3, 0.7, 3.0]);
        let (mut sa, mut sb) = (m.zero_state(), m.zero_state());
        for tok in [m.vocab().unwrap().bos(), 0, 2, 1] {
            let (_, na) = m.caption_step(&a, tok, &sa).unwrap();
            let (_, nb) = m.caption_step(&b, tok, &sb).unwrap();
            assert_eq!(na.layers[0], nb.layers[0]);
            assert_ne!(na.layers[1], nb.layers[1]);
            sa = na;
            sb = nb;
        }
    }

    #[test]
    fn two_layer_unfactored_step_is_manual_composition() {
        let m = Lrcn::init(caption_spec(CaptionVariant::TwoUnfactored), &mut rng(7)).unwrap();
        let feat = Tensor::vector(vec![0.2, -0.4, 0.6]);
        let tok = 1;
        let (p, _) = m.caption_step(&feat, tok, &m.zero_state()).unwrap();

        let e = m.embedding.as_ref().unwrap().embed(tok).unwrap();
        let mut x = e.into_data();
        x.extend_from_slice(feat.data());
        let Cell::Lstm(l1) = &m.layers[0] else { panic!() };
        let Cell::Lstm(l2) = &m.layers[1] else { panic!() };
        let z = Tensor::zeros(&[4]);
        let (h1, _, _) = lstm_step(l1, &Tensor::vector(x), &z, &z).unwrap();
        let (h2, _, _) = lstm_step(l2, &h1, &z, &z).unwrap();
        let want = softmax_slice(&m.prediction.logits(h2.data()));
        for (a, b) in p.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn caption_likelihood_stepwise_oracle() {
        let spec = ModelSpec::caption(
            CaptionVariant::OneLayer,
            CellKind::Lstm,
            3,
            2,
            FeatureExtractorSpec::identity(2),
            Vocabulary::symbols(2),
        );
        assert_eq!(spec.output_size(), 4);
        let m = Lrcn::init(spec, &mut rng(8)).unwrap();
        let img = Tensor::vector(vec![0.3, -0.8]);
        let v = m.vocab().unwrap().clone();
        let caption = [1, 0, v.eos()];
        let mut state = m.zero_state();
        let mut prev = v.bos();
        let mut manual = 0.0;
        for &y in &caption {
            let (p, next) = m.caption_step(&img, prev, &state).unwrap();
            manual += p.data()[y].ln();
            state = next;
            prev = y;
        }
        let ll = m.caption_log_likelihood(&img, &caption).unwrap();
        assert!((ll - manual).abs() < 1e-12);
        assert!(ll < 0.0);
        // Every step contributes a strictly negative log-probability, so the
        // running likelihood strictly decreases as tokens are added.
        let ex = Example {
            input: Input::Static(img.clone()),
            target: Target::Tokens(vec![1, 0, 0, 1, v.eos()]),
        };
        let loss = m.sequence_loss(&ex).unwrap();
        assert!(loss.per_step.iter().all(|&l| l > 0.0));
        assert!(m.caption_log_likelihood(&img, &[1, 0]).is_err());
    }

    #[test]
    fn encode_decode_zero_model_uniform() {
        let spec = ModelSpec::encode_decode(CellKind::Lstm, 1, 4, 3, FeatureExtractorSpec::identity(2), Vocabulary::symbols(2));
        let m = Lrcn::zeros(spec).unwrap();
        let out = m
            .encode_decode(&[Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.0, 1.0])], 3)
            .unwrap();
        assert_eq!(out.len(), 3);
        for d in &out {
            for v in d.data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        assert_eq!(m.encode_decode(&[], 3), Err(Error::Empty("encoder input")));
    }

    #[test]
    fn encode_decode_single_input_predicts_at_first_step() {
        let spec = ModelSpec::encode_decode(CellKind::Lstm, 1, 4, 3, FeatureExtractorSpec::identity(2), Vocabulary::symbols(2));
        let m = Lrcn::init(spec, &mut rng(9)).unwrap();
        let x = Tensor::vector(vec![0.5, -0.5]);
        let ex = Example {
            input: Input::Frames(vec![x]),
            target: Target::Tokens(vec![0, m.vocab().unwrap().eos()]),
        };
        let (_, steps) = m.plan(&ex).unwrap();
        assert_eq!(steps.len(), 2);
        assert!(steps[0].emits && steps[0].visual == Some(0));
    }

    #[test]
    fn encode_decode_runs_t_plus_t_prime_minus_one_steps() {
        let spec = ModelSpec::encode_decode(CellKind::Lstm, 2, 4, 3, FeatureExtractorSpec::identity(2), Vocabulary::symbols(2));
        let m = Lrcn::zeros(spec).unwrap();
        let eos = m.vocab().unwrap().eos();
        let ex = Example {
            input: Input::Frames(vec![Tensor::zeros(&[2]); 4]),
            target: Target::Tokens(vec![0, 1, eos]),
        };
        let (_, steps) = m.plan(&ex).unwrap();
        assert_eq!(steps.len(), 4 + 3 - 1);
        assert_eq!(steps.iter().filter(|s| s.emits).count(), 3);
    }

    fn crf_spec(mode: CrfMode) -> ModelSpec {
        ModelSpec::perstep_decode(
            CellKind::Lstm,
            1,
            4,
            3,
            CrfLayout {
                blocks: vec![2, 3],
                mode,
            },
            Vocabulary::symbols(3),
        )
    }

    #[test]
    fn perstep_matches_caption_wiring() {
        let pm = Lrcn::init(crf_spec(CrfMode::Max), &mut rng(10)).unwrap();
        let mut cspec = caption_spec(CaptionVariant::OneLayer);
        cspec.extractor = FeatureExtractorSpec::identity(5);
        let cm = Lrcn {
            spec: cspec,
            extractor: pm.extractor.clone(),
            embedding: pm.embedding.clone(),
            layers: pm.layers.clone(),
            prediction: pm.prediction.clone(),
        };
        let v = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0, 1.0]);
        let (a, _) = pm.perstep_decode_step(&v, 2, &pm.zero_state()).unwrap();
        let (b, _) = cm.caption_step(&v, 2, &cm.zero_state()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crf_validation() {
        let m = Lrcn::zeros(crf_spec(CrfMode::Prob)).unwrap();
        let uniform = Tensor::vector(vec![0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let (p, _) = m.perstep_decode_step(&uniform, 0, &m.zero_state()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 5.0).abs() < 1e-15));
        let bad = Tensor::vector(vec![0.5, 0.4, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(m.perstep_decode_step(&bad, 0, &m.zero_state()).is_err());

        let mm = Lrcn::zeros(crf_spec(CrfMode::Max)).unwrap();
        assert!(mm.perstep_decode_step(&uniform, 0, &mm.zero_state()).is_err());
    }

    #[test]
    fn degenerate_prob_equals_max_path() {
        let pm = Lrcn::init(crf_spec(CrfMode::Prob), &mut rng(11)).unwrap();
        let mut mm = pm.clone();
        mm.spec.crf = Some(CrfLayout {
            blocks: vec![2, 3],
            mode: CrfMode::Max,
        });
        let v = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        let (mut sp, mut sm) = (pm.zero_state(), mm.zero_state());
        for tok in [pm.vocab().unwrap().bos(), 1, 0] {
            let (a, na) = pm.perstep_decode_step(&v, tok, &sp).unwrap();
            let (b, nb) = mm.perstep_decode_step(&v, tok, &sm).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            sp = na;
            sm = nb;
        }
    }

    #[test]
    fn weights_are_shared_across_time() {
        let m = Lrcn::init(caption_spec(CaptionVariant::TwoUnfactored), &mut rng(12)).unwrap();
        let before = m.num_params();
        // Parameter count does not depend on sequence length.
        let image = Tensor::uniform(&[5], 1.0, &mut rng(13));
        let eos = m.vocab().unwrap().eos();
        let _ = m.caption_log_likelihood(&image, &[0, 1, 2, 0, 1, eos]).unwrap();
        assert_eq!(m.num_params(), before);
        assert_eq!(m.layers.len(), 2);
    }

    #[test]
    fn block_names_are_unique() {
        let m = Lrcn::init(caption_spec(CaptionVariant::TwoFactored), &mut rng(14)).unwrap();
        let names: Vec<String> = m.blocks().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"layer2.w_hc".to_string()));
    }
}
