//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LRCNCKPT"  u32 version
//! u64 n, n bytes        model descriptor, key=value lines
//! u64 k, k × (u64 n, n bytes)   vocabulary tokens (k = 0: none)
//! u64                   training step counter
//! u8 flag [32 bytes seed, u64 stream, u128 word position]   rng state if flag = 1
//! u64 b, b × block:
//!     u64 n, n bytes    block name
//!     u64 r, r × u64    shape
//!     product(shape) × f64
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::features::{ExtractorKind, FeatureExtractorSpec};
use crate::io::atomic_write;
use crate::io::config::Config;
use crate::model::{CrfLayout, CrfMode, Lrcn, ModelSpec, Task};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"LRCNCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Lrcn,
    pub rng: Option<RngState>,
    pub step: u64,
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("bad list entry '{x}'"))))
        .collect()
}

/// The spec (without vocabulary) as `key=value` lines.
pub fn spec_to_text(spec: &ModelSpec) -> String {
    let mut c = Config::default();
    c.set("task", spec.task.name());
    c.set("cell", spec.cell.name());
    c.set("layers", spec.layers);
    c.set("hidden", spec.hidden);
    c.set("factored", spec.factored);
    c.set("injection_layer", spec.injection_layer);
    c.set("extractor", spec.extractor.kind.name());
    c.set("extractor_input", join(&spec.extractor.input_shape));
    c.set("extractor_output", spec.extractor.output_dim);
    c.set("extractor_hidden", spec.extractor.hidden);
    c.set("extractor_kernel", spec.extractor.kernel);
    c.set("embed_dim", spec.embed_dim);
    c.set("num_classes", spec.num_classes);
    match &spec.crf {
        Some(crf) => {
            c.set("crf_blocks", join(&crf.blocks));
            c.set(
                "crf_mode",
                match crf.mode {
                    CrfMode::Max => "max",
                    CrfMode::Prob => "prob",
                },
            );
        }
        None => c.set("crf_mode", "none"),
    }
    c.to_text()
}

pub fn spec_from_text(text: &str, vocab: Option<Vocabulary>) -> Result<ModelSpec> {
    let c = Config::parse(text)?;
    let req = |k: &str| c.get(k).ok_or_else(|| Error::Checkpoint(format!("descriptor lacks '{k}'")));
    let num = |k: &str| -> Result<usize> { req(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad '{k}'"))) };
    let crf = match req("crf_mode")? {
        "none" => None,
        m => Some(CrfLayout {
            blocks: split(req("crf_blocks")?)?,
            mode: match m {
                "max" => CrfMode::Max,
                "prob" => CrfMode::Prob,
                other => return Err(Error::Checkpoint(format!("bad crf_mode '{other}'"))),
            },
        }),
    };
    let spec = ModelSpec {
        task: Task::parse(req("task")?)?,
        cell: CellKind::parse(req("cell")?)?,
        layers: num("layers")?,
        hidden: num("hidden")?,
        factored: req("factored")?.parse().map_err(|_| Error::Checkpoint("bad 'factored'".into()))?,
        injection_layer: num("injection_layer")?,
        extractor: FeatureExtractorSpec {
            kind: ExtractorKind::parse(req("extractor")?)?,
            input_shape: split(req("extractor_input")?)?,
            output_dim: num("extractor_output")?,
            hidden: num("extractor_hidden")?,
            kernel: num("extractor_kernel")?,
        },
        embed_dim: num("embed_dim")?,
        num_classes: num("num_classes")?,
        vocab,
        crf,
    };
    spec.validate()?;
    Ok(spec)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v} at byte {}", self.pos - 8)))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(model: Lrcn) -> Self {
        Checkpoint { model, rng: None, step: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, spec_to_text(&self.model.spec).as_bytes());
        match &self.model.spec.vocab {
            Some(v) => {
                put_u64(&mut out, v.len() as u64);
                for t in v.tokens() {
                    put_bytes(&mut out, t.as_bytes());
                }
            }
            None => put_u64(&mut out, 0),
        }
        put_u64(&mut out, self.step);
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                put_u64(&mut out, r.stream);
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        let blocks = self.model.blocks();
        put_u64(&mut out, blocks.len() as u64);
        for (name, t) in blocks {
            put_bytes(&mut out, name.as_bytes());
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an LRCN checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let descriptor = r.string()?;
        let ntok = r.len()?;
        let vocab = if ntok == 0 {
            None
        } else {
            Some(Vocabulary::from_tokens((0..ntok).map(|_| r.string()).collect::<Result<_>>()?)?)
        };
        let spec = spec_from_text(&descriptor, vocab)?;
        let step = r.u64()?;
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => {
                let seed = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Checkpoint(format!("bad rng flag {f}"))),
        };
        let mut model = Lrcn::zeros(spec)?;
        let nblocks = r.len()?;
        let mut filled = vec![false; model.blocks().len()];
        for _ in 0..nblocks {
            let name = r.string()?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data)?;
            let mut blocks = model.blocks_mut();
            let i = blocks
                .iter()
                .position(|(b, _)| *b == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected block '{name}'")))?;
            if blocks[i].1.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "block '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    blocks[i].1.shape()
                )));
            }
            if std::mem::replace(&mut filled[i], true) {
                return Err(Error::Checkpoint(format!("duplicate block '{name}'")));
            }
            *blocks[i].1 = t;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Checkpoint(format!("missing block '{}'", model.blocks()[i].0)));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { model, rng, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&buf)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CaptionVariant;
    use rand::{RngCore, SeedableRng};

    fn models() -> Vec<Lrcn> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Vocabulary::symbols(3);
        let specs = vec![
            ModelSpec::classify(CellKind::Lstm, 2, 3, FeatureExtractorSpec::mlp1(4, 3, 2), 3),
            ModelSpec::caption(CaptionVariant::TwoFactored, CellKind::Rnn, 3, 2, FeatureExtractorSpec::smallconv(1, 5, 5, 2, 2, 3), v.clone()),
            ModelSpec::perstep_decode(
                CellKind::Lstm,
                1,
                2,
                2,
                CrfLayout {
                    blocks: vec![2, 3],
                    mode: CrfMode::Prob,
                },
                v,
            ),
        ];
        specs.into_iter().map(|s| Lrcn::init(s, &mut rng).unwrap()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for m in models() {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            rng.next_u64();
            let ck = Checkpoint {
                model: m,
                rng: Some(RngState::capture(&rng)),
                step: 17,
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            for ((na, a), (nb, b)) in ck.model.blocks().iter().zip(back.model.blocks()) {
                assert_eq!(*na, nb);
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(back.model.spec, ck.model.spec);
            assert_eq!(back.rng.as_ref().unwrap().restore().next_u64(), rng.next_u64());
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(models().remove(0)).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        for m in models() {
            let s = &m.spec;
            assert_eq!(&spec_from_text(&spec_to_text(s), s.vocab.clone()).unwrap(), s);
        }
    }
}
