//! Text dataset formats.
//!
//! * corpus: one caption per line, tokens separated by single spaces.
//! * features: `dims d`, then one line of `d` space-separated numbers per row.
//! * pairs: `feature_row<TAB>caption_line`, both 0-based.
//! * clips: `feature_file<TAB>start<TAB>length<TAB>label`.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so
//! parse(write(x)) reproduces every value bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::{Example, Input, Target, Task};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const FEATURES_FILE: &str = "features.txt";
pub const CAPTIONS_FILE: &str = "captions.txt";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const CLIPS_FILE: &str = "clips.tsv";

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn field<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what} '{s}'")))
}

pub fn parse_corpus(text: &str) -> Result<Vec<Vec<String>>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let toks: Vec<String> = l.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
            if toks.is_empty() {
                return Err(parse_err(i + 1, "empty caption"));
            }
            Ok(toks)
        })
        .collect()
}

pub fn corpus_to_text(corpus: &[Vec<String>]) -> String {
    corpus.iter().map(|c| c.join(" ") + "\n").collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub dims: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureFile {
    pub fn new(dims: usize) -> Self {
        FeatureFile { dims, rows: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<usize> {
        if row.len() != self.dims {
            return Err(Error::Shape {
                op: "feature row",
                left: vec![self.dims],
                right: vec![row.len()],
            });
        }
        self.rows.push(row.to_vec());
        Ok(self.rows.len() - 1)
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.rows
            .get(i)
            .map(|r| Tensor::vector(r.clone()))
            .ok_or_else(|| Error::Invalid(format!("feature row {i} out of range ({} rows)", self.rows.len())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing 'dims d' header"))?;
        let dims = match header.split_once(' ') {
            Some(("dims", d)) => field::<usize>(d, 1, "dimension")?,
            _ => return Err(parse_err(1, format!("expected 'dims d', got '{header}'"))),
        };
        if dims == 0 {
            return Err(parse_err(1, "dimension must be positive"));
        }
        let mut rows = Vec::new();
        for (i, l) in lines {
            let row = l
                .split(' ')
                .map(|v| {
                    let x: f64 = field(v, i + 1, "number")?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(parse_err(i + 1, format!("non-finite value '{v}'")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != dims {
                return Err(parse_err(i + 1, format!("expected {dims} values, found {}", row.len())));
            }
            rows.push(row);
        }
        Ok(FeatureFile { dims, rows })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dims {}\n", self.dims);
        for r in &self.rows {
            for (j, x) in r.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                write!(s, "{x}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            match cols[..] {
                [a, b] => Ok((field(a, i + 1, "feature row")?, field(b, i + 1, "caption line")?)),
                _ => Err(parse_err(i + 1, format!("expected 2 tab-separated fields, found {}", cols.len()))),
            }
        })
        .collect()
}

pub fn pairs_to_text(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
}

/// A frame range of a feature file with its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipEntry {
    pub file: String,
    pub start: usize,
    pub length: usize,
    pub label: usize,
}

pub fn parse_clips(text: &str) -> Result<Vec<ClipEntry>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            let [file, start, length, label] = cols[..] else {
                return Err(parse_err(i + 1, format!("expected 4 tab-separated fields, found {}", cols.len())));
            };
            if file.is_empty() {
                return Err(parse_err(i + 1, "empty feature file name"));
            }
            let length = field(length, i + 1, "length")?;
            if length == 0 {
                return Err(parse_err(i + 1, "clip length must be positive"));
            }
            Ok(ClipEntry {
                file: file.to_string(),
                start: field(start, i + 1, "start frame")?,
                length,
                label: field(label, i + 1, "label")?,
            })
        })
        .collect()
}

pub fn clips_to_text(clips: &[ClipEntry]) -> String {
    clips
        .iter()
        .map(|c| format!("{}\t{}\t{}\t{}\n", c.file, c.start, c.length, c.label))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Corpus,
    Features,
    Pairs,
    Clips,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Corpus(Vec<Vec<String>>),
    Features(FeatureFile),
    Pairs(Vec<(usize, usize)>),
    Clips(Vec<ClipEntry>),
}

impl Dataset {
    pub fn to_text(&self) -> String {
        match self {
            Dataset::Corpus(c) => corpus_to_text(c),
            Dataset::Features(f) => f.to_text(),
            Dataset::Pairs(p) => pairs_to_text(p),
            Dataset::Clips(c) => clips_to_text(c),
        }
    }
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Dataset> {
    Ok(match format {
        DatasetFormat::Corpus => Dataset::Corpus(parse_corpus(text)?),
        DatasetFormat::Features => Dataset::Features(FeatureFile::parse(text)?),
        DatasetFormat::Pairs => Dataset::Pairs(parse_pairs(text)?),
        DatasetFormat::Clips => Dataset::Clips(parse_clips(text)?),
    })
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text, format).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    atomic_write(path, data.to_text().as_bytes())
}

/// Equal-length view of variable-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    /// Each sequence padded with `pad` to `extent` items.
    pub items: Vec<Vec<T>>,
    pub labels: Vec<Target>,
    pub lengths: Vec<usize>,
    /// `mask[i][t]` is true exactly on real (unpadded) positions.
    pub mask: Vec<Vec<bool>>,
    pub extent: usize,
}

impl<T: Clone> SequenceBatch<T> {
    pub fn new(sequences: Vec<Vec<T>>, labels: Vec<Target>, pad: T) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::Shape {
                op: "SequenceBatch",
                left: vec![sequences.len()],
                right: vec![labels.len()],
            });
        }
        let extent = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
        let mask = lengths.iter().map(|&n| (0..extent).map(|t| t < n).collect()).collect();
        let items = sequences
            .into_iter()
            .map(|mut s| {
                s.resize(extent, pad.clone());
                s
            })
            .collect();
        Ok(SequenceBatch {
            items,
            labels,
            lengths,
            mask,
            extent,
        })
    }

    /// The unpadded sequence `i`.
    pub fn sequence(&self, i: usize) -> &[T] {
        &self.items[i][..self.lengths[i]]
    }
}

/// Examples of one task together with what is needed to build a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub examples: Vec<Example>,
    pub vocab: Option<Vocabulary>,
    pub input_dim: usize,
    pub num_classes: usize,
}

/// Vocabulary of the sorted distinct words of a corpus.
pub fn corpus_vocabulary(corpus: &[Vec<String>]) -> Vocabulary {
    let words: BTreeSet<&str> = corpus.iter().flatten().map(String::as_str).collect();
    Vocabulary::new(words, false)
}

fn read(dir: &Path, name: &str, format: DatasetFormat) -> Result<Dataset> {
    load_dataset(&dir.join(name), format)
}

fn frames_of(features: &FeatureFile, start: usize, length: usize) -> Result<Vec<Tensor>> {
    (start..start + length).map(|r| features.row(r)).collect()
}

/// Reads a task directory.
///
/// * classify: `clips.tsv` with frames from the named feature files.
/// * caption: `features.txt`, `captions.txt`, `pairs.tsv`.
/// * encode_decode: `clips.tsv` whose label is a line of `captions.txt`.
///
/// Captions are encoded with `vocab` when given, otherwise with the sorted
/// words of the corpus.
pub fn load_task_data(dir: &Path, task: Task, vocab: Option<&Vocabulary>) -> Result<TaskData> {
    let load_clips = || -> Result<Vec<(Vec<Tensor>, usize, usize)>> {
        let Dataset::Clips(clips) = read(dir, CLIPS_FILE, DatasetFormat::Clips)? else {
            unreachable!()
        };
        let mut cache: Vec<(String, FeatureFile)> = Vec::new();
        let mut out = Vec::new();
        for c in clips {
            if !cache.iter().any(|(n, _)| *n == c.file) {
                let Dataset::Features(f) = read(dir, &c.file, DatasetFormat::Features)? else {
                    unreachable!()
                };
                cache.push((c.file.clone(), f));
            }
            let f = &cache.iter().find(|(n, _)| *n == c.file).expect("cached").1;
            out.push((frames_of(f, c.start, c.length)?, c.label, f.dims));
        }
        Ok(out)
    };
    let load_corpus = || -> Result<Vec<Vec<String>>> {
        let Dataset::Corpus(c) = read(dir, CAPTIONS_FILE, DatasetFormat::Corpus)? else {
            unreachable!()
        };
        Ok(c)
    };
    let encode = |v: &Vocabulary, c: &[String]| v.encode(&c.join(" "));
    match task {
        Task::Classify => {
            let clips = load_clips()?;
            let input_dim = clips.first().map(|c| c.2).ok_or(Error::Empty("clip manifest"))?;
            let num_classes = clips.iter().map(|c| c.1).max().unwrap_or(0) + 1;
            let examples = clips
                .into_iter()
                .map(|(frames, label, _)| Example {
                    input: Input::Frames(frames),
                    target: Target::Class(label),
                })
                .collect();
            Ok(TaskData {
                task,
                examples,
                vocab: None,
                input_dim,
                num_classes,
            })
        }
        Task::Caption => {
            let Dataset::Features(features) = read(dir, FEATURES_FILE, DatasetFormat::Features)? else {
                unreachable!()
            };
            let Dataset::Pairs(pairs) = read(dir, PAIRS_FILE, DatasetFormat::Pairs)? else {
                unreachable!()
            };
            let corpus = load_corpus()?;
            let vocab = vocab.cloned().unwrap_or_else(|| corpus_vocabulary(&corpus));
            let examples = pairs
                .iter()
                .map(|&(r, c)| {
                    let cap = corpus.get(c).ok_or_else(|| Error::Invalid(format!("caption line {c} out of range")))?;
                    Ok(Example {
                        input: Input::Static(features.row(r)?),
                        target: Target::Tokens(encode(&vocab, cap)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskData {
                task,
                examples,
                num_classes: 0,
                input_dim: features.dims,
                vocab: Some(vocab),
            })
        }
        Task::EncodeDecode => {
            let clips = load_clips()?;
            let corpus = load_corpus()?;
            let vocab = vocab.cloned().unwrap_or_else(|| corpus_vocabulary(&corpus));
            let input_dim = clips.first().map(|c| c.2).ok_or(Error::Empty("clip manifest"))?;
            let examples = clips
                .into_iter()
                .map(|(frames, line, _)| {
                    let cap = corpus.get(line).ok_or_else(|| Error::Invalid(format!("caption line {line} out of range")))?;
                    Ok(Example {
                        input: Input::Frames(frames),
                        target: Target::Tokens(encode(&vocab, cap)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskData {
                task,
                examples,
                vocab: Some(vocab),
                input_dim,
                num_classes: 0,
            })
        }
        Task::PerstepDecode => Err(Error::Invalid("perstep_decode has no on-disk dataset layout".into())),
    }
}

fn decode_words(vocab: &Vocabulary, tokens: &[usize]) -> Result<Vec<String>> {
    let words: Vec<String> = vocab.decode(tokens).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect();
    if words.is_empty() {
        return Err(Error::Invalid("cannot write an empty caption".into()));
    }
    Ok(words)
}

/// Writes examples in the layout read by [`load_task_data`].
pub fn save_task_data(dir: &Path, task: Task, examples: &[Example], vocab: Option<&Vocabulary>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let need_vocab = || vocab.ok_or_else(|| Error::Invalid("token task needs a vocabulary".into()));
    let frames_into = |features: &mut Option<FeatureFile>, frames: &[Tensor]| -> Result<usize> {
        let f = features.get_or_insert_with(|| FeatureFile::new(frames.first().map_or(0, Tensor::len)));
        let start = f.rows.len();
        for fr in frames {
            f.push(fr.data())?;
        }
        Ok(start)
    };
    let mut features: Option<FeatureFile> = None;
    let mut corpus = Vec::new();
    let mut clips = Vec::new();
    let mut pairs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match (task, &ex.input, &ex.target) {
            (Task::Classify, Input::Frames(fr), Target::Class(label)) => {
                let start = frames_into(&mut features, fr)?;
                clips.push(ClipEntry {
                    file: FEATURES_FILE.into(),
                    start,
                    length: fr.len(),
                    label: *label,
                });
            }
            (Task::Caption, Input::Static(img), Target::Tokens(t)) => {
                frames_into(&mut features, std::slice::from_ref(img))?;
                corpus.push(decode_words(need_vocab()?, t)?);
                pairs.push((i, i));
            }
            (Task::EncodeDecode, Input::Frames(fr), Target::Tokens(t)) => {
                let start = frames_into(&mut features, fr)?;
                corpus.push(decode_words(need_vocab()?, t)?);
                clips.push(ClipEntry {
                    file: FEATURES_FILE.into(),
                    start,
                    length: fr.len(),
                    label: i,
                });
            }
            _ => return Err(Error::Invalid(format!("example {i} does not fit the {} layout", task.name()))),
        }
    }
    let features = features.ok_or(Error::Empty("examples"))?;
    save_dataset(&dir.join(FEATURES_FILE), &Dataset::Features(features))?;
    if !corpus.is_empty() {
        save_dataset(&dir.join(CAPTIONS_FILE), &Dataset::Corpus(corpus))?;
    }
    if !pairs.is_empty() {
        save_dataset(&dir.join(PAIRS_FILE), &Dataset::Pairs(pairs))?;
    }
    if !clips.is_empty() {
        save_dataset(&dir.join(CLIPS_FILE), &Dataset::Clips(clips))?;
    }
    Ok(())
}
