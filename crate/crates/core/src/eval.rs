//! BLEU, retrieval ranking metrics, clip-protocol video classification and
//! two-stream score fusion.

use std::collections::HashMap;
use std::hash::Hash;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::Lrcn;
use crate::tensor::Tensor;

/// Paper-default clip protocol: 16-frame clips every 8 frames.
pub const CLIP_LEN: usize = 16;
pub const CLIP_STRIDE: usize = 8;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for orders `1..=max_n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn new<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Result<Self> {
        if max_n == 0 {
            return Err(Error::Invalid("BLEU order must be at least 1".into()));
        }
        if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.as_ref().is_empty()) {
            return Err(Error::Empty("BLEU candidate or reference"));
        }
        let mut matches = Vec::with_capacity(max_n);
        let mut totals = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r.as_ref(), n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let clipped = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
            matches.push(clipped);
            totals.push(candidate.len().saturating_sub(n - 1));
        }
        // Closest reference length, shorter one on ties.
        let c = candidate.len();
        let reference_len = references
            .iter()
            .map(|r| r.as_ref().len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        Ok(BleuStats {
            matches,
            totals,
            candidate_len: c,
            reference_len,
        })
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Brevity penalty times the geometric mean of modified precisions.
    /// Any zero precision gives zero (no smoothing).
    pub fn score(&self) -> f64 {
        if self.matches.is_empty() || self.candidate_len == 0 {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / n).exp()
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect()
    }
}

/// Sentence BLEU with orders `1..=max_n`.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Result<f64> {
    Ok(BleuStats::new(candidate, references, max_n)?.score())
}

/// Corpus BLEU: counts are summed over all sentences before taking ratios.
pub fn corpus_bleu<T: Eq + Hash, R: AsRef<[T]>>(pairs: &[(Vec<T>, Vec<R>)], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        total.add(&BleuStats::new(cand, refs, max_n)?);
    }
    Ok(total.score())
}

/// Query-by-candidate scores (higher is better) with the correct candidates
/// of every query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
    correct: Vec<Vec<usize>>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>, correct: Vec<Vec<usize>>) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(Error::Shape {
                op: "ScoreMatrix",
                left: vec![rows, cols],
                right: vec![scores.len()],
            });
        }
        if correct.len() != rows {
            return Err(Error::Invalid("one ground-truth set per query required".into()));
        }
        for (q, set) in correct.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&c| c >= cols) {
                return Err(Error::Invalid(format!("query {q} has no valid correct candidate")));
            }
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            scores,
            correct,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, c: usize) -> f64 {
        self.scores[q * self.cols + c]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.cols..(q + 1) * self.cols]
    }

    pub fn correct(&self, q: usize) -> &[usize] {
        &self.correct[q]
    }

    /// The matrix with queries and candidates swapped.
    pub fn transpose(&self) -> Self {
        let mut scores = vec![0.0; self.scores.len()];
        for q in 0..self.rows {
            for c in 0..self.cols {
                scores[c * self.rows + q] = self.get(q, c);
            }
        }
        let mut correct = vec![Vec::new(); self.cols];
        for (q, set) in self.correct.iter().enumerate() {
            for &c in set {
                correct[c].push(q);
            }
        }
        ScoreMatrix {
            rows: self.cols,
            cols: self.rows,
            scores,
            correct,
        }
    }

    /// 1-based rank of the best-placed correct candidate of query `q`,
    /// ordering by descending score with lower candidate index first on
    /// ties.
    pub fn rank(&self, q: usize) -> usize {
        let row = self.row(q);
        self.correct[q]
            .iter()
            .map(|&c| {
                let s = row[c];
                1 + row
                    .iter()
                    .enumerate()
                    .filter(|&(j, &v)| v > s || (v == s && j < c))
                    .count()
            })
            .min()
            .expect("validated non-empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// `(K, R@K)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub median_rank: f64,
    pub ranks: Vec<usize>,
}

/// Recall@K for each `K` and the median rank of the first correct
/// candidate.
pub fn retrieval_metrics(s: &ScoreMatrix, ks: &[usize]) -> RetrievalReport {
    let ranks: Vec<usize> = (0..s.rows).map(|q| s.rank(q)).collect();
    let n = ranks.len().max(1) as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    RetrievalReport {
        recall,
        median_rank: median(&ranks),
        ranks,
    }
}

fn median(xs: &[usize]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

/// Scores every (image, caption) pair by the caption's log-likelihood under
/// the model. `pairs` lists the ground-truth `(image, caption)` matches.
pub fn score_pairs(m: &Lrcn, images: &[Tensor], captions: &[Vec<usize>], pairs: &[(usize, usize)]) -> Result<ScoreMatrix> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Empty("retrieval images or captions"));
    }
    let mut scores = Vec::with_capacity(images.len() * captions.len());
    for img in images {
        let ctx = m.condition(&crate::model::Input::Static(img.clone()))?;
        for cap in captions {
            scores.push(caption_score(&ctx, cap)?);
        }
    }
    let mut correct = vec![Vec::new(); images.len()];
    for &(i, c) in pairs {
        if i >= images.len() || c >= captions.len() {
            return Err(Error::Invalid(format!("pair ({i}, {c}) out of range")));
        }
        correct[i].push(c);
    }
    ScoreMatrix::new(images.len(), captions.len(), scores, correct)
}

/// Log-likelihood of `caption` given a conditioned model (teacher forced).
pub fn caption_score(ctx: &crate::model::Conditioned<'_>, caption: &[usize]) -> Result<f64> {
    if caption.last() != Some(&ctx.eos()) {
        return Err(Error::Invalid("caption must end with <EOS>".into()));
    }
    let mut state = ctx.start_state().clone();
    let mut prev = ctx.bos();
    let mut total = 0.0;
    for (k, &y) in caption.iter().enumerate() {
        let (logits, next) = ctx.step(&state, prev, k)?;
        if y >= logits.len() {
            return Err(Error::TokenRange {
                index: y,
                size: logits.len(),
            });
        }
        total += crate::tensor::log_softmax_slice(&logits)[y];
        state = next;
        prev = y;
    }
    Ok(total)
}

/// Elementwise `w_a · p_a + w_b · p_b` over paired distributions.
pub fn fuse_streams(p_a: &[Tensor], p_b: &[Tensor], w_a: f64, w_b: f64) -> Result<Vec<Tensor>> {
    if w_a < 0.0 || w_b < 0.0 || (w_a + w_b - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(format!("fusion weights ({w_a}, {w_b}) must be non-negative and sum to 1")));
    }
    if p_a.len() != p_b.len() {
        return Err(Error::Shape {
            op: "fuse_streams",
            left: vec![p_a.len()],
            right: vec![p_b.len()],
        });
    }
    p_a.iter()
        .zip(p_b)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(Error::Shape {
                    op: "fuse_streams arity",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            // Equal entries are passed through so identical streams fuse to
            // themselves exactly.
            Ok(Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| if x == y { x } else { w_a * x + w_b * y })
                    .collect(),
            )
            .expect("same shape"))
        })
        .collect()
}

/// Frame ranges of the clips cut from a video of `len` frames. A video
/// shorter than `clip_len` yields one truncated clip.
#[allow(clippy::single_range_in_vec_init)]
pub fn clip_windows(len: usize, clip_len: usize, stride: usize) -> Vec<Range<usize>> {
    if len == 0 || clip_len == 0 || stride == 0 {
        return Vec::new();
    }
    if len <= clip_len {
        return vec![0..len];
    }
    (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + clip_len <= len)
        .map(|s| s..s + clip_len)
        .collect()
}

/// Classifies every clip with late fusion and averages the clip
/// distributions.
pub fn clip_protocol_eval(m: &Lrcn, video: &[Tensor], clip_len: usize, stride: usize) -> Result<Tensor> {
    if clip_len == 0 || stride == 0 {
        return Err(Error::Invalid("clip length and stride must be positive".into()));
    }
    let windows = clip_windows(video.len(), clip_len, stride);
    if windows.is_empty() {
        return Err(Error::Empty("video"));
    }
    let mut avg = Tensor::zeros(&[m.spec.output_size()]);
    for w in &windows {
        avg.axpy(1.0, &m.classify_sequence(&video[w.clone()])?);
    }
    avg.scale(1.0 / windows.len() as f64);
    Ok(avg)
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// One `name value` line.
pub fn metric_line(name: &str, value: f64) -> String {
    format!("{name} {value}")
}
