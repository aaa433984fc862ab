//! Caption metrics: BLEU 1-4, CIDEr, METEOR and ROUGE-L.
//!
//! All functions take pre-tokenized text (see [`crate::data::normalize_and_tokenize`]).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One hypothesis and its references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidArgument("evaluation pair without references".into()));
        }
        Ok(Self { hypothesis, references })
    }

    /// Splits on whitespace; handy for already-normalized text.
    pub fn from_text(hypothesis: &str, references: &[&str]) -> Result<Self> {
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        Self::new(words(hypothesis), references.iter().map(|r| words(r)).collect())
    }
}

/// Variant switches. The defaults are unsmoothed BLEU, stemming on, beta 1.2.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// Add one to matched and total counts for orders two and above.
    pub bleu_smoothing: bool,
    pub stemming: bool,
    pub rouge_beta: f64,
    /// Node budget for the METEOR chunk search.
    pub meteor_search_cap: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_smoothing: false,
            stemming: true,
            rouge_beta: 1.2,
            meteor_search_cap: 100_000,
        }
    }
}

pub const MAX_ORDER: usize = 4;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Pooled statistics behind a BLEU score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    /// Clipped matches per order.
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-grams per order.
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of_pair(pair: &EvalPair) -> Self {
        let mut s = Self {
            hyp_len: pair.hypothesis.len(),
            ref_len: closest_ref_len(pair),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let hyp = ngrams(&pair.hypothesis, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in &pair.references {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hyp {
                s.totals[n - 1] += c;
                s.matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
        s
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        if c > r {
            1.0
        } else if c == 0.0 {
            0.0
        } else {
            libm::exp(1.0 - r / c)
        }
    }

    /// Modified precision of order `n` (1-based).
    pub fn precision(&self, n: usize, smoothing: bool) -> f64 {
        let (m, t) = (self.matches[n - 1] as f64, self.totals[n - 1] as f64);
        if smoothing && n >= 2 {
            (m + 1.0) / (t + 1.0)
        } else if t == 0.0 {
            0.0
        } else {
            m / t
        }
    }

    /// BLEU-1 through BLEU-4.
    pub fn scores(&self, smoothing: bool) -> [f64; MAX_ORDER] {
        let mut out = [0.0; MAX_ORDER];
        if self.hyp_len == 0 {
            return out;
        }
        let bp = self.brevity_penalty();
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=MAX_ORDER {
            let p = self.precision(n, smoothing);
            if p == 0.0 {
                zero = true;
            } else {
                log_sum += libm::log(p);
            }
            out[n - 1] = if zero { 0.0 } else { bp * libm::exp(log_sum / n as f64) };
        }
        out
    }
}

/// Reference length closest to the hypothesis length, shorter on ties.
fn closest_ref_len(pair: &EvalPair) -> usize {
    let c = pair.hypothesis.len() as i64;
    pair.references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c).abs(), l))
        .unwrap_or(0)
}

/// Corpus BLEU from pooled counts; entry `n-1` is BLEU-n for `n <= max_n`.
pub fn bleu(pairs: &[EvalPair], max_n: usize, smoothing: bool) -> Result<Vec<f64>> {
    if !(1..=MAX_ORDER).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut total = BleuStats::default();
    for p in pairs {
        if p.hypothesis.is_empty() {
            log::warn!("empty hypothesis scores zero");
        }
        total.add(&BleuStats::of_pair(p));
    }
    Ok(total.scores(smoothing)[..max_n].to_vec())
}

/// Document frequencies over reference sets, one document per pair.
#[derive(Debug, Clone)]
pub struct CiderIdf<'a> {
    df: [BTreeMap<&'a [String], usize>; MAX_ORDER],
    docs: usize,
}

impl<'a> CiderIdf<'a> {
    pub fn new(pairs: &'a [EvalPair]) -> Result<Self> {
        let distinct: BTreeSet<&Vec<Vec<String>>> = pairs.iter().map(|p| &p.references).collect();
        if distinct.len() < 2 {
            return Err(Error::InvalidArgument(
                "CIDEr needs at least two distinct reference sets".into(),
            ));
        }
        let mut df: [BTreeMap<&[String], usize>; MAX_ORDER] = Default::default();
        for p in pairs {
            for n in 1..=MAX_ORDER {
                let seen: BTreeSet<&[String]> =
                    p.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
                for g in seen {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { df, docs: pairs.len() })
    }

    /// `ln(N / (1 + df))`.
    pub fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0);
        libm::log(self.docs as f64 / (1.0 + df as f64))
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> BTreeMap<&'t [String], f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * self.idf(n, g)))
            .collect()
    }

    /// CIDEr of one pair, averaged over orders 1-4.
    pub fn score(&self, pair: &EvalPair) -> f64 {
        let mut total = 0.0;
        for n in 1..=MAX_ORDER {
            let h = self.vector(&pair.hypothesis, n);
            let mut sum = 0.0;
            for r in &pair.references {
                sum += cosine(&h, &self.vector(r, n));
            }
            total += 10.0 * sum / pair.references.len() as f64;
        }
        total / MAX_ORDER as f64
    }
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (libm::sqrt(na) * libm::sqrt(nb))
    }
}

/// Corpus CIDEr: mean of per-pair scores.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    let idf = CiderIdf::new(pairs)?;
    Ok(pairs.iter().map(|p| idf.score(p)).sum::<f64>() / pairs.len() as f64)
}

/// Suffix stripper: the first of `ing`, `ed`, `es`, `s` that leaves at
/// least three characters is removed. A trailing `ss` is kept.
pub fn stem(word: &str) -> &str {
    let chars = word.chars().count();
    for suffix in ["ing", "ed", "es", "s"] {
        if word.ends_with(suffix) && chars >= suffix.len() + 3 {
            if suffix == "s" && word.ends_with("ss") {
                return word;
            }
            return &word[..word.len() - suffix.len()];
        }
    }
    word
}

/// Unigram alignment between hypothesis and reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `(hyp index, ref index)` sorted by hypothesis position.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
}

/// Runs of pairs adjacent in both sentences.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in pairs {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

struct Search<'a> {
    hyp: &'a [usize],
    refs: &'a [usize],
    used: Vec<bool>,
    skips: BTreeMap<usize, usize>,
    current: Vec<(usize, usize)>,
    best: Option<Alignment>,
    nodes: usize,
    cap: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize, chunks: usize) {
        self.nodes += 1;
        if let Some(b) = &self.best {
            let floor = usize::from(!b.pairs.is_empty());
            if chunks >= b.chunks || b.chunks == floor || self.nodes > self.cap {
                return;
            }
        }
        if i == self.hyp.len() {
            self.best = Some(Alignment { pairs: self.current.clone(), chunks });
            return;
        }
        let class = self.hyp[i];
        let last = self.current.last().copied();
        // Continuing the current chunk first makes the first leaf greedy.
        let mut order: Vec<usize> = Vec::new();
        if let Some((pi, pj)) = last {
            if pi + 1 == i && pj + 1 < self.refs.len() {
                order.push(pj + 1);
            }
        }
        order.extend(0..self.refs.len());
        let mut tried = vec![false; self.refs.len()];
        for j in order {
            if tried[j] || self.used[j] || self.refs[j] != class {
                continue;
            }
            tried[j] = true;
            let extends = matches!(last, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
            self.used[j] = true;
            self.current.push((i, j));
            self.run(i + 1, chunks + usize::from(!extends));
            self.current.pop();
            self.used[j] = false;
        }
        let left = self.skips.get(&class).copied().unwrap_or(0);
        if left > 0 {
            self.skips.insert(class, left - 1);
            self.run(i + 1, chunks);
            self.skips.insert(class, left);
        }
    }
}

/// Maximum-cardinality alignment with the fewest chunks found within `cap`
/// search nodes. Words match when equal, or when their stems are equal
/// and `stemming` is on.
pub fn align<'a>(hyp: &'a [String], reference: &'a [String], stemming: bool, cap: usize) -> Alignment {
    fn key(w: &str, stemming: bool) -> &str {
        if stemming {
            stem(w)
        } else {
            w
        }
    }
    let mut classes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut id = |w: &'a String| {
        let n = classes.len();
        *classes.entry(key(w, stemming)).or_insert(n)
    };
    let h: Vec<usize> = hyp.iter().map(&mut id).collect();
    let r: Vec<usize> = reference.iter().map(&mut id).collect();
    let mut skips = BTreeMap::new();
    for &c in &h {
        let hc = h.iter().filter(|&&x| x == c).count();
        let rc = r.iter().filter(|&&x| x == c).count();
        skips.insert(c, hc.saturating_sub(rc));
    }
    let mut s = Search {
        hyp: &h,
        refs: &r,
        used: vec![false; r.len()],
        skips,
        current: Vec::new(),
        best: None,
        nodes: 0,
        cap,
    };
    s.run(0, 0);
    s.best.unwrap_or(Alignment { pairs: Vec::new(), chunks: 0 })
}

/// METEOR against a single reference.
pub fn meteor_single(hyp: &[String], reference: &[String], cfg: &MetricConfig) -> f64 {
    let a = align(hyp, reference, cfg.stemming, cfg.meteor_search_cap);
    let m = a.pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = a.chunks as f64 / m;
    f * (1.0 - 0.5 * frag * frag * frag)
}

/// Best score over the references.
pub fn meteor_pair(pair: &EvalPair, cfg: &MetricConfig) -> f64 {
    pair.references
        .iter()
        .map(|r| meteor_single(&pair.hypothesis, r, cfg))
        .fold(0.0, f64::max)
}

pub fn meteor(pairs: &[EvalPair], cfg: &MetricConfig) -> f64 {
    mean(pairs.iter().map(|p| meteor_pair(p, cfg)))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_single(hyp: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_pair(pair: &EvalPair, beta: f64) -> f64 {
    pair.references
        .iter()
        .map(|r| rouge_l_single(&pair.hypothesis, r, beta))
        .fold(0.0, f64::max)
}

pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(mean(pairs.iter().map(|p| rouge_l_pair(p, beta))))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in it {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores of a single pair. CIDEr still uses corpus document frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScores {
    pub bleu: [f64; MAX_ORDER],
    pub cider: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; MAX_ORDER],
    pub cider: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub config: MetricConfig,
    pub pairs: usize,
    pub references: usize,
    pub hypothesis_tokens: usize,
    pub sentences: Vec<SentenceScores>,
}

impl MetricReport {
    /// `(name, value)` for the seven corpus scores.
    pub fn scores(&self) -> [(&'static str, f64); 7] {
        [
            ("bleu_1", self.bleu[0]),
            ("bleu_2", self.bleu[1]),
            ("bleu_3", self.bleu[2]),
            ("bleu_4", self.bleu[3]),
            ("cider", self.cider),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
        ]
    }
}

pub fn evaluate_corpus(pairs: &[EvalPair], cfg: &MetricConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    if !(cfg.rouge_beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {}", cfg.rouge_beta)));
    }
    let idf = CiderIdf::new(pairs)?;
    let bleu = bleu(pairs, MAX_ORDER, cfg.bleu_smoothing)?;
    let sentences: Vec<SentenceScores> = pairs
        .iter()
        .map(|p| SentenceScores {
            bleu: BleuStats::of_pair(p).scores(cfg.bleu_smoothing),
            cider: idf.score(p),
            meteor: meteor_pair(p, cfg),
            rouge_l: rouge_l_pair(p, cfg.rouge_beta),
        })
        .collect();
    Ok(MetricReport {
        bleu: [bleu[0], bleu[1], bleu[2], bleu[3]],
        cider: mean(sentences.iter().map(|s| s.cider)),
        meteor: mean(sentences.iter().map(|s| s.meteor)),
        rouge_l: mean(sentences.iter().map(|s| s.rouge_l)),
        config: cfg.clone(),
        pairs: pairs.len(),
        references: pairs.iter().map(|p| p.references.len()).sum(),
        hypothesis_tokens: pairs.iter().map(|p| p.hypothesis.len()).sum(),
        sentences,
    })
}
