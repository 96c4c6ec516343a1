//! Evaluation quantities: per-frame average precision, BLEU-4, CIDEr-D and
//! Spearman correlation, collected in a [`MetricReport`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision over `(score, is_positive)` pairs.
///
/// Pairs are ranked by descending score; equal scores keep their input
/// order. Returns `None` when there is no positive (the class is skipped).
pub fn average_precision(ranked: &[(f64, bool)]) -> Result<Option<f64>> {
    if ranked.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite { op: "average_precision" });
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Unweighted mean over the classes that were not skipped.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let kept: Vec<f64> = aps.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::domain("mean_ap", "every class was skipped"));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// One-vs-rest AP for each class in `classes`, from per-frame score rows.
pub fn per_class_ap(scores: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("per_class_ap", &[labels.len()], &[scores.len()]));
    }
    classes
        .iter()
        .map(|&c| {
            let ranked: Vec<(f64, bool)> = scores
                .iter()
                .zip(labels)
                .map(|(row, &l)| (row[c], l == c))
                .collect();
            average_precision(&ranked)
        })
        .collect()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

pub const BLEU_SMOOTHING: &str = "add-one on zero clipped counts for n >= 2";

/// Corpus BLEU-4: clipped n-gram precisions pooled over the corpus, their
/// geometric mean, and the brevity penalty against the closest reference
/// length. A zero clipped count for n >= 2 is replaced by `1 / (total + 1)`.
pub fn bleu4_corpus<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape("bleu4", &[references.len()], &[hypotheses.len()]));
    }
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::domain("bleu4", "hypothesis without references"));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("non-empty");
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                clipped[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || clipped[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if clipped[n] == 0 {
            1.0 / (total[n] + 1) as f64
        } else {
            clipped[n] as f64 / total[n] as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// Sentence-level BLEU-4 (a corpus of one).
pub fn bleu4<S: AsRef<str>>(hypothesis: &[S], references: &[Vec<S>]) -> Result<f64> {
    let hyp: Vec<&str> = hypothesis.iter().map(|s| s.as_ref()).collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.iter().map(|s| s.as_ref()).collect()).collect();
    bleu4_corpus(&[hyp], &[refs])
}

/// CIDEr-D with document frequencies from a reference corpus.
#[derive(Debug, Clone)]
pub struct CiderD {
    doc_freq: HashMap<Vec<String>, f64>,
    log_docs: f64,
    sigma: f64,
}

/// Tf-idf weights of one sentence for each n-gram order, plus its length.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderVector {
    pub weights: [HashMap<Vec<String>, f64>; 4],
    pub norms: [f64; 4],
    pub length: usize,
}

impl CiderD {
    /// `corpus[i]` holds the reference sentences of item `i`.
    pub fn new<S: AsRef<str>>(corpus: &[Vec<Vec<S>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::domain("cider_d", "empty reference corpus"));
        }
        let mut doc_freq: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in corpus {
            let mut seen: std::collections::HashSet<Vec<String>> = Default::default();
            for r in refs {
                for n in 1..=4 {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(g.into_iter().map(str::to_owned).collect());
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderD {
            doc_freq,
            log_docs: (corpus.len() as f64).ln(),
            sigma: 6.0,
        })
    }

    pub fn vectorize<S: AsRef<str>>(&self, tokens: &[S]) -> CiderVector {
        let mut weights: [HashMap<Vec<String>, f64>; 4] = Default::default();
        let mut norms = [0.0; 4];
        for n in 1..=4 {
            for (g, tf) in ngrams(tokens, n) {
                let key: Vec<String> = g.into_iter().map(str::to_owned).collect();
                let df = self.doc_freq.get(&key).copied().unwrap_or(0.0).max(1.0);
                let w = tf as f64 * (self.log_docs - df.ln());
                norms[n - 1] += w * w;
                weights[n - 1].insert(key, w);
            }
            norms[n - 1] = norms[n - 1].sqrt();
        }
        CiderVector {
            weights,
            norms,
            length: tokens.len(),
        }
    }

    /// Per-order similarity: clipped dot product over the norms, times the
    /// Gaussian length penalty.
    pub fn similarity(&self, hyp: &CiderVector, reference: &CiderVector) -> [f64; 4] {
        let delta = hyp.length as f64 - reference.length as f64;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        let mut out = [0.0; 4];
        for n in 0..4 {
            let mut dot = 0.0;
            for (g, &h) in &hyp.weights[n] {
                if let Some(&r) = reference.weights[n].get(g) {
                    dot += h.min(r) * r;
                }
            }
            if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= hyp.norms[n] * reference.norms[n];
            }
            out[n] = dot * penalty;
        }
        out
    }

    /// Score of one hypothesis against its references, in `[0, 10]`.
    pub fn score<S: AsRef<str>>(&self, hypothesis: &[S], references: &[Vec<S>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::domain("cider_d", "hypothesis without references"));
        }
        let h = self.vectorize(hypothesis);
        let mut acc = 0.0;
        for r in references {
            let sims = self.similarity(&h, &self.vectorize(r));
            acc += sims.iter().sum::<f64>() / 4.0;
        }
        Ok(acc / references.len() as f64 * 10.0)
    }
}

/// Mean CIDEr-D over a corpus, with document frequencies from `references`.
pub fn cider_d<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape("cider_d", &[references.len()], &[hypotheses.len()]));
    }
    let scorer = CiderD::new(references)?;
    let mut total = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        total += scorer.score(h, r)?;
    }
    Ok(total / hypotheses.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain(
            "spearman",
            format!("need two equal-length inputs of at least 2 values, got {} and {}", x.len(), y.len()),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    let (rx, ry) = (fractional_ranks(x), fractional_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("spearman", "zero rank variance"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// `None` when the class had no positive frame.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_ap: Vec<ClassAp>,
    pub map: Option<f64>,
    pub accuracy: Option<f64>,
    pub driver_mse: Option<f64>,
    pub driver_mae: Option<f64>,
    pub bleu4: Option<f64>,
    pub cider_d: Option<f64>,
    /// Always absent: needs external synonym resources.
    pub meteor: Option<f64>,
    pub spearman: Option<f64>,
    pub frames: usize,
    pub bleu_smoothing: String,
    pub ap_tie_breaking: String,
    pub background_convention: String,
}

impl MetricReport {
    pub fn new() -> Self {
        MetricReport {
            bleu_smoothing: BLEU_SMOOTHING.into(),
            ap_tie_breaking: "stable input order".into(),
            background_convention: "each cause scored one-vs-rest over all frames; background frames count as negatives"
                .into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.map,
            self.accuracy,
            self.driver_mse,
            self.driver_mae,
            self.bleu4,
            self.cider_d,
            self.spearman,
        ];
        if all.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "metric_report" });
        }
        for ap in self.per_class_ap.iter().filter_map(|c| c.ap).chain(self.map) {
            if !(0.0..=1.0).contains(&ap) {
                return Err(Error::domain("metric_report", format!("AP {ap} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for c in &self.per_class_ap {
            match c.ap {
                Some(ap) => s.push_str(&format!("{},{ap}\n", c.class)),
                None => s.push_str(&format!("{},\n", c.class)),
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("per_class_ap.csv");
        std::fs::write(&csv, self.per_class_csv()).map_err(|e| Error::io(&csv, e))
    }
}
