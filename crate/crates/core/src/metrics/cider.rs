//! CIDEr-D: clipped TF-IDF n-gram cosine with a Gaussian length penalty,
//! scaled by 10. Document frequencies are computed over the reference sets of
//! the whole corpus, so per-sample scores depend on the corpus.

use std::collections::{HashMap, HashSet};

use super::tokenize;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;

type NgramCounts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts {
    let mut out = NgramCounts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct Weighted {
    vecs: Vec<NgramCounts>,
    norms: Vec<f64>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderResult {
    pub per_sample: Vec<f64>,
    pub corpus: f64,
}

pub struct CiderScorer {
    n: usize,
    sigma: f64,
    doc_freq: HashMap<Vec<String>, f64>,
    log_num_docs: f64,
}

impl CiderScorer {
    /// Builds document frequencies from per-sample reference sets.
    pub fn new(references: &[Vec<String>], n: usize, sigma: f64) -> Result<Self> {
        if references.is_empty() || references.iter().all(|r| r.is_empty()) {
            return Err(Error::Config("CIDEr needs a non-empty reference corpus".into()));
        }
        let mut doc_freq: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in references {
            let mut seen: HashSet<Vec<String>> = HashSet::new();
            for r in refs {
                let toks = tokenize(r);
                for k in 1..=n {
                    seen.extend(ngram_counts(&toks, k).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            n,
            sigma,
            doc_freq,
            log_num_docs: (references.len() as f64).ln(),
        })
    }

    pub fn idf(&self, ngram: &[&str]) -> f64 {
        let key: Vec<String> = ngram.iter().map(|s| s.to_string()).collect();
        self.log_num_docs - self.doc_freq.get(&key).copied().unwrap_or(0.0).max(1.0).ln()
    }

    fn weigh(&self, text: &str) -> Weighted {
        let toks = tokenize(text);
        let mut vecs = Vec::with_capacity(self.n);
        let mut norms = Vec::with_capacity(self.n);
        for k in 1..=self.n {
            let mut v = ngram_counts(&toks, k);
            for (g, tf) in v.iter_mut() {
                let df = self.doc_freq.get(g).copied().unwrap_or(0.0).max(1.0);
                *tf *= self.log_num_docs - df.ln();
            }
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        Weighted {
            vecs,
            norms,
            len: toks.len(),
        }
    }

    fn similarity(&self, hyp: &Weighted, refr: &Weighted) -> Vec<f64> {
        let delta = hyp.len as f64 - refr.len as f64;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        (0..self.n)
            .map(|k| {
                let mut val = 0.0;
                for (g, &h) in &hyp.vecs[k] {
                    if let Some(&r) = refr.vecs[k].get(g) {
                        val += h.min(r) * r;
                    }
                }
                if hyp.norms[k] != 0.0 && refr.norms[k] != 0.0 {
                    val /= hyp.norms[k] * refr.norms[k];
                }
                val * penalty
            })
            .collect()
    }

    /// Score of one candidate against its references, in `[0, 10]`.
    pub fn score(&self, candidate: &str, references: &[String]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.weigh(candidate);
        let mut total = 0.0;
        for r in references {
            let sims = self.similarity(&hyp, &self.weigh(r));
            total += sims.iter().sum::<f64>() / self.n as f64;
        }
        10.0 * total / references.len() as f64
    }
}

/// Per-sample and corpus (mean) CIDEr-D for `(candidate, references)` pairs.
pub fn cider(samples: &[(String, Vec<String>)], n: usize, sigma: f64) -> Result<CiderResult> {
    let refs: Vec<Vec<String>> = samples.iter().map(|(_, r)| r.clone()).collect();
    let scorer = CiderScorer::new(&refs, n, sigma)?;
    let per_sample: Vec<f64> = samples.iter().map(|(c, r)| scorer.score(c, r)).collect();
    let corpus = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderResult { per_sample, corpus })
}
