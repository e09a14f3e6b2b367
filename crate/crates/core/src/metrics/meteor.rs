//! METEOR with exact and stem matching stages.
//!
//! `score = F_mean · (1 − γ (chunks / matches)^β)` with
//! `F_mean = P R / (α P + (1 − α) R)`, maximized over references.

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use super::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// Unigram alignment as `(candidate_index, reference_index)` pairs.
fn align(cand: &[String], refr: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; refr.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let cand_stems: Vec<String> = cand.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let ref_stems: Vec<String> = refr.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for stage in 0..2 {
        let (ck, rk) = if stage == 0 {
            (cand, refr)
        } else {
            (&cand_stems[..], &ref_stems[..])
        };
        for ci in 0..cand.len() {
            if cand_used[ci] {
                continue;
            }
            // Prefer continuing the chunk of the previous candidate word.
            let follow = ci
                .checked_sub(1)
                .and_then(|prev| pairs.iter().find(|(c, _)| *c == prev))
                .map(|(_, r)| r + 1)
                .filter(|&r| r < refr.len() && !ref_used[r] && rk[r] == ck[ci]);
            let target = follow.or_else(|| (0..refr.len()).find(|&r| !ref_used[r] && rk[r] == ck[ci]));
            if let Some(r) = target {
                cand_used[ci] = true;
                ref_used[r] = true;
                pairs.push((ci, r));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

fn score_single(cand: &[String], refr: &[String], p: MeteorParams, stemmer: &Stemmer) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let pairs = align(cand, refr, stemmer);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let precision = m / cand.len() as f64;
    let recall = m / refr.len() as f64;
    let f_mean = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall);
    let frag = count_chunks(&pairs) as f64 / m;
    let penalty = p.gamma * frag.powf(p.beta);
    f_mean * (1.0 - penalty)
}

/// METEOR of `candidate` against the best-matching reference.
pub fn meteor(candidate: &str, references: &[&str], params: MeteorParams) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    let cand = tokenize(candidate);
    references
        .iter()
        .map(|r| score_single(&cand, &tokenize(r), params, &stemmer))
        .fold(0.0, f64::max)
}
