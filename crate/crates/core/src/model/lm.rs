//! Pre-LN causal transformer over a token stream, with a tied output head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ones, xavier_uniform, zeros, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self, d_llm: usize) -> Result<()> {
        if self.layers == 0 || self.ffn_mult == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("lm layers, ffn_mult and max_seq_len must be positive".into()));
        }
        if self.heads == 0 || !d_llm.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("lm heads={} must divide d_llm={d_llm}", self.heads)));
        }
        Ok(())
    }
}

pub fn init_params<R: Rng>(cfg: &LmConfig, vocab: usize, d: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("lm.tok_emb", normal(rng, vocab, d, 0.02), true);
    p.insert("lm.pos_emb", normal(rng, cfg.max_seq_len, d, 0.02), true);
    let f = d * cfg.ffn_mult;
    for l in 0..cfg.layers {
        let n = |s: &str| format!("lm.{l}.{s}");
        p.insert(n("ln1.gamma"), ones(1, d), true);
        p.insert(n("ln1.beta"), zeros(1, d), true);
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(n(&format!("attn.{w}")), xavier_uniform(rng, d, d), true);
        }
        p.insert(n("ln2.gamma"), ones(1, d), true);
        p.insert(n("ln2.beta"), zeros(1, d), true);
        p.insert(n("ffn.w1"), xavier_uniform(rng, d, f), true);
        p.insert(n("ffn.b1"), zeros(1, f), true);
        p.insert(n("ffn.w2"), xavier_uniform(rng, f, d), true);
        p.insert(n("ffn.b2"), zeros(1, d), true);
    }
    p.insert("lm.ln_f.gamma", ones(1, d), true);
    p.insert("lm.ln_f.beta", zeros(1, d), true);
    p
}

fn self_attention(g: &mut Graph, params: &ParamStore, l: usize, heads: usize, x: Var, mask: &Mat) -> Var {
    let w = |g: &mut Graph, s: &str| g.param(params, &format!("lm.{l}.attn.{s}"));
    let (wq, wk, wv, wo) = (w(g, "wq"), w(g, "wk"), w(g, "wv"), w(g, "wo"));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let d = g.shape(q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.masked_softmax_rows(s, mask);
        outs.push(g.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    g.matmul(cat, wo)
}

fn layer_norm(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Var {
    let gamma = g.param(params, &format!("{prefix}.gamma"));
    let beta = g.param(params, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Adds positions, runs every block under the additive `mask`, and returns
/// the final-norm hidden states `[L, D]`.
pub fn hidden_states(g: &mut Graph, params: &ParamStore, cfg: &LmConfig, stream: Var, mask: &Mat) -> Result<Var> {
    let len = g.shape(stream).0;
    if len > cfg.max_seq_len {
        return Err(Error::Input(format!("sequence of {len} tokens exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let pos = g.param(params, "lm.pos_emb");
    let pos = g.slice_rows(pos, 0, len);
    let mut x = g.add(stream, pos);
    for l in 0..cfg.layers {
        let h = layer_norm(g, params, &format!("lm.{l}.ln1"), x);
        let a = self_attention(g, params, l, cfg.heads, h, mask);
        x = g.add(x, a);
        let h = layer_norm(g, params, &format!("lm.{l}.ln2"), x);
        let f = crate::stc_aggregator::feed_forward(g, params, &format!("lm.{l}.ffn"), h);
        x = g.add(x, f);
    }
    Ok(layer_norm(g, params, "lm.ln_f", x))
}

/// Tied-head logits for the given hidden rows.
pub fn logits(g: &mut Graph, params: &ParamStore, hidden: Var) -> Var {
    let emb = g.param(params, "lm.tok_emb");
    g.matmul_t(hidden, emb)
}
