use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss, LossBreakdown, LossWeights, PreparedRecord, SamaModel};
use crate::autograd::Graph;
use crate::datagen::record::GroundedDialogueRecord;
use crate::error::{Error, Result};
use crate::params::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub text_loss_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub ablate_stc: bool,
    pub freeze_lm: bool,
    /// Steps averaged at each end of the curve for the smoothed losses.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 500,
            seed: 0,
            text_loss_weight: 1.0,
            bce_weight: 1.0,
            dice_weight: 1.0,
            ablate_stc: false,
            freeze_lm: false,
            smoothing_window: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.text_loss_weight > 0.0 && self.text_loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "text_loss_weight must be positive, got {}",
                self.text_loss_weight
            )));
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 {
            return Err(Error::Config("mask loss weights must be non-negative".into()));
        }
        if self.steps == 0 || self.smoothing_window == 0 {
            return Err(Error::Config("steps and smoothing_window must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            text: self.text_loss_weight,
            bce: self.bce_weight,
            dice: self.dice_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossRow>,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
}

impl TrainReport {
    fn new(curve: Vec<LossRow>, window: usize) -> Self {
        let w = window.min(curve.len() / 2).max(1);
        let mean = |rows: &[LossRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        Self {
            initial_smoothed: mean(&curve[..w]),
            final_smoothed: mean(&curve[curve.len() - w..]),
            curve,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.curve {
            w.serialize(row).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One optimizer update on exchange `exchange` of `prep`.
pub fn train_step(
    model: &mut SamaModel,
    prep: &PreparedRecord,
    exchange: usize,
    opt: &mut Adam,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, prep, exchange)?;
    let (total, breakdown) = loss(&mut g, &out, weights);
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            step: opt.steps_taken() as usize,
        });
    }
    g.backward(total);
    opt.step(&mut model.params, &g.param_grads());
    Ok(breakdown)
}

pub fn prepare_all(
    model: &SamaModel,
    records: &[GroundedDialogueRecord],
    frames_root: Option<&Path>,
) -> Result<Vec<PreparedRecord>> {
    records.par_iter().map(|r| model.prepare(r, frames_root)).collect()
}

/// Adam over single-exchange samples, reshuffled every epoch. Trainability
/// follows `cfg.freeze_lm`; the encoder is always frozen.
pub fn train(model: &mut SamaModel, data: &[PreparedRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let samples: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.num_exchanges()).map(move |j| (i, j)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Input("training set has no question/answer exchanges".into()));
    }
    model.set_trainability(cfg.freeze_lm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order = samples.clone();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (i, j) = order[cursor];
        cursor += 1;
        let l = train_step(model, &data[i], j, &mut opt, cfg.weights()).map_err(|e| match e {
            Error::Diverged { .. } => Error::Diverged { step },
            e => e,
        })?;
        debug!("step {step}: total {:.4} ce {:.4} bce {:.4} dice {:.4}", l.total, l.ce, l.bce, l.dice);
        if step % 50 == 0 {
            info!("step {step}/{}: loss {:.4}", cfg.steps, l.total);
        }
        curve.push(LossRow {
            step,
            total: l.total,
            ce: l.ce,
            bce: l.bce,
            dice: l.dice,
        });
    }
    Ok(TrainReport::new(curve, cfg.smoothing_window))
}
