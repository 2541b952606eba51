//! Synthetic task, multi-task objective and the training loop.

mod loss;
mod task;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use loss::{
    example_objective, KlGate, LossBreakdown, LossComponents, LossWeights, Objective, PreparedExample,
};
pub use task::{Example, SyntheticTaskSpec};

use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::numcore::{clip_grad_norm, AdamW, Grads, Graph};

/// Optimization settings.
///
/// Defaults train the default model on the synthetic task in about a quarter
/// hour on one CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub gate_window: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3500,
            batch_size: 16,
            lr: 2e-3,
            warmup: 250,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1.0,
            seed: 0,
            gate_window: 100,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.steps > 0 && self.warmup >= self.steps {
            return invalid(format!(
                "warmup {} must be below steps {}",
                self.warmup, self.steps
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return invalid("learning rate must be positive");
        }
        self.weights.validate()
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `cfg.steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    if step >= cfg.steps {
        return 0.0;
    }
    cfg.lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup) as f64
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

impl fmt::Display for TrainLogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.losses;
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.step,
            self.lr,
            b.l_st,
            b.l_mt,
            b.l_kl,
            b.l_spec,
            u8::from(b.kl_gate_open),
            b.l_total
        )
    }
}

impl TrainLogRow {
    /// Parses a line written by `Display`. The parsed row carries only the
    /// logged fields.
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        if f.len() != 8 {
            return invalid(format!("log line has {} fields", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Invalid(format!("{s}: {e}")));
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|e| Error::Invalid(format!("{}: {e}", f[0])))?,
            lr: num(f[1])?,
            losses: LossBreakdown {
                l_st: num(f[2])?,
                l_mt: num(f[3])?,
                l_kl: num(f[4])?,
                l_spec: num(f[5])?,
                kl_gate_open: f[6] == "1",
                l_total: num(f[7])?,
                ..Default::default()
            },
        })
    }
}

/// Where training examples come from.
pub enum ExampleSource<'a> {
    /// Fresh examples drawn from the task with per-example seeds.
    Stream(&'a SyntheticTaskSpec),
    /// A fixed corpus, cycled in order.
    Corpus(&'a [Example]),
}

impl ExampleSource<'_> {
    fn get(&self, seed: u64, index: u64) -> Result<Example> {
        match self {
            ExampleSource::Stream(task) => task.example_at(seed, index),
            ExampleSource::Corpus(items) => {
                if items.is_empty() {
                    return invalid("empty training corpus");
                }
                Ok(items[(index % items.len() as u64) as usize].clone())
            }
        }
    }
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub step: usize,
    pub gate: KlGate,
    opt: AdamW,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            &model.params,
            cfg.beta1 as f32,
            cfg.beta2 as f32,
            cfg.weight_decay as f32,
        );
        let gate = KlGate::new(cfg.gate_window);
        Ok(Self {
            model,
            cfg,
            step: 0,
            gate,
            opt,
        })
    }

    /// Continues from `step` with the gate in the given state.
    pub fn resume(model: Model, cfg: TrainConfig, step: usize, gate_open: bool) -> Result<Self> {
        let mut t = Self::new(model, cfg)?;
        t.step = step;
        if gate_open {
            t.gate = KlGate::opened(t.cfg.gate_window);
        }
        Ok(t)
    }

    /// Forward/backward over `batch` without updating; returns mean
    /// components and the summed gradient of the batch-mean objective.
    pub fn batch_gradients(&self, batch: &[Example], gate_open: bool) -> Result<(LossComponents, Grads)> {
        let obj = Objective {
            weights: self.cfg.weights,
            gate_open,
        };
        let mut grads = Grads::zeros_for(&self.model.params);
        let mut comps = Vec::with_capacity(batch.len());
        for ex in batch {
            let prepared = PreparedExample::<f32>::from_example(ex);
            let mut g = Graph::new(&self.model.params);
            let (loss, c) = example_objective(&mut g, &self.model.arch, &self.model.cfg, &prepared, &obj)?;
            let gr = g.backward(loss)?;
            g.accumulate_param_grads(&gr, &mut grads);
            comps.push(c);
        }
        grads.scale(1.0 / batch.len() as f32);
        Ok((LossComponents::mean(&comps), grads))
    }

    /// One optimizer update.
    pub fn step_on(&mut self, batch: &[Example]) -> Result<TrainLogRow> {
        let gate_open = self.gate.is_open();
        let (comps, mut grads) = self.batch_gradients(batch, gate_open).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: self.step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let losses = LossBreakdown::assemble(&comps, &self.cfg.weights, gate_open);
        if !losses.l_total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss {} / gradient not finite", losses.l_total),
            });
        }
        clip_grad_norm(&mut grads, self.cfg.clip_norm as f32);
        let lr = lr_at(self.step, &self.cfg);
        self.opt.update(&mut self.model.params, &grads, lr as f32);
        self.gate.record(comps.st, comps.mt);
        let row = TrainLogRow {
            step: self.step,
            lr,
            losses,
        };
        self.step += 1;
        Ok(row)
    }

    pub fn next_batch(&self, source: &ExampleSource<'_>) -> Result<Vec<Example>> {
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| source.get(self.cfg.seed, self.step as u64 * b + j))
            .collect()
    }

    /// Runs until `cfg.steps`, calling `on_step` after every update.
    pub fn run(
        &mut self,
        source: &ExampleSource<'_>,
        mut on_step: impl FnMut(&TrainLogRow),
    ) -> Result<Vec<TrainLogRow>> {
        let mut log = Vec::new();
        while self.step < self.cfg.steps {
            let batch = self.next_batch(source)?;
            let row = self.step_on(&batch)?;
            on_step(&row);
            log.push(row);
        }
        Ok(log)
    }
}

/// Trains a fresh model end to end.
pub fn train(
    model: Model,
    cfg: TrainConfig,
    source: &ExampleSource<'_>,
    on_step: impl FnMut(&TrainLogRow),
) -> Result<(Model, Vec<TrainLogRow>)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let log = trainer.run(source, on_step)?;
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            warmup: 100,
            lr: 3e-4,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 3e-4);
        assert_eq!(lr_at(1000, &c), 0.0);
    }

    #[test]
    fn schedule_matches_piecewise_form() {
        let c = cfg();
        for step in [50usize, 550, 999] {
            let closed = if step < 100 {
                3e-4 * step as f64 / 100.0
            } else {
                3e-4 * (1.0 - (step - 100) as f64 / 900.0)
            };
            assert!((lr_at(step, &c) - closed).abs() < 1e-15, "step {step}");
        }
    }

    #[test]
    fn log_row_round_trips() {
        let row = TrainLogRow {
            step: 12,
            lr: 1.5e-4,
            losses: LossBreakdown {
                l_st: 1.25,
                l_mt: 0.5,
                l_kl: 0.125,
                l_spec: 2.0,
                kl_gate_open: true,
                l_total: 3.4625,
                ..Default::default()
            },
        };
        let back = TrainLogRow::parse(&row.to_string()).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.losses.l_st, 1.25);
        assert!(back.losses.kl_gate_open);
        assert_eq!(row.to_string().split('\t').count(), 8);
    }
}
