//! Multi-task objective.
//!
//! Speech path (features → speech encoder → decoder) and text path (source
//! tokens → text encoder → decoder) are both teacher-forced against the same
//! target. The text path distills into the speech path through a KL term
//! that stays switched off until the text loss has dropped below the speech
//! loss. The drafting network is trained the same way on both paths, reading
//! the base keys/values of the respective path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::task::Example;
use crate::error::{invalid, Result};
use crate::model::{Arch, ModelConfig};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Weights of the speech, text, distillation and drafter terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_st: f64,
    pub w_mt: f64,
    pub w_kl: f64,
    pub w_spec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_st: 2.0,
            w_mt: 1.0,
            w_kl: 0.5,
            w_spec: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_st, self.w_mt, self.w_kl, self.w_spec]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return invalid("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    /// `w_st·st + w_mt·mt + w_kl·kl·[gate]`
    pub fn combine(&self, st: f64, mt: f64, kl: f64, gate_open: bool) -> f64 {
        let kl_term = if gate_open { self.w_kl * kl } else { 0.0 };
        self.w_st * st + self.w_mt * mt + kl_term
    }
}

/// Raw per-term losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub st: f64,
    pub mt: f64,
    pub kl: f64,
    pub spec_st: f64,
    pub spec_mt: f64,
    pub spec_kl: f64,
    pub medusa_st: f64,
    pub medusa_mt: f64,
    pub medusa_kl: f64,
}

impl LossComponents {
    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.st += s * o.st;
        self.mt += s * o.mt;
        self.kl += s * o.kl;
        self.spec_st += s * o.spec_st;
        self.spec_mt += s * o.spec_mt;
        self.spec_kl += s * o.spec_kl;
        self.medusa_st += s * o.medusa_st;
        self.medusa_mt += s * o.medusa_mt;
        self.medusa_kl += s * o.medusa_kl;
    }

    pub fn mean(items: &[LossComponents]) -> LossComponents {
        let mut out = LossComponents::default();
        let s = 1.0 / items.len().max(1) as f64;
        for it in items {
            out.add_scaled(it, s);
        }
        out
    }
}

/// Components plus the weighted totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_st: f64,
    pub l_mt: f64,
    pub l_kl: f64,
    pub l_spec_st: f64,
    pub l_spec_mt: f64,
    pub l_spec_kl: f64,
    pub kl_gate_open: bool,
    pub l_base: f64,
    pub l_spec: f64,
    pub l_total: f64,
    /// Objective of the Medusa baseline head; trained alongside but outside
    /// `l_total` since it shares no trainable parameters with the rest.
    pub l_medusa: f64,
}

impl LossBreakdown {
    pub fn assemble(c: &LossComponents, w: &LossWeights, gate_open: bool) -> Self {
        let l_base = w.combine(c.st, c.mt, c.kl, gate_open);
        let l_spec = w.combine(c.spec_st, c.spec_mt, c.spec_kl, gate_open);
        Self {
            l_st: c.st,
            l_mt: c.mt,
            l_kl: c.kl,
            l_spec_st: c.spec_st,
            l_spec_mt: c.spec_mt,
            l_spec_kl: c.spec_kl,
            kl_gate_open: gate_open,
            l_base,
            l_spec,
            l_total: l_base + w.w_spec * l_spec,
            l_medusa: w.combine(c.medusa_st, c.medusa_mt, c.medusa_kl, gate_open),
        }
    }
}

/// Latching switch for the distillation term.
///
/// Opens once the running mean of the text loss over the last `window`
/// steps is below that of the speech loss, and never closes again.
#[derive(Clone, Debug)]
pub struct KlGate {
    window: usize,
    history: VecDeque<(f64, f64)>,
    open: bool,
}

impl KlGate {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            history: VecDeque::new(),
            open: false,
        }
    }

    pub fn opened(window: usize) -> Self {
        Self {
            open: true,
            ..Self::new(window)
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Running means `(st, mt)` over the current window.
    pub fn means(&self) -> Option<(f64, f64)> {
        if self.history.is_empty() {
            return None;
        }
        let n = self.history.len() as f64;
        let (s, m) = self
            .history
            .iter()
            .fold((0.0, 0.0), |(a, b), &(s, m)| (a + s, b + m));
        Some((s / n, m / n))
    }

    /// Records one step's losses; returns whether the gate is open afterwards.
    pub fn record(&mut self, st: f64, mt: f64) -> bool {
        self.history.push_back((st, mt));
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        if !self.open && self.history.len() == self.window {
            if let Some((s, m)) = self.means() {
                self.open = m < s;
            }
        }
        self.open
    }
}

/// An example converted for a tape of scalar type `T`.
pub struct PreparedExample<T: Scalar> {
    pub features: Tensor<T>,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl<T: Scalar> PreparedExample<T> {
    pub fn from_example(ex: &Example) -> Self {
        Self {
            features: ex.features.cast(),
            src: ex.src.iter().map(|&t| t as usize).collect(),
            tgt: ex.tgt.iter().map(|&t| t as usize).collect(),
        }
    }
}

/// Which trainable parts to include in the objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub weights: LossWeights,
    pub gate_open: bool,
}

struct PathOut {
    logits: Var,
    spec_logits: Option<Var>,
    medusa_logits: Option<Var>,
}

fn run_path<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: &Arch,
    cfg: &ModelConfig,
    enc: Var,
    inputs: &[usize],
) -> Result<PathOut> {
    let cross = arch.cross_kv(g, enc)?;
    let pass = arch.decoder_pass(g, cfg, inputs, 0, None, &cross)?;
    let t = inputs.len();
    let spec_logits = match &arch.kvpsn {
        Some(k) if t >= 2 => {
            let positions: Vec<usize> = (1..t).collect();
            let tokens = &inputs[1..];
            let h_in = arch.embed(g, tokens, &positions)?;
            let group_kv = k.group_kv(g, &pass.kv)?;
            let kcross = k.cross_kv(g, enc)?;
            Some(k.forward(g, cfg, arch, h_in, &positions, &group_kv, t, &kcross)?)
        }
        _ => None,
    };
    let medusa_logits = match &arch.medusa {
        Some(m) => {
            let hidden = g.detach(pass.hidden);
            let mcross = m.cross_kv(g, enc)?;
            Some(m.forward(g, cfg, arch, hidden, 0, None, &mcross)?.logits)
        }
        None => None,
    };
    Ok(PathOut {
        logits: pass.logits,
        spec_logits,
        medusa_logits,
    })
}

/// Builds one example's objective on `g`.
///
/// Returns the scalar to differentiate and the raw component values.
pub fn example_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: &Arch,
    cfg: &ModelConfig,
    ex: &PreparedExample<T>,
    obj: &Objective,
) -> Result<(Var, LossComponents)> {
    let t = ex.tgt.len();
    if t < 3 || ex.src.is_empty() {
        return invalid("example too short");
    }
    let inputs = &ex.tgt[..t - 1];
    // Row p predicts tgt[p+1]; the language id (row 0's target) is given, not learned.
    let targets: Vec<Option<usize>> = (0..t - 1).map(|p| (p >= 1).then(|| ex.tgt[p + 1])).collect();
    let scored: Vec<usize> = (1..t - 1).collect();

    let enc_st = arch.encode_speech(g, cfg, &ex.features)?;
    let enc_mt = arch.encode_text(g, cfg, &ex.src)?;
    let st = run_path(g, arch, cfg, enc_st, inputs)?;
    let mt = run_path(g, arch, cfg, enc_mt, inputs)?;

    let w = obj.weights;
    let mut terms: Vec<(Var, T)> = Vec::new();
    let mut comp = LossComponents::default();
    let mut branch = |g: &mut Graph<'_, T>,
                      st_logits: Var,
                      mt_logits: Var,
                      rows: &[usize],
                      targets: &[Option<usize>],
                      scale: f64|
     -> Result<(f64, f64, f64)> {
        let l_st = g.cross_entropy(st_logits, targets)?;
        let l_mt = g.cross_entropy(mt_logits, targets)?;
        let s_rows = g.select_rows(st_logits, rows)?;
        let m_rows = g.select_rows(mt_logits, rows)?;
        let teacher = g.detach(m_rows);
        let l_kl = g.kl_divergence(teacher, s_rows)?;
        terms.push((l_st, T::of(scale * w.w_st)));
        terms.push((l_mt, T::of(scale * w.w_mt)));
        if obj.gate_open {
            terms.push((l_kl, T::of(scale * w.w_kl)));
        }
        let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        Ok((val(l_st), val(l_mt), val(l_kl)))
    };

    (comp.st, comp.mt, comp.kl) = branch(g, st.logits, mt.logits, &scored, &targets, 1.0)?;

    // Drafter row r sits at position r+1 and predicts tgt[r+2].
    let draft_targets: Vec<Option<usize>> = (1..t - 1).map(|i| Some(ex.tgt[i + 1])).collect();
    let draft_rows: Vec<usize> = (0..t - 2).collect();
    if let (Some(s), Some(m)) = (st.spec_logits, mt.spec_logits) {
        (comp.spec_st, comp.spec_mt, comp.spec_kl) = branch(g, s, m, &draft_rows, &draft_targets, w.w_spec)?;
    }
    // Medusa row p (input position p) predicts tgt[p+2].
    let medusa_targets: Vec<Option<usize>> = (0..t - 1).map(|p| (p + 2 < t).then(|| ex.tgt[p + 2])).collect();
    let medusa_rows: Vec<usize> = (0..t - 2).collect();
    if let (Some(s), Some(m)) = (st.medusa_logits, mt.medusa_logits) {
        (comp.medusa_st, comp.medusa_mt, comp.medusa_kl) =
            branch(g, s, m, &medusa_rows, &medusa_targets, w.w_spec)?;
    }
    let total = g.weighted_sum(&terms)?;
    Ok((total, comp))
}
