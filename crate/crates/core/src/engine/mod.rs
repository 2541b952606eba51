//! Greedy and beam decoders, with and without speculative drafting, under a
//! layer-unit cost model.
//!
//! One base pass over any number of positions costs `N_l` units; one draft
//! costs the drafter's block count. Committed tokens include a final EOS.

mod beam;
mod drafter;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use beam::{decode_beam, decode_beam_with, decode_speculative_beam};
pub use drafter::{
    AlwaysWrong, DraftContext, Drafter, ForcedAccept, KvpsnDrafter, MedusaDrafter, MedusaState,
};

use crate::error::{invalid, Error, Result};
use crate::model::{vocab::EOS, EncoderOutput, KVCache, Model};
use crate::numcore::{argmax, softmax_row, Tensor};

/// Validation threshold: a draft is kept when it ranks among the `k` most
/// likely base tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopK {
    Finite(usize),
    Infinite,
}

impl TopK {
    pub fn admits(self, rank: usize) -> bool {
        match self {
            TopK::Finite(k) => rank < k,
            TopK::Infinite => true,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Finite(k) => write!(f, "{k}"),
            TopK::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "infinity" => Ok(TopK::Infinite),
            t => match t.parse::<usize>() {
                Ok(0) => invalid("k must be at least 1"),
                Ok(k) => Ok(TopK::Finite(k)),
                Err(_) => invalid(format!("bad k {t:?}")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Beam,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "beam" => Ok(Mode::Beam),
            _ => invalid(format!("unknown mode {s:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Greedy => "greedy",
            Mode::Beam => "beam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drafting {
    None,
    Kvpsn,
    Medusa,
}

impl FromStr for Drafting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Drafting::None),
            "kvpsn" => Ok(Drafting::Kvpsn),
            "medusa" => Ok(Drafting::Medusa),
            _ => invalid(format!("unknown drafting {s:?}")),
        }
    }
}

impl fmt::Display for Drafting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Drafting::None => "none",
            Drafting::Kvpsn => "kvpsn",
            Drafting::Medusa => "medusa",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: Mode,
    pub k: TopK,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub drafting: Drafting,
    /// Keep decoding past EOS until the length cap (cost measurements).
    #[serde(default)]
    pub ignore_eos: bool,
    #[doc(hidden)]
    #[serde(skip)]
    pub fault_accept_first_reject: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Greedy,
            k: TopK::Finite(1),
            beam_width: 3,
            max_new_tokens: 64,
            drafting: Drafting::None,
            ignore_eos: false,
            fault_accept_first_reject: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == TopK::Finite(0) {
            return invalid("k must be at least 1");
        }
        if self.beam_width == 0 {
            return invalid("beam width must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    BaseGenerated,
    DraftAccepted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

/// A validation decision for the draft that would land at output index
/// `position`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftEvent {
    pub position: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub base_passes: u64,
    pub draft_passes: u64,
    pub base_units_per_pass: u64,
    pub draft_units_per_pass: u64,
    pub layer_units: u64,
}

impl Cost {
    fn new(n_l: usize, n_g: usize) -> Self {
        Self {
            base_units_per_pass: n_l as u64,
            draft_units_per_pass: n_g as u64,
            ..Default::default()
        }
    }

    fn base_pass(&mut self) {
        self.base_passes += 1;
        self.layer_units += self.base_units_per_pass;
    }

    fn draft_pass(&mut self) {
        self.draft_passes += 1;
        self.layer_units += self.draft_units_per_pass;
    }

    /// `layer_units == base_passes·N_l + draft_passes·N_g`
    pub fn is_consistent(&self) -> bool {
        self.layer_units
            == self.base_passes * self.base_units_per_pass + self.draft_passes * self.draft_units_per_pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub tokens: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub events: Vec<DraftEvent>,
    pub cost: Cost,
    pub wall_ns: u64,
    /// Sum of base log-probabilities of `tokens` (filled by beam search).
    #[serde(default)]
    pub score: Option<f64>,
}

impl DecodeTrace {
    fn new(cost: Cost) -> Self {
        Self {
            tokens: Vec::new(),
            provenance: Vec::new(),
            events: Vec::new(),
            cost,
            wall_ns: 0,
            score: None,
        }
    }

    pub fn accepted(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.verdict == Verdict::Accept)
            .count()
    }

    pub fn units_per_token(&self) -> Result<f64> {
        if self.tokens.is_empty() {
            return invalid("empty trace");
        }
        Ok(self.cost.layer_units as f64 / self.tokens.len() as f64)
    }

    /// Units per token excluding the prompt pass that produced the first
    /// token.
    pub fn steady_units_per_token(&self) -> Result<f64> {
        if self.tokens.len() < 2 {
            return invalid("need at least two tokens");
        }
        let units = self.cost.layer_units - self.cost.base_units_per_pass;
        Ok(units as f64 / (self.tokens.len() - 1) as f64)
    }

    pub fn content(&self) -> &[u32] {
        match self.tokens.iter().position(|&t| t == EOS) {
            Some(i) => &self.tokens[..i],
            None => &self.tokens,
        }
    }

    /// Every `DraftAccepted` token has an `Accept` event at its position.
    pub fn provenance_consistent(&self) -> bool {
        self.tokens.len() == self.provenance.len()
            && self.provenance.iter().enumerate().all(|(i, p)| {
                *p == Provenance::BaseGenerated
                    || self
                        .events
                        .iter()
                        .any(|e| e.position == i && e.verdict == Verdict::Accept)
            })
    }

    fn commit(&mut self, token: u32, how: Provenance) {
        self.tokens.push(token);
        self.provenance.push(how);
    }
}

/// Softmax of one logit row.
pub fn probabilities(logits: &[f32]) -> Vec<f32> {
    let mut p = logits.to_vec();
    softmax_row(&mut p);
    p
}

/// Greedy choice from logits: the most probable token, lowest id on ties.
pub fn greedy_token(logits: &[f32]) -> u32 {
    argmax(&probabilities(logits)) as u32
}

/// Rank of `token` in `probs`: the number of tokens strictly preferred to it,
/// where equal probabilities prefer the lower id.
pub fn rank_of(token: u32, probs: &[f32]) -> usize {
    let t = token as usize;
    let p = probs[t];
    probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < t))
        .count()
}

/// Indices of the `n` most probable tokens, best first.
pub fn top_n(probs: &[f32], n: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..probs.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    ids
}

/// True when `draft` is among the `k` most probable tokens of `probs`.
/// Tokens outside the vocabulary are never accepted.
pub fn validate(draft: u32, probs: &[f32], k: TopK) -> bool {
    if draft as usize >= probs.len() {
        return false;
    }
    match k {
        TopK::Infinite => true,
        TopK::Finite(k) => rank_of(draft, probs) < k,
    }
}

/// Fraction of drafts accepted.
pub fn acceptance_rate(trace: &DecodeTrace) -> Result<f64> {
    if trace.events.is_empty() {
        return invalid("trace has no drafts");
    }
    Ok(trace.accepted() as f64 / trace.events.len() as f64)
}

/// Upper bound on the fractional saving from one-token drafting:
/// `(N_l − N_g)/(N_l + N_g)`.
pub fn theoretical_max_speedup(n_layers: usize, n_groups: usize) -> Result<f64> {
    if n_groups >= n_layers {
        return invalid(format!("{n_groups} groups for {n_layers} layers"));
    }
    Ok((n_layers - n_groups) as f64 / (n_layers + n_groups) as f64)
}

/// Baseline units per token divided by this trace's units per token.
pub fn relative_speed(trace: &DecodeTrace, baseline: &DecodeTrace) -> Result<f64> {
    Ok(baseline.units_per_token()? / trace.units_per_token()?)
}

/// The same ratio from wall-clock time per token.
pub fn relative_wall_speed(trace: &DecodeTrace, baseline: &DecodeTrace) -> Result<f64> {
    if trace.tokens.is_empty() || baseline.tokens.is_empty() {
        return invalid("empty trace");
    }
    let per = |t: &DecodeTrace| t.wall_ns.max(1) as f64 / t.tokens.len() as f64;
    Ok(per(baseline) / per(trace))
}

/// Number of new tokens the model has room for after `prompt`.
pub(crate) fn token_budget(model: &Model, prompt: &[u32], max_new: usize) -> Result<usize> {
    if prompt.is_empty() {
        return invalid("empty prompt");
    }
    if prompt.len() >= model.cfg.max_len {
        return Err(Error::Overflow {
            needed: prompt.len() + 1,
            max_len: model.cfg.max_len,
        });
    }
    Ok(max_new.min(model.cfg.max_len - prompt.len()))
}

fn stops(token: u32, cfg: &DecodeConfig) -> bool {
    token == EOS && !cfg.ignore_eos
}

/// Plain autoregressive greedy decoding.
pub fn decode_base_greedy(
    model: &Model,
    prompt: &[u32],
    enc: &EncoderOutput,
    max_new: usize,
) -> Result<DecodeTrace> {
    let cfg = DecodeConfig {
        max_new_tokens: max_new,
        ..Default::default()
    };
    decode_base_greedy_with(model, prompt, enc, &cfg)
}

/// [`decode_base_greedy`] honouring `cfg.max_new_tokens` and
/// `cfg.ignore_eos`.
pub fn decode_base_greedy_with(
    model: &Model,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    let budget = token_budget(model, prompt, cfg.max_new_tokens)?;
    let mut trace = DecodeTrace::new(Cost::new(model.cfg.n_layers, 0));
    let mut cache = model.new_cache(enc)?;
    let start = Instant::now();
    let mut input: Vec<u32> = prompt.to_vec();
    while trace.tokens.len() < budget {
        let out = model.decoder_forward(&input, &mut cache)?;
        trace.cost.base_pass();
        let next = greedy_token(out.logits.row(out.logits.rows() - 1));
        trace.commit(next, Provenance::BaseGenerated);
        if stops(next, cfg) {
            break;
        }
        input = vec![next];
    }
    trace.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(trace)
}

/// Dispatches on `cfg.mode` and `cfg.drafting`.
pub fn decode(model: &Model, prompt: &[u32], enc: &EncoderOutput, cfg: &DecodeConfig) -> Result<DecodeTrace> {
    cfg.validate()?;
    match (cfg.mode, cfg.drafting) {
        (Mode::Greedy, Drafting::None) => decode_base_greedy_with(model, prompt, enc, cfg),
        (Mode::Greedy, _) => decode_speculative_greedy(model, prompt, enc, cfg),
        (Mode::Beam, Drafting::None) => decode_beam(model, prompt, enc, cfg),
        (Mode::Beam, _) => decode_speculative_beam(model, prompt, enc, cfg),
    }
}

/// Greedy decoding with the drafter named by `cfg.drafting`.
pub fn decode_speculative_greedy(
    model: &Model,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    match cfg.drafting {
        Drafting::None => invalid("speculative decoding needs a drafter"),
        Drafting::Kvpsn => decode_speculative_greedy_with(model, &KvpsnDrafter, prompt, enc, cfg),
        Drafting::Medusa => decode_speculative_greedy_with(model, &MedusaDrafter, prompt, enc, cfg),
    }
}

/// Result of one draft-then-validate cycle from the last committed token.
pub(crate) struct CycleOutcome {
    pub draft: u32,
    /// Probabilities for the draft's position and the one after it.
    pub d1: Vec<f32>,
    pub d2: Vec<f32>,
    /// Final hidden rows for the two processed positions.
    pub hidden: Tensor,
}

/// Drafts from `token` at `cache.len()`, then runs the two-position base
/// pass. The cache is left holding both positions.
pub(crate) fn run_cycle<D: Drafter>(
    model: &Model,
    drafter: &D,
    state: &mut D::State,
    token: u32,
    cache: &mut KVCache,
    cost: &mut Cost,
) -> Result<CycleOutcome> {
    let position = cache.len();
    let draft = drafter.draft(
        model,
        state,
        &DraftContext {
            token,
            position,
            cache,
        },
    )?;
    cost.draft_pass();
    let out = model.decoder_forward(&[token, draft], cache)?;
    cost.base_pass();
    Ok(CycleOutcome {
        draft,
        d1: probabilities(out.logits.row(0)),
        d2: probabilities(out.logits.row(1)),
        hidden: out.hidden_last,
    })
}

pub(crate) fn first_row(t: &Tensor) -> Result<Tensor> {
    Tensor::matrix(1, t.cols(), t.row(0).to_vec())
}

/// Interleaved draft / two-position validation decoding.
pub fn decode_speculative_greedy_with<D: Drafter>(
    model: &Model,
    drafter: &D,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    let budget = token_budget(model, prompt, cfg.max_new_tokens)?;
    let mut trace = DecodeTrace::new(Cost::new(model.cfg.n_layers, drafter.units_per_draft(model)));
    if budget == 0 {
        return Ok(trace);
    }
    let mut cache = model.new_cache(enc)?;
    let mut state = drafter.start(model, enc)?;
    let mut fault_pending = cfg.fault_accept_first_reject;
    let start = Instant::now();

    let out = model.decoder_forward(prompt, &mut cache)?;
    trace.cost.base_pass();
    drafter.observe(model, &mut state, &out.hidden_last)?;
    let mut last = greedy_token(out.logits.row(out.logits.rows() - 1));
    trace.commit(last, Provenance::BaseGenerated);
    let mut done = stops(last, cfg);

    while !done && trace.tokens.len() < budget {
        let c = run_cycle(model, drafter, &mut state, last, &mut cache, &mut trace.cost)?;
        let mut accept = validate(c.draft, &c.d1, cfg.k);
        if !accept && fault_pending {
            accept = true;
            fault_pending = false;
        }
        let position = trace.tokens.len();
        trace.events.push(DraftEvent {
            position,
            verdict: if accept { Verdict::Accept } else { Verdict::Reject },
        });
        if accept {
            trace.commit(c.draft, Provenance::DraftAccepted);
            if stops(c.draft, cfg) || trace.tokens.len() == budget {
                break;
            }
            drafter.observe(model, &mut state, &c.hidden)?;
            last = argmax(&c.d2) as u32;
            trace.commit(last, Provenance::BaseGenerated);
        } else {
            cache.truncate(cache.len() - 1)?;
            drafter.observe(model, &mut state, &first_row(&c.hidden)?)?;
            last = argmax(&c.d1) as u32;
            trace.commit(last, Provenance::BaseGenerated);
        }
        done = stops(last, cfg);
    }
    trace.wall_ns = start.elapsed().as_nanos() as u64;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_ranks() {
        let p = [0.1f32, 0.5, 0.3, 0.1];
        assert!(validate(1, &p, TopK::Finite(1)));
        assert!(!validate(2, &p, TopK::Finite(1)));
        assert!(validate(2, &p, TopK::Finite(2)));
        assert!(validate(0, &p, TopK::Infinite));
        assert!(!validate(9, &p, TopK::Infinite));
    }

    #[test]
    fn ties_prefer_lower_id() {
        let p = [0.25f32, 0.25, 0.25, 0.25];
        assert!(validate(0, &p, TopK::Finite(1)));
        assert!(!validate(1, &p, TopK::Finite(1)));
        assert_eq!(top_n(&p, 2), vec![0, 1]);
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn max_speedup_values() {
        assert_eq!(theoretical_max_speedup(12, 3).unwrap(), 0.6);
        assert_eq!(theoretical_max_speedup(6, 2).unwrap(), 0.5);
        assert!(theoretical_max_speedup(12, 12).is_err());
    }

    #[test]
    fn topk_parse() {
        assert_eq!("inf".parse::<TopK>().unwrap(), TopK::Infinite);
        assert_eq!("3".parse::<TopK>().unwrap(), TopK::Finite(3));
        assert!("0".parse::<TopK>().is_err());
        assert_eq!(TopK::Infinite.to_string(), "inf");
    }

    fn trace_with(verdicts: &[Verdict]) -> DecodeTrace {
        let mut t = DecodeTrace::new(Cost::new(6, 2));
        for (i, &v) in verdicts.iter().enumerate() {
            t.events.push(DraftEvent {
                position: i,
                verdict: v,
            });
        }
        t
    }

    #[test]
    fn acceptance_counts() {
        use Verdict::*;
        assert_eq!(acceptance_rate(&trace_with(&[Accept, Accept])).unwrap(), 1.0);
        assert_eq!(acceptance_rate(&trace_with(&[Reject, Reject])).unwrap(), 0.0);
        let mixed = [Accept, Reject, Reject, Accept, Accept, Reject, Accept];
        let hand = mixed.iter().filter(|v| **v == Accept).count() as f64 / mixed.len() as f64;
        assert_eq!(acceptance_rate(&trace_with(&mixed)).unwrap(), hand);
        assert!(acceptance_rate(&trace_with(&[])).is_err());
    }
}
