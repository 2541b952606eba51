use std::fmt;
use std::str::FromStr;

use crate::engine::{decode, DecodeConfig, DecodeTrace, Drafting, Mode, TopK};
use crate::error::{invalid, Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::train::Example;

use super::metrics::{bleu, sequence_accuracy};
use super::report::{ReportRow, RunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Base,
    PruneL8,
    Medusa,
    Kvpsn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::PruneL8, Method::Medusa, Method::Kvpsn];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::PruneL8 => "prune-l8",
            Method::Medusa => "medusa",
            Method::Kvpsn => "kvpsn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}")))
    }
}

/// The validation thresholds swept for drafting methods.
pub const SWEEP_K: [TopK; 4] = [TopK::Finite(1), TopK::Finite(2), TopK::Finite(3), TopK::Infinite];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub rounds: usize,
    pub max_new_tokens: usize,
    pub beam_width: usize,
    pub ignore_eos: bool,
    pub methods: Vec<Method>,
    pub modes: Vec<Mode>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            rounds: 10,
            max_new_tokens: 64,
            beam_width: 3,
            ignore_eos: false,
            methods: Method::ALL.to_vec(),
            modes: vec![Mode::Greedy, Mode::Beam],
        }
    }
}

/// Decoding results of one configuration over a corpus.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub traces: Vec<DecodeTrace>,
    /// Mean over rounds of summed per-sequence decode time.
    pub wall_ns: f64,
}

impl Evaluation {
    pub fn tokens(&self) -> u64 {
        self.traces.iter().map(|t| t.tokens.len() as u64).sum()
    }

    pub fn layer_units(&self) -> u64 {
        self.traces.iter().map(|t| t.cost.layer_units).sum()
    }

    pub fn units_per_token(&self) -> f64 {
        self.layer_units() as f64 / self.tokens().max(1) as f64
    }

    pub fn drafts(&self) -> u64 {
        self.traces.iter().map(|t| t.events.len() as u64).sum()
    }

    pub fn accepted(&self) -> u64 {
        self.traces.iter().map(|t| t.accepted() as u64).sum()
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        let d = self.drafts();
        (d > 0).then(|| self.accepted() as f64 / d as f64)
    }

    /// Fraction of sequences whose committed tokens equal the reference
    /// continuation, EOS included.
    pub fn sequence_accuracy(&self, examples: &[Example]) -> Result<f64> {
        let hyps: Vec<Vec<u32>> = self.traces.iter().map(|t| t.tokens.clone()).collect();
        let refs: Vec<Vec<u32>> = examples.iter().map(|e| e.reference().to_vec()).collect();
        sequence_accuracy(&hyps, &refs)
    }

    pub fn bleu(&self, examples: &[Example]) -> Result<f64> {
        let hyps: Vec<Vec<u32>> = self.traces.iter().map(|t| t.content().to_vec()).collect();
        let refs: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| e.reference()[..e.reference().len() - 1].to_vec())
            .collect();
        bleu(&hyps, &refs)
    }
}

/// Speech-path encoder outputs; computed once and excluded from timing.
pub fn encode_all(model: &Model, examples: &[Example]) -> Result<Vec<EncoderOutput>> {
    examples
        .iter()
        .map(|e| model.encode_features(&e.features))
        .collect()
}

/// Decodes every example `rounds` times. Traces come from the first round;
/// all rounds are checked to agree.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    encoded: &[EncoderOutput],
    cfg: &DecodeConfig,
    rounds: usize,
) -> Result<Evaluation> {
    if rounds == 0 {
        return invalid("rounds must be at least 1");
    }
    if examples.is_empty() || examples.len() != encoded.len() {
        return invalid("evaluation needs one encoding per example");
    }
    let mut traces: Vec<DecodeTrace> = Vec::new();
    let mut total_ns = 0u128;
    for round in 0..rounds {
        for (i, (ex, enc)) in examples.iter().zip(encoded).enumerate() {
            let t = decode(model, ex.prompt(), enc, cfg)?;
            total_ns += u128::from(t.wall_ns);
            if round == 0 {
                traces.push(t);
            } else if t.tokens != traces[i].tokens {
                return invalid("decoding is not deterministic across rounds");
            }
        }
    }
    Ok(Evaluation {
        traces,
        wall_ns: total_ns as f64 / rounds as f64,
    })
}

fn make_row(
    method: Method,
    k: Option<TopK>,
    mode: Mode,
    ev: &Evaluation,
    examples: &[Example],
    baseline: Option<(f64, f64)>,
) -> Result<ReportRow> {
    let tokens = ev.tokens();
    let first: u64 = ev.traces.iter().map(|t| t.cost.base_units_per_pass).sum();
    let steady_tokens = tokens.saturating_sub(ev.traces.len() as u64).max(1);
    let upt = ev.units_per_token();
    let altp = ev.wall_ns / tokens.max(1) as f64;
    let (base_upt, base_altp) = baseline.unwrap_or((upt, altp));
    Ok(ReportRow {
        method: method.name().to_string(),
        k,
        mode,
        sequences: examples.len(),
        sequence_accuracy: ev.sequence_accuracy(examples)?,
        bleu: ev.bleu(examples)?,
        tokens,
        layer_units: ev.layer_units(),
        first_pass_units: first,
        units_per_token: upt,
        steady_units_per_token: (ev.layer_units() - first) as f64 / steady_tokens as f64,
        drafts: ev.drafts(),
        accepted: ev.accepted(),
        acceptance_rate: ev.acceptance_rate(),
        altp_ns: altp,
        relative_speed: base_upt / upt,
        relative_wall_speed: base_altp / altp.max(f64::MIN_POSITIVE),
    })
}

/// Sweeps methods × thresholds × search modes. `pruned` is required when
/// the pruning baseline is requested.
pub fn run_bench(
    model: &Model,
    pruned: Option<&Model>,
    examples: &[Example],
    opts: &BenchOptions,
) -> Result<RunReport> {
    for m in &opts.methods {
        match m {
            Method::Kvpsn if !model.has_kvpsn() => {
                return Err(Error::Checkpoint("checkpoint has no kvpsn tensors".into()))
            }
            Method::Medusa if !model.has_medusa() => {
                return Err(Error::Checkpoint("checkpoint has no medusa tensors".into()))
            }
            Method::PruneL8 if pruned.is_none() => return invalid("prune-l8 needs a pruned checkpoint"),
            _ => {}
        }
    }
    let encoded = encode_all(model, examples)?;
    let cfg_for = |mode: Mode, drafting: Drafting, k: TopK| DecodeConfig {
        mode,
        k,
        beam_width: opts.beam_width,
        max_new_tokens: opts.max_new_tokens,
        drafting,
        ignore_eos: opts.ignore_eos,
        ..Default::default()
    };
    let base_cfg = cfg_for(Mode::Greedy, Drafting::None, TopK::Finite(1));
    let base_ev = evaluate(model, examples, &encoded, &base_cfg, opts.rounds)?;
    let baseline = (
        base_ev.units_per_token(),
        base_ev.wall_ns / base_ev.tokens().max(1) as f64,
    );

    let mut rows = Vec::new();
    for &method in &opts.methods {
        for &mode in &opts.modes {
            match method {
                Method::Base | Method::PruneL8 => {
                    let (m, enc) = if method == Method::Base {
                        (model, None)
                    } else {
                        let p = pruned.expect("checked above");
                        (p, Some(encode_all(p, examples)?))
                    };
                    let enc = enc.as_deref().unwrap_or(&encoded);
                    let ev = if method == Method::Base && mode == Mode::Greedy {
                        base_ev.clone()
                    } else {
                        evaluate(
                            m,
                            examples,
                            enc,
                            &cfg_for(mode, Drafting::None, TopK::Finite(1)),
                            opts.rounds,
                        )?
                    };
                    rows.push(make_row(method, None, mode, &ev, examples, Some(baseline))?);
                }
                Method::Medusa | Method::Kvpsn => {
                    let drafting = if method == Method::Kvpsn {
                        Drafting::Kvpsn
                    } else {
                        Drafting::Medusa
                    };
                    for k in SWEEP_K {
                        let ev = evaluate(
                            model,
                            examples,
                            &encoded,
                            &cfg_for(mode, drafting, k),
                            opts.rounds,
                        )?;
                        rows.push(make_row(method, Some(k), mode, &ev, examples, Some(baseline))?);
                    }
                }
            }
        }
    }
    Ok(RunReport { rows })
}

/// Report row for a single configuration, relative to base greedy.
pub fn single_row(
    model: &Model,
    examples: &[Example],
    cfg: &DecodeConfig,
    rounds: usize,
) -> Result<(ReportRow, Evaluation)> {
    let encoded = encode_all(model, examples)?;
    let ev = evaluate(model, examples, &encoded, cfg, rounds)?;
    let base_cfg = DecodeConfig {
        mode: Mode::Greedy,
        drafting: Drafting::None,
        k: TopK::Finite(1),
        ..cfg.clone()
    };
    let base = if &base_cfg == cfg {
        ev.clone()
    } else {
        evaluate(model, examples, &encoded, &base_cfg, rounds)?
    };
    let baseline = (base.units_per_token(), base.wall_ns / base.tokens().max(1) as f64);
    let method = match cfg.drafting {
        Drafting::None => Method::Base,
        Drafting::Kvpsn => Method::Kvpsn,
        Drafting::Medusa => Method::Medusa,
    };
    let k = (cfg.drafting != Drafting::None).then_some(cfg.k);
    let row = make_row(method, k, cfg.mode, &ev, examples, Some(baseline))?;
    Ok((row, ev))
}
