use std::time::Instant;

use crate::error::{invalid, Result};
use crate::model::{EncoderOutput, KVCache, Model};
use crate::numcore::{log_softmax_row, Tensor};

use super::{
    probabilities, stops, token_budget, top_n, validate, Cost, DecodeConfig, DecodeTrace, DraftContext,
    DraftEvent, Drafter, Drafting, KvpsnDrafter, MedusaDrafter, Provenance, Verdict,
};

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<u32>,
    provenance: Vec<Provenance>,
    events: Vec<DraftEvent>,
    score: f64,
    cache: KVCache,
    state: Option<S>,
}

impl<S> Hyp<S> {
    fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

struct Candidate {
    parent: usize,
    tokens: Vec<u32>,
    provenance: Vec<Provenance>,
    event: Option<DraftEvent>,
    score: f64,
    /// Base positions of the parent's last pass to keep.
    keep_rows: usize,
}

struct Expansion {
    cache: KVCache,
    hidden: Tensor,
}

/// Standard beam search over the base model.
pub fn decode_beam(
    model: &Model,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    decode_beam_with::<KvpsnDrafter>(model, None, prompt, enc, cfg)
}

/// Beam search with the drafter named by `cfg.drafting`.
pub fn decode_speculative_beam(
    model: &Model,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    match cfg.drafting {
        Drafting::None => decode_beam(model, prompt, enc, cfg),
        Drafting::Kvpsn => decode_beam_with(model, Some(&KvpsnDrafter), prompt, enc, cfg),
        Drafting::Medusa => decode_beam_with(model, Some(&MedusaDrafter), prompt, enc, cfg),
    }
}

fn log_probs(logits: &[f32]) -> Vec<f32> {
    log_softmax_row(logits)
}

/// Beam search where every live hypothesis drafts one token per cycle.
///
/// An accepted draft extends its hypothesis by the draft plus one of the
/// `N_b` best continuations; a rejected one by one of the `N_b` best tokens
/// at the draft's position. All hypotheses share one base pass and one draft
/// pass per cycle for costing. Scores are base log-probabilities only.
pub fn decode_beam_with<D: Drafter>(
    model: &Model,
    drafter: Option<&D>,
    prompt: &[u32],
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    let width = cfg.beam_width;
    let budget = token_budget(model, prompt, cfg.max_new_tokens)?;
    let n_g = drafter.map_or(0, |d| d.units_per_draft(model));
    let mut cost = Cost::new(model.cfg.n_layers, n_g);
    if budget == 0 {
        return Ok(DecodeTrace::new(cost));
    }
    let start = Instant::now();

    let mut cache = model.new_cache(enc)?;
    let out = model.decoder_forward(prompt, &mut cache)?;
    cost.base_pass();
    let state = match drafter {
        Some(d) => {
            let mut s = d.start(model, enc)?;
            d.observe(model, &mut s, &out.hidden_last)?;
            Some(s)
        }
        None => None,
    };
    let last_row = out.logits.row(out.logits.rows() - 1);
    let probs = probabilities(last_row);
    let lp = log_probs(last_row);
    let mut live: Vec<Hyp<D::State>> = Vec::new();
    let mut finished: Vec<Hyp<D::State>> = Vec::new();
    for u in top_n(&probs, width) {
        let h = Hyp {
            tokens: vec![u],
            provenance: vec![Provenance::BaseGenerated],
            events: Vec::new(),
            score: lp[u as usize] as f64,
            cache: cache.clone(),
            state: state.clone(),
        };
        if stops(u, cfg) || budget == 1 {
            finished.push(h);
        } else {
            live.push(h);
        }
    }

    while !live.is_empty() && finished.len() < width {
        let mut cands = Vec::new();
        let mut expansions = Vec::with_capacity(live.len());
        if drafter.is_some() {
            cost.draft_pass();
        }
        cost.base_pass();
        for (hi, h) in live.iter_mut().enumerate() {
            let last = *h.tokens.last().expect("live hypotheses are non-empty");
            let remaining = budget - h.tokens.len();
            let position = h.tokens.len();
            match (drafter, h.state.as_mut()) {
                (Some(d), Some(state)) => {
                    let draft = d.draft(
                        model,
                        state,
                        &DraftContext {
                            token: last,
                            position: h.cache.len(),
                            cache: &h.cache,
                        },
                    )?;
                    let mut c = h.cache.clone();
                    let out = model.decoder_forward(&[last, draft], &mut c)?;
                    let d1 = probabilities(out.logits.row(0));
                    let lp1 = log_probs(out.logits.row(0));
                    if validate(draft, &d1, cfg.k) {
                        let event = Some(DraftEvent {
                            position,
                            verdict: Verdict::Accept,
                        });
                        let base = h.score + lp1[draft as usize] as f64;
                        if stops(draft, cfg) || remaining == 1 {
                            cands.push(Candidate {
                                parent: hi,
                                tokens: vec![draft],
                                provenance: vec![Provenance::DraftAccepted],
                                event,
                                score: base,
                                keep_rows: 1,
                            });
                        } else {
                            let d2 = probabilities(out.logits.row(1));
                            let lp2 = log_probs(out.logits.row(1));
                            for v in top_n(&d2, width) {
                                cands.push(Candidate {
                                    parent: hi,
                                    tokens: vec![draft, v],
                                    provenance: vec![Provenance::DraftAccepted, Provenance::BaseGenerated],
                                    event,
                                    score: base + lp2[v as usize] as f64,
                                    keep_rows: 2,
                                });
                            }
                        }
                    } else {
                        for u in top_n(&d1, width) {
                            cands.push(Candidate {
                                parent: hi,
                                tokens: vec![u],
                                provenance: vec![Provenance::BaseGenerated],
                                event: Some(DraftEvent {
                                    position,
                                    verdict: Verdict::Reject,
                                }),
                                score: h.score + lp1[u as usize] as f64,
                                keep_rows: 1,
                            });
                        }
                    }
                    expansions.push(Expansion {
                        cache: c,
                        hidden: out.hidden_last,
                    });
                }
                _ => {
                    let mut c = h.cache.clone();
                    let out = model.decoder_forward(&[last], &mut c)?;
                    let d1 = probabilities(out.logits.row(0));
                    let lp1 = log_probs(out.logits.row(0));
                    for u in top_n(&d1, width) {
                        cands.push(Candidate {
                            parent: hi,
                            tokens: vec![u],
                            provenance: vec![Provenance::BaseGenerated],
                            event: None,
                            score: h.score + lp1[u as usize] as f64,
                            keep_rows: 1,
                        });
                    }
                    expansions.push(Expansion {
                        cache: c,
                        hidden: out.hidden_last,
                    });
                }
            }
        }

        let norm = |c: &Candidate| c.score / (live[c.parent].tokens.len() + c.tokens.len()) as f64;
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| {
            norm(&cands[b])
                .partial_cmp(&norm(&cands[a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(width);

        let mut next = Vec::with_capacity(width);
        for ci in order {
            let c = &cands[ci];
            let parent = &live[c.parent];
            let ex = &expansions[c.parent];
            let mut cache = ex.cache.clone();
            let processed = cache.len() - parent.cache.len();
            cache.truncate(parent.cache.len() + c.keep_rows.min(processed))?;
            let mut h = Hyp {
                tokens: parent.tokens.clone(),
                provenance: parent.provenance.clone(),
                events: parent.events.clone(),
                score: c.score,
                cache,
                state: parent.state.clone(),
            };
            if let (Some(d), Some(s)) = (drafter, h.state.as_mut()) {
                let rows = c.keep_rows.min(ex.hidden.rows());
                let hidden = Tensor::matrix(
                    rows,
                    ex.hidden.cols(),
                    ex.hidden.data()[..rows * ex.hidden.cols()].to_vec(),
                )?;
                d.observe(model, s, &hidden)?;
            }
            h.tokens.extend_from_slice(&c.tokens);
            h.provenance.extend_from_slice(&c.provenance);
            h.events.extend(c.event);
            let last = *h.tokens.last().expect("non-empty");
            if stops(last, cfg) || h.tokens.len() >= budget {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }

    let best = finished
        .into_iter()
        .chain(live)
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h);
    let Some(best) = best else {
        return invalid("beam search produced no hypothesis");
    };
    Ok(DecodeTrace {
        tokens: best.tokens,
        provenance: best.provenance,
        events: best.events,
        cost,
        wall_ns: start.elapsed().as_nanos() as u64,
        score: Some(best.score),
    })
}
