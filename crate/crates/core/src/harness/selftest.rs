//! Invariant suites runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    decode_base_greedy_with, decode_speculative_greedy, decode_speculative_greedy_with, AlwaysWrong,
    DecodeConfig, Drafting, ForcedAccept,
};
use crate::error::Result;
use crate::model::{KvpsnConfig, Model, ModelConfig};
use crate::numcore::{Graph, ParamStore, Tensor};
use crate::train::{example_objective, Example, LossWeights, Objective, PreparedExample, SyntheticTaskSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A small randomized model shape for invariant checks.
pub fn random_config<R: Rng>(rng: &mut R, medusa: bool) -> ModelConfig {
    let n_heads = [1, 2][rng.gen_range(0..2)];
    let n_groups = [1, 2, 3][rng.gen_range(0..3)];
    ModelConfig {
        d_model: 8 * n_heads,
        n_heads,
        d_ff: 16,
        n_layers: (n_groups * rng.gen_range(1..=2)).max(2),
        n_enc_speech: 1,
        n_enc_text: 1,
        d_feat: 4,
        v_content: 12,
        max_len: 24,
        kvpsn: Some(KvpsnConfig {
            n_groups,
            tie_output: rng.gen_bool(0.5),
        }),
        medusa_blocks: usize::from(medusa),
    }
}

fn small_task(cfg: &ModelConfig, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        min_len: 2,
        max_len: 5,
        ..SyntheticTaskSpec::for_model(cfg, seed)
    }
}

fn objective_value(
    model: &Model,
    store: &ParamStore<f64>,
    ex: &PreparedExample<f64>,
    obj: &Objective,
) -> Result<f64> {
    let mut g = Graph::new(store);
    let (loss, _) = example_objective(&mut g, &model.arch, &model.cfg, ex, obj)?;
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of the full training objective (gate closed)
/// with central differences in f64, on `samples` coordinates drawn from
/// parameters whose names satisfy `select`.
pub fn gradient_check(
    cfg: ModelConfig,
    seed: u64,
    samples: usize,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheck> {
    let model = Model::new(cfg, seed)?;
    let mut store: ParamStore<f64> = model.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    // Move layer-norm gains and biases off their symmetric initial values.
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for &id in &ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let task = small_task(&model.cfg, seed);
    let ex = PreparedExample::<f64>::from_example(&task.example_at(seed, 0)?);
    let obj = Objective {
        weights: LossWeights::default(),
        gate_open: false,
    };

    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new(&store);
        let (loss, _) = example_objective(&mut g, &model.arch, &model.cfg, &ex, &obj)?;
        let grads = g.backward(loss)?;
        let mut acc = crate::numcore::Grads::zeros_for(&store);
        g.accumulate_param_grads(&grads, &mut acc);
        ids.iter().map(|&id| acc.get(id).clone()).collect()
    };

    let mut coords = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if !select(store.name(id)) {
            continue;
        }
        for (j, &a) in analytic[i].data().iter().enumerate() {
            if a != 0.0 {
                coords.push((i, j));
            }
        }
    }
    let mut picked = Vec::new();
    while picked.len() < samples && !coords.is_empty() {
        picked.push(coords.swap_remove(rng.gen_range(0..coords.len())));
    }

    let eps = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (i, j) in picked {
        let id = ids[i];
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + eps;
        let up = objective_value(&model, &store, &ex, &obj)?;
        store.get_mut(id).data_mut()[j] = orig - eps;
        let down = objective_value(&model, &store, &ex, &obj)?;
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let err = relative_error(a, numeric);
        out.checked += 1;
        if err > out.max_rel_err {
            out.max_rel_err = err;
            out.worst = format!("{}[{j}]: tape {a:.6e}, numeric {numeric:.6e}", store.name(id));
        }
    }
    Ok(out)
}

/// Gradient checks over `graphs` randomized models. Odd-numbered graphs
/// carry a Medusa head and sample only its parameters, since it reads the
/// base through detached values.
pub fn gradient_suite(graphs: usize, samples: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..graphs)
        .map(|i| {
            let medusa = i % 2 == 1;
            let cfg = random_config(&mut rng, medusa);
            let s = rng.gen();
            if medusa {
                gradient_check(cfg, s, samples, |n| n.starts_with("medusa."))
            } else {
                gradient_check(cfg, s, samples, |_| true)
            }
        })
        .collect()
}

/// Speculative greedy at k=1 against base greedy on one example.
pub fn exactness_case(model: &Model, ex: &Example, drafting: Drafting, cfg: &DecodeConfig) -> Result<bool> {
    let enc = model.encode_features(&ex.features)?;
    let base = decode_base_greedy_with(model, ex.prompt(), &enc, cfg)?;
    let spec = decode_speculative_greedy(
        model,
        ex.prompt(),
        &enc,
        &DecodeConfig {
            drafting,
            ..cfg.clone()
        },
    )?;
    Ok(base.tokens == spec.tokens)
}

fn exactness_suite(cases: usize, seed: u64, fault: bool) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..cases {
        let cfg = random_config(&mut rng, true);
        let model = Model::new(cfg, rng.gen())?;
        let ex = small_task(&model.cfg, 1).example_at(rng.gen(), 0)?;
        let dcfg = DecodeConfig {
            max_new_tokens: 16,
            ignore_eos: i % 2 == 0,
            fault_accept_first_reject: fault,
            ..Default::default()
        };
        let drafting = if i % 3 == 2 {
            Drafting::Medusa
        } else {
            Drafting::Kvpsn
        };
        if !exactness_case(&model, &ex, drafting, &dcfg)? {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "top1-exactness",
        passed: failures == 0,
        detail: format!("{} of {cases} decodes identical to base greedy", cases - failures),
    })
}

fn cost_suite(seed: u64) -> Result<SuiteResult> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 1,
        d_ff: 16,
        n_layers: 6,
        n_enc_speech: 1,
        n_enc_text: 1,
        d_feat: 4,
        v_content: 12,
        max_len: 320,
        kvpsn: Some(KvpsnConfig {
            n_groups: 2,
            tie_output: true,
        }),
        medusa_blocks: 1,
    };
    let model = Model::new(cfg, seed)?;
    let ex = small_task(&model.cfg, 2).example_at(seed, 0)?;
    let enc = model.encode_features(&ex.features)?;
    let dcfg = DecodeConfig {
        max_new_tokens: usize::MAX,
        ignore_eos: true,
        ..Default::default()
    };
    let mut problems = Vec::new();
    let forced =
        decode_speculative_greedy_with(&model, &ForcedAccept { units: 2 }, ex.prompt(), &enc, &dcfg)?;
    let wrong = decode_speculative_greedy_with(&model, &AlwaysWrong { units: 2 }, ex.prompt(), &enc, &dcfg)?;
    let before = model.counters();
    let real = decode_speculative_greedy(
        &model,
        ex.prompt(),
        &enc,
        &DecodeConfig {
            drafting: Drafting::Kvpsn,
            ..dcfg.clone()
        },
    )?;
    let after = model.counters();
    for (name, t, alpha_want) in [
        ("forced", &forced, Some(1.0)),
        ("always-wrong", &wrong, Some(0.0)),
        ("kvpsn", &real, None),
    ] {
        if !t.cost.is_consistent() {
            problems.push(format!("{name}: unit total disagrees with pass counts"));
        }
        let alpha = crate::engine::acceptance_rate(t)?;
        if let Some(a) = alpha_want {
            if alpha != a {
                problems.push(format!("{name}: acceptance {alpha}"));
            }
        }
        let want = 8.0 / (1.0 + alpha);
        let got = t.steady_units_per_token()?;
        if (got - want).abs() > 0.02 * want {
            problems.push(format!("{name}: {got:.3} units/token, closed form {want:.3}"));
        }
    }
    if after.base - before.base != real.cost.base_passes * 6
        || after.kvpsn - before.kvpsn != real.cost.draft_passes * 2
    {
        problems.push("layer counters disagree with the trace".into());
    }
    Ok(SuiteResult {
        name: "cost-identities",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "forced {:.3}, always-wrong {:.3} units/token over {} tokens",
                forced.steady_units_per_token()?,
                wrong.steady_units_per_token()?,
                forced.tokens.len()
            )
        } else {
            problems.join("; ")
        },
    })
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .fold(0.0, f64::max)
}

/// Processes a prefix, a rejected draft, rolls back, and compares the cache
/// with one that never saw the draft. Returns (bitwise equal, max difference
/// of the following step's logits).
pub fn rollback_case(model: &Model, ex: &Example, prefix: &[u32], draft: u32) -> Result<(bool, f64)> {
    let enc = model.encode_features(&ex.features)?;
    let mut a = model.new_cache(&enc)?;
    model.decoder_forward(&prefix[..prefix.len() - 1], &mut a)?;
    model.decoder_forward(&[prefix[prefix.len() - 1], draft], &mut a)?;
    a.truncate(a.len() - 1)?;
    let mut b = model.new_cache(&enc)?;
    for &t in prefix {
        model.decoder_forward(&[t], &mut b)?;
    }
    let same = a.same_state(&b);
    let next = prefix[prefix.len() - 1];
    let la = model.decoder_forward(&[next], &mut a)?.logits;
    let lb = model.decoder_forward(&[next], &mut b)?.logits;
    Ok((same, max_abs_diff(&la, &lb)))
}

fn rollback_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut mismatched = 0;
    for _ in 0..cases {
        let cfg = random_config(&mut rng, false);
        let model = Model::new(cfg, rng.gen())?;
        let ex = small_task(&model.cfg, 3).example_at(rng.gen(), 0)?;
        let v = model.vocab_size() as u32;
        let len = rng.gen_range(2..10);
        let prefix: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        let (same, diff) = rollback_case(&model, &ex, &prefix, rng.gen_range(0..v))?;
        if !same {
            mismatched += 1;
        }
        worst = worst.max(diff);
    }
    Ok(SuiteResult {
        name: "cache-rollback",
        passed: mismatched == 0 && worst <= 1e-5,
        detail: format!("{mismatched} caches differ after rollback, max logit gap {worst:.2e}"),
    })
}

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Flip the first rejection of every speculative decode to an accept.
    pub inject_fault: bool,
}

pub fn run_selftest(opts: &SelftestOptions) -> Result<Vec<SuiteResult>> {
    let grads = gradient_suite(4, 50, opts.seed)?;
    let worst = grads.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let checked: usize = grads.iter().map(|g| g.checked).sum();
    let detail = match grads
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    {
        Some(g) if worst >= 1e-3 => format!("max relative error {worst:.2e} at {}", g.worst),
        _ => format!("{checked} coordinates, max relative error {worst:.2e}"),
    };
    Ok(vec![
        SuiteResult {
            name: "gradient",
            passed: worst < 1e-3,
            detail,
        },
        exactness_suite(40, opts.seed, opts.inject_fault)?,
        cost_suite(opts.seed)?,
        rollback_suite(20, opts.seed)?,
    ])
}
