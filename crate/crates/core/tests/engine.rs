use kvpsn_core::engine::*;
use kvpsn_core::model::{KvpsnConfig, Model, ModelConfig};
use kvpsn_core::train::{Example, SyntheticTaskSpec};
use proptest::prelude::*;

fn setup(cfg: ModelConfig, seed: u64) -> (Model, Vec<Example>) {
    let model = Model::new(cfg, seed).unwrap();
    let mut task = SyntheticTaskSpec::for_model(&model.cfg, 3);
    task.max_len = 8;
    let examples = task.eval_set(seed, 4).unwrap();
    (model, examples)
}

fn cost_config() -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        max_len: 320,
        kvpsn: Some(KvpsnConfig {
            n_groups: 2,
            tie_output: true,
        }),
        ..ModelConfig::tiny()
    }
}

fn long_run() -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: 300,
        ignore_eos: true,
        drafting: Drafting::Kvpsn,
        ..Default::default()
    }
}

#[test]
fn base_greedy_costs_one_pass_per_token() {
    let (m, exs) = setup(ModelConfig::tiny(), 1);
    for ex in &exs {
        let enc = m.encode_features(&ex.features).unwrap();
        let a = decode_base_greedy(&m, ex.prompt(), &enc, 20).unwrap();
        let b = decode_base_greedy(&m, ex.prompt(), &enc, 20).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.cost.layer_units, a.tokens.len() as u64 * m.cfg.n_layers as u64);
        assert!(a.cost.is_consistent());
        assert!(a.events.is_empty());
    }
}

#[test]
fn speculative_needs_a_drafter() {
    let (m, exs) = setup(ModelConfig::tiny(), 1);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let cfg = DecodeConfig::default();
    assert!(decode_speculative_greedy(&m, exs[0].prompt(), &enc, &cfg).is_err());
}

#[test]
fn forced_accept_approaches_group_arithmetic() {
    let (m, exs) = setup(cost_config(), 2);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let t =
        decode_speculative_greedy_with(&m, &ForcedAccept { units: 2 }, exs[0].prompt(), &enc, &long_run())
            .unwrap();
    assert!(t.tokens.len() >= 300);
    assert_eq!(acceptance_rate(&t).unwrap(), 1.0);
    let steady = t.steady_units_per_token().unwrap();
    assert!((steady - 4.0).abs() / 4.0 < 0.02, "steady units {steady}");
    assert!(t.cost.is_consistent());
    assert!(t.provenance_consistent());
}

#[test]
fn always_wrong_rejects_every_cycle() {
    let (m, exs) = setup(cost_config(), 3);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let cfg = DecodeConfig {
        max_new_tokens: 60,
        ..long_run()
    };
    let t =
        decode_speculative_greedy_with(&m, &AlwaysWrong { units: 2 }, exs[0].prompt(), &enc, &cfg).unwrap();
    assert_eq!(acceptance_rate(&t).unwrap(), 0.0);
    assert_eq!(t.tokens.len(), 60);
    assert_eq!(t.cost.layer_units, 6 + 59 * 8);
    assert!(t.provenance.iter().all(|&p| p == Provenance::BaseGenerated));
    let base = decode_base_greedy_with(&m, exs[0].prompt(), &enc, &cfg).unwrap();
    assert_eq!(t.tokens, base.tokens);
    assert!(relative_speed(&t, &base).unwrap() < 1.0);
}

#[test]
fn forced_accept_speed_matches_theoretical_maximum() {
    let cfg = ModelConfig {
        max_len: 320,
        ..ModelConfig::default()
    };
    let (m, exs) = setup(cfg, 4);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let run = DecodeConfig {
        max_new_tokens: 200,
        ..long_run()
    };
    let base = decode_base_greedy_with(&m, exs[0].prompt(), &enc, &run).unwrap();
    let fast =
        decode_speculative_greedy_with(&m, &ForcedAccept { units: 3 }, exs[0].prompt(), &enc, &run).unwrap();
    let speed = relative_speed(&fast, &base).unwrap();
    assert!((speed - 1.6).abs() / 1.6 < 0.02, "relative speed {speed}");
    assert_eq!(theoretical_max_speedup(12, 3).unwrap(), 0.6);
    assert!(speed <= 1.0 + theoretical_max_speedup(12, 3).unwrap() + 1e-9);
    assert_eq!(relative_speed(&base, &base).unwrap(), 1.0);
}

#[test]
fn single_beam_degenerates_to_greedy() {
    for drafting in [Drafting::None, Drafting::Kvpsn, Drafting::Medusa] {
        let (m, exs) = setup(ModelConfig::tiny(), 5);
        for ex in &exs {
            let enc = m.encode_features(&ex.features).unwrap();
            let greedy = DecodeConfig {
                max_new_tokens: 20,
                drafting,
                ..Default::default()
            };
            let beam = DecodeConfig {
                mode: Mode::Beam,
                beam_width: 1,
                ..greedy.clone()
            };
            let g = decode(&m, ex.prompt(), &enc, &greedy).unwrap();
            let b = decode(&m, ex.prompt(), &enc, &beam).unwrap();
            assert_eq!(g.tokens, b.tokens, "{drafting:?}");
        }
    }
}

#[test]
fn beam_scores_are_log_probabilities() {
    let (m, exs) = setup(ModelConfig::tiny(), 6);
    for ex in &exs {
        let enc = m.encode_features(&ex.features).unwrap();
        let cfg = DecodeConfig {
            mode: Mode::Beam,
            max_new_tokens: 12,
            ..Default::default()
        };
        let t = decode_beam(&m, ex.prompt(), &enc, &cfg).unwrap();
        assert!(!t.tokens.is_empty());
        assert!(t.score.unwrap() <= 0.0);
        assert!(t.cost.is_consistent());
    }
}

#[test]
fn widening_the_beam_never_lowers_the_best_score() {
    let (m, exs) = setup(ModelConfig::tiny(), 7);
    for ex in &exs {
        let enc = m.encode_features(&ex.features).unwrap();
        let run = |w| {
            let cfg = DecodeConfig {
                mode: Mode::Beam,
                beam_width: w,
                max_new_tokens: 6,
                ignore_eos: true,
                ..Default::default()
            };
            let t = decode_beam(&m, ex.prompt(), &enc, &cfg).unwrap();
            t.score.unwrap() / t.tokens.len() as f64
        };
        let narrow = run(1);
        let wide = run(4);
        assert!(wide >= narrow - 1e-9, "{wide} < {narrow}");
    }
}

#[test]
fn speculative_beam_with_unbounded_k_still_runs() {
    let (m, exs) = setup(ModelConfig::tiny(), 8);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let cfg = DecodeConfig {
        mode: Mode::Beam,
        k: TopK::Infinite,
        drafting: Drafting::Kvpsn,
        max_new_tokens: 16,
        ..Default::default()
    };
    let t = decode(&m, exs[0].prompt(), &enc, &cfg).unwrap();
    assert!(!t.tokens.is_empty());
    assert!(t.cost.is_consistent());
}

#[test]
fn infinite_k_accepts_every_draft() {
    let (m, exs) = setup(ModelConfig::tiny(), 9);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let cfg = DecodeConfig {
        k: TopK::Infinite,
        drafting: Drafting::Kvpsn,
        max_new_tokens: 30,
        ignore_eos: true,
        ..Default::default()
    };
    let t = decode(&m, exs[0].prompt(), &enc, &cfg).unwrap();
    assert_eq!(acceptance_rate(&t).unwrap(), 1.0);
}

#[test]
fn fault_injection_breaks_exactness() {
    let (m, exs) = setup(cost_config(), 10);
    let enc = m.encode_features(&exs[0].features).unwrap();
    let cfg = DecodeConfig {
        max_new_tokens: 40,
        ..long_run()
    };
    let faulty = DecodeConfig {
        fault_accept_first_reject: true,
        ..cfg.clone()
    };
    let good =
        decode_speculative_greedy_with(&m, &AlwaysWrong { units: 2 }, exs[0].prompt(), &enc, &cfg).unwrap();
    let bad = decode_speculative_greedy_with(&m, &AlwaysWrong { units: 2 }, exs[0].prompt(), &enc, &faulty)
        .unwrap();
    assert_ne!(good.tokens, bad.tokens);
}

#[test]
fn acceptance_rate_recounts_events() {
    let (m, exs) = setup(ModelConfig::tiny(), 11);
    let enc = m.encode_features(&exs[1].features).unwrap();
    let cfg = DecodeConfig {
        drafting: Drafting::Kvpsn,
        max_new_tokens: 30,
        ignore_eos: true,
        ..Default::default()
    };
    let t = decode(&m, exs[1].prompt(), &enc, &cfg).unwrap();
    let accepted = t.events.iter().filter(|e| e.verdict == Verdict::Accept).count();
    let expected = accepted as f64 / t.events.len() as f64;
    assert_eq!(acceptance_rate(&t).unwrap(), expected);
    let drafted = t
        .provenance
        .iter()
        .filter(|&&p| p == Provenance::DraftAccepted)
        .count();
    assert_eq!(drafted, accepted);
    assert!(t.provenance_consistent());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn top1_speculation_is_exact(seed in 0u64..10_000, medusa in any::<bool>(), max_new in 1usize..24) {
        let (m, exs) = setup(ModelConfig::tiny(), seed);
        let drafting = if medusa { Drafting::Medusa } else { Drafting::Kvpsn };
        for ex in &exs {
            let enc = m.encode_features(&ex.features).unwrap();
            let cfg = DecodeConfig { drafting, max_new_tokens: max_new, ..Default::default() };
            let base = decode_base_greedy_with(&m, ex.prompt(), &enc, &cfg).unwrap();
            let spec = decode(&m, ex.prompt(), &enc, &cfg).unwrap();
            prop_assert_eq!(&base.tokens, &spec.tokens);
            prop_assert!(spec.cost.is_consistent());
            prop_assert!(spec.provenance_consistent());
        }
    }

    #[test]
    fn accept_decisions_are_monotone_in_k(logits in prop::collection::vec(-4.0f32..4.0, 2..40), pick in any::<prop::sample::Index>()) {
        let probs = probabilities(&logits);
        let draft = pick.index(probs.len()) as u32;
        let mut prev = false;
        for k in 1..=probs.len() {
            let now = validate(draft, &probs, TopK::Finite(k));
            prop_assert!(!prev || now);
            prev = now;
        }
        prop_assert!(prev);
        prop_assert!(validate(draft, &probs, TopK::Infinite));
        prop_assert_eq!(validate(draft, &probs, TopK::Finite(1)), draft == greedy_token(&logits));
    }

    #[test]
    fn cost_identity_holds_on_every_trace(seed in 0u64..1000, k in 1usize..4) {
        let (m, exs) = setup(cost_config(), seed);
        let enc = m.encode_features(&exs[0].features).unwrap();
        let cfg = DecodeConfig { k: TopK::Finite(k), max_new_tokens: 40, ..long_run() };
        let t = decode(&m, exs[0].prompt(), &enc, &cfg).unwrap();
        let drafts = t.events.len() as u64;
        prop_assert_eq!(t.cost.draft_passes, drafts);
        prop_assert_eq!(t.cost.base_passes, drafts + 1);
        prop_assert_eq!(t.cost.layer_units, (drafts + 1) * 6 + drafts * 2);
        prop_assert_eq!(t.tokens.len(), 40);
    }
}
