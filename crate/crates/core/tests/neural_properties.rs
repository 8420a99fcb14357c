mod common;

use nsdt_core::baselines::{
    options_loss, recurrent_forward, recurrent_loss, td_loss, td_target, CellKind, DqnConfig, Intent, OptionsConfig,
    OptionsSample, RecurrentConfig, Transition,
};
use nsdt_core::dt::{forward, forward_all_slots, nll_loss, DtConfig, DtMode, Sample, TokenSequence};
use nsdt_core::gridworld::{CaseId, GridWorld};
use nsdt_core::neural::{softmax_in_place, Graph, Init, ParamBuilder, ParamStore, SeqShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_fd_error, prop_config, random_action, random_samples, random_sequence, random_state};

const FD_TOL: f64 = 1e-4;

fn world(case: CaseId) -> GridWorld {
    GridWorld::preset(match case {
        CaseId::Single => "case1_default",
        CaseId::MultiGoal => "case2_default",
    })
    .unwrap()
}

fn case_strategy() -> impl Strategy<Value = CaseId> {
    prop_oneof![Just(CaseId::Single), Just(CaseId::MultiGoal)]
}

fn mode_strategy() -> impl Strategy<Value = DtMode> {
    prop_oneof![Just(DtMode::Hybrid), Just(DtMode::Pure)]
}

/// Same architecture as the defaults, narrowed so a property case is cheap.
fn small_dt(w: &GridWorld, mode: DtMode) -> DtConfig {
    let mut cfg = DtConfig::for_world(w, mode);
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.embed_dim = 8;
    cfg.context = 3;
    cfg.init_std = 0.5;
    cfg
}

fn small_recurrent(w: &GridWorld, cell: CellKind, conditioned: bool) -> RecurrentConfig {
    let mut cfg = match cell {
        CellKind::Lstm => RecurrentConfig::lstm(w),
        CellKind::Gru => RecurrentConfig::gru(w),
    };
    cfg.conditioned = conditioned;
    cfg.layers = 2;
    cfg.hidden = 6;
    cfg.context = 3;
    cfg.init_std = 0.5;
    cfg
}

fn is_simplex(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= 0.0 && x.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(cols)
        .map(|r| {
            let mut r = r.to_vec();
            softmax_in_place(&mut r);
            r
        })
        .collect()
}

proptest! {
    #![proptest_config(prop_config(256))]

    #[test]
    fn softmax_is_a_simplex(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut p = v.clone();
        softmax_in_place(&mut p);
        prop_assert!(is_simplex(&p));
        // the largest logit keeps the largest probability
        let arg = |x: &[f64]| x.iter().enumerate().fold(0, |b, (i, &y)| if y > x[b] { i } else { b });
        prop_assert_eq!(p[arg(&p)], p[arg(&v)]);
    }
}

proptest! {
    #![proptest_config(prop_config(64))]

    #[test]
    fn graph_ops_stay_finite_at_large_magnitudes(seed in any::<u64>(), scale in 1.0f64..1e3) {
        let (n, d) = (6, 8);
        let mut b = ParamBuilder::new();
        for name in ["x", "wq", "wk", "wv"] {
            b.add(name, &[if name == "x" { n } else { d }, d], Init::Zeros);
        }
        b.add("g", &[d], Init::Ones).add("b", &[d], Init::Zeros);
        let mut p: ParamStore<f64> = b.build(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.values_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        let mut g = Graph::new(&p);
        let id = |s: &str| p.id(s).unwrap();
        let x = g.param(id("x"));
        let (gain, bias) = (g.param(id("g")), g.param(id("b")));
        let h = g.layer_norm(x, gain, bias).unwrap();
        let (wq, wk, wv) = (g.param(id("wq")), g.param(id("wk")), g.param(id("wv")));
        let q = g.matmul(x, wq).unwrap();
        let k = g.matmul(x, wk).unwrap();
        let v = g.matmul(h, wv).unwrap();
        let a = g.causal_attention(q, k, v, SeqShape { batch: 2, seq: 3, heads: 2 }, None).unwrap();
        let s = g.softmax(x);
        let t = g.tanh(a);
        let sg = g.sigmoid(x);
        let ge = g.gelu(h);
        let targets: Vec<usize> = (0..n).map(|r| r % d).collect();
        let ce = g.cross_entropy(x, &targets).unwrap();
        let mut total = ce;
        for part in [s, t, sg, ge] {
            let sq = g.sum_squares(part);
            total = g.add(total, sq).unwrap();
        }
        prop_assert!(g.data(total).iter().all(|v| v.is_finite()));
        let grads = g.backward(total).unwrap();
        prop_assert!(grads.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dt_emits_distributions_and_is_deterministic(
        case in case_strategy(),
        mode in mode_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(case);
        let cfg = small_dt(&w, mode);
        let p: ParamStore<f64> = cfg.param_builder().build(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<TokenSequence> = (0..4)
            .map(|_| {
                let k = rng.gen_range(0..=cfg.context);
                random_sequence(&w, k, cfg.conditioned(), &mut rng)
            })
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let run = || {
            let mut g = Graph::new(&p);
            let l = forward(&cfg, &mut g, &refs).unwrap();
            g.data(l).to_vec()
        };
        let logits = run();
        prop_assert_eq!(&logits, &run());
        for row in softmax_rows(&logits, 5) {
            prop_assert!(is_simplex(&row));
        }
    }

    #[test]
    fn recurrent_nets_emit_distributions(
        case in case_strategy(),
        lstm in any::<bool>(),
        conditioned in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let w = world(case);
        let cell = if lstm { CellKind::Lstm } else { CellKind::Gru };
        let cfg = small_recurrent(&w, cell, conditioned);
        let p: ParamStore<f64> = cfg.param_builder().build(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<TokenSequence> = (0..4)
            .map(|_| {
                let k = rng.gen_range(0..=cfg.context);
                random_sequence(&w, k, conditioned, &mut rng)
            })
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut g = Graph::new(&p);
        let l = recurrent_forward(&cfg, &mut g, &refs).unwrap();
        for row in softmax_rows(g.data(l), 5) {
            prop_assert!(is_simplex(&row));
        }
    }

    /// Changing slot `j` of a sequence leaves every earlier slot's output
    /// bit-identical.
    #[test]
    fn dt_slots_never_see_later_slots(
        case in case_strategy(),
        mode in mode_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(case);
        let cfg = small_dt(&w, mode);
        let p: ParamStore<f64> = cfg.param_builder().build(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let seq = random_sequence(&w, cfg.context, cfg.conditioned(), &mut rng);
        let mut other = seq.clone();
        let width = cfg.slots();
        let j = rng.gen_range(0..width);
        if cfg.conditioned() && j == width - 1 {
            other.subgoal = Some(common::random_subgoal(&w, &mut rng));
        } else if j % 2 == 0 {
            other.states[j / 2] = random_state(&w, &mut rng);
        } else {
            other.actions[j / 2] = random_action(&mut rng);
        }
        let run = |s: &TokenSequence| {
            let mut g = Graph::new(&p);
            let l = forward_all_slots(&cfg, &mut g, &[s]).unwrap();
            g.data(l).to_vec()
        };
        let (a, b) = (run(&seq), run(&other));
        prop_assert_eq!(&a[..j * 5], &b[..j * 5]);
    }
}

proptest! {
    #![proptest_config(prop_config(12))]

    #[test]
    fn dt_gradients_match_finite_differences(case in case_strategy(), mode in mode_strategy(), seed in any::<u64>()) {
        let w = world(case);
        let cfg = small_dt(&w, mode);
        let p: ParamStore<f64> = cfg.param_builder().build(seed).unwrap();
        let samples: Vec<Sample> = random_samples(&w, 6, cfg.context, cfg.conditioned(), &mut ChaCha8Rng::seed_from_u64(seed));
        let batch: Vec<&Sample> = samples.iter().collect();
        let err = max_fd_error(&p, 40, seed, |g| nll_loss(&cfg, g, &batch).unwrap());
        prop_assert!(err <= FD_TOL, "relative error {err}");
    }

    #[test]
    fn recurrent_gradients_match_finite_differences(
        case in case_strategy(),
        lstm in any::<bool>(),
        conditioned in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let w = world(case);
        let cell = if lstm { CellKind::Lstm } else { CellKind::Gru };
        let cfg = small_recurrent(&w, cell, conditioned);
        let p: ParamStore<f64> = cfg.param_builder().build(seed).unwrap();
        let samples = random_samples(&w, 6, cfg.context, conditioned, &mut ChaCha8Rng::seed_from_u64(seed));
        let batch: Vec<&Sample> = samples.iter().collect();
        let err = max_fd_error(&p, 40, seed, |g| recurrent_loss(&cfg, g, &batch).unwrap());
        prop_assert!(err <= FD_TOL, "relative error {err}");
    }

    #[test]
    fn q_and_option_gradients_match_finite_differences(case in case_strategy(), seed in any::<u64>()) {
        let w = world(case);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut qcfg = DqnConfig::for_world(&w);
        qcfg.hidden = vec![8, 8];
        qcfg.init_std = 0.5;
        let qp: ParamStore<f64> = qcfg.param_builder().build(seed).unwrap();
        let ts: Vec<Transition> = (0..8)
            .map(|_| Transition {
                state: random_state(&w, &mut rng),
                action: random_action(&mut rng),
                reward: -0.1,
                next_state: random_state(&w, &mut rng),
                terminal: rng.gen_bool(0.2),
            })
            .collect();
        let targets: Vec<f64> = ts.iter().map(|t| td_target(t.reward, t.terminal, 0.9, &[0.3, -0.2, 0.5, 0.0, 0.1])).collect();
        let tb: Vec<&Transition> = ts.iter().collect();
        let err = max_fd_error(&qp, 40, seed, |g| td_loss(&qcfg, g, &tb, &targets).unwrap());
        prop_assert!(err <= FD_TOL, "Q-network relative error {err}");

        let mut ocfg = OptionsConfig::for_world(&w);
        ocfg.hidden = 6;
        ocfg.init_std = 0.5;
        let op: ParamStore<f64> = ocfg.param_builder().build(seed).unwrap();
        let os: Vec<OptionsSample> = (0..12)
            .map(|_| OptionsSample {
                state: random_state(&w, &mut rng),
                action: random_action(&mut rng),
                intent: Intent::ALL[rng.gen_range(0..Intent::ALL.len())],
            })
            .collect();
        let ob: Vec<&OptionsSample> = os.iter().collect();
        let err = max_fd_error(&op, 40, seed, |g| options_loss(&ocfg, g, &ob).unwrap());
        prop_assert!(err <= FD_TOL, "options relative error {err}");
    }
}
