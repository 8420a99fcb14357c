//! Helpers shared by the integration test targets. Oracles here are written
//! independently of the crate code they check.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use nsdt_core::dt::{Sample, SubGoal, TokenSequence};
use nsdt_core::gridworld::{Action, CaseId, Cell, EnvConfig, EnvState, Flags, GridWorld, Role};
use nsdt_core::neural::{Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints one result line straight to the process stdout, bypassing the
/// test harness's output capture.
pub fn report_line(label: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{verdict}] {label}: {detail}");
    let _ = out.flush();
}

/// Random valid layout for `case`: grid size, walls, entity cells and the
/// door-entry rule are all drawn from `rng`. Solvability is not checked.
pub fn random_layout(case: CaseId, rng: &mut ChaCha8Rng) -> GridWorld {
    loop {
        let (lo, hi) = match case {
            CaseId::Single => (3, 7),
            CaseId::MultiGoal => (5, 8),
        };
        let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let mut cells: Vec<Cell> = (0..h * w).map(|i| Cell::new(i / w, i % w)).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let roles: &[Role] = match case {
            CaseId::Single => &[Role::AgentStart, Role::Key1, Role::Door1, Role::Goal],
            CaseId::MultiGoal => &Role::ALL,
        };
        let mut cfg = match case {
            CaseId::Single => EnvConfig::case1_default(),
            CaseId::MultiGoal => EnvConfig::case2_default(),
        };
        cfg.height = h;
        cfg.width = w;
        cfg.layout = roles.iter().copied().zip(cells.iter().copied()).collect();
        let spare = cells.len() - roles.len();
        let n_walls = rng.gen_range(0..=spare / 3);
        cfg.walls = cells[roles.len()..roles.len() + n_walls].to_vec();
        cfg.door_blocks_entry = rng.gen_bool(0.5);
        cfg.fail_prob = 0.0;
        if let Ok(world) = GridWorld::new(cfg) {
            return world;
        }
    }
}

/// Fewest primitive actions to success in the deterministic environment,
/// by breadth-first search over concrete (cell, flags) states.
pub fn oracle_cost(world: &GridWorld) -> Option<usize> {
    let start = world.reset();
    if world.success(&start) {
        return Some(0);
    }
    let mut dist: HashMap<EnvState, usize> = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        for code in 0..5 {
            let a = Action::from_code(code).unwrap();
            let r = world.deterministic_step(&s, a);
            if r.done {
                return Some(d + 1);
            }
            if !dist.contains_key(&r.next_state) {
                dist.insert(r.next_state, d + 1);
                queue.push_back(r.next_state);
            }
        }
    }
    None
}

/// Largest relative error between analytic and central-difference gradients
/// over `coords` random coordinates. The denominator is floored at 1e-6 so
/// that coordinates with negligible gradient compare on an absolute scale.
pub fn max_fd_error(
    params: &ParamStore<f64>,
    coords: usize,
    seed: u64,
    loss: impl Fn(&mut Graph<'_, f64>) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g);
        g.backward(l).unwrap().values().to_vec()
    };
    let eval = |p: &ParamStore<f64>| {
        let mut g = Graph::new(p);
        let l = loss(&mut g);
        g.data(l)[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    let mut p = params.clone();
    for _ in 0..coords {
        let i = rng.gen_range(0..params.len());
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = eval(&p);
        p.values_mut()[i] = orig - h;
        let down = eval(&p);
        p.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Double-double number `hi + lo` with `|lo| <= ulp(hi)/2`, built from
/// error-free transformations; about 32 significant digits.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, y: Dd) -> Dd {
        self.add(y.neg())
    }

    pub fn mul(self, y: Dd) -> Dd {
        let p = self.hi * y.hi;
        let e = self.hi.mul_add(y.hi, -p);
        Dd::norm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }

    pub fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self.sub(y.mul(Dd::new(q1)));
        let q2 = r.hi / y.hi;
        let r = r.sub(y.mul(Dd::new(q2)));
        let q3 = r.hi / y.hi;
        Dd::norm(q1, q2).add(Dd::new(q3))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(0.0);
        }
        let s = self.hi.sqrt();
        let p = s * s;
        let e = s.mul_add(s, -p);
        let corr = ((self.hi - p - e) + self.lo) / (2.0 * s);
        Dd::norm(s, corr)
    }

    /// Natural logarithm of a positive `f64`: `x = y·2^k` with `y` in
    /// `[1, 2)`, then `ln y = 2·atanh((y−1)/(y+1))` summed to convergence.
    pub fn ln(x: f64) -> Dd {
        assert!(x > 0.0 && x.is_finite());
        let mut k = 0i32;
        let mut y = x;
        while y >= 2.0 {
            y /= 2.0;
            k += 1;
        }
        while y < 1.0 {
            y *= 2.0;
            k -= 1;
        }
        let ln_y = atanh_series(Dd::new(y));
        ln_y.add(ln2().mul(Dd::new(k as f64)))
    }
}

fn atanh_series(y: Dd) -> Dd {
    let one = Dd::new(1.0);
    let z = y.sub(one).div(y.add(one));
    let z2 = z.mul(z);
    let mut term = z;
    let mut sum = z;
    for n in 1..400 {
        term = term.mul(z2);
        let t = term.div(Dd::new((2 * n + 1) as f64));
        sum = sum.add(t);
        if t.hi.abs() < 1e-40 {
            break;
        }
    }
    sum.mul(Dd::new(2.0))
}

/// `ln 2` from the same series, so the reduction carries no rounded constant.
pub fn ln2() -> Dd {
    atanh_series(Dd::new(2.0))
}

/// The PAC deviation `ε(m, δ′)` re-derived as
/// `sqrt((2d·(1 + ln m − ln d) + 2·(ln 4 − ln δ′)) / m)` in double-double.
pub fn pac_epsilon_oracle(d: f64, m: f64, delta_prime: f64) -> f64 {
    let two = Dd::new(2.0);
    let log_ratio = Dd::new(1.0).add(Dd::ln(m)).sub(Dd::ln(d));
    let conf = Dd::ln(4.0).sub(Dd::ln(delta_prime));
    let inner = two.mul(Dd::new(d)).mul(log_ratio).add(two.mul(conf));
    if inner.hi <= 0.0 {
        return 0.0;
    }
    inner.div(Dd::new(m)).sqrt().hi
}

/// Distance of the series `ln 2` from its 30-digit decimal expansion
/// 0.693147180559945309417232121458, written as f64 head plus tail.
pub fn oracle_self_check() -> f64 {
    let reference = Dd::norm(0.693_147_180_559_945_3, 2.319_046_813_846_299_6e-17);
    let d = ln2().sub(reference);
    d.hi.abs()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Fixed-seed property runs without regression files, so every run checks
/// the same cases.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x0005_eed0),
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}

/// Uniform state over open cells and all flag patterns. Flags need not be
/// reachable; models must still produce valid outputs.
pub fn random_state(world: &GridWorld, rng: &mut ChaCha8Rng) -> EnvState {
    let open = world.open_cells();
    let cell = open[rng.gen_range(0..open.len())];
    let n = world.flag_count();
    let bits: u8 = rng.gen_range(0..(1u16 << n)) as u8;
    world.state_at(cell, Flags::from_bits(bits, n))
}

pub fn random_action(rng: &mut ChaCha8Rng) -> Action {
    Action::from_code(rng.gen_range(0..5)).unwrap()
}

/// A sub-goal that names objects present in `world`.
pub fn random_subgoal(world: &GridWorld, rng: &mut ChaCha8Rng) -> SubGoal {
    let case = world.case();
    let pick = |ids: &[u8], rng: &mut ChaCha8Rng| ids[rng.gen_range(0..ids.len())];
    match rng.gen_range(0..5) {
        0 => {
            let open = world.open_cells();
            SubGoal::MoveTo { cell: open[rng.gen_range(0..open.len())] }
        }
        1 => SubGoal::PickKey { id: pick(case.key_ids(), rng) },
        2 => SubGoal::OpenDoor { id: pick(case.key_ids(), rng) },
        3 if !case.item_ids().is_empty() => SubGoal::PickItem { id: pick(case.item_ids(), rng) },
        _ => SubGoal::ReachGoal,
    }
}

/// Random window with `k` past steps.
pub fn random_sequence(world: &GridWorld, k: usize, conditioned: bool, rng: &mut ChaCha8Rng) -> TokenSequence {
    let states = (0..=k).map(|_| random_state(world, rng)).collect();
    let actions = (0..k).map(|_| random_action(rng)).collect();
    let subgoal = conditioned.then(|| random_subgoal(world, rng));
    TokenSequence::new(states, actions, subgoal)
}

pub fn random_samples(world: &GridWorld, n: usize, max_k: usize, conditioned: bool, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..=max_k);
            Sample { seq: random_sequence(world, k, conditioned, rng), target: random_action(rng) }
        })
        .collect()
}
