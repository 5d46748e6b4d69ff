//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success (run with `--nocapture` to see them as they
//! complete). Expected values come from independent oracles implemented
//! in `common/`, never from the code paths under test.

mod common;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::{BTreeMap, BTreeSet, HashSet};

use common::*;
use hpfold::bench::{benchmark, BENCHMARKS};
use hpfold::env::{
    action_mask, half_bound, Action, EnvState, FeasibilityMode, HpEnv, Observation, Residue,
    Sequence, Vec3, ACTION_COUNT, ALL_ACTIONS, OBS_FIELDS,
};
use hpfold::feasibility::{can_complete, enumerate_optimal, Completability, SearchBudget};
use hpfold::qnet::{masked_argmax, NetworkConfig, QNetwork};
use hpfold::replay::{PriorityBuffer, ReplayConfig, Transition};
use hpfold::trainer::{compute_targets, run_episode, RewardMode, RunRecord, TrainingConfig};

fn pass(number: u32, title: &str) {
    println!("ACCEPTANCE criterion {number} ({title}): PASS");
}

fn seq(s: &str) -> Sequence {
    Sequence::parse(s).unwrap()
}

/// Criterion 1: self-avoidance, bounds, symmetry constraints, and
/// reward-vs-brute-force contact equivalence over 10^4 random masked
/// rollouts on each of benchmark sequences 1-3.
#[test]
fn criterion_01_environment_rule_suite() {
    const ROLLOUTS: usize = 10_000;
    for entry in &BENCHMARKS[..3] {
        let sequence = entry.sequence();
        let half = half_bound(sequence.len());
        (0..ROLLOUTS).into_par_iter().for_each(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(900_000 + i as u64);
            let mut env = HpEnv::new(sequence.clone(), FeasibilityMode::Full);
            env.reset();
            let mut actions = Vec::new();
            let reward;
            loop {
                let mask = env.mask();
                assert!(mask.any(), "full masking never strands the walker");
                let allowed: Vec<Action> = mask.allowed().collect();
                let action = allowed[rng.random_range(0..allowed.len())];
                let result = env.step(action).unwrap();
                assert!(!result.info.invalid, "masked actions are always valid");
                actions.push(action);
                if result.done {
                    reward = result.reward;
                    break;
                }
            }
            let placed = env.state().placed();
            assert_eq!(placed.len(), sequence.len(), "rollout completes the fold");

            // Self-avoidance and bounds.
            let mut seen = HashSet::new();
            for c in placed {
                assert!(seen.insert(c.to_array()), "revisited cell {c:?}");
                assert!(
                    c.x.abs() <= half && c.y.abs() <= half && c.z.abs() <= half,
                    "coordinate {c:?} outside |c| <= {half}"
                );
            }
            // Chain connectivity.
            for w in placed.windows(2) {
                let d = w[1] - w[0];
                assert_eq!(d.x.abs() + d.y.abs() + d.z.abs(), 1);
            }
            // Symmetry canonicalization over the trace.
            if let Some(&a) = actions.iter().find(|&&a| a != Action::Forward) {
                assert_eq!(a, Action::Right, "first deviation must be Right");
            }
            if let Some(&a) = actions.iter().find(|a| a.is_vertical()) {
                assert_eq!(a, Action::Up, "first vertical deviation must be Up");
            }
            // Terminal reward equals the brute-force contact count.
            assert_eq!(reward, -oracle_contacts(placed, &sequence) as f64);
        });
    }
    pass(1, "environment rule suite");
}

/// Criterion 2: for every reachable state of every sequence over {H,P}^l
/// with l <= 8, the full-mode mask equals the brute-force completability
/// oracle and can_complete agrees with plain enumeration.
#[test]
fn criterion_02_mask_dfs_exactness() {
    for len in 3..=8usize {
        // Geometry pass, shared by all sequences of this length: walk every
        // base-rule-reachable state once and record the oracle verdicts.
        let mut states: Vec<(Vec<Action>, [bool; 5], bool)> = Vec::new();
        fn visit(
            state: &mut OracleState,
            trace: &mut Vec<Action>,
            out: &mut Vec<(Vec<Action>, [bool; 5], bool)>,
        ) {
            if state.remaining == 0 {
                return;
            }
            let omask = oracle_mask(state);
            let ocomp = oracle_can_complete(state);
            out.push((trace.clone(), omask, ocomp));
            for action in ALL_ACTIONS {
                if state.valid(action).is_none() {
                    continue;
                }
                let mut next = state.clone();
                next.apply(action);
                trace.push(action);
                visit(&mut next, trace, out);
                trace.pop();
            }
        }
        let mut root = OracleState::from_trace(len, &[]);
        visit(&mut root, &mut Vec::new(), &mut states);
        // Reference counts from an independent enumeration of the
        // symmetry-canonical in-box partial walks.
        let expected_states = [1, 3, 8, 30, 116, 517][len - 3];
        assert_eq!(states.len(), expected_states, "state count for l = {len}");

        // Every sequence of this length, exhaustively.
        (0..1u32 << len).into_par_iter().for_each(|bits| {
            let residues: Vec<Residue> = (0..len)
                .map(|i| {
                    if (bits >> i) & 1 == 1 {
                        Residue::H
                    } else {
                        Residue::P
                    }
                })
                .collect();
            let sequence = Sequence::new(residues).unwrap();
            for (trace, omask, ocomp) in &states {
                let state = EnvState::from_actions(sequence.clone(), trace).unwrap();
                let mask = action_mask(&state, FeasibilityMode::Full);
                assert_eq!(
                    &mask.0, omask,
                    "mask mismatch: sequence {sequence}, trace {trace:?}"
                );
                let verdict = can_complete(&state, SearchBudget::unlimited());
                let expected = if *ocomp {
                    Completability::Completable
                } else {
                    Completability::NotCompletable
                };
                assert_eq!(
                    verdict, expected,
                    "completability mismatch: sequence {sequence}, trace {trace:?}"
                );
            }
        });
    }
    pass(2, "mask/DFS exactness on all chains up to length 8");
}

/// Criterion 3: every unconstrained 5-vertex SAW maps under the 48 lattice
/// symmetries to exactly one constrained representative.
#[test]
fn criterion_03_symmetry_factor() {
    let walks = enumerate_free_saws(5);
    assert_eq!(walks.len(), 726, "free SAW count c_4 = 726");
    let symmetries = lattice_symmetries();

    let mut orbit_of_walk: Vec<Vec<[i32; 3]>> = Vec::with_capacity(walks.len());
    for walk in &walks {
        // Orbit of this walk (deduplicated: straight lines and planar
        // walks have non-trivial stabilizers).
        let mut orbit: BTreeSet<Vec<[i32; 3]>> = BTreeSet::new();
        let mut canonical = Vec::new();
        for m in &symmetries {
            let image = transform_path(m, walk);
            orbit.insert(path_key(&image));
            if hpfold::env::is_symmetry_canonical(&image) {
                canonical.push(path_key(&image));
            }
        }
        canonical.sort();
        canonical.dedup();
        assert_eq!(
            canonical.len(),
            1,
            "walk {walk:?} must have exactly one canonical image, found {}",
            canonical.len()
        );
        orbit_of_walk.push(canonical.pop().unwrap());
    }

    // The canonical representatives partition the 726 walks into orbits.
    let mut orbit_sizes: BTreeMap<Vec<[i32; 3]>, usize> = BTreeMap::new();
    for rep in orbit_of_walk {
        *orbit_sizes.entry(rep).or_default() += 1;
    }
    let total: usize = orbit_sizes.values().sum();
    assert_eq!(total, 726);
    // 6 x 4 x 2 = 48 structures collapse onto one representative, up to
    // stabilizers on degenerate (straight/planar) walks.
    assert!(orbit_sizes.values().all(|&n| n == 48 || 48 % n == 0));
    pass(3, "symmetry factor for n = 5");
}

/// Criterion 4: oracle certification of short chains, and pruned vs
/// unpruned agreement on 50 random length-10 sequences.
#[test]
fn criterion_04_oracle_certification() {
    let hhhh = enumerate_optimal(&seq("HHHH"), true).unwrap();
    assert_eq!(hhhh.optimal_energy, -1);
    let pppp = enumerate_optimal(&seq("PPPP"), true).unwrap();
    assert_eq!(pppp.optimal_energy, 0);

    let mut rng = ChaCha12Rng::seed_from_u64(7001);
    let sequences: Vec<Sequence> = (0..50)
        .map(|_| {
            let residues: Vec<Residue> = (0..10)
                .map(|_| {
                    if rng.random::<bool>() {
                        Residue::H
                    } else {
                        Residue::P
                    }
                })
                .collect();
            Sequence::new(residues).unwrap()
        })
        .collect();
    sequences.par_iter().for_each(|sequence| {
        let pruned = enumerate_optimal(sequence, true).unwrap();
        let unpruned = enumerate_optimal(sequence, false).unwrap();
        assert_eq!(
            pruned.optimal_energy, unpruned.optimal_energy,
            "pruning changed the optimum of {sequence}"
        );
        assert_eq!(
            pruned.witness, unpruned.witness,
            "pruning changed the witness of {sequence}"
        );
        // The witness replays to the certified energy.
        let record = pruned.to_record();
        assert!(record.conformation.validate_replay(FeasibilityMode::Full).is_ok());
        assert!(pruned.optimal_energy <= 0);
    });
    pass(4, "exhaustive oracle certification");
}

/// Criterion 5: analytic gradients match central finite differences on a
/// d_model=8, N=1, H=2 network with L=4, within 1e-3 relative error.
#[test]
fn criterion_05_gradient_check() {
    let config = NetworkConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        d_type: 4,
        action_count: 5,
    };
    let net = QNetwork::<f64>::new(config, 2024).unwrap();
    let o1 = HpEnv::new(seq("HPPH"), FeasibilityMode::Off).state().observation();
    let o2 = HpEnv::new(seq("HHPH"), FeasibilityMode::Off).state().observation();
    let observations = [&o1, &o2, &o1];
    let actions = [Action::Forward, Action::Up, Action::Right];
    let targets = [0.9, -0.4, 1.5];
    let weights = [1.0, 0.55, 0.8];

    let analytic = net
        .loss_and_gradient(&observations, &actions, &targets, &weights)
        .unwrap()
        .gradients;
    let base = net.params().to_vec();
    let loss_at = |params: &[f64]| {
        let mut probe = net.clone();
        probe.params_mut().copy_from_slice(params);
        probe
            .loss_and_gradient(&observations, &actions, &targets, &weights)
            .unwrap()
            .loss
    };
    let mut checked = 0usize;
    for i in 0..base.len() {
        let h = 1e-5 * base[i].abs().max(1.0);
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom < 1e-7 {
            assert!((analytic[i] - numeric).abs() < 1e-8);
            continue;
        }
        let rel = (analytic[i] - numeric).abs() / denom;
        assert!(
            rel < 1e-3,
            "component {i}: analytic {:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})",
            analytic[i]
        );
        checked += 1;
    }
    assert!(checked > base.len() / 2, "most components carry gradient");
    pass(5, "finite-difference gradient check");
}

/// Criterion 6: mean over actions of Q(s, a) equals V(s) within 1e-6 on
/// 1000 random inputs.
#[test]
fn criterion_06_dueling_identity() {
    let net = QNetwork::<f64>::new(NetworkConfig::tiny(), 31).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let observations: Vec<Observation> = (0..1000)
        .map(|_| {
            let l = 8;
            let values: Vec<f32> = (0..l)
                .flat_map(|i| {
                    [
                        rng.random_range(-4..=4) as f32,
                        rng.random_range(-4..=4) as f32,
                        rng.random_range(-4..=4) as f32,
                        if rng.random::<bool>() { 1.0 } else { 0.0 },
                        i as f32 / (l - 1) as f32,
                    ]
                })
                .collect();
            Observation::from_values(values)
        })
        .collect();
    let refs: Vec<&Observation> = observations.iter().collect();
    let (q, v, _) = net.forward_parts(&refs).unwrap();
    for b in 0..refs.len() {
        let mean = q.row(b).sum() / ACTION_COUNT as f64;
        assert!(
            (mean - v[b]).abs() < 1e-6,
            "input {b}: mean Q {mean} vs V {}",
            v[b]
        );
    }
    pass(6, "dueling identity mean_a Q = V");
}

/// Criterion 7: empirical sampling frequencies match the prioritized
/// distribution for alpha in {0, 0.6, 1} (chi-square, p > 0.01), with
/// alpha = 0 reproducing uniform sampling.
#[test]
fn criterion_07_per_statistics() {
    let priorities = [0.5, 0.2, 0.8, 0.3, 1.1, 2.5, 3.9, 1.7];
    const DRAWS: usize = 100_000;
    for (case, alpha) in [(0usize, 0.0f64), (1, 0.6), (2, 1.0)] {
        let config = ReplayConfig {
            capacity: 16,
            alpha,
            epsilon: 0.0,
            normalize_weights: true,
        };
        let mut buffer = PriorityBuffer::new(config);
        let obs = Observation::from_values(vec![0.0; OBS_FIELDS * 3]);
        for _ in 0..priorities.len() {
            buffer.push(Transition {
                obs: obs.clone(),
                action: Action::Forward,
                reward: 0.0,
                next_obs: obs.clone(),
                done: false,
                next_mask: hpfold::env::ActionMask([true; 5]),
            });
        }
        let indices: Vec<usize> = (0..priorities.len()).collect();
        buffer.update_priorities(&indices, &priorities).unwrap();

        let total_mass: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
        let expected: Vec<f64> = priorities
            .iter()
            .map(|p| DRAWS as f64 * p.powf(alpha) / total_mass)
            .collect();
        if alpha == 0.0 {
            let uniform = DRAWS as f64 / priorities.len() as f64;
            assert!(expected.iter().all(|&e| (e - uniform).abs() < 1e-9));
        }

        let mut rng = ChaCha12Rng::seed_from_u64(500 + case as u64);
        let mut counts = vec![0usize; priorities.len()];
        let batch = priorities.len();
        for _ in 0..DRAWS / batch {
            let sampled = buffer.sample(batch, 0.7, &mut rng).unwrap();
            for i in sampled.indices {
                counts[i] += 1;
            }
        }

        let stat: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &e)| (c as f64 - e) * (c as f64 - e) / e)
            .sum();
        let chi = ChiSquared::new((priorities.len() - 1) as f64).unwrap();
        let p_value = 1.0 - chi.cdf(stat);
        assert!(
            p_value > 0.01,
            "alpha {alpha}: chi-square {stat:.2} gives p = {p_value:.4}"
        );
    }
    pass(7, "prioritized replay sampling statistics");
}

/// Criterion 8: with identical policy and target parameters, the double
/// target equals the standard target on random batches, to 1e-6.
#[test]
fn criterion_08_double_target_identity() {
    let net = QNetwork::<f64>::new(NetworkConfig::tiny(), 77).unwrap();
    let mut env = HpEnv::new(seq("HPHPPHHP"), FeasibilityMode::Full);
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let gamma = 0.93;
    let mut transitions = Vec::new();
    while transitions.len() < 256 {
        let out = run_episode(
            &mut env,
            &net,
            1.0,
            &mut rng,
            true,
            RewardMode::TerminalOnly,
            gamma,
        )
        .unwrap();
        transitions.extend(out.transitions);
    }
    let targets = compute_targets(&transitions, &net, &net, gamma).unwrap();
    for (tr, &y) in transitions.iter().zip(&targets) {
        let standard = if tr.done {
            tr.reward
        } else {
            // Standard DQN target: evaluate the target network at its own
            // best permitted action.
            let q = net.forward_one(&tr.next_obs).unwrap();
            let best = masked_argmax(&q, &tr.next_mask).unwrap();
            tr.reward + gamma * q[best.code() as usize]
        };
        assert!(
            (y - standard).abs() <= 1e-6,
            "double {y} vs standard {standard}"
        );
    }
    pass(8, "double-target identity at theta = theta-minus");
}

fn smoke_config(episodes: usize, seed: u64, stop_at: f64) -> TrainingConfig {
    TrainingConfig {
        episodes,
        learning_rate: 1e-3,
        batch_size: 32,
        gamma: 0.95,
        eval_interval: 50,
        target_sync_interval: 200,
        network: NetworkConfig::tiny(),
        replay: ReplayConfig {
            capacity: 20_000,
            ..ReplayConfig::default()
        },
        seed,
        stop_at_reward: Some(stop_at),
        ..TrainingConfig::default()
    }
}

fn count_successes(sequence: &Sequence, optimum: f64, episodes: usize, seeds: u64) -> usize {
    (0..seeds)
        .map(|seed| {
            let config = smoke_config(episodes, 4000 + seed, optimum);
            let record: RunRecord =
                hpfold::trainer::run_training::<f32>(sequence, &config, None).unwrap();
            let hit = record.best_reward() >= optimum;
            eprintln!(
                "  seed {seed}: best {} after {} episodes{}",
                record.best_reward(),
                record.episodes.len(),
                if hit { " (optimum reached)" } else { "" }
            );
            usize::from(hit)
        })
        .sum()
}

/// Criterion 9: training with a tiny network reaches the oracle-certified
/// optimum on HHHH and on a random length-10 sequence within 2000
/// episodes, in at least 3 of 5 seeds.
#[test]
fn criterion_09_learning_smoke_test() {
    let hhhh = seq("HHHH");
    let cert = enumerate_optimal(&hhhh, true).unwrap();
    assert_eq!(cert.optimal_energy, -1);
    let successes = count_successes(&hhhh, 1.0, 2000, 5);
    assert!(
        successes >= 3,
        "HHHH: only {successes} of 5 seeds reached the optimum"
    );

    // A random length-10 sequence with an exhaustively certified optimum.
    let mut rng = ChaCha12Rng::seed_from_u64(1002);
    let residues: Vec<Residue> = (0..10)
        .map(|_| {
            if rng.random::<bool>() {
                Residue::H
            } else {
                Residue::P
            }
        })
        .collect();
    let sequence = Sequence::new(residues).unwrap();
    let cert = enumerate_optimal(&sequence, true).unwrap();
    eprintln!(
        "random l=10 sequence {sequence}: certified optimum {}",
        cert.optimal_energy
    );
    let optimum = -cert.optimal_energy as f64;
    let successes = count_successes(&sequence, optimum, 2000, 5);
    assert!(
        successes >= 3,
        "{sequence}: only {successes} of 5 seeds reached {optimum}"
    );
    pass(9, "learning smoke test reaches certified optima");
}

/// Criterion 10: desk-scale benchmark reproduction. Sequence 1 with the
/// published row-1 hyperparameters (lr 5e-4, batch 512, d_model 64, one
/// layer) reaches best training energy <= -10 within 80000 episodes in at
/// least 1 of 3 seeds. The published best of -11 is reported when hit but
/// not required. Sequences 5-7 are covered by the rule and replay suites
/// only.
#[test]
fn criterion_10_benchmark_reproduction() {
    let entry = benchmark(1).unwrap();
    let sequence = entry.sequence();
    let mut hit = false;
    let mut best_overall = 0.0f64;
    for seed in 0..3u64 {
        let config = TrainingConfig {
            episodes: 80_000,
            learning_rate: 5e-4,
            batch_size: 512,
            network: NetworkConfig {
                d_model: 64,
                n_layers: 1,
                ..NetworkConfig::default()
            },
            seed,
            // Exploration budget compressed into the first tenth of the
            // episode budget; the published table pins no schedule and the
            // full 80k-episode default anneal is not a desk-scale setting.
            eps_decay_fraction: 0.1,
            stop_at_reward: Some(10.0),
            ..TrainingConfig::default()
        };
        eprintln!("criterion 10: sequence 1, seed {seed} (stops at reward 10)");
        let record = hpfold::trainer::run_training::<f32>(&sequence, &config, None).unwrap();
        let best = record.best_reward();
        best_overall = best_overall.max(best);
        eprintln!(
            "  seed {seed}: best energy {} after {} episodes",
            -best,
            record.episodes.len()
        );
        if best >= 10.0 {
            hit = true;
            if best >= 11.0 {
                eprintln!("  reached the published best of -11");
            }
            break;
        }
    }
    assert!(
        hit,
        "no seed reached energy <= -10 within 80000 episodes (best {})",
        -best_overall
    );
    pass(10, "benchmark sequence 1 reaches energy <= -10");
}

/// Extra guard for the reference constants the CLI embeds: expansions and
/// reference energies exactly match the published table.
#[test]
fn benchmark_table_reference_values() {
    let lengths: Vec<usize> = BENCHMARKS.iter().map(|b| b.sequence().len()).collect();
    assert_eq!(lengths, [20, 24, 25, 36, 48, 50, 60]);
    let energies: Vec<i32> = BENCHMARKS.iter().map(|b| b.best_known_energy).collect();
    assert_eq!(energies, [-11, -13, -9, -18, -31, -34, -55]);
}

/// A known minimum-energy fold of benchmark sequence 1 scores -11 under
/// the contact counter (and under the independent oracle).
#[test]
fn sequence_1_best_known_fold_scores_minus_eleven() {
    let sequence = benchmark(1).unwrap().sequence();
    let coords: [[i32; 3]; 20] = [
        [0, 0, 0],
        [1, 0, 0],
        [1, -1, 0],
        [1, -2, 0],
        [0, -2, 0],
        [0, -1, 0],
        [-1, -1, 0],
        [-2, -1, 0],
        [-2, 0, 0],
        [-2, 0, 1],
        [-1, 0, 1],
        [-1, 0, 0],
        [-1, 0, -1],
        [-1, -1, -1],
        [0, -1, -1],
        [0, -1, -2],
        [0, 0, -2],
        [0, 0, -1],
        [1, 0, -1],
        [1, -1, -1],
    ];
    let path: Vec<Vec3> = coords.iter().map(|&c| Vec3::from(c)).collect();
    assert!(hpfold::env::is_symmetry_canonical(&path));
    assert_eq!(hpfold::env::contact_energy(&path, &sequence), -11);
    assert_eq!(oracle_contacts(&path, &sequence), -11);

    // The fold replays through the environment to the same energy.
    let actions = hpfold::env::actions_from_path(&path).unwrap();
    let mut env = HpEnv::new(sequence, FeasibilityMode::Full);
    env.reset();
    let mut last = None;
    for a in actions {
        last = Some(env.step(a).unwrap());
    }
    let last = last.unwrap();
    assert!(last.done);
    assert_eq!(last.reward, 11.0);
    assert_eq!(last.info.energy, -11);
}
