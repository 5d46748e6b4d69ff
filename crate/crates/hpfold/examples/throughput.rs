//! Rough training-throughput probe: times episode collection and
//! optimization steps at the benchmark-sequence scale.

use hpfold::env::{FeasibilityMode, HpEnv, Sequence};
use hpfold::qnet::QNetwork;
use hpfold::replay::PriorityBuffer;
use hpfold::trainer::{run_episode, train_step_with_cache, AdamState, RewardMode, TargetValueCache, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let seq = Sequence::parse("HPHPPHHPHPPHPHHPPHPH").unwrap(); // l = 20
    let config = TrainingConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut env = HpEnv::new(seq.clone(), FeasibilityMode::Full);
    let mut policy = QNetwork::<f32>::new(config.network, 0).unwrap();
    let target = policy.clone();
    let mut adam = AdamState::<f32>::new(policy.param_count());
    let mut buffer = PriorityBuffer::new(config.replay);
    let beta = config.beta_schedule(seq.len());

    let t0 = Instant::now();
    let mut episodes = 0;
    while buffer.len() < config.batch_size + 64 {
        let out = run_episode(&mut env, &policy, 1.0, &mut rng, true, RewardMode::TerminalOnly, 0.99).unwrap();
        for t in out.transitions { buffer.push(t); }
        episodes += 1;
    }
    let collect_time = t0.elapsed().as_secs_f64();
    println!("collection: {episodes} episodes ({} transitions) in {collect_time:.3}s  ({:.1} ms/episode)",
        buffer.len(), 1000.0 * collect_time / episodes as f64);

    {
        use hpfold::env::Observation;
        let batch = buffer.sample(config.batch_size, 0.4, &mut rng).unwrap();
        let obs: Vec<&Observation> = batch.transitions.iter().map(|t| &t.obs).collect();
        let min_ms = |f: &mut dyn FnMut()| {
            let mut best = f64::INFINITY;
            for _ in 0..12 {
                let t0 = Instant::now();
                f();
                best = best.min(t0.elapsed().as_secs_f64() * 1000.0);
            }
            best
        };
        println!("  forward_batch(512): {:.1} ms (min)", min_ms(&mut || { let _ = policy.forward_batch(&obs).unwrap(); }));
        let (_q, cache) = policy.forward_cached(&obs).unwrap();
        let d_q = ndarray::Array2::<f32>::from_elem((obs.len(), 5), 0.01);
        println!("  backward(512): {:.1} ms (min)", min_ms(&mut || { let _ = policy.backward(&cache, &d_q); }));
        println!("  compute_targets(512): {:.1} ms (min)", min_ms(&mut || { let _ = hpfold::trainer::compute_targets(&batch.transitions, &policy, &target, 0.99).unwrap(); }));
    }

    let n_steps = 20;
    let mut cache = TargetValueCache::<f32>::new();
    let mut best = f64::INFINITY;
    let t0 = Instant::now();
    for step in 0..n_steps {
        let t1 = Instant::now();
        train_step_with_cache(&mut buffer, &mut policy, &target, &mut adam, &config, &beta, step, &mut rng, &mut cache).unwrap();
        best = best.min(t1.elapsed().as_secs_f64());
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("best train_step: {:.1} ms", best * 1000.0);
    println!("train_step (batch {}, d_model {}, d_ff {}): {:.1} ms/step", config.batch_size, config.network.d_model, config.network.d_ff, 1000.0 * dt / n_steps as f64);
    println!("=> one 18-step episode of seq1 costs ~{:.2}s of training", 18.0 * dt / n_steps as f64);
}
