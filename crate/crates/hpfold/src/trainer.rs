//! The training loop: epsilon-greedy episode collection, double-DQN
//! targets, weighted squared-error loss, Adam updates, periodic target
//! sync, greedy evaluation, and best-result tracking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::env::{
    Action, ActionMask, ConformationRecord, EnvError, FeasibilityMode, HpEnv, Observation,
    Sequence, Vec3,
};
use crate::qnet::{
    masked_argmax, save_checkpoint, CheckpointMeta, ExtraBlock, NetError, NetFloat, NetworkConfig,
    QNetwork,
};
use crate::replay::{
    beta_at, BetaSchedule, PriorityBuffer, ReplayConfig, ReplayError, Transition,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("fatal at episode {episode}: {diagnostic}; partial run record preserved")]
    Fatal {
        diagnostic: String,
        episode: usize,
        partial: Box<RunRecord>,
    },
}

/// How the terminal reward is written into stored transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Intermediate transitions carry 0; the discount propagates value
    /// backward through bootstrapping. Default.
    TerminalOnly,
    /// Ablation: every stored transition carries gamma^(T-1-t) times the
    /// terminal reward.
    DiscountedBackfill,
}

impl std::str::FromStr for RewardMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "terminal" | "terminal_only" => Ok(RewardMode::TerminalOnly),
            "backfill" | "discounted_backfill" => Ok(RewardMode::DiscountedBackfill),
            other => Err(format!(
                "unknown reward mode {other:?} (expected terminal or backfill)"
            )),
        }
    }
}

/// Every training hyperparameter, serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episode budget over which epsilon decays.
    pub eps_decay_fraction: f64,
    /// Target network sync interval, in training steps.
    pub target_sync_interval: usize,
    /// Greedy evaluation interval, in episodes.
    pub eval_interval: usize,
    pub replay: ReplayConfig,
    pub per_beta_start: f64,
    pub per_beta_end: f64,
    /// Beta anneal horizon in training steps; 0 means "the whole run"
    /// (episodes times steps per episode).
    pub per_beta_horizon: usize,
    pub network: NetworkConfig,
    pub seed: u64,
    pub feasibility_mode: FeasibilityMode,
    pub reward_mode: RewardMode,
    /// Global-norm gradient clip; disabled by default.
    pub grad_clip_norm: Option<f64>,
    /// Stop as soon as the best reward reaches this value.
    pub stop_at_reward: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            episodes: 80_000,
            learning_rate: 5e-4,
            batch_size: 512,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            target_sync_interval: 1000,
            eval_interval: 100,
            replay: ReplayConfig::default(),
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            per_beta_horizon: 0,
            network: NetworkConfig::default(),
            seed: 0,
            feasibility_mode: FeasibilityMode::Full,
            reward_mode: RewardMode::TerminalOnly,
            grad_clip_norm: None,
            stop_at_reward: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TrainerError::BadConfig(format!(
                "gamma {} must lie in [0, 1)",
                self.gamma
            )));
        }
        for (name, eps) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(TrainerError::BadConfig(format!(
                    "{name} {eps} must lie in [0, 1]"
                )));
            }
        }
        if self.batch_size == 0 || self.target_sync_interval == 0 || self.eval_interval == 0 {
            return Err(TrainerError::BadConfig(
                "batch_size, target_sync_interval and eval_interval must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainerError::BadConfig("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_decay_fraction) {
            return Err(TrainerError::BadConfig(
                "eps_decay_fraction must lie in [0, 1]".into(),
            ));
        }
        self.network.validate()?;
        Ok(())
    }

    /// Exponential decay from eps_start to eps_end over the first
    /// `eps_decay_fraction` of the episode budget, flat afterwards.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let horizon = (self.episodes as f64 * self.eps_decay_fraction).max(1.0);
        if episode as f64 >= horizon {
            return self.eps_end;
        }
        let lo = self.eps_end.max(1e-8);
        let hi = self.eps_start.max(1e-8);
        let value = hi * (lo / hi).powf(episode as f64 / horizon);
        value.max(self.eps_end)
    }

    /// Beta anneal horizon, defaulting to one episode budget worth of
    /// training steps.
    pub fn beta_schedule(&self, sequence_len: usize) -> BetaSchedule {
        let horizon = if self.per_beta_horizon > 0 {
            self.per_beta_horizon
        } else {
            self.episodes.saturating_mul(sequence_len.saturating_sub(2)).max(1)
        };
        BetaSchedule::new(self.per_beta_start, self.per_beta_end, horizon)
    }
}

/// Adam with bias-corrected moments (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: NetFloat> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one = F::one();
        let eps = F::from_f64(ADAM_EPS);
        let bc1 = one - F::from_f64(ADAM_BETA1.powi(self.t as i32));
        let bc2 = one - F::from_f64(ADAM_BETA2.powi(self.t as i32));
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Epsilon-greedy selection over the permitted actions.
pub fn select_action<F: NetFloat, R: Rng>(
    q_values: &[F],
    mask: &ActionMask,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action, TrainerError> {
    if !mask.any() {
        return Err(TrainerError::Net(NetError::AllMasked));
    }
    if rng.random::<f64>() < epsilon {
        let allowed: Vec<Action> = mask.allowed().collect();
        Ok(allowed[rng.random_range(0..allowed.len())])
    } else {
        Ok(masked_argmax(q_values, mask)?)
    }
}

/// Double-DQN target for one transition: select the successor action with
/// the policy Q-row, evaluate it with the target Q-row.
pub fn double_target<F: NetFloat>(
    reward: f64,
    done: bool,
    gamma: f64,
    q_policy_next: &[F],
    q_target_next: &[F],
    next_mask: &ActionMask,
) -> Result<F, NetError> {
    let r = F::from_f64(reward);
    if done {
        return Ok(r);
    }
    let a_star = masked_argmax(q_policy_next, next_mask)?;
    Ok(r + F::from_f64(gamma) * q_target_next[a_star.code() as usize])
}

/// Batched double-DQN targets.
pub fn compute_targets<F: NetFloat>(
    batch: &[Transition],
    policy: &QNetwork<F>,
    target: &QNetwork<F>,
    gamma: f64,
) -> Result<Vec<F>, TrainerError> {
    let next_obs: Vec<&Observation> = batch.iter().map(|t| &t.next_obs).collect();
    let q_policy = policy.forward_batch(&next_obs)?;
    let q_target = target.forward_batch(&next_obs)?;
    let mut targets = Vec::with_capacity(batch.len());
    for (j, tr) in batch.iter().enumerate() {
        let qp = q_policy.row(j);
        let qp = qp.to_slice().expect("contiguous row");
        let qt = q_target.row(j);
        let qt = qt.to_slice().expect("contiguous row");
        targets.push(double_target(
            tr.reward,
            tr.done,
            gamma,
            qp,
            qt,
            &tr.next_mask,
        )?);
    }
    Ok(targets)
}

/// Memoized target-network Q rows, one per buffer slot. The target
/// parameters only change at sync points, so a row computed since the last
/// sync stays valid until its slot is overwritten; cached rows are the
/// same values a fresh forward would produce.
#[derive(Debug, Clone)]
pub struct TargetValueCache<F> {
    epoch: u64,
    rows: Vec<(u64, u64, [F; crate::env::ACTION_COUNT])>,
}

impl<F: NetFloat> TargetValueCache<F> {
    pub fn new() -> Self {
        TargetValueCache {
            epoch: 1,
            rows: Vec::new(),
        }
    }

    /// Drop every cached row (target network changed).
    pub fn invalidate(&mut self) {
        self.epoch += 1;
    }

    fn get(&self, slot: usize, generation: u64) -> Option<&[F; crate::env::ACTION_COUNT]> {
        let (epoch, gen, q) = self.rows.get(slot)?;
        (*epoch == self.epoch && *gen == generation).then_some(q)
    }

    fn put(&mut self, slot: usize, generation: u64, q: [F; crate::env::ACTION_COUNT]) {
        if self.rows.len() <= slot {
            self.rows.resize(slot + 1, (0, 0, [F::zero(); crate::env::ACTION_COUNT]));
        }
        self.rows[slot] = (self.epoch, generation, q);
    }
}

impl<F: NetFloat> Default for TargetValueCache<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Double-DQN targets with memoized target-network rows. Equal to
/// [`compute_targets`] on the same batch.
fn compute_targets_memo<F: NetFloat>(
    batch: &crate::replay::SampledBatch,
    buffer: &PriorityBuffer,
    policy: &QNetwork<F>,
    target: &QNetwork<F>,
    gamma: f64,
    cache: &mut TargetValueCache<F>,
) -> Result<Vec<F>, TrainerError> {
    let transitions = &batch.transitions;
    let next_obs: Vec<&Observation> = transitions.iter().map(|t| &t.next_obs).collect();
    let q_policy = policy.forward_batch(&next_obs)?;

    // Gather the slots whose target row is not cached (first occurrence
    // only; duplicate draws share the computed row).
    let mut q_target_rows: Vec<Option<[F; crate::env::ACTION_COUNT]>> =
        vec![None; transitions.len()];
    let mut miss_positions: Vec<usize> = Vec::new();
    let mut miss_slot_of: Vec<(usize, u64)> = Vec::new();
    for (j, (&slot, tr)) in batch.indices.iter().zip(transitions).enumerate() {
        if tr.done {
            continue;
        }
        let generation = buffer.slot_generation(slot);
        if let Some(q) = cache.get(slot, generation) {
            q_target_rows[j] = Some(*q);
        } else if miss_slot_of.iter().all(|&(s, _)| s != slot) {
            miss_positions.push(j);
            miss_slot_of.push((slot, generation));
        }
    }
    if !miss_positions.is_empty() {
        let miss_obs: Vec<&Observation> = miss_positions
            .iter()
            .map(|&j| &transitions[j].next_obs)
            .collect();
        let q_miss = target.forward_batch(&miss_obs)?;
        for (m, (&j, &(slot, generation))) in miss_positions
            .iter()
            .zip(miss_slot_of.iter())
            .enumerate()
        {
            let mut row = [F::zero(); crate::env::ACTION_COUNT];
            for (r, v) in row.iter_mut().zip(q_miss.row(m)) {
                *r = *v;
            }
            cache.put(slot, generation, row);
            q_target_rows[j] = Some(row);
        }
        // Duplicate draws of a just-computed slot.
        for (j, (&slot, tr)) in batch.indices.iter().zip(transitions).enumerate() {
            if !tr.done && q_target_rows[j].is_none() {
                let generation = buffer.slot_generation(slot);
                q_target_rows[j] = cache.get(slot, generation).copied();
            }
        }
    }

    let mut targets = Vec::with_capacity(transitions.len());
    for (j, tr) in transitions.iter().enumerate() {
        let qp = q_policy.row(j);
        let qp = qp.to_slice().expect("contiguous row");
        let qt = q_target_rows[j].unwrap_or([F::zero(); crate::env::ACTION_COUNT]);
        targets.push(double_target(tr.reward, tr.done, gamma, qp, &qt, &tr.next_mask)?);
    }
    Ok(targets)
}

/// Copy the policy parameters into the target every `interval` steps.
/// Returns whether a sync happened.
pub fn sync_target<F: NetFloat>(
    policy: &QNetwork<F>,
    target: &mut QNetwork<F>,
    step: usize,
    interval: usize,
) -> bool {
    if interval > 0 && step.is_multiple_of(interval) {
        target.copy_params_from(policy);
        true
    } else {
        false
    }
}

#[derive(Debug, Clone)]
pub struct TrainStepOutput {
    /// Sum over the batch of w_j * delta_j^2.
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

/// One optimization step: sample a prioritized batch, build double-DQN
/// targets, take an Adam step on the weighted squared error, and write the
/// absolute TD errors back as priorities.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: NetFloat, R: Rng>(
    buffer: &mut PriorityBuffer,
    policy: &mut QNetwork<F>,
    target: &QNetwork<F>,
    adam: &mut AdamState<F>,
    config: &TrainingConfig,
    beta: &BetaSchedule,
    step: usize,
    rng: &mut R,
) -> Result<TrainStepOutput, TrainerError> {
    train_step_with_cache(
        buffer,
        policy,
        target,
        adam,
        config,
        beta,
        step,
        rng,
        &mut TargetValueCache::new(),
    )
}

/// [`train_step`] with a persistent target-row cache (the training loop's
/// fast path). The cache must be invalidated whenever the target network
/// syncs.
#[allow(clippy::too_many_arguments)]
pub fn train_step_with_cache<F: NetFloat, R: Rng>(
    buffer: &mut PriorityBuffer,
    policy: &mut QNetwork<F>,
    target: &QNetwork<F>,
    adam: &mut AdamState<F>,
    config: &TrainingConfig,
    beta: &BetaSchedule,
    step: usize,
    rng: &mut R,
    target_cache: &mut TargetValueCache<F>,
) -> Result<TrainStepOutput, TrainerError> {
    let batch = buffer.sample(config.batch_size, beta_at(beta, step), rng)?;
    let targets = compute_targets_memo(&batch, buffer, policy, target, config.gamma, target_cache)?;
    let obs: Vec<&Observation> = batch.transitions.iter().map(|t| &t.obs).collect();
    let actions: Vec<Action> = batch.transitions.iter().map(|t| t.action).collect();
    let weights: Vec<F> = batch.weights.iter().map(|&w| F::from_f64(w)).collect();
    let out = policy.loss_and_gradient(&obs, &actions, &targets, &weights)?;
    let mut grads = out.gradients;
    if let Some(max_norm) = config.grad_clip_norm {
        clip_global_norm(&mut grads, max_norm);
    }
    adam.step(
        policy.params_mut(),
        &grads,
        F::from_f64(config.learning_rate),
    );
    let td_errors: Vec<f64> = out
        .td_errors
        .iter()
        .map(|&d| num_traits::cast::<F, f64>(d).unwrap_or(f64::NAN))
        .collect();
    buffer.update_priorities(&batch.indices, &td_errors)?;
    Ok(TrainStepOutput {
        loss: num_traits::cast::<F, f64>(out.loss).unwrap_or(f64::NAN),
        td_errors,
    })
}

fn clip_global_norm<F: NetFloat>(grads: &mut [F], max_norm: f64) {
    let norm_sq: f64 = grads
        .iter()
        .map(|&g| {
            let g: f64 = num_traits::cast(g).unwrap_or(0.0);
            g * g
        })
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads {
            *g *= scale;
        }
    }
}

/// Result of playing one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub transitions: Vec<Transition>,
    pub actions: Vec<Action>,
    pub final_coords: Vec<Vec3>,
    /// True when every residue was placed.
    pub completed: bool,
}

/// Play one full episode with epsilon-greedy action selection. With
/// `collect`, transitions (reward 0 except the terminal one) are returned
/// for the caller to push after termination.
pub fn run_episode<F: NetFloat, R: Rng>(
    env: &mut HpEnv,
    net: &QNetwork<F>,
    epsilon: f64,
    rng: &mut R,
    collect: bool,
    reward_mode: RewardMode,
    gamma: f64,
) -> Result<EpisodeOutcome, TrainerError> {
    let (mut obs, mut mask) = env.reset();
    let mut transitions = Vec::new();
    let mut actions = Vec::new();
    let mut reward = 0.0;
    let mut completed = false;
    loop {
        if !mask.any() {
            // Nothing permitted: terminate with zero reward. Unreachable
            // under full feasibility masking.
            break;
        }
        let q = net.forward_one(&obs)?;
        let action = select_action(&q, &mask, epsilon, rng)?;
        let result = env.step(action)?;
        actions.push(action);
        let next_mask = if result.done {
            ActionMask::none()
        } else {
            env.mask()
        };
        if collect {
            transitions.push(Transition {
                obs,
                action,
                reward: result.reward,
                next_obs: result.observation.clone(),
                done: result.done,
                next_mask,
            });
        }
        obs = result.observation;
        mask = next_mask;
        if result.done {
            reward = result.reward;
            completed = !result.info.invalid && !result.info.trapped;
            break;
        }
    }
    if reward_mode == RewardMode::DiscountedBackfill && !transitions.is_empty() {
        let last = transitions.len() - 1;
        for (t, tr) in transitions.iter_mut().enumerate() {
            tr.reward = gamma.powi((last - t) as i32) * reward;
        }
    }
    Ok(EpisodeOutcome {
        reward,
        transitions,
        actions,
        final_coords: env.state().placed().to_vec(),
        completed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub episode: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub episode: usize,
    pub reward: f64,
    pub energy: i32,
    pub actions: Vec<u8>,
    pub coordinates: Vec<[i32; 3]>,
    pub from_eval: bool,
}

/// Everything a training run produced. `wall_clock_secs` is the only
/// field that varies between identically-seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sequence: String,
    pub config: TrainingConfig,
    pub episodes: Vec<EpisodeEntry>,
    pub evals: Vec<EvalEntry>,
    pub best: Option<BestRecord>,
    pub train_steps: usize,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn best_reward(&self) -> f64 {
        self.best.as_ref().map_or(0.0, |b| b.reward)
    }

    pub fn best_conformation(&self) -> Option<ConformationRecord> {
        let best = self.best.as_ref()?;
        Some(ConformationRecord {
            sequence: self.sequence.clone(),
            actions: best.actions.clone(),
            coordinates: best.coordinates.clone(),
            energy: best.energy,
        })
    }
}

/// File outputs of a training run: a JSONL log, a CSV curve file, the best
/// conformation, and checkpoints.
pub struct RunSink {
    out_dir: PathBuf,
    log: BufWriter<File>,
    curve: BufWriter<File>,
}

impl RunSink {
    pub fn create(out_dir: &Path) -> Result<RunSink, std::io::Error> {
        fs::create_dir_all(out_dir)?;
        let log = BufWriter::new(File::create(out_dir.join("log.jsonl"))?);
        let mut curve = BufWriter::new(File::create(out_dir.join("curve.csv"))?);
        writeln!(curve, "episode,kind,reward")?;
        Ok(RunSink {
            out_dir: out_dir.to_path_buf(),
            log,
            curve,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn log_line(
        &mut self,
        entry: &EpisodeEntry,
        eval_reward: Option<f64>,
        best_reward: f64,
    ) -> Result<(), std::io::Error> {
        let mut value = serde_json::json!({
            "episode": entry.episode,
            "reward": entry.reward,
            "epsilon": entry.epsilon,
            "mean_loss": entry.mean_loss,
            "best_reward": best_reward,
        });
        if let Some(e) = eval_reward {
            value["eval_reward"] = serde_json::json!(e);
        }
        writeln!(self.log, "{value}")?;
        self.log.flush()
    }

    fn curve_row(&mut self, episode: usize, kind: &str, reward: f64) -> Result<(), std::io::Error> {
        writeln!(self.curve, "{episode},{kind},{reward}")
    }

    fn write_best(&mut self, record: &ConformationRecord) -> Result<(), std::io::Error> {
        let json = serde_json::to_string_pretty(record)?;
        fs::write(self.out_dir.join("best.json"), json)
    }

    fn write_run_record(&mut self, record: &RunRecord) -> Result<(), std::io::Error> {
        let json = serde_json::to_string(record)?;
        fs::write(self.out_dir.join("run.json"), json)
    }

    fn checkpoint<F: NetFloat>(
        &mut self,
        name: &str,
        policy: &QNetwork<F>,
        adam: &AdamState<F>,
        step: usize,
        sequence: &Sequence,
    ) -> Result<(), NetError> {
        let meta = CheckpointMeta {
            config: *policy.config(),
            sequence: Some(sequence.to_string()),
            train_step: step as u64,
        };
        let to_f32 = |v: &[F]| -> Vec<f32> {
            v.iter()
                .map(|&x| num_traits::cast::<F, f32>(x).unwrap_or(f32::NAN))
                .collect()
        };
        let extras = vec![
            ExtraBlock {
                name: "optimizer.m".into(),
                rows: 1,
                cols: adam.m.len(),
                values: to_f32(&adam.m),
            },
            ExtraBlock {
                name: "optimizer.v".into(),
                rows: 1,
                cols: adam.v.len(),
                values: to_f32(&adam.v),
            },
        ];
        save_checkpoint(&self.out_dir.join(name), policy, &meta, &extras)
    }

    fn flush(&mut self) -> Result<(), std::io::Error> {
        self.log.flush()?;
        self.curve.flush()
    }
}

/// Run the full training protocol and return the run record. When `sink`
/// is given, logs, curve data, the best structure, and checkpoints are
/// written as the run progresses; a fatal diagnostic still writes the
/// partial record before aborting.
pub fn run_training<F: NetFloat>(
    sequence: &Sequence,
    config: &TrainingConfig,
    mut sink: Option<&mut RunSink>,
) -> Result<RunRecord, TrainerError> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut env = HpEnv::new(sequence.clone(), config.feasibility_mode);
    let mut policy = QNetwork::<F>::new(config.network, config.seed)?;
    let mut target = policy.clone();
    let mut buffer = PriorityBuffer::new(config.replay);
    let mut adam = AdamState::<F>::new(policy.param_count());
    let beta = config.beta_schedule(sequence.len());
    let mut target_cache = TargetValueCache::<F>::new();

    let mut record = RunRecord {
        sequence: sequence.to_string(),
        config: config.clone(),
        episodes: Vec::with_capacity(config.episodes.min(1 << 20)),
        evals: Vec::new(),
        best: None,
        train_steps: 0,
        stopped_early: false,
        wall_clock_secs: 0.0,
    };

    let mut steps = 0usize;
    for episode_idx in 0..config.episodes {
        let episode = episode_idx + 1;
        let epsilon = config.epsilon_at(episode_idx);
        let outcome = run_episode(
            &mut env,
            &policy,
            epsilon,
            &mut rng,
            true,
            config.reward_mode,
            config.gamma,
        )?;
        let episode_steps = outcome.actions.len();
        let improved = update_best(&mut record, &outcome, episode, false);
        if improved {
            write_best_outputs(&mut sink, &record, &policy, &adam, steps, sequence)?;
        }
        for t in outcome.transitions {
            buffer.push(t);
        }

        // One optimization step per environment step of the episode just
        // finished, once the buffer can fill a batch.
        let mut losses = 0.0;
        let mut loss_count = 0usize;
        for _ in 0..episode_steps {
            if buffer.len() < config.batch_size {
                continue;
            }
            match train_step_with_cache(
                &mut buffer,
                &mut policy,
                &target,
                &mut adam,
                config,
                &beta,
                steps,
                &mut rng,
                &mut target_cache,
            ) {
                Ok(out) => {
                    steps += 1;
                    record.train_steps = steps;
                    if sync_target(&policy, &mut target, steps, config.target_sync_interval) {
                        target_cache.invalidate();
                    }
                    losses += out.loss;
                    loss_count += 1;
                }
                Err(TrainerError::Net(NetError::NonFinite(context))) => {
                    record.wall_clock_secs = start.elapsed().as_secs_f64();
                    if let Some(s) = sink.as_deref_mut() {
                        s.write_run_record(&record)?;
                        s.flush()?;
                    }
                    return Err(TrainerError::Fatal {
                        diagnostic: format!("non-finite values in {context}"),
                        episode,
                        partial: Box::new(record),
                    });
                }
                Err(other) => return Err(other),
            }
        }
        let mean_loss = if loss_count > 0 {
            losses / loss_count as f64
        } else {
            0.0
        };

        let entry = EpisodeEntry {
            episode,
            reward: outcome.reward,
            epsilon,
            mean_loss,
        };

        let mut eval_reward = None;
        if episode % config.eval_interval == 0 {
            let eval = run_episode(
                &mut env,
                &policy,
                0.0,
                &mut rng,
                false,
                config.reward_mode,
                config.gamma,
            )?;
            record.evals.push(EvalEntry {
                episode,
                reward: eval.reward,
            });
            if let Some(s) = sink.as_deref_mut() {
                s.curve_row(episode, "eval", eval.reward)?;
            }
            let improved = update_best(&mut record, &eval, episode, true);
            if improved {
                write_best_outputs(&mut sink, &record, &policy, &adam, steps, sequence)?;
            }
            eval_reward = Some(eval.reward);
        }

        if let Some(s) = sink.as_deref_mut() {
            s.curve_row(episode, "train", entry.reward)?;
            s.log_line(&entry, eval_reward, record.best_reward())?;
        }
        record.episodes.push(entry);

        if let Some(threshold) = config.stop_at_reward {
            if record.best_reward() >= threshold {
                record.stopped_early = true;
                break;
            }
        }
    }

    record.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(s) = sink {
        if config.episodes > 0 {
            s.checkpoint("ckpt-final.bin", &policy, &adam, steps, sequence)?;
        }
        s.write_run_record(&record)?;
        s.flush()?;
    }
    Ok(record)
}

fn update_best(
    record: &mut RunRecord,
    outcome: &EpisodeOutcome,
    episode: usize,
    from_eval: bool,
) -> bool {
    let better = match &record.best {
        None => true,
        Some(b) => outcome.reward > b.reward,
    };
    if better {
        record.best = Some(BestRecord {
            episode,
            reward: outcome.reward,
            energy: -(outcome.reward as i32),
            actions: outcome.actions.iter().map(|a| a.code()).collect(),
            coordinates: outcome.final_coords.iter().map(|c| c.to_array()).collect(),
            from_eval,
        });
    }
    better
}

fn write_best_outputs<F: NetFloat>(
    sink: &mut Option<&mut RunSink>,
    record: &RunRecord,
    policy: &QNetwork<F>,
    adam: &AdamState<F>,
    steps: usize,
    sequence: &Sequence,
) -> Result<(), TrainerError> {
    if let Some(s) = sink.as_deref_mut() {
        if let Some(conformation) = record.best_conformation() {
            s.write_best(&conformation)?;
        }
        s.checkpoint("ckpt-best.bin", policy, adam, steps, sequence)?;
    }
    Ok(())
}
