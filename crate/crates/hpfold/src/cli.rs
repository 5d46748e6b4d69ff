//! Subcommand implementations for the `hpfold` binary.

use anyhow::{anyhow, bail, Context, Result};
use std::fs;
use std::path::PathBuf;

use crate::bench::{self, expand_sequence, parse_run_config, RunConfigFile};
use crate::env::{ConformationRecord, FeasibilityMode, HpEnv, Sequence};
use crate::feasibility;
use crate::qnet::load_checkpoint;
use crate::trainer::{self, run_episode, RewardMode, RunSink, TrainerError};

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub sequence: Option<String>,
    pub benchmark: Option<u8>,
}

/// Load the config, apply command-line overrides, and run training,
/// writing logs, curve data, the best structure, and checkpoints.
pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let RunConfigFile {
        mut training,
        mut selection,
        notices,
    } = parse_run_config(&text)?;
    for notice in &notices {
        eprintln!("notice: {notice}");
    }
    if let Some(seed) = args.seed {
        training.seed = seed;
    }
    if let Some(episodes) = args.episodes {
        training.episodes = episodes;
    }
    if let Some(sequence) = args.sequence {
        selection.sequence = Some(sequence);
        selection.benchmark = None;
    }
    if args.benchmark.is_some() {
        selection.benchmark = args.benchmark;
    }
    if let Some(dir) = args.out_dir {
        selection.out_dir = Some(dir);
    }

    let sequence = selection.resolve()?;
    let out_dir = selection
        .out_dir
        .ok_or_else(|| anyhow!("no output directory (pass --out-dir or set out_dir)"))?;
    let mut sink = RunSink::create(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;

    eprintln!(
        "training {} (l = {}) for {} episodes, seed {}",
        sequence,
        sequence.len(),
        training.episodes,
        training.seed
    );
    let record = match trainer::run_training::<f32>(&sequence, &training, Some(&mut sink)) {
        Ok(record) => record,
        Err(TrainerError::Fatal {
            diagnostic,
            episode,
            ..
        }) => {
            bail!("fatal diagnostic at episode {episode}: {diagnostic} (partial record written)");
        }
        Err(e) => return Err(e.into()),
    };

    match &record.best {
        Some(best) => println!(
            "best reward {} (energy {}) at episode {}{}",
            best.reward,
            best.energy,
            best.episode,
            if record.stopped_early {
                "; stopped early at the reward target"
            } else {
                ""
            }
        ),
        None => println!("no episodes were run"),
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub sequence: Option<String>,
    pub benchmark: Option<u8>,
    pub episodes: usize,
    pub out_dir: Option<PathBuf>,
}

/// Greedy evaluation of a checkpoint: runs complete episodes with epsilon
/// 0, prints each reward, and exports the best conformation found.
pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (net, meta, _extras) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;

    let sequence = match (&args.sequence, args.benchmark, &meta.sequence) {
        (Some(s), _, _) => expand_sequence(s)?,
        (None, Some(id), _) => bench::benchmark(id)?.sequence(),
        (None, None, Some(s)) => Sequence::parse(s)?,
        (None, None, None) => bail!("checkpoint carries no sequence; pass --sequence"),
    };
    if let Some(trained_on) = &meta.sequence {
        let trained = Sequence::parse(trained_on)?;
        if trained.len() != sequence.len() {
            bail!(
                "checkpoint was trained on length {} but the requested sequence has length {}",
                trained.len(),
                sequence.len()
            );
        }
    }

    let mut env = HpEnv::new(sequence.clone(), FeasibilityMode::Full);
    let mut rng = rand::rng();
    let mut best: Option<ConformationRecord> = None;
    for episode in 1..=args.episodes.max(1) {
        let outcome = run_episode(
            &mut env,
            &net,
            0.0,
            &mut rng,
            false,
            RewardMode::TerminalOnly,
            0.99,
        )?;
        println!("episode {episode}: reward {}", outcome.reward);
        let better = best
            .as_ref()
            .is_none_or(|b| outcome.reward > -b.energy as f64);
        if better {
            best = Some(ConformationRecord::new(
                &sequence,
                &outcome.actions,
                &outcome.final_coords,
                -(outcome.reward as i32),
            ));
        }
    }
    let best = best.expect("at least one episode runs");
    let json = serde_json::to_string_pretty(&best)?;
    if let Some(dir) = args.out_dir {
        fs::create_dir_all(&dir)?;
        let path = dir.join("eval-best.json");
        fs::write(&path, &json)?;
        println!("conformation written to {}", path.display());
    } else {
        println!("{json}");
    }
    Ok(())
}

pub struct EnumerateArgs {
    pub sequence: Option<String>,
    pub benchmark: Option<u8>,
    pub prune: bool,
    pub parallel: bool,
    pub out_dir: Option<PathBuf>,
}

/// Exhaustively certify the optimal energy of a short sequence and export
/// the witness conformation.
pub fn cmd_enumerate(args: EnumerateArgs) -> Result<()> {
    let sequence = match (&args.sequence, args.benchmark) {
        (Some(s), _) => expand_sequence(s)?,
        (None, Some(id)) => bench::benchmark(id)?.sequence(),
        (None, None) => bail!("pass --sequence or --benchmark"),
    };
    let certificate = if args.parallel {
        feasibility::enumerate_optimal_parallel(
            &sequence,
            args.prune,
            feasibility::DEFAULT_ENUMERATION_LIMIT,
        )?
    } else {
        feasibility::enumerate_optimal(&sequence, args.prune)?
    };
    println!(
        "sequence {sequence}: optimal energy {}, witness {}, {} states explored",
        certificate.optimal_energy,
        certificate
            .witness
            .iter()
            .map(|a| a.to_string())
            .collect::<String>(),
        certificate.states_explored
    );
    let record = certificate.to_record();
    let json = serde_json::to_string_pretty(&record)?;
    if let Some(dir) = args.out_dir {
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("optimal-{sequence}.json"));
        fs::write(&path, &json)?;
        println!("witness written to {}", path.display());
    } else {
        println!("{json}");
    }
    Ok(())
}

pub struct ExportArgs {
    pub input: PathBuf,
    pub out_dir: Option<PathBuf>,
}

/// Re-validate a stored conformation record by replaying it through the
/// environment, then pretty-print (and optionally re-export) it.
pub fn cmd_export(args: ExportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input)
        .with_context(|| format!("cannot read {}", args.input.display()))?;
    let record: ConformationRecord = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a conformation record", args.input.display()))?;
    let reward = record
        .validate_replay(FeasibilityMode::Off)
        .map_err(|e| anyhow!("replay validation failed: {e}"))?;
    println!(
        "sequence {} (l = {}): energy {}, replayed reward {}",
        record.sequence,
        record.sequence.len(),
        record.energy,
        reward
    );
    let json = serde_json::to_string_pretty(&record)?;
    if let Some(dir) = args.out_dir {
        fs::create_dir_all(&dir)?;
        let name = args
            .input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "conformation.json".into());
        let path = dir.join(name);
        fs::write(&path, &json)?;
        println!("record written to {}", path.display());
    } else {
        println!("{json}");
    }
    Ok(())
}
