//! Benchmark table, sequence-notation expansion, and the flat key=value
//! run-configuration format used by the CLI.

use std::collections::BTreeSet;
use std::path::PathBuf;
use thiserror::Error;

use crate::env::{FeasibilityMode, Sequence};
use crate::qnet::NetworkConfig;
use crate::replay::ReplayConfig;
use crate::trainer::{RewardMode, TrainingConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("sequence notation error at position {pos}: {message}")]
    Notation { pos: usize, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown benchmark id {0} (expected 1..=7)")]
    UnknownBenchmark(u8),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

/// One standard benchmark sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkEntry {
    pub id: u8,
    /// Repetition notation, e.g. `(HP)2PH(HP)2(PH)2HP(PH)2`.
    pub notation: &'static str,
    pub length: usize,
    /// Best knowable reference energy; external ground truth, never
    /// asserted as achieved.
    pub best_known_energy: i32,
}

impl BenchmarkEntry {
    pub fn sequence(&self) -> Sequence {
        let seq = expand_sequence(self.notation).expect("benchmark notation is well-formed");
        debug_assert_eq!(seq.len(), self.length);
        seq
    }
}

/// The seven standard 3D HP benchmark sequences.
pub const BENCHMARKS: [BenchmarkEntry; 7] = [
    BenchmarkEntry {
        id: 1,
        notation: "(HP)2PH(HP)2(PH)2HP(PH)2",
        length: 20,
        best_known_energy: -11,
    },
    BenchmarkEntry {
        id: 2,
        notation: "H2P2(HP2)6H2",
        length: 24,
        best_known_energy: -13,
    },
    BenchmarkEntry {
        id: 3,
        notation: "P2HP2(H2P4)3H2",
        length: 25,
        best_known_energy: -9,
    },
    BenchmarkEntry {
        id: 4,
        notation: "P(P2H2)2P5H5(H2P2)2P2H(HP2)2",
        length: 36,
        best_known_energy: -18,
    },
    BenchmarkEntry {
        id: 5,
        notation: "P2H(P2H2)2P5H10P6(H2P2)2HP2H5",
        length: 48,
        best_known_energy: -31,
    },
    BenchmarkEntry {
        id: 6,
        notation: "H2(PH)3PH4PH(P3H)2P4(HP3)2HPH4(PH)3PH2",
        length: 50,
        best_known_energy: -34,
    },
    BenchmarkEntry {
        id: 7,
        notation: "P(PH3)2H5P3H10PHP3H12P4H6PH2PHP",
        length: 60,
        best_known_energy: -55,
    },
];

pub fn benchmark(id: u8) -> Result<&'static BenchmarkEntry, BenchError> {
    BENCHMARKS
        .iter()
        .find(|b| b.id == id)
        .ok_or(BenchError::UnknownBenchmark(id))
}

/// Expand repetition notation over {H, P, (, ), digits} into a plain
/// sequence. One level of parentheses; a number repeats the letter or
/// group before it.
pub fn expand_sequence(notation: &str) -> Result<Sequence, BenchError> {
    let chars: Vec<char> = notation.chars().collect();
    let mut out = String::new();
    let mut i = 0usize;
    while i < chars.len() {
        match chars[i] {
            'H' | 'h' | 'P' | 'p' => {
                let unit = chars[i].to_ascii_uppercase();
                i += 1;
                let reps = parse_repeat(&chars, &mut i)?;
                for _ in 0..reps {
                    out.push(unit);
                }
            }
            '(' => {
                let open = i;
                i += 1;
                let mut group = String::new();
                loop {
                    match chars.get(i) {
                        None => {
                            return Err(BenchError::Notation {
                                pos: open,
                                message: "unclosed parenthesis".into(),
                            })
                        }
                        Some(')') => break,
                        Some('(') => {
                            return Err(BenchError::Notation {
                                pos: i,
                                message: "nested parentheses are not supported".into(),
                            })
                        }
                        Some(&c @ ('H' | 'h' | 'P' | 'p')) => {
                            let unit = c.to_ascii_uppercase();
                            i += 1;
                            let reps = parse_repeat(&chars, &mut i)?;
                            for _ in 0..reps {
                                group.push(unit);
                            }
                        }
                        Some(&c) => {
                            return Err(BenchError::Notation {
                                pos: i,
                                message: format!("unexpected character {c:?} inside group"),
                            })
                        }
                    }
                }
                if group.is_empty() {
                    return Err(BenchError::Notation {
                        pos: open,
                        message: "empty group".into(),
                    });
                }
                i += 1; // consume ')'
                let reps = parse_repeat(&chars, &mut i)?;
                for _ in 0..reps {
                    out.push_str(&group);
                }
            }
            ')' => {
                return Err(BenchError::Notation {
                    pos: i,
                    message: "unmatched closing parenthesis".into(),
                })
            }
            c if c.is_ascii_digit() => {
                return Err(BenchError::Notation {
                    pos: i,
                    message: "repeat count without a preceding letter or group".into(),
                })
            }
            c => {
                return Err(BenchError::Notation {
                    pos: i,
                    message: format!("unexpected character {c:?}"),
                })
            }
        }
    }
    Ok(Sequence::parse(&out)?)
}

fn parse_repeat(chars: &[char], i: &mut usize) -> Result<usize, BenchError> {
    let start = *i;
    let mut digits = String::new();
    while let Some(c) = chars.get(*i) {
        if c.is_ascii_digit() {
            digits.push(*c);
            *i += 1;
        } else {
            break;
        }
    }
    if digits.is_empty() {
        return Ok(1);
    }
    let n: usize = digits.parse().map_err(|_| BenchError::Notation {
        pos: start,
        message: format!("bad repeat count {digits:?}"),
    })?;
    if n == 0 {
        return Err(BenchError::Notation {
            pos: start,
            message: "repeat count must be positive".into(),
        });
    }
    Ok(n)
}

/// What to fold, parsed from a run-configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSelection {
    pub sequence: Option<String>,
    pub benchmark: Option<u8>,
    pub out_dir: Option<PathBuf>,
}

impl RunSelection {
    /// Resolve to a concrete sequence; a benchmark id wins over an
    /// explicit string when both are set.
    pub fn resolve(&self) -> Result<Sequence, BenchError> {
        if let Some(id) = self.benchmark {
            return Ok(benchmark(id)?.sequence());
        }
        if let Some(s) = &self.sequence {
            return expand_sequence(s);
        }
        Err(BenchError::Config {
            line: 0,
            message: "no sequence selected (set sequence= or benchmark=)".into(),
        })
    }
}

/// Parsed run-configuration file: training hyperparameters plus sequence
/// selection, with a notice for every key that fell back to its default.
#[derive(Debug, Clone)]
pub struct RunConfigFile {
    pub training: TrainingConfig,
    pub selection: RunSelection,
    pub notices: Vec<String>,
}

const CONFIG_KEYS: [&str; 30] = [
    "sequence",
    "benchmark",
    "out_dir",
    "episodes",
    "learning_rate",
    "batch_size",
    "gamma",
    "eps_start",
    "eps_end",
    "eps_decay_fraction",
    "target_sync_interval",
    "eval_interval",
    "replay_capacity",
    "per_alpha",
    "per_eps",
    "per_beta_start",
    "per_beta_end",
    "per_beta_horizon",
    "normalize_is_weights",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "d_type",
    "seed",
    "feasibility_mode",
    "reward_mode",
    "grad_clip_norm",
    "stop_at_reward",
    "obs_version", // reserved; rejected below with a pointer to the docs
];

/// Parse the flat `key = value` format (one pair per line, `#` comments).
/// Unknown keys are rejected; missing keys fall back to defaults and are
/// reported in `notices`.
pub fn parse_run_config(text: &str) -> Result<RunConfigFile, BenchError> {
    let mut training = TrainingConfig::default();
    let mut replay = ReplayConfig::default();
    let mut network = NetworkConfig::default();
    let mut selection = RunSelection::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(BenchError::Config {
                line: line_no,
                message: format!("expected key = value, got {line:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !CONFIG_KEYS.contains(&key) || key == "obs_version" {
            return Err(BenchError::Config {
                line: line_no,
                message: format!("unknown key {key:?}"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(BenchError::Config {
                line: line_no,
                message: format!("duplicate key {key:?}"),
            });
        }
        let err = |message: String| BenchError::Config {
            line: line_no,
            message,
        };
        match key {
            "sequence" => selection.sequence = Some(value.to_string()),
            "benchmark" => {
                selection.benchmark =
                    Some(value.parse().map_err(|e| err(format!("benchmark: {e}")))?)
            }
            "out_dir" => selection.out_dir = Some(PathBuf::from(value)),
            "episodes" => training.episodes = parse_num(value, err)?,
            "learning_rate" => training.learning_rate = parse_num(value, err)?,
            "batch_size" => training.batch_size = parse_num(value, err)?,
            "gamma" => training.gamma = parse_num(value, err)?,
            "eps_start" => training.eps_start = parse_num(value, err)?,
            "eps_end" => training.eps_end = parse_num(value, err)?,
            "eps_decay_fraction" => training.eps_decay_fraction = parse_num(value, err)?,
            "target_sync_interval" => training.target_sync_interval = parse_num(value, err)?,
            "eval_interval" => training.eval_interval = parse_num(value, err)?,
            "replay_capacity" => replay.capacity = parse_num(value, err)?,
            "per_alpha" => replay.alpha = parse_num(value, err)?,
            "per_eps" => replay.epsilon = parse_num(value, err)?,
            "per_beta_start" => training.per_beta_start = parse_num(value, err)?,
            "per_beta_end" => training.per_beta_end = parse_num(value, err)?,
            "per_beta_horizon" => training.per_beta_horizon = parse_num(value, err)?,
            "normalize_is_weights" => {
                replay.normalize_weights = value
                    .parse()
                    .map_err(|_| err(format!("expected true/false, got {value:?}")))?
            }
            "d_model" => network.d_model = parse_num(value, err)?,
            "n_layers" => network.n_layers = parse_num(value, err)?,
            "n_heads" => network.n_heads = parse_num(value, err)?,
            "d_ff" => network.d_ff = parse_num(value, err)?,
            "d_type" => network.d_type = parse_num(value, err)?,
            "seed" => training.seed = parse_num(value, err)?,
            "feasibility_mode" => {
                training.feasibility_mode = value.parse::<FeasibilityMode>().map_err(err)?
            }
            "reward_mode" => training.reward_mode = value.parse::<RewardMode>().map_err(err)?,
            "grad_clip_norm" => {
                let v: f64 = parse_num(value, err)?;
                training.grad_clip_norm = (v > 0.0).then_some(v);
            }
            "stop_at_reward" => {
                training.stop_at_reward = Some(parse_num(value, err)?);
            }
            _ => unreachable!("key list is closed"),
        }
    }

    training.replay = replay;
    training.network = network;

    let notices: Vec<String> = CONFIG_KEYS
        .iter()
        .filter(|&&k| {
            !seen.contains(k)
                && !matches!(
                    k,
                    "sequence" | "benchmark" | "out_dir" | "stop_at_reward" | "obs_version"
                )
        })
        .map(|k| format!("{k} not set, using default"))
        .collect();

    Ok(RunConfigFile {
        training,
        selection,
        notices,
    })
}

fn parse_num<T: std::str::FromStr>(
    value: &str,
    err: impl Fn(String) -> BenchError,
) -> Result<T, BenchError>
where
    T::Err: std::
    fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| err(format!("bad value {value:?}: {e}")))
}
