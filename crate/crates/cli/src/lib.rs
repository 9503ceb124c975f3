//! Command-line front end for the doctor recommender.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod serve;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use docrec::baselines::BaselineKind;
use docrec::corpus::CorpusError;
use docrec::embed::EmbedError;
use docrec::ranker::{BucketKey, EncoderMode};

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "docrec",
    version,
    about = "Doctor recommendation from consultation dialogues"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Doctors JSON lines file.
    #[arg(long)]
    pub doctors: PathBuf,
    /// Dialogues JSON lines file.
    #[arg(long)]
    pub dialogues: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "docrec-out")]
    pub out: PathBuf,
    /// Sets every seed (split, synthesis, initialization, sampling).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Split file written by `split`; recomputed from the seed when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and write normalized copies.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Corpus statistics.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Medical term list, one per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Per-doctor 80/20 dialogue split with validation and test queries.
    Split {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic corpus with ground truth.
    GenSynth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pretrain the text encoder on profile-dialogue matching.
    Pretrain {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Train the recommender.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Pretrained encoder checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed document vectors used instead of the hashing encoder.
        #[arg(long, conflicts_with = "checkpoint")]
        vectors: Option<PathBuf>,
    },
    /// Test-set metrics of a checkpoint, or of fresh runs averaged over seeds.
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, required_unless_present = "seeds")]
        checkpoint: Option<PathBuf>,
        /// Train and evaluate once per seed, then average.
        #[arg(long, value_delimiter = ',', conflicts_with = "checkpoint")]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        bucket: Option<BucketKey>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Evaluate a baseline ranker.
    Baseline {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        kind: Option<BaselineKind>,
        /// Pretrained encoder checkpoint for the text-based baselines.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        vectors: Option<PathBuf>,
        #[arg(long)]
        bucket: Option<BucketKey>,
    },
    /// Train and evaluate once per attention head count.
    SweepHeads {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        heads: Vec<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
        /// Pretrained encoder checkpoint shared by every run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-head attention over a doctor's documents for one query.
    Explain {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        doctor: String,
        /// Tokens reported per head.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Rank doctors for a free-text query.
    Recommend {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Finite-difference check of the model gradients.
    GradCheck {
        /// Problem preset.
        #[arg(long, default_value = "small", value_parser = ["small"])]
        config: String,
        #[arg(long, default_value = "docrec-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Encoder mode to check; all modes when absent.
        #[arg(long)]
        mode: Option<EncoderMode>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// HTTP ranking service.
    Serve {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "docrec-out")]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Coarse failure class, reported in the message and the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Input,
    Training,
    Check,
    Internal,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Input => "input",
            ErrorCategory::Training => "training",
            ErrorCategory::Check => "check",
            ErrorCategory::Internal => "internal",
        }
    }

    /// 2 is left to argument parsing errors.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Internal => 1,
            ErrorCategory::Config => 3,
            ErrorCategory::Input => 4,
            ErrorCategory::Training => 5,
            ErrorCategory::Check => 6,
        }
    }
}

/// A verification command that ran but did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn core_category(e: &docrec::Error) -> ErrorCategory {
    use docrec::Error as E;
    match e {
        E::Config(_) => ErrorCategory::Config,
        E::Embed(EmbedError::Config(_)) => ErrorCategory::Config,
        E::Diverged { .. } => ErrorCategory::Training,
        E::Tensor(_) => ErrorCategory::Internal,
        _ => ErrorCategory::Input,
    }
}

pub fn categorize(err: &anyhow::Error) -> ErrorCategory {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return ErrorCategory::Config;
        }
        if cause.is::<CheckFailed>() {
            return ErrorCategory::Check;
        }
        if let Some(e) = cause.downcast_ref::<docrec::Error>() {
            return core_category(e);
        }
        if let Some(e) = cause.downcast_ref::<EmbedError>() {
            return match e {
                EmbedError::Config(_) => ErrorCategory::Config,
                _ => ErrorCategory::Input,
            };
        }
        if cause.is::<CorpusError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return ErrorCategory::Input;
        }
    }
    ErrorCategory::Internal
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli.command)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seeds_parse_as_list() {
        let cli = Cli::try_parse_from([
            "docrec",
            "eval",
            "--doctors",
            "a",
            "--dialogues",
            "b",
            "--seeds",
            "0,1,2",
            "--bucket",
            "department",
        ])
        .unwrap();
        let Command::Eval { seeds, bucket, .. } = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(seeds, Some(vec![0, 1, 2]));
        assert_eq!(bucket, Some(BucketKey::Department));
    }

    #[test]
    fn eval_needs_checkpoint_or_seeds() {
        assert!(Cli::try_parse_from(["docrec", "eval", "--doctors", "a", "--dialogues", "b"]).is_err());
    }

    #[test]
    fn unknown_kind_is_a_usage_error() {
        let err = Cli::try_parse_from([
            "docrec",
            "baseline",
            "--doctors",
            "a",
            "--dialogues",
            "b",
            "--kind",
            "bm25",
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn categories() {
        let cfg: anyhow::Error = ConfigError::invalid("x");
        assert_eq!(categorize(&cfg), ErrorCategory::Config);
        let core: anyhow::Error = docrec::Error::Diverged { epoch: 1, batch: 2 }.into();
        assert_eq!(categorize(&core), ErrorCategory::Training);
        let io: anyhow::Error = std::io::Error::from(std::io::ErrorKind::NotFound).into();
        assert_eq!(categorize(&io.context("reading x")), ErrorCategory::Input);
        let model_cfg: anyhow::Error = docrec::Error::Config("lambda".into()).into();
        assert_eq!(categorize(&model_cfg), ErrorCategory::Config);
        assert_eq!(categorize(&anyhow::anyhow!("other")), ErrorCategory::Internal);
    }
}
