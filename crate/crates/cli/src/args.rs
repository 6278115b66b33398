use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use glot_core::dataio::Split;
use glot_core::model::{EncoderKind, HyperSet, Positional};
use glot_core::training::ScheduleKind;

#[derive(Debug, Parser)]
#[command(name = "glot", version, about = "Sign → gloss → text translation with a gated log-sparse encoder")]
#[command(args_override_self = true)]
pub struct Cli {
    /// `key=value` file whose keys are long flag names; flags on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config_file: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus: manifest.tsv plus features/*.feat
    Synth(SynthArgs),
    /// Train on the cv split and save the best checkpoint
    Train(TrainArgs),
    /// 5-fold cross-validation on the cv split, then score the best fold on test
    Crossval(TrainArgs),
    /// Greedy-decode a split and print corpus BLEU for gloss and text
    Eval(EvalArgs),
    /// Print greedy gloss and text hypotheses for a split
    Decode(EvalArgs),
    /// Finite-difference check of every model parameter
    Gradcheck(GradcheckArgs),
    /// Attention score-evaluation counts and timings per sequence length
    BenchAttn(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Size of the latent sign inventory (at least 2)
    #[arg(long, default_value_t = 10)]
    pub signs: usize,
    /// Features per frame (at least 2)
    #[arg(long, default_value_t = 8)]
    pub feat_dim: usize,
    /// Standard deviation of the per-frame Gaussian noise
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "set2")]
    pub hparams: HyperSet,
    #[arg(long, default_value = "glot")]
    pub encoder: EncoderKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for checkpoints and logs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split scored after every epoch (cv scores the training data itself)
    #[arg(long, default_value = "cv")]
    pub val_split: Split,
    /// constant, plateau or decaysN; defaults to the preset's schedule
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate (also the floor for the constant schedule)
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub ff_size: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub positional: Option<Positional>,
    /// Number of stacked log-sparse layers; defaults to ⌈log₂ max_frames⌉
    #[arg(long)]
    pub lssa_layers: Option<usize>,
    /// Print the effective configuration and exit
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the output to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model size; only `tiny` is supported
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    pub config: String,
    #[arg(long, default_value = "glot")]
    pub encoder: EncoderKind,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the sigmoid backward rule to check that failures are caught
    #[arg(long)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 64, 512, 1024])]
    pub lengths: Vec<usize>,
    /// Head width of the timed projections
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Timed repetitions per cell
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

/// Locates `--config-file` before clap runs so its entries can be spliced in
/// ahead of the user's own flags.
fn config_file_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config-file" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config-file=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Converts `key=value` lines into long flags. `true`/`false` values toggle
/// switches.
pub fn config_file_flags(text: &str) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config file line {}: expected key=value", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config-file" {
            return Err(format!("config file line {}: invalid key {k:?}", n + 1));
        }
        match v.trim() {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Full argument vector with config-file entries inserted right after the
/// subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_file_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let flags = config_file_flags(&text)?;
    let mut at = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config-file" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            at = Some(i);
            break;
        }
        i += 1;
    }
    let Some(at) = at else {
        return Ok(args);
    };
    let mut out = args[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn flags_from_file() {
        let f = config_file_flags("# c\nhparams=set1\nbatch_size = 4\ndry-run=true\nquiet=false\n").unwrap();
        assert_eq!(f, os(&["--hparams", "set1", "--batch-size", "4", "--dry-run"]));
        assert!(config_file_flags("novalue").is_err());
    }

    #[test]
    fn command_line_wins() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "epochs=7\nseed=3\n").unwrap();
        let args = os(&["glot", "--config-file", p.to_str().unwrap(), "train", "--seed", "9"]);
        let cli = Cli::try_parse_from(expand(args).unwrap()).unwrap();
        let Command::Train(t) = cli.command else { panic!("expected train") };
        assert_eq!((t.epochs, t.seed), (Some(7), 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "bogus=1\n").unwrap();
        let args = os(&["glot", "train", "--config-file", p.to_str().unwrap()]);
        assert!(Cli::try_parse_from(expand(args).unwrap()).is_err());
    }
}
