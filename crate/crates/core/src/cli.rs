//! Command-line arguments and the `key=value` config-file overlay.
//!
//! Every option of a subcommand can also be given in the config file under
//! its flag name without the leading dashes. Flags win over the file, the
//! file wins over built-in defaults.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stn-denoise", version, about = "Two-stage spatio-temporal video denoiser")]
pub struct Cli {
    /// `key=value` file supplying defaults for the subcommand's options.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add Gaussian noise to every frame of a clip.
    SynthNoise(SynthNoiseArgs),
    /// Train a pipeline from scratch.
    Train(TrainArgs),
    /// Denoise every frame of a noisy clip with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Per-frame PSNR and SSIM of a test clip against its clean reference.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthNoiseArgs {
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Noise standard deviation in 8-bit units.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root: one subdirectory per clip, or a single clip directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Square training crop, a multiple of 4.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Loss CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Windows per epoch; defaults to one per frame of the dataset.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decayed: Option<f64>,
    /// Last epoch trained at `--lr`.
    #[arg(long)]
    pub decay_after_epoch: Option<usize>,
    /// Comma-separated noise levels sampled per window, in 8-bit units.
    #[arg(long)]
    pub sigmas: Option<String>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    /// Report path; the CSV and JSON reports are written next to each other
    /// with `.csv` and `.json` extensions.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Noise level recorded in the report.
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthNoise(_) => "synth-noise",
            Command::Train(_) => "train",
            Command::Denoise(_) => "denoise",
            Command::Evaluate(_) => "evaluate",
        }
    }

    /// Config keys the subcommand accepts.
    pub fn keys(&self) -> &'static [&'static str] {
        match self {
            Command::SynthNoise(_) => &["input-dir", "output-dir", "sigma", "seed"],
            Command::Train(_) => &[
                "data-dir",
                "epochs",
                "crop",
                "seed",
                "checkpoint-out",
                "loss-log",
                "steps-per-epoch",
                "lr",
                "lr-decayed",
                "decay-after-epoch",
                "sigmas",
            ],
            Command::Denoise(_) => &["checkpoint", "input-dir", "output-dir"],
            Command::Evaluate(_) => &["clean-dir", "test-dir", "report", "sigma"],
        }
    }
}

/// Values read from a config file.
#[derive(Debug, Default)]
pub struct Overlay {
    source: Option<PathBuf>,
    values: HashMap<String, String>,
}

impl Overlay {
    pub fn parse(text: &str, source: &Path, allowed: &[&str]) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = || format!("{} line {}", source.display(), n + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected key=value", at()))?;
            let (key, value) = (key.trim(), value.trim());
            if !allowed.contains(&key) {
                bail!("{}: unknown key '{key}' (accepted: {})", at(), allowed.join(", "));
            }
            if values.insert(key.to_owned(), value.to_owned()).is_some() {
                bail!("{}: key '{key}' given twice", at());
            }
        }
        Ok(Overlay { source: Some(source.to_owned()), values })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        match path {
            None => Ok(Overlay::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Overlay::parse(&text, p, allowed)
            }
        }
    }

    /// The flag value if given, else the file value, else `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                let src = self.source.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
                anyhow!("{src}: invalid value '{v}' for {key}: {e}")
            }),
        }
    }

    pub fn required<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| anyhow!("missing --{key} (give the flag or set {key} in the config file)"))
    }
}

/// Parses `5,10,15` style lists.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("invalid sigma '{}': {e}", v.trim())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[&str] = &["epochs", "data-dir", "lr"];

    #[test]
    fn overlay_precedence() {
        let o = Overlay::parse("# comment\n\nepochs = 7\ndata-dir=/tmp/x\n", Path::new("c.cfg"), KEYS).unwrap();
        assert_eq!(o.pick::<usize>(Some(3), "epochs").unwrap(), Some(3));
        assert_eq!(o.pick::<usize>(None, "epochs").unwrap(), Some(7));
        assert_eq!(o.pick::<f64>(None, "lr").unwrap(), None);
        assert_eq!(o.required::<PathBuf>(None, "data-dir").unwrap(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn overlay_rejects_bad_lines() {
        let err = Overlay::parse("bogus=1\n", Path::new("c.cfg"), KEYS).unwrap_err().to_string();
        assert!(err.contains("unknown key 'bogus'") && err.contains("line 1"), "{err}");
        assert!(Overlay::parse("epochs\n", Path::new("c.cfg"), KEYS).is_err());
        assert!(Overlay::parse("epochs=1\nepochs=2\n", Path::new("c.cfg"), KEYS).is_err());
        let o = Overlay::parse("epochs=many\n", Path::new("c.cfg"), KEYS).unwrap();
        assert!(o.pick::<usize>(None, "epochs").is_err());
    }

    #[test]
    fn missing_required_names_the_flag() {
        let err = Overlay::default().required::<PathBuf>(None, "data-dir").unwrap_err().to_string();
        assert!(err.contains("--data-dir"));
    }

    #[test]
    fn sigma_lists() {
        assert_eq!(parse_list("5, 10,15").unwrap(), vec![5.0, 10.0, 15.0]);
        assert!(parse_list("5,x").is_err());
    }
}
