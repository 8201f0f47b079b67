use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lincir_core::retrieval::PromptTemplate;
use lincir_core::smp::{NoiseKind, Supervision, TrainConfig};
use lincir_core::text::MaskPolicy;
use serde::{Deserialize, Serialize, Serializer};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Dev,
    #[default]
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Reference latent through φ into the prompt.
    #[default]
    Composed,
    /// Condition text alone.
    TextOnly,
    /// Reference image alone.
    ImageOnly,
    /// Attribute matching on the known scene ids.
    Oracle,
    /// An untrained, randomly initialized φ.
    RandomPhi,
}

/// Every tunable of every command. Flags override values read from
/// `--config`, which override built-in defaults.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct Options {
    /// JSON file with option values, keyed by flag name.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Text corpus, one caption per line.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub encoder_ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    pub phi_ckpt: Option<PathBuf>,
    /// Directory written by `lincir synth`; generated from the seed when absent.
    #[arg(long, global = true)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub wd: Option<f64>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// all-keywords, random-token, all-nouns, keywords-N or non-keywords.
    #[arg(long, global = true)]
    pub mask_policy: Option<String>,
    /// none, gaussian, uniform, scaled-gaussian, student-t[:df],
    /// exponential[:rate] or chi2[:k].
    #[arg(long, global = true)]
    pub noise: Option<String>,
    /// text-anchored, image-anchored or photo-prompt.
    #[arg(long, global = true)]
    pub supervision: Option<String>,
    /// Prompt text with `[$]` and `[cond]`, or an index into the shipped list.
    #[arg(long, global = true)]
    pub template: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub split: Option<Split>,
    #[arg(long, global = true, value_enum)]
    pub baseline: Option<Baseline>,
    /// Keep each query's reference image in the gallery.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub include_reference: Option<bool>,
    /// Monte-Carlo draws per noise row.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Also write a norm histogram with this many bins.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
}

macro_rules! overlay {
    ($top:expr, $under:expr, $($f:ident),*) => {
        $( if $top.$f.is_none() { $top.$f = $under.$f; } )*
    };
}

impl Options {
    /// Fills every unset field from `file`.
    pub fn overlay(mut self, file: Options) -> Options {
        overlay!(
            self,
            file,
            corpus,
            encoder_ckpt,
            phi_ckpt,
            benchmark,
            out,
            seed,
            steps,
            batch,
            lr,
            wd,
            dropout,
            mask_policy,
            noise,
            supervision,
            template,
            k,
            eval_every,
            patience,
            split,
            baseline,
            include_reference,
            samples,
            dims,
            bins
        );
        self
    }

    pub fn read(path: &Path) -> Result<Options, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn resolve(self, command: &str) -> Result<Settings, CliError> {
        let opts = match &self.config {
            Some(path) => self.clone().overlay(Options::read(path)?),
            None => self,
        };
        let defaults = TrainConfig::default();
        let pretrain = command == "pretrain";
        let template = match opts.template {
            None => PromptTemplate::default(),
            Some(t) => match t.parse::<usize>() {
                Ok(i) => {
                    let all = PromptTemplate::builtin();
                    let n = all.len();
                    all.into_iter()
                        .nth(i)
                        .ok_or_else(|| CliError::Usage(format!("template index {i} out of range, {n} shipped")))?
                }
                Err(_) => PromptTemplate::parse(&t)?,
            },
        };
        let settings = Settings {
            command: command.to_string(),
            corpus: opts.corpus,
            encoder_ckpt: opts.encoder_ckpt,
            phi_ckpt: opts.phi_ckpt,
            benchmark: opts.benchmark,
            out: opts.out.unwrap_or_else(|| PathBuf::from("out")),
            seed: opts.seed.unwrap_or(0),
            steps: opts.steps.unwrap_or(if pretrain { 1500 } else { 1000 }),
            batch: opts.batch.unwrap_or(64),
            lr: opts.lr.unwrap_or(1e-3),
            wd: opts.wd.unwrap_or(defaults.weight_decay),
            dropout: opts.dropout.unwrap_or(defaults.dropout),
            mask_policy: opts
                .mask_policy
                .as_deref()
                .map_or(Ok(defaults.mask_policy), str::parse)?,
            noise: opts.noise.as_deref().map_or(Ok(defaults.noise), str::parse)?,
            supervision: opts
                .supervision
                .as_deref()
                .map_or(Ok(defaults.supervision), str::parse)?,
            template,
            k: opts.k.unwrap_or(10),
            eval_every: opts.eval_every.unwrap_or(defaults.eval_every),
            patience: opts.patience.unwrap_or(defaults.patience),
            split: opts.split.unwrap_or_default(),
            baseline: opts.baseline.unwrap_or_default(),
            include_reference: opts.include_reference.unwrap_or(false),
            samples: opts.samples.unwrap_or(10_000),
            dims: opts.dims.unwrap_or_else(|| vec![256, 768]),
            bins: opts.bins,
        };
        if settings.k == 0 {
            return Err(lincir_core::Error::InvalidK(0).into());
        }
        Ok(settings)
    }
}

fn display<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Fully resolved options. Serializes with the same keys `--config` reads,
/// so `config.json` replays a run.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Settings {
    pub command: String,
    pub corpus: Option<PathBuf>,
    pub encoder_ckpt: Option<PathBuf>,
    pub phi_ckpt: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub dropout: f64,
    #[serde(serialize_with = "display")]
    pub mask_policy: MaskPolicy,
    #[serde(serialize_with = "display")]
    pub noise: NoiseKind,
    #[serde(serialize_with = "display")]
    pub supervision: Supervision,
    #[serde(serialize_with = "display")]
    pub template: PromptTemplate,
    pub k: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub split: Split,
    pub baseline: Baseline,
    pub include_reference: bool,
    pub samples: usize,
    pub dims: Vec<usize>,
    pub bins: Option<usize>,
}

impl Settings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.wd,
            batch: self.batch,
            dropout: self.dropout,
            max_steps: self.steps,
            eval_every: self.eval_every,
            patience: self.patience,
            mask_policy: self.mask_policy,
            noise: self.noise,
            supervision: self.supervision,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let flags = Options {
            seed: Some(7),
            ..Default::default()
        };
        let file = Options {
            seed: Some(3),
            lr: Some(0.5),
            ..Default::default()
        };
        let s = flags.overlay(file).resolve("train").unwrap();
        assert_eq!((s.seed, s.lr, s.steps), (7, 0.5, 1000));
    }

    #[test]
    fn template_by_index_or_text() {
        let by_index = Options {
            template: Some("0".into()),
            ..Default::default()
        };
        assert_eq!(by_index.resolve("eval").unwrap().template, PromptTemplate::default());
        let bad = Options {
            template: Some("no slots".into()),
            ..Default::default()
        };
        assert!(bad.resolve("eval").is_err());
    }

    #[test]
    fn settings_round_trip_through_options() {
        let s = Options {
            noise: Some("student-t:3".into()),
            mask_policy: Some("keywords-3".into()),
            ..Default::default()
        }
        .resolve("train")
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: Options = serde_json::from_str(&json).unwrap();
        let again = back.resolve("train").unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), json);
    }
}
