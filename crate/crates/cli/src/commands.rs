use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lincir_core::checkpoint::{load_encoder, save_encoder};
use lincir_core::encoder::DualEncoder;
use lincir_core::experiment::{desk_pretrain_config, masking_rows, noise_rows, pretrain_encoder, Evaluator};
use lincir_core::retrieval::{map_at_k, recall_at_k, write_results_csv, Metrics, PromptTemplate};
use lincir_core::smp::{
    norm_samples, norm_stats, prepare_corpus, train, NoiseKind, ProjectionConfig, ProjectionModule, Supervision,
    TrainConfig, TrainReport,
};
use lincir_core::synth::{build_cir_benchmark, write_corpus, write_jsonl, BenchmarkConfig};
use lincir_core::text::{PosLexicon, Vocabulary};
use lincir_core::Error;
use serde::Serialize;

use crate::data::Data;
use crate::{Baseline, CliError, Command, Settings, Table};

pub const ABLATION_HEADER: &str = "table,label,setting,seed,status,dev_recall_at_1,test_recall_at_1,test_recall_at_5,\
test_recall_at_10,test_map_at_5,test_map_at_10,modality_gap,best_step";

pub const NOISE_HEADER: &str = "kind,d,n_samples,mean_norm,std_norm";

/// Appends timestamped progress lines to `run.log` and echoes them to
/// stderr.
struct Log {
    file: File,
    start: Instant,
}

impl Log {
    fn create(dir: &Path) -> Result<Log, CliError> {
        let path = dir.join("run.log");
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Log {
            file,
            start: Instant::now(),
        })
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let line = format!("[{:>8.1}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        eprintln!("{line}");
        let _ = writeln!(self.file, "{line}");
    }
}

pub fn dispatch(command: Command, s: &Settings) -> Result<(), CliError> {
    let mut log = Log::create(&s.out)?;
    write_json(&s.out.join("config.json"), s)?;
    log.line(format!("{} -> {}", command.name(), s.out.display()));
    match command {
        Command::Synth => synth(s),
        Command::Pretrain => pretrain(s, &mut log),
        Command::Train => train_cmd(s, &mut log),
        Command::Eval => eval(s, &mut log),
        Command::Ablate { table } => ablate(s, table, &mut log),
        Command::AnalyzeNoise => analyze_noise(s),
    }?;
    log.line("done");
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn synth(s: &Settings) -> Result<(), CliError> {
    let b = build_cir_benchmark(&BenchmarkConfig {
        seed: s.seed,
        ..Default::default()
    })?;
    write_jsonl(&s.out.join("gallery.jsonl"), &b.gallery)?;
    write_jsonl(&s.out.join("dev.jsonl"), &b.dev)?;
    write_jsonl(&s.out.join("test.jsonl"), &b.test)?;
    let captions: Vec<String> = b.corpus.into_iter().map(|c| c.caption).collect();
    write_corpus(&s.out.join("corpus.txt"), &captions)?;
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    batch: usize,
    final_loss: Option<f64>,
    heldout_recall_at_1: f64,
}

fn pretrain(s: &Settings, log: &mut Log) -> Result<(), CliError> {
    let cfg = lincir_core::encoder::PretrainConfig {
        steps: s.steps,
        batch: s.batch,
        lr: s.lr,
        weight_decay: s.wd,
        ..desk_pretrain_config(s.seed)
    };
    let outcome = pretrain_encoder(&cfg)?;
    log.line(format!("held-out R@1 {:.4}", outcome.heldout_recall));
    save_encoder(&s.out.join("encoder.lncr"), &outcome.encoder, &outcome.vocab)?;
    let mut w = csv_writer(&s.out.join("pretrain_losses.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in outcome.report.losses.iter().enumerate() {
        w.serialize((i + 1, l))?;
    }
    w.flush()
        .map_err(|e| CliError::io(s.out.join("pretrain_losses.csv"), e))?;
    write_json(
        &s.out.join("pretrain.json"),
        &PretrainSummary {
            steps: cfg.steps,
            batch: cfg.batch,
            final_loss: outcome.report.losses.last().copied(),
            heldout_recall_at_1: outcome.heldout_recall,
        },
    )
}

fn encoder(s: &Settings) -> Result<(DualEncoder, Vocabulary), CliError> {
    let path = s
        .encoder_ckpt
        .as_ref()
        .ok_or_else(|| CliError::Usage("--encoder-ckpt is required".into()))?;
    Ok(load_encoder(path)?)
}

fn evaluator<'a>(
    s: &Settings,
    enc: &'a DualEncoder,
    vocab: &'a Vocabulary,
    data: &Data,
    split: crate::Split,
) -> Result<Evaluator<'a>, CliError> {
    let mut ev = Evaluator::new(enc, vocab, &data.gallery, data.split(split))?;
    ev.exclude_reference = !s.include_reference;
    Ok(ev)
}

fn train_phi(
    s: &Settings,
    cfg: &TrainConfig,
    enc: &DualEncoder,
    vocab: &Vocabulary,
    data: &Data,
    log: &mut Log,
) -> Result<(ProjectionModule, TrainReport), CliError> {
    let corpus = prepare_corpus(
        &data.corpus,
        enc,
        vocab,
        &PosLexicon::builtin(),
        cfg.mask_policy,
        cfg.supervision,
    )?;
    log.line(format!("corpus: {} used, {} skipped", corpus.used(), corpus.skipped));
    let dev = evaluator(s, enc, vocab, data, crate::Split::Dev)?;
    let (phi, report) = train(&corpus, enc, cfg, |phi| {
        Ok(dev.metrics(&dev.composed(phi, &s.template)?)?.recall_at_1)
    })?;
    log.line(format!(
        "trained {} steps, best dev R@1 {:.4} at step {}",
        report.steps_run,
        report.best_score.unwrap_or(f64::NAN),
        report.best_step
    ));
    Ok((phi, report))
}

fn train_cmd(s: &Settings, log: &mut Log) -> Result<(), CliError> {
    let (enc, vocab) = encoder(s)?;
    let data = Data::load(s, enc.config.image_side)?;
    let (phi, report) = train_phi(s, &s.train_config(), &enc, &vocab, &data, log)?;
    phi.save(&s.out.join("phi.lncr"))?;
    report.write_csv(&s.out.join("history.csv"))?;
    write_json(&s.out.join("train.json"), &report)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    baseline: Baseline,
    split: crate::Split,
    template: String,
    k: usize,
    metrics: Metrics,
    recall_at_k: f64,
    map_at_k: f64,
    config: &'a Settings,
}

fn eval(s: &Settings, log: &mut Log) -> Result<(), CliError> {
    let (enc, vocab) = encoder(s)?;
    let data = Data::load(s, enc.config.image_side)?;
    let ev = evaluator(s, &enc, &vocab, &data, s.split)?;
    let phi = match s.baseline {
        Baseline::Composed => {
            let path = s
                .phi_ckpt
                .as_ref()
                .ok_or_else(|| CliError::Usage("--phi-ckpt is required for the composed query".into()))?;
            Some(ProjectionModule::load(path)?)
        }
        Baseline::RandomPhi => Some(random_phi(&enc, s.seed)?),
        _ => None,
    };
    let results = match (s.baseline, &phi) {
        (Baseline::TextOnly, _) => ev.text_only()?,
        (Baseline::ImageOnly, _) => ev.image_only()?,
        (Baseline::Oracle, _) => ev.oracle()?,
        (_, Some(phi)) => ev.composed(phi, &s.template)?,
        (_, None) => unreachable!("composed baselines load φ above"),
    };
    let mut metrics = ev.metrics(&results)?;
    if let Some(phi) = &phi {
        metrics.modality_gap = Some(ev.modality_gap(phi)?);
    }
    log.line(format!("R@1 {:.4} mAP@5 {:.4}", metrics.recall_at_1, metrics.map_at_5));
    write_results_csv(&s.out.join("results.csv"), &results, s.k)?;
    write_json(
        &s.out.join("metrics.json"),
        &EvalReport {
            baseline: s.baseline,
            split: s.split,
            template: s.template.text().to_string(),
            k: s.k,
            recall_at_k: recall_at_k(&results, &ev.truths, s.k)?,
            map_at_k: map_at_k(&results, &ev.truths, s.k)?,
            metrics,
            config: s,
        },
    )
}

fn random_phi(enc: &DualEncoder, seed: u64) -> Result<ProjectionModule, CliError> {
    let config = ProjectionConfig {
        d_joint: enc.config.d_joint,
        d_text: enc.config.d_text,
        dropout: 0.0,
    };
    Ok(ProjectionModule::init(config, seed)?)
}

#[derive(Serialize)]
struct AblationCsvRow {
    table: String,
    label: String,
    setting: String,
    seed: u64,
    status: String,
    dev_recall_at_1: Option<f64>,
    test_recall_at_1: Option<f64>,
    test_recall_at_5: Option<f64>,
    test_recall_at_10: Option<f64>,
    test_map_at_5: Option<f64>,
    test_map_at_10: Option<f64>,
    modality_gap: Option<f64>,
    best_step: Option<usize>,
}

impl AblationCsvRow {
    fn new(table: Table, label: String, setting: String, seed: u64) -> Self {
        Self {
            table: format!("{table:?}").to_lowercase(),
            label,
            setting,
            seed,
            status: "ok".into(),
            dev_recall_at_1: None,
            test_recall_at_1: None,
            test_recall_at_5: None,
            test_recall_at_10: None,
            test_map_at_5: None,
            test_map_at_10: None,
            modality_gap: None,
            best_step: None,
        }
    }

    fn with_test(mut self, m: &Metrics) -> Self {
        self.test_recall_at_1 = Some(m.recall_at_1);
        self.test_recall_at_5 = Some(m.recall_at_5);
        self.test_recall_at_10 = Some(m.recall_at_10);
        self.test_map_at_5 = Some(m.map_at_5);
        self.test_map_at_10 = Some(m.map_at_10);
        self.modality_gap = m.modality_gap;
        self
    }
}

fn ablate(s: &Settings, table: Table, log: &mut Log) -> Result<(), CliError> {
    let (enc, vocab) = encoder(s)?;
    let data = Data::load(s, enc.config.image_side)?;
    let test = evaluator(s, &enc, &vocab, &data, crate::Split::Test)?;
    let base = s.train_config();
    let configs: Vec<(String, String, TrainConfig)> = match table {
        Table::Masking => masking_rows()
            .into_iter()
            .map(|(label, p)| {
                (
                    label,
                    p.to_string(),
                    TrainConfig {
                        mask_policy: p,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Table::Noise => noise_rows()
            .into_iter()
            .map(|(label, n)| {
                (
                    label,
                    n.to_string(),
                    TrainConfig {
                        noise: n,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Table::Supervision => [
            Supervision::PhotoPrompt,
            Supervision::ImageAnchored,
            Supervision::TextAnchored,
        ]
        .into_iter()
        .map(|v| {
            (
                v.label().to_string(),
                v.to_string(),
                TrainConfig {
                    supervision: v,
                    ..base.clone()
                },
            )
        })
        .collect(),
        Table::Prompts => Vec::new(),
    };

    let mut rows = Vec::new();
    if table == Table::Prompts {
        let phi = match &s.phi_ckpt {
            Some(path) => ProjectionModule::load(path)?,
            None => train_phi(s, &base, &enc, &vocab, &data, log)?.0,
        };
        for (i, t) in PromptTemplate::builtin().iter().enumerate() {
            let m = test.metrics(&test.composed(&phi, t)?)?;
            rows.push(AblationCsvRow::new(table, t.text().to_string(), i.to_string(), s.seed).with_test(&m));
        }
    }
    for (label, setting, cfg) in configs {
        log.line(format!("row {label:?} ({setting})"));
        let row = AblationCsvRow::new(table, label, setting, s.seed);
        rows.push(match train_phi(s, &cfg, &enc, &vocab, &data, log) {
            Ok((phi, report)) => {
                let m = test.composed_metrics(&phi, &s.template)?;
                AblationCsvRow {
                    dev_recall_at_1: report.best_score,
                    best_step: Some(report.best_step),
                    ..row
                }
                .with_test(&m)
            }
            Err(CliError::Core(Error::NotImplemented(_))) => AblationCsvRow {
                status: "not implemented".into(),
                ..row
            },
            Err(e) => return Err(e),
        });
    }

    let path = s
        .out
        .join(format!("ablate_{}.csv", format!("{table:?}").to_lowercase()));
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

#[derive(Serialize)]
struct NoiseRow {
    kind: String,
    d: usize,
    n_samples: usize,
    mean_norm: f64,
    std_norm: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    kind: String,
    d: usize,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

fn analyze_noise(s: &Settings) -> Result<(), CliError> {
    let kinds = NoiseKind::ablation_rows();
    let path = s.out.join("noise_norms.csv");
    let mut w = csv_writer(&path)?;
    for kind in kinds {
        for &d in &s.dims {
            let st = norm_stats(kind, d, s.samples, s.seed)?;
            w.serialize(NoiseRow {
                kind: kind.to_string(),
                d,
                n_samples: s.samples,
                mean_norm: st.mean,
                std_norm: st.std,
            })?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    if let Some(bins) = s.bins.filter(|b| *b > 0) {
        let path = s.out.join("noise_histogram.csv");
        let mut w = csv_writer(&path)?;
        for kind in kinds {
            for &d in &s.dims {
                let norms = norm_samples(kind, d, s.samples, s.seed)?;
                let top = norms.iter().copied().fold(0.0, f64::max);
                let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
                let mut counts = vec![0usize; bins];
                for n in norms {
                    counts[((n / width) as usize).min(bins - 1)] += 1;
                }
                for (bin, count) in counts.into_iter().enumerate() {
                    w.serialize(HistogramRow {
                        kind: kind.to_string(),
                        d,
                        bin,
                        lo: bin as f64 * width,
                        hi: (bin + 1) as f64 * width,
                        count,
                    })?;
                }
            }
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
