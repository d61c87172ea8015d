use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use vidprompt::checkpoint::Checkpoint;
use vidprompt::config::ExperimentConfig;
use vidprompt::data::{SplitSpec, TaskKind};
use vidprompt::experiment::{
    all_way_few_shot_protocol, eval_closed_set, eval_localisation, eval_retrieval, few_shot_protocol, grad_check,
    localisation_zero_shot, tiny_grad_check_config, train_closed_set, train_localisation, train_retrieval,
    zero_shot_protocol, zero_shot_split, ProposalSource, Workspace,
};
use vidprompt::objectives::LossRecord;
use vidprompt::report::{self, MetricRecord, RunWriter};
use vidprompt::text::{nearest_subwords, TOKEN_EMBEDDING};
use vidprompt::Scalar;

#[derive(Parser)]
#[command(name = "vidprompt", version = concat!(env!("CARGO_PKG_VERSION"), " ", env!("VIDPROMPT_GIT_DESCRIBE")), about = "Prompt learning on a frozen dual encoder for video tasks")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Run in 64-bit floating point.
    #[arg(long, global = true)]
    f64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into OUT/data.
    GenData,
    /// Train prompts and the temporal encoder for the configured task.
    Train {
        /// Continue from a checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write OUT/last.ckpt every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Recognition protocols.
    EvalRecognition {
        #[command(subcommand)]
        protocol: Recognition,
    },
    /// Text-to-video retrieval: R@1/5/10 and median rank.
    EvalRetrieval {
        /// Evaluate these parameters instead of training first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Localisation with a synthetic proposal source.
    EvalLocalisation {
        #[command(subcommand)]
        source: Source,
        /// Evaluate on held-out categories over random splits.
        #[arg(long, global = true)]
        zero_shot: bool,
        /// Number of random splits in zero-shot mode.
        #[arg(long, global = true, default_value_t = 10)]
        trials: usize,
    },
    /// Finite-difference check of the loss gradient on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Nearest vocabulary entries of each learned prompt vector.
    InspectPrompts {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarise OUT/metrics.jsonl.
    Report {
        /// Also write SVG summaries.
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Subcommand)]
enum Recognition {
    /// Train on all categories, evaluate on held-out videos.
    ClosedSet {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// N-way K-shot episodes, or all categories with --all-way.
    FewShot {
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Use every category with K shots each, over `eval.rounds` rounds.
        #[arg(long)]
        all_way: bool,
    },
    /// Train on some categories, evaluate on the disjoint rest.
    ZeroShot {
        /// JSON split file; random splits at the configured fraction otherwise.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum Source {
    /// Ground-truth intervals as proposals.
    Planted,
    /// Ground truth with perturbed boundaries plus background proposals.
    JitteredGt {
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

impl From<Source> for ProposalSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Planted => ProposalSource::Planted,
            Source::JitteredGt { noise } => ProposalSource::JitteredGt { noise },
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::EvalRecognition { .. } => "eval-recognition",
        Command::EvalRetrieval { .. } => "eval-retrieval",
        Command::EvalLocalisation { .. } => "eval-localisation",
        Command::GradCheck { .. } => "grad-check",
        Command::InspectPrompts { .. } => "inspect-prompts",
        Command::Report { .. } => "report",
    }
}

/// Replace the workspace parameters with a checkpoint's, checking names.
fn restore<T: Scalar>(ws: &mut Workspace<T>, path: &Path) -> Result<Checkpoint<T>> {
    let ck = Checkpoint::<T>::load(path).with_context(|| format!("loading {}", path.display()))?;
    for p in ws.store.iter() {
        let saved = ck.params.get(&p.name).with_context(|| format!("checkpoint lacks `{}`", p.name))?;
        if saved.value.shape() != p.value.shape() {
            bail!("`{}` has shape {:?} in the checkpoint, {:?} in the model", p.name, saved.value.shape(), p.value.shape());
        }
    }
    ws.store = ck.params.clone();
    Ok(ck)
}

/// Train for the configured task, from `opt.step` up to `train.steps`.
fn train_task<T: Scalar>(ws: &mut Workspace<T>, opt: &mut vidprompt::objectives::AdamW<T>) -> Result<Vec<LossRecord>> {
    train_chunk(ws, opt, usize::MAX)
}

/// At most `limit` steps towards `train.steps`.
fn train_chunk<T: Scalar>(
    ws: &mut Workspace<T>,
    opt: &mut vidprompt::objectives::AdamW<T>,
    limit: usize,
) -> Result<Vec<LossRecord>> {
    let remaining = ws.config.train.steps.saturating_sub(opt.step as usize).min(limit);
    Ok(match ws.config.data.synthetic.task {
        TaskKind::Recognition | TaskKind::OrderedRecognition => train_closed_set(ws, opt, remaining)?,
        TaskKind::Retrieval => train_retrieval(ws, opt, remaining)?,
        TaskKind::Localisation => {
            let classes = ws.all_categories();
            let train = ws.dataset.train.clone();
            train_localisation(ws, opt, &train, &classes, remaining)?
        }
    })
}

fn run<T: Scalar>(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let name = command_name(&cli.command);
    let hash = config.hash();
    match &cli.command {
        Command::GenData => {
            let ws = Workspace::<T>::prepare(&config)?;
            let mut w = RunWriter::new(&cli.out)?;
            ws.dataset.save(&cli.out.join("data"), &config.data.gap_set())?;
            let mut frames = Vec::new();
            ws.cache.write_to(&mut frames)?;
            w.write("features.bin", frames)?;
            w.write("vocab.tsv", ws.model.text.vocab.to_tsv())?;
            w.finish(name, &config)?;
            println!(
                "wrote {} train / {} val videos over {} categories to {}",
                ws.dataset.train.len(),
                ws.dataset.val.len(),
                ws.dataset.category_names.len(),
                cli.out.join("data").display()
            );
        }
        Command::Train { resume, checkpoint_every } => {
            let mut ws = Workspace::<T>::prepare(&config)?;
            let mut opt = ws.optimizer();
            if let Some(path) = resume {
                let ck = Checkpoint::<T>::load_for_resume(path, hash)?;
                restore(&mut ws, path)?;
                opt = ck.optimizer(config.train.optimizer());
            }
            let mut w = RunWriter::new(&cli.out)?;
            if resume.is_none() {
                w.write("init.ckpt", Checkpoint::new(&ws.store, Some(&opt), hash).to_bytes())?;
            }
            let mut losses = Vec::new();
            let chunk = checkpoint_every.unwrap_or(usize::MAX).max(1);
            while (opt.step as usize) < config.train.steps {
                losses.extend(train_chunk(&mut ws, &mut opt, chunk)?);
                if checkpoint_every.is_some() {
                    w.write("last.ckpt", Checkpoint::new(&ws.store, Some(&opt), hash).to_bytes())?;
                }
            }
            w.write("final.ckpt", Checkpoint::new(&ws.store, Some(&opt), hash).to_bytes())?;
            w.losses(&losses)?;
            let last = losses.last().map_or(f64::NAN, |r| r.loss);
            w.metrics(&[MetricRecord::new("final_loss", "train", 0, config.seed, last)])?;
            w.finish(name, &config)?;
            println!("trained to step {} (final loss {last:.4}); checkpoint {}", opt.step, cli.out.join("final.ckpt").display());
        }
        Command::EvalRecognition { protocol } => {
            let mut ws = Workspace::<T>::prepare(&config)?;
            let mut w = RunWriter::new(&cli.out)?;
            let (metrics, losses) = match protocol {
                Recognition::ClosedSet { checkpoint } => {
                    let losses = match checkpoint {
                        Some(p) => {
                            restore(&mut ws, p)?;
                            Vec::new()
                        }
                        None => {
                            let mut opt = ws.optimizer();
                            train_task(&mut ws, &mut opt)?
                        }
                    };
                    (eval_closed_set(&ws)?, losses)
                }
                Recognition::FewShot { ways, shots, trials, all_way } => {
                    let e = &config.eval;
                    let shots = shots.unwrap_or(e.shots);
                    let r = if *all_way {
                        all_way_few_shot_protocol(&ws, shots, trials.unwrap_or(e.rounds))?
                    } else {
                        few_shot_protocol(&ws, ways.unwrap_or(e.ways), shots, trials.unwrap_or(e.trials))?
                    };
                    (r.metrics, r.losses)
                }
                Recognition::ZeroShot { split, trials } => {
                    let mut metrics = Vec::new();
                    let mut losses = Vec::new();
                    for trial in 0..*trials {
                        let s = match split {
                            Some(p) => {
                                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                                serde_json::from_str::<SplitSpec>(&text)?
                            }
                            None => zero_shot_split(&ws, trial)?,
                        };
                        s.validate_zero_shot()?;
                        let r = zero_shot_protocol(&ws, &s, config.train.steps, trial)?;
                        metrics.extend(r.metrics);
                        if trial == 0 {
                            losses = r.losses;
                        }
                    }
                    (metrics, losses)
                }
            };
            emit(&mut w, &metrics, &losses)?;
            w.finish(name, &config)?;
        }
        Command::EvalRetrieval { checkpoint } => {
            let mut ws = Workspace::<T>::prepare(&config)?;
            if ws.config.data.synthetic.task != TaskKind::Retrieval {
                bail!("eval-retrieval needs data.synthetic.task = \"retrieval\"");
            }
            let losses = match checkpoint {
                Some(p) => {
                    restore(&mut ws, p)?;
                    Vec::new()
                }
                None => {
                    let mut opt = ws.optimizer();
                    train_task(&mut ws, &mut opt)?
                }
            };
            let (_, metrics) = eval_retrieval(&ws)?;
            let mut w = RunWriter::new(&cli.out)?;
            emit(&mut w, &metrics, &losses)?;
            w.finish(name, &config)?;
        }
        Command::EvalLocalisation { source, zero_shot, trials } => {
            let mut ws = Workspace::<T>::prepare(&config)?;
            if ws.config.data.synthetic.task != TaskKind::Localisation {
                bail!("eval-localisation needs data.synthetic.task = \"localisation\"");
            }
            let source = ProposalSource::from(*source);
            let (metrics, losses) = if *zero_shot {
                let r = localisation_zero_shot(&ws, source, *trials)?;
                (r.metrics, r.losses)
            } else {
                let mut opt = ws.optimizer();
                let losses = train_task(&mut ws, &mut opt)?;
                let val = ws.dataset.val.clone();
                (eval_localisation(&ws, &val, &ws.all_categories(), source, "val", 0)?, losses)
            };
            let mut w = RunWriter::new(&cli.out)?;
            emit(&mut w, &metrics, &losses)?;
            w.finish(name, &config)?;
        }
        Command::GradCheck { samples, eps, tolerance } => {
            let check_config = match &cli.config {
                Some(_) => config.clone(),
                None => tiny_grad_check_config(config.seed),
            };
            let r = grad_check(&check_config, *samples, *eps)?;
            let mut w = RunWriter::new(&cli.out)?;
            w.metrics(&[
                MetricRecord::new("grad_check_max_rel_error", "check", 0, config.seed, r.max_relative_error),
                MetricRecord::new("grad_check_entries", "check", 0, config.seed, r.entries_checked as f64),
            ])?;
            w.finish(name, &check_config)?;
            let worst = r.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
            println!(
                "checked {} entries: max relative error {:.3e} (worst {worst}), tolerance {tolerance:.1e}",
                r.entries_checked, r.max_relative_error
            );
            if r.max_relative_error > *tolerance {
                bail!("gradient check failed");
            }
        }
        Command::InspectPrompts { checkpoint } => {
            let mut ws = Workspace::<T>::prepare(&config)?;
            if let Some(p) = checkpoint {
                restore(&mut ws, p)?;
            }
            let bank = &ws.model.bank;
            let Some(prompts) = bank.vectors(&ws.store) else {
                bail!("the model has no prompt vectors (prompt_k = 0)");
            };
            let table = nearest_subwords(&prompts, bank.k, &ws.model.text.vocab, ws.store.tensor(TOKEN_EMBEDDING))?;
            let mut text = String::from("slot\tsubword\tcosine_distance\n");
            for row in &table {
                let tok = row.token.as_deref().unwrap_or("(zero vector)");
                let d = row.distance.map_or("undefined".to_string(), |d| format!("{d:.4}"));
                text.push_str(&format!("{}\t{tok}\t{d}\n", row.slot));
            }
            print!("{text}");
            let mut w = RunWriter::new(&cli.out)?;
            w.write("prompts.tsv", text)?;
            w.finish(name, &config)?;
        }
        Command::Report { plot } => {
            let path = cli.out.join(report::METRICS_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let records = report::parse_metrics_jsonl(&text)?;
            println!("{:<28} {:<10} {:>6} {:>10}", "metric", "split", "n", "mean");
            for ((metric, split), (mean, n)) in report::summarize(&records) {
                println!("{metric:<28} {split:<10} {n:>6} {mean:>10.4}");
            }
            if *plot {
                std::fs::write(cli.out.join("metrics.svg"), report::metrics_svg(&records))?;
                let loss_path = cli.out.join(report::LOSS_FILE);
                if let Ok(csv) = std::fs::read_to_string(&loss_path) {
                    let losses = report::parse_loss_csv(&csv).map_err(anyhow::Error::msg)?;
                    std::fs::write(cli.out.join("loss.svg"), report::loss_svg(&losses))?;
                }
                println!("plots written to {}", cli.out.display());
            }
        }
    }
    Ok(())
}

fn emit(w: &mut RunWriter<'_>, metrics: &[MetricRecord], losses: &[LossRecord]) -> Result<()> {
    w.metrics(metrics)?;
    if !losses.is_empty() {
        w.losses(losses)?;
    }
    for ((metric, split), (mean, n)) in report::summarize(metrics) {
        println!("{metric:<16} {split:<10} n={n:<4} {mean:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = if cli.f64 { run::<f64>(&cli) } else { run::<f32>(&cli) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
