use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcatts::dsp::{melspectrogram, read_wav, MelConfig};
use dcatts::harness::sweep::{length_means, summary_csv};
use dcatts::harness::{
    enrolled_dvectors, evaluate_encoder, evaluate_length_sweep, export_report, gen_dataset, load_encoder,
    load_synthesizer, random_dvectors, sub_seed, train_encoder, train_synth, write_log, Checkpoint, Dataset,
    ExperimentConfig, SweepEncoder, SweepModel, SyntheticTask,
};
use dcatts::metrics::{cer, eer, mcd, read_reports, silence_rate, ScoreSet};
use dcatts::Error;

/// Attention experiments for long-form seq2seq synthesis on synthetic data.
#[derive(Parser)]
#[command(name = "dcatts", version)]
struct Cli {
    /// Overrides the `seed` key of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multispeaker dataset as JSON.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GE2E speaker encoder and score it on held-out speakers.
    TrainEncoder {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for the checkpoint, loss log, scores and resolved config.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a synthesizer on a dataset produced by `gen-data`.
    TrainSynth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Encoder checkpoint used to enroll speaker d-vectors; seeded random
        /// unit vectors are used without it.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Synthesize utterances of increasing length with trained models and
    /// export per-utterance metrics, length-binned means and a plot.
    EvalSweep {
        /// `name=path` of a synth checkpoint; repeat for several models.
        #[arg(long = "model", value_parser = parse_named, required = true)]
        models: Vec<(String, PathBuf)>,
        /// Dataset whose task (templates and speakers) defines the targets.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; the summary and SVG are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint for the cosine-similarity column.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Overrides for the sweep keys (`sweep_lengths`, `sweep_utterances`, ...).
        #[arg(long = "set", value_parser = parse_pair)]
        set: Vec<(String, String)>,
    },
    /// Ad-hoc metric computation over WAV and CSV inputs.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Print a checkpoint's kind, step, tensors and config.
    InspectCkpt { path: PathBuf },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Equal error rate of `label,score` rows (labels genuine/impostor).
    Eer {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Character error rate of a hypothesis transcript.
    Cer {
        #[arg(long)]
        reference: String,
        #[arg(long)]
        hypothesis: String,
    },
    /// Fraction of VAD frames judged silent.
    Silence {
        #[arg(long)]
        wav: PathBuf,
    },
    /// Mel-cepstral distortion between two recordings.
    Mcd {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        synthesized: PathBuf,
        #[arg(long, default_value_t = 80)]
        n_mels: usize,
    },
    /// Length-binned means of a sweep report CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_parser = parse_pair)]
    set: Vec<(String, String)>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    parse_pair(s).map(|(k, v)| (k, PathBuf::from(v)))
}

/// One-line failure report.
struct Failure {
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure {
        kind: "io",
        msg: format!("{}: {e}", path.display()),
    }
}

fn resolve(args: &ConfigArgs, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    let mut set = args.set.clone();
    if let Some(s) = seed {
        set.push(("seed".into(), s.to_string()));
    }
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (k, v) in &set {
        lines.retain(|l| l.split_once('=').map(|(lk, _)| lk.trim() != k).unwrap_or(true));
        lines.push(format!("{k} = {v}"));
    }
    text = lines.join("\n");
    Ok(ExperimentConfig::parse(&text)?)
}

fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> CliResult {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("config.txt");
    std::fs::write(&p, cfg.to_text()).map_err(io_err(&p))?;
    log::info!("resolved config:\n{}", cfg.to_text());
    Ok(())
}

fn checkpoint_writer<'a>(dir: &'a Path, stem: &'a str, last: u64) -> impl FnMut(&Checkpoint) -> dcatts::Result<()> + 'a {
    move |ck| {
        let name = if ck.step == last {
            format!("{stem}.ckpt")
        } else {
            format!("{stem}_step{:06}.ckpt", ck.step)
        };
        ck.save(&dir.join(name))
    }
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = resolve(&config, seed)?;
            let task = SyntheticTask::from_config(&cfg)?;
            let d = gen_dataset(&task, cfg.utterances, (cfg.min_len, cfg.max_len), sub_seed(cfg.seed, "dataset"))?;
            d.save(&out)?;
            println!("utterances={} speakers={} path={}", d.utterances.len(), task.n_speakers(), out.display());
        }
        Command::TrainEncoder { config, out_dir } => {
            let cfg = resolve(&config, seed)?;
            prepare_dir(&out_dir, &cfg)?;
            let outcome = train_encoder(&cfg, checkpoint_writer(&out_dir, "encoder", cfg.ge2e_steps as u64))?;
            write_log(&out_dir.join("encoder_loss.csv"), &outcome.log)?;
            let ck = Checkpoint::load(&out_dir.join("encoder.ckpt"))?;
            let (net, params, _) = load_encoder(&ck)?;
            let ev = evaluate_encoder(&cfg, &net, &params)?;
            let mut scores = String::from("label,score\n");
            for (label, set) in [("genuine", &ev.scores.genuine), ("impostor", &ev.scores.impostor)] {
                for s in set.iter() {
                    let _ = writeln!(scores, "{label},{s}");
                }
            }
            let p = out_dir.join("encoder_scores.csv");
            std::fs::write(&p, scores).map_err(io_err(&p))?;
            println!(
                "final_loss={} mean_intra={} mean_inter={} eer={}",
                outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
                ev.mean_intra,
                ev.mean_inter,
                ev.eer
            );
        }
        Command::TrainSynth {
            config,
            data,
            out_dir,
            encoder,
        } => {
            let cfg = resolve(&config, seed)?;
            let dataset = Dataset::load(&data)?;
            let dvectors = match &encoder {
                Some(p) => {
                    let (net, params, ecfg) = load_encoder(&Checkpoint::load(p)?)?;
                    if ecfg.ge2e_dim != cfg.ge2e_dim {
                        return Err(Failure {
                            kind: "config",
                            msg: format!("encoder emits {} dims, config expects ge2e_dim {}", ecfg.ge2e_dim, cfg.ge2e_dim),
                        });
                    }
                    enrolled_dvectors(&ecfg, &net, &params, &dataset)?
                }
                None => random_dvectors(dataset.task.n_speakers(), cfg.ge2e_dim, sub_seed(cfg.seed, "dvectors")),
            };
            prepare_dir(&out_dir, &cfg)?;
            let outcome = train_synth(&cfg, &dataset, &dvectors, checkpoint_writer(&out_dir, "synth", cfg.steps as u64))?;
            write_log(&out_dir.join("synth_loss.csv"), &outcome.log)?;
            println!(
                "model={} steps={} final_loss={}",
                cfg.model,
                cfg.steps,
                outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
        Command::EvalSweep {
            models,
            data,
            out,
            encoder,
            set,
        } => {
            let dataset = Dataset::load(&data)?;
            let loaded = models
                .iter()
                .map(|(name, p)| Ok((name.clone(), load_synthesizer(&Checkpoint::load(p)?)?)))
                .collect::<CliResult<Vec<_>>>()?;
            let base = &loaded[0].1 .2;
            let mut overrides: Vec<(&str, String)> = set.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            if let Some(s) = seed {
                overrides.push(("seed", s.to_string()));
            }
            let pairs: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let cfg = base.with_overrides(&pairs)?;
            let enc = match &encoder {
                Some(p) => Some(load_encoder(&Checkpoint::load(p)?)?),
                None => None,
            };
            let sweep_models: Vec<SweepModel> = loaded
                .iter()
                .map(|(name, (synth, params, _, dv))| SweepModel {
                    name: name.clone(),
                    synth,
                    params,
                    dvectors: dv.clone(),
                })
                .collect();
            let sweep_enc = enc.as_ref().map(|(net, params, ecfg)| SweepEncoder {
                config: ecfg,
                net,
                params,
            });
            let reports = evaluate_length_sweep(&cfg, &dataset.task, &sweep_models, &cfg.sweep_lengths.0, sweep_enc.as_ref())?;
            let files = export_report(&reports, &out)?;
            print!("{}", summary_csv(&reports));
            println!(
                "rows={} summary={} plot={}",
                files.rows.display(),
                files.summary.display(),
                files.plot.display()
            );
        }
        Command::Metrics(m) => metrics(m)?,
        Command::InspectCkpt { path } => {
            let ck = Checkpoint::load(&path)?;
            println!("kind={} step={} tensors={} numel={}", ck.kind.as_str(), ck.step, ck.params.len(), ck.params.numel());
            for (name, t) in ck.params.iter() {
                println!("param {name} {:?}", t.shape());
            }
            for (name, t) in ck.aux.iter() {
                println!("aux {name} {:?}", t.shape());
            }
            for line in ck.config.lines() {
                println!("config {line}");
            }
        }
    }
    Ok(())
}

fn metrics(cmd: MetricsCommand) -> CliResult {
    match cmd {
        MetricsCommand::Eer { scores } => {
            let s = ScoreSet::from_csv(&scores)?;
            println!("eer={} genuine={} impostor={}", eer(&s)?, s.genuine.len(), s.impostor.len());
        }
        MetricsCommand::Cer { reference, hypothesis } => println!("cer={}", cer(&reference, &hypothesis)?),
        MetricsCommand::Silence { wav } => println!("silence_rate={}", silence_rate(&read_wav(&wav)?)?),
        MetricsCommand::Mcd {
            reference,
            synthesized,
            n_mels,
        } => {
            let cfg = MelConfig {
                n_mels,
                ..MelConfig::default()
            };
            let a = melspectrogram(&read_wav(&reference)?, &cfg)?;
            let b = melspectrogram(&read_wav(&synthesized)?, &cfg)?;
            println!("mcd={}", mcd(&a, &b)?);
        }
        MetricsCommand::Report { input } => {
            let reports = read_reports(&input)?;
            if reports.is_empty() {
                return Err(Failure {
                    kind: "invalid-argument",
                    msg: format!("{}: no report rows", input.display()),
                });
            }
            print!("{}", summary_csv(&reports));
            let overall = length_means(&reports, |r| r.a_s);
            log::info!("{} (model, length) bins", overall.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} msg={}", f.kind, f.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
