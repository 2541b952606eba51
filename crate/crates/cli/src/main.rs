use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kvpsn_core::engine::{DecodeConfig, Drafting, Mode, TopK};
use kvpsn_core::harness::bench::{run_bench, single_row, BenchOptions, Method};
use kvpsn_core::harness::dataset::{generate, load_examples, write_dataset};
use kvpsn_core::harness::selftest::{run_selftest, SelftestOptions};
use kvpsn_core::harness::{pack, unpack, Checkpoint, RunConfig, RunReport, TrainState};
use kvpsn_core::model::Model;
use kvpsn_core::train::{Example, ExampleSource, Trainer};

#[derive(Parser)]
#[command(
    name = "kvpsn",
    version,
    about = "Speculative decoding with drafting blocks over a base KV cache"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenData {
        #[arg(long)]
        spec_seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the vocabulary and length range.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the base model and drafters.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training corpus; examples are streamed from the task when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step TSV log (default: <out-checkpoint>.log.tsv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode a corpus with one configuration.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value = "1")]
        k: TopK,
        #[arg(long, default_value = "none")]
        drafting: Drafting,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Report row (JSON lines).
        #[arg(long)]
        report: Option<PathBuf>,
        /// One line of space-separated token ids per example.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Sweep methods, thresholds and search modes.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Trained 8-layer checkpoint for the pruning baseline.
        #[arg(long)]
        prune_checkpoint: Option<PathBuf>,
        /// Comma-separated subset of base,prune-l8,medusa,kvpsn.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Decode to the length cap regardless of EOS.
        #[arg(long)]
        ignore_eos: bool,
        /// Only the first N examples of the corpus.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the invariant suites on small random models.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("KVPSN_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("KVPSN_SEED={v}"))?)),
        Err(_) => Ok(None),
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::parse(&text)?.with_seed(env_seed()?))
}

fn load_run(path: &Path) -> Result<kvpsn_core::harness::SavedRun> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(unpack(&ck)?)
}

fn gen_data(spec_seed: u64, count: usize, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    let task = cfg.task.spec(&cfg.model);
    let records = generate(&task, spec_seed, count)?;
    write_dataset(out, &records).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {count} records to {}", out.display());
    Ok(())
}

fn train(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let cfg = read_config(config)?;
    let task = cfg.task.spec(&cfg.model);
    let mut trainer = match resume {
        Some(p) => {
            let run = load_run(p)?;
            if run.model.cfg != cfg.model {
                bail!("checkpoint model shape differs from the config");
            }
            let state = run.train.unwrap_or_default();
            Trainer::resume(run.model, cfg.train.clone(), state.step, state.gate_open)?
        }
        None => {
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            model.init_text_encoder_from_decoder()?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    let corpus: Option<Vec<Example>> = data.map(|p| load_examples(p, &task)).transpose()?;
    let source = match &corpus {
        Some(c) => ExampleSource::Corpus(c),
        None => ExampleSource::Stream(&task),
    };
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if resume.is_none() {
        writeln!(log_file, "step\tlr\tL_st\tL_mt\tL_kl\tL_spec\tgate\tL_total")?;
    }
    let mut write_err = None;
    let rows = trainer.run(&source, |row| {
        if let Err(e) = writeln!(log_file, "{row}") {
            write_err.get_or_insert(e);
        }
    });
    let state = TrainState {
        step: trainer.step,
        gate_open: trainer.gate.is_open(),
    };
    pack(&trainer.model, &task, Some(state))
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let rows = rows?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    match rows.last() {
        Some(r) => println!(
            "final step {} L_st {:.4} L_mt {:.4} L_kl {:.4} L_spec {:.4} gate {} L_base {:.4} L_total {:.4}",
            r.step,
            r.losses.l_st,
            r.losses.l_mt,
            r.losses.l_kl,
            r.losses.l_spec,
            u8::from(r.losses.kl_gate_open),
            r.losses.l_base,
            r.losses.l_total
        ),
        None => println!("no steps run (step {})", trainer.step),
    }
    println!("checkpoint {} log {}", out.display(), log_path.display());
    Ok(())
}

fn write_report(report: &RunReport, path: Option<&Path>) -> Result<()> {
    print!("{}", report.table());
    if let Some(p) = path {
        fs::write(p, report.to_jsonl()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            spec_seed,
            count,
            out,
            config,
        } => gen_data(spec_seed, count, &out, config.as_deref())?,
        Command::Train {
            config,
            data,
            out_checkpoint,
            resume,
            log,
        } => train(
            &config,
            data.as_deref(),
            &out_checkpoint,
            resume.as_deref(),
            log.as_deref(),
        )?,
        Command::Decode {
            checkpoint,
            data,
            mode,
            k,
            drafting,
            beam,
            max_new,
            rounds,
            report,
            hyps,
        } => {
            let run = load_run(&checkpoint)?;
            let examples = load_examples(&data, &run.task)?;
            if examples.is_empty() {
                bail!("{} holds no examples", data.display());
            }
            let cfg = DecodeConfig {
                mode,
                k,
                beam_width: beam,
                max_new_tokens: max_new,
                drafting,
                ..Default::default()
            };
            let (row, ev) = single_row(&run.model, &examples, &cfg, rounds)?;
            if let Some(p) = hyps {
                let text: String = ev
                    .traces
                    .iter()
                    .map(|t| {
                        let ids: Vec<String> = t.tokens.iter().map(u32::to_string).collect();
                        ids.join(" ") + "\n"
                    })
                    .collect();
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            write_report(&RunReport { rows: vec![row] }, report.as_deref())?;
        }
        Command::Bench {
            checkpoint,
            data,
            rounds,
            report,
            prune_checkpoint,
            methods,
            max_new,
            beam,
            ignore_eos,
            limit,
        } => {
            let run = load_run(&checkpoint)?;
            let mut examples = load_examples(&data, &run.task)?;
            if let Some(n) = limit {
                examples.truncate(n);
            }
            if examples.is_empty() {
                bail!("{} holds no examples", data.display());
            }
            let methods = methods.unwrap_or_else(|| {
                Method::ALL
                    .into_iter()
                    .filter(|m| *m != Method::PruneL8 || prune_checkpoint.is_some())
                    .collect()
            });
            let pruned = prune_checkpoint.as_deref().map(load_run).transpose()?;
            let opts = BenchOptions {
                rounds,
                max_new_tokens: max_new,
                beam_width: beam,
                ignore_eos,
                methods,
                ..Default::default()
            };
            let result = run_bench(&run.model, pruned.as_ref().map(|r| &r.model), &examples, &opts)?;
            write_report(&result, report.as_deref())?;
        }
        Command::Selftest { seed, inject_fault } => {
            let results = run_selftest(&SelftestOptions { seed, inject_fault })?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<16} {}  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
