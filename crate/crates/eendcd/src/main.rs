use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eendcd::checkpoint::load_checkpoint;
use eendcd::config::{load_run_config, load_synth_plan, seed_override};
use eendcd::dataset::synthesize;
use eendcd::driver::{diarize, train_dir};
use eendcd::features::extract_windows;
use eendcd::rttm::{read_rttm, write_rttm};
use eendcd::wav::load_wav;
use eendcd_core::eval::{der_score, DEFAULT_COLLAR_S, DEFAULT_MEDIAN, DEFAULT_THRESHOLD};

/// Speaker diarization with attractor-conditioned conformers.
#[derive(Parser)]
#[command(name = "eendcd", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic labelled mixtures.
    SynthData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Diarize one WAV file into an RTTM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        rttm: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_MEDIAN)]
        median: usize,
    },
    /// Score a hypothesis RTTM against a reference RTTM.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = DEFAULT_COLLAR_S)]
        collar: f64,
    },
}

enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn require_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such directory: {}", p.display())))
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::SynthData { spec, out } => {
            require_file(&spec)?;
            let plan = load_synth_plan(&spec)?;
            let entries = synthesize(&plan, &out)?;
            println!("wrote {} recordings to {}", entries.len(), out.display());
        }
        Cmd::Train {
            config,
            data,
            out,
            epochs,
        } => {
            require_file(&config)?;
            require_dir(&data)?;
            let mut cfg = load_run_config(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            seed_override(&mut cfg.train).map_err(Failure::Usage)?;
            let outcome = train_dir(&cfg, &data, &out)?;
            let s = outcome.summary;
            match s.best_val {
                Some((step, loss)) => println!(
                    "trained {} steps ({} skipped); best validation loss {loss:.4} at step {step}",
                    s.steps, s.skipped
                ),
                None => println!("trained {} steps ({} skipped)", s.steps, s.skipped),
            }
        }
        Cmd::Infer {
            ckpt,
            wav,
            rttm,
            threshold,
            median,
        } => {
            require_file(&ckpt)?;
            require_file(&wav)?;
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Failure::Usage(format!("threshold {threshold} outside [0, 1]")));
            }
            let (model, params, _) = load_checkpoint(&ckpt)?;
            let windows = extract_windows(&load_wav(&wav)?)?;
            let hyp = diarize(&model, &params, &windows, threshold, median)?;
            let id = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write_rttm(&rttm, &id, &hyp)?;
            println!("{} segments, {} speakers", hyp.segments.len(), hyp.speakers().len());
        }
        Cmd::Score { reference, hyp, collar } => {
            require_file(&reference)?;
            require_file(&hyp)?;
            if !(collar.is_finite() && collar >= 0.0) {
                return Err(Failure::Usage(format!("invalid collar {collar}")));
            }
            let r = read_rttm(&reference)?;
            let h = read_rttm(&hyp)?;
            if r.is_empty() {
                return Err(Failure::Run(anyhow::anyhow!("{}: reference has no segments", reference.display())));
            }
            for (id, rh) in &r {
                let hh = h.get(id).cloned().unwrap_or_default();
                let rep = der_score(rh, &hh, collar)?;
                println!(
                    "{id}: DER {:.2} MS {:.2} FA {:.2} CF {:.2} SAD {:.2} scored {:.3} s",
                    rep.der,
                    rep.ms,
                    rep.fa,
                    rep.cf,
                    rep.sad(),
                    rep.total_scored_s
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
