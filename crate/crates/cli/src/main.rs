use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use speech_chain_cli::commands::{self, AdaptKind, Model, Outcome, SynthText};
use speech_chain_cli::config::{exit_code, RunConfig};

#[derive(Parser)]
#[command(
    name = "speech-chain",
    version,
    about = "Speech chain pretraining, adaptation and evaluation"
)]
struct Cli {
    /// Overrides the master seed of the run config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Speaker,
    Asr,
    Tts,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Domain,
    Speaker,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write its manifest and features.
    BuildCorpus {
        config: PathBuf,
        /// Defaults to `$SPEECH_CHAIN_OUT/corpus` or `runs/corpus`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Pretrain one model on the paired source-domain data.
    Pretrain {
        #[arg(value_enum)]
        model: ModelArg,
        #[arg(long)]
        config: PathBuf,
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
        /// Pause once this many epochs are done in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Adapt the pretrained models on unpaired target-domain text.
    Adapt {
        #[arg(value_enum)]
        mode: ModeArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "no_update_tts")]
        update_tts: bool,
        #[arg(long)]
        no_update_tts: bool,
        /// Reference utterances per test speaker (speaker mode).
        #[arg(long, default_value_t = 5)]
        refs: usize,
        /// Output name under `adapt/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score an ASR checkpoint, or a TTS checkpoint through a frozen ASR.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        test_set: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        system: Option<String>,
        /// ASR that scores synthetic speech; defaults to the run's baseline.
        #[arg(long)]
        scorer: Option<PathBuf>,
        /// Write one graymap alignment image per utterance.
        #[arg(long)]
        plot_alignments: bool,
    },
    /// Synthesize one text with a training speaker's voice.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "phonemes", required_unless_present = "phonemes")]
        utt_id: Option<String>,
        /// Space-separated phoneme symbols.
        #[arg(long)]
        phonemes: Option<String>,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildCorpus { .. } => "build-corpus",
            Command::Pretrain { .. } => "pretrain",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Synthesize { .. } => "synthesize",
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut log = |msg: &str| eprintln!("{msg}");
    let load = |p: &PathBuf| RunConfig::load(p, cli.seed);
    match &cli.command {
        Command::BuildCorpus { config, out_dir } => commands::build_corpus_cmd(config, out_dir.as_deref()),
        Command::Pretrain {
            model,
            config,
            resume,
            stop_after,
        } => {
            let model = match model {
                ModelArg::Speaker => Model::Speaker,
                ModelArg::Asr => Model::Asr,
                ModelArg::Tts => Model::Tts,
            };
            commands::pretrain_cmd(model, &load(config)?, *resume, *stop_after, &mut log)
        }
        Command::Adapt {
            mode,
            config,
            update_tts,
            no_update_tts,
            refs,
            name,
        } => {
            let kind = match mode {
                ModeArg::Domain => AdaptKind::Domain,
                ModeArg::Speaker => AdaptKind::Speaker,
            };
            let flag = if *update_tts {
                Some(true)
            } else if *no_update_tts {
                Some(false)
            } else {
                None
            };
            commands::adapt_cmd(kind, &load(config)?, flag, *refs, name.as_deref(), &mut log)
        }
        Command::Eval {
            config,
            test_set,
            checkpoint,
            system,
            scorer,
            plot_alignments,
        } => commands::eval_cmd(
            &load(config)?,
            test_set,
            checkpoint,
            system.as_deref(),
            scorer.as_deref(),
            *plot_alignments,
            &mut log,
        ),
        Command::Synthesize {
            config,
            checkpoint,
            utt_id,
            phonemes,
            speaker,
            out_dir,
        } => {
            let text = match (utt_id, phonemes) {
                (Some(id), _) => SynthText::UttId(id),
                (None, Some(p)) => SynthText::Phonemes(p),
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::synthesize_cmd(&load(config)?, checkpoint, text, speaker, out_dir.as_deref(), &mut log)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(outcome) => {
            println!("{}", outcome.line());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            println!("RESULT {name} status=error exit_code={code}");
            ExitCode::from(code as u8)
        }
    }
}
