use clap::{Args, Parser, Subcommand, ValueEnum};
use rotquant::commands::{self, CalibrateArgs, EvalArgs, ModelArgs};
use rotquant::io::qtns;
use rotquant::pipeline::InitMode;
use rotquant::synthetic::token_sequences;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rotquant", version, about = "Static quantization with fused rotations for a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize, plan, optimize and calibrate; writes a JSON manifest.
    Calibrate(CalibrateCmd),
    /// Per-layer down_proj input sensitivity report.
    Sensitivity(SensitivityCmd),
    /// Evaluate a manifest against the fp32 teacher.
    Eval(EvalCmd),
    /// Write seeded synthetic token sequences as a QTNS int32 file.
    GenData(GenDataCmd),
}

#[derive(Args)]
struct ModelFlags {
    /// JSON model config; built-in defaults when omitted.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// QTNS int32 token file `[sequences × length]`; seeded synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = ["4", "8"])]
    weight_bits: Option<String>,
    #[arg(long, value_parser = ["4", "8"])]
    act_bits: Option<String>,
}

impl ModelFlags {
    fn into_args(self) -> ModelArgs {
        ModelArgs {
            model_config: self.model_config,
            data: self.data,
            seed: self.seed,
            weight_bits: self.weight_bits.map(|b| b.parse().expect("validated by clap")),
            act_bits: self.act_bits.map(|b| b.parse().expect("validated by clap")),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitFlag {
    Policy,
    MaxMinLowBit,
    MaxMinEverywhere,
}

#[derive(Args)]
struct CalibrateCmd {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0.10)]
    promote_fraction: f64,
    #[arg(long, value_enum, default_value_t = InitFlag::Policy)]
    init: InitFlag,
    /// Directory to write the final R1/R2 matrices as QTNS files.
    #[arg(long)]
    export_rotations: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityCmd {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> rotquant::Result<()> {
    match cli.command {
        Command::Calibrate(c) => {
            let args = CalibrateArgs {
                model: c.model.into_args(),
                out: c.out,
                steps: c.steps,
                promote_fraction: c.promote_fraction,
                init_mode: match c.init {
                    InitFlag::Policy => InitMode::Policy,
                    InitFlag::MaxMinLowBit => InitMode::MaxMinLowBit,
                    InitFlag::MaxMinEverywhere => InitMode::MaxMinEverywhere,
                },
                export_rotations: c.export_rotations,
            };
            let summary = commands::cmd_calibrate(&args)?;
            println!("wrote {}", args.out.display());
            println!("eval_mse\t{}", commands::format_mse(summary.manifest.eval_mse));
        }
        Command::Sensitivity(c) => {
            let text = commands::cmd_sensitivity(&c.model.into_args(), c.out.as_deref())?;
            print!("{text}");
        }
        Command::Eval(c) => {
            let args = EvalArgs { model_config: c.model_config, manifest: c.manifest, data: c.data };
            let (text, _) = commands::cmd_eval(&args)?;
            print!("{text}");
        }
        Command::GenData(c) => {
            if c.sequences == 0 || c.seq_len == 0 || c.vocab == 0 {
                return Err(rotquant::Error::Argument("sequences, seq-len and vocab must be positive".into()));
            }
            qtns::save_int(&token_sequences(c.sequences, c.seq_len, c.vocab, c.seed), &c.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_INPUT } else { commands::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
