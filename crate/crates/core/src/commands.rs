//! The `calibrate`, `sensitivity` and `eval` commands, independent of argument
//! parsing. Exit codes: 0 success, 2 input error, 3 numeric failure.

use crate::error::{Error, Result};
use crate::io::config::ModelConfig;
use crate::io::manifest::{CalibrationManifest, DataSource};
use crate::io::qtns;
use crate::model::ToyModel;
use crate::pipeline::{
    calibration_batches, down_proj_sensitivity, evaluate, run_pipeline, teacher_logits, EvalReport, InitMode,
    OptimConfig, PipelineConfig,
};
use crate::synthetic::token_sequences;
use crate::tensor::IntTensor;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Sequences generated when no `--data` file is given.
pub const SYNTHETIC_SEQUENCES: usize = 32;
const DATA_SEED_SALT: u64 = 0xDA7A;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::Singular(_) => EXIT_NUMERIC,
        Error::Internal(_) => 1,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelArgs {
    pub model_config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct CalibrateArgs {
    pub model: ModelArgs,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub promote_fraction: f64,
    pub init_mode: InitMode,
    pub export_rotations: Option<PathBuf>,
}

fn load_config(args: &ModelArgs) -> Result<ModelConfig> {
    let mut cfg = match &args.model_config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(b) = args.weight_bits {
        if !matches!(b, 4 | 8) {
            return Err(Error::Config(format!("--weight-bits {b} must be 4 or 8")));
        }
        cfg.bits.weight = b;
    }
    if let Some(b) = args.act_bits {
        if !matches!(b, 4 | 8) {
            return Err(Error::Config(format!("--act-bits {b} must be 4 or 8")));
        }
        cfg.bits.linear_input_act = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Resolves `--data` (a QTNS int32 `[sequences × length]` file) or the seeded synthetic default.
fn data_source(args: &ModelArgs, cfg: &ModelConfig) -> Result<(DataSource, IntTensor)> {
    match &args.data {
        Some(p) => {
            let src = DataSource::File { path: p.display().to_string(), sha256: file_digest(p)? };
            let tokens = qtns::load_int(p)?;
            Ok((src, tokens))
        }
        None => {
            let seed = args.seed ^ DATA_SEED_SALT;
            let tokens = token_sequences(SYNTHETIC_SEQUENCES, cfg.model.seq_len, cfg.model.vocab_size, seed);
            Ok((DataSource::Synthetic { num_seqs: SYNTHETIC_SEQUENCES, seq_len: cfg.model.seq_len, seed }, tokens))
        }
    }
}

fn regenerate(source: &DataSource, cfg: &ModelConfig) -> Result<IntTensor> {
    match source {
        DataSource::Synthetic { num_seqs, seq_len, seed } => {
            Ok(token_sequences(*num_seqs, *seq_len, cfg.model.vocab_size, *seed))
        }
        DataSource::File { path, .. } => Ok(qtns::load_int(path)?),
    }
}

#[derive(Debug, Clone)]
pub struct CalibrateSummary {
    pub manifest: CalibrationManifest,
    pub final_loss: Option<f64>,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrateSummary> {
    let cfg = load_config(&args.model)?;
    let (source, tokens) = data_source(&args.model, &cfg)?;
    let steps = args.steps.unwrap_or(OptimConfig::default().steps);
    let defaults = OptimConfig::default();
    let pc = PipelineConfig {
        init_mode: args.init_mode,
        optim: OptimConfig {
            steps,
            warmup_local_loss_steps: defaults.warmup_local_loss_steps.min(steps),
            seed: args.model.seed,
            ..defaults
        },
        promote_fraction: args.promote_fraction,
        ..PipelineConfig::default()
    };
    let batches = calibration_batches(&tokens, pc.optim.batch_size)?;
    let mut model = ToyModel::build(cfg.model.clone(), cfg.bits, cfg.rotation, args.model.seed)?;
    let outcome = run_pipeline(&mut model, &batches, &pc)?;
    let manifest = CalibrationManifest::capture(&model, &pc, source, &outcome.plan, outcome.eval.mse)?;
    manifest.save(&args.out)?;
    if let Some(dir) = &args.export_rotations {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
        for (name, r) in [("r1", &model.r1), ("r2", &model.r2)] {
            qtns::save(&r.matrix()?, dir.join(format!("{name}.qtns")))?;
        }
    }
    Ok(CalibrateSummary { manifest, final_loss: outcome.stage_one.trace.last().map(|e| e.teacher_mse) })
}

/// One line per `down_proj` input: site, role, ratio to 6 decimals; most sensitive first.
pub fn cmd_sensitivity(args: &ModelArgs, out: Option<&Path>) -> Result<String> {
    let cfg = load_config(args)?;
    let (_, tokens) = data_source(args, &cfg)?;
    let batches = calibration_batches(&tokens, OptimConfig::default().batch_size)?;
    let model = ToyModel::build(cfg.model.clone(), cfg.bits, cfg.rotation, args.seed)?;
    let mut reports = down_proj_sensitivity(&model, &batches, 8)?;
    reports.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.site_index.cmp(&b.site_index)));
    let mut text = String::new();
    for r in &reports {
        writeln!(text, "{}\tlinear_input_act\t{:.6}", r.site, r.ratio).expect("string write");
    }
    if let Some(p) = out {
        std::fs::write(p, &text).map_err(|source| Error::Io { path: p.display().to_string(), source })?;
    }
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub model_config: Option<PathBuf>,
    pub manifest: PathBuf,
    pub data: Option<PathBuf>,
}

pub fn format_mse(v: f64) -> String {
    format!("{v:.6e}")
}

pub fn render_eval(recorded: f64, report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "recorded_mse\t{}", format_mse(recorded)).expect("string write");
    writeln!(s, "mse\t{}", format_mse(report.mse)).expect("string write");
    writeln!(s, "site\trelative_error\te_rounding\te_clipping").expect("string write");
    let (mut rounding, mut clipping) = (0.0, 0.0);
    for e in &report.per_site {
        writeln!(s, "{}\t{:.6e}\t{:.6e}\t{:.6e}", e.site, e.relative_error, e.e_rounding, e.e_clipping)
            .expect("string write");
        rounding += e.e_rounding;
        clipping += e.e_clipping;
    }
    writeln!(s, "total\t-\t{rounding:.6e}\t{clipping:.6e}").expect("string write");
    s
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(String, EvalReport)> {
    let manifest = CalibrationManifest::load(&args.manifest)?;
    if let Some(p) = &args.model_config {
        let cfg = ModelConfig::load(p)?;
        if cfg.model != manifest.config.model || cfg.rotation != manifest.config.rotation {
            return Err(Error::Manifest(format!("model config {} does not match the manifest", p.display())));
        }
    }
    let model = manifest.restore()?;
    let tokens = match &args.data {
        Some(p) => qtns::load_int(p)?,
        None => regenerate(&manifest.data, &manifest.config)?,
    };
    let batches = calibration_batches(&tokens, manifest.pipeline.optim.batch_size)?;
    let teacher = teacher_logits(&model, &batches)?;
    let report = evaluate(&model, &batches, &teacher)?;
    Ok((render_eval(manifest.eval_mse, &report), report))
}
