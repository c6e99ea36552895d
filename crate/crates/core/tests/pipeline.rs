//! End-to-end pipeline behaviour on the toy model.

use rotquant::model::{Phase, RoleBits, RotationMode, ToyModel, ToyTransformerConfig};
use rotquant::pipeline::{
    calibration_batches, initialize_stage_one, run_pipeline, stage_one_optimize, teacher_logits, InitMode,
    OptimConfig, PipelineConfig,
};
use rotquant::rotation::orthogonality_error;
use rotquant::synthetic::token_sequences;
use rotquant::tensor::IntTensor;

fn batches(seed: u64) -> Vec<IntTensor> {
    calibration_batches(&token_sequences(16, 32, 256, seed), 4).unwrap()
}

fn pipeline_mse(bits: RoleBits, rotation: RotationMode, steps: usize, seed: u64) -> f64 {
    let b = batches(seed + 100);
    let mut model = ToyModel::build(ToyTransformerConfig::default(), bits, rotation, seed).unwrap();
    let cfg = PipelineConfig {
        optim: OptimConfig { steps, warmup_local_loss_steps: steps.min(128), ..OptimConfig::default() },
        ..PipelineConfig::default()
    };
    run_pipeline(&mut model, &b, &cfg).unwrap().eval.mse
}

#[test]
fn long_runs_trend_down_and_stay_orthogonal() {
    for seed in 0..5u64 {
        let b = batches(seed + 100);
        let mut model = ToyModel::build(
            ToyTransformerConfig::default(),
            RoleBits::default(),
            RotationMode::Learnable,
            seed,
        )
        .unwrap();
        initialize_stage_one(&mut model, &b, InitMode::Policy).unwrap();
        let teacher = teacher_logits(&model, &b).unwrap();
        let report = stage_one_optimize(&mut model, &b, &teacher, &OptimConfig::default()).unwrap();
        let losses: Vec<f64> = report.trace.iter().map(|e| e.teacher_mse).collect();
        assert_eq!(losses.len(), 512);
        let avg = |end: usize| losses[end - 32..end].iter().sum::<f64>() / 32.0;
        assert!(avg(512) < avg(32), "seed {seed}: {} vs {}", avg(512), avg(32));
        for r in [&model.r1, &model.r2] {
            assert!(orthogonality_error(&r.matrix().unwrap()) <= 1e-4);
        }
    }
}

#[test]
fn w8a8_stays_close_to_w16a16() {
    let w16 = RoleBits { weight: 16, linear_input_act: 16, ..RoleBits::default() };
    let w8 = RoleBits { weight: 8, linear_input_act: 8, ..RoleBits::default() };
    let base = pipeline_mse(w16, RotationMode::Learnable, 32, 0);
    let mse = pipeline_mse(w8, RotationMode::Learnable, 32, 0);
    assert!(mse <= 10.0 * base, "W8A8 {mse} vs W16A16 {base}");
}

#[test]
fn rotation_helps_w4a8() {
    let bits = RoleBits::default();
    let rotated = pipeline_mse(bits, RotationMode::Learnable, 64, 0);
    let plain = pipeline_mse(bits, RotationMode::None, 64, 0);
    assert!(rotated < plain, "rotated {rotated} vs unrotated {plain}");
}

#[test]
fn float_phase_ignores_quantizers() {
    let b = batches(1);
    let model = ToyModel::build(ToyTransformerConfig::default(), RoleBits::default(), RotationMode::Hadamard, 1).unwrap();
    let teacher = teacher_logits(&model, &b).unwrap();
    let logits = model.logits(&b[0], Phase::Float).unwrap();
    assert!(logits.sub(&teacher[0]).unwrap().abs_max() <= 1e-4);
}
