//! Event-guided deblurring network.
//!
//! An image-plus-voxel encoder and a recurrent event encoder feed a
//! deformable deblur module; per-scale residual decoders add their outputs
//! to the pooled blurry image, coarsest scale first.

mod ablate;
mod config;
mod data;
mod loss;
mod model;
mod train;
mod weights;

pub use ablate::{ablate, parse_grid, rows_by_name, standard_rows, AblationResult, AblationRow, AblationTable};
pub use config::ModelConfig;
pub use data::{load_samples, normalize_voxels, voxel_scale, NetInput, Sample, VOXEL_PERCENTILE};
pub use loss::{loss_multiscale, LossTerms, PerceptualExtractor, DEFAULT_LAMBDA_P};
pub use model::{
    deblur_module, decode_coarse_to_fine, encode_events_recurrent, encode_image_events, forward_tape, FeaturePyramid,
    InputVars, ScalePrediction,
};
pub use train::{
    deblur_image, evaluate, evaluate_blur, log_from_jsonl, log_to_jsonl, parse_configs, predict, train_toy,
    EpochRecord, TrainConfig, TrainOutcome, Trainer, BEST_CHECKPOINT, FINAL_WEIGHTS, LATEST_CHECKPOINT, TRAIN_LOG,
};
pub use weights::{Params, Weights};

use crate::error::Result;
use crate::tensor::{grad_check_total, GradCheckReport, Tensor};

/// Finite-difference check of the full forward pass and loss with respect
/// to `samples` parameter entries drawn uniformly over all weights.
pub fn end_to_end_grad_check(
    cfg: &ModelConfig,
    weights: &Weights,
    input: &NetInput,
    gt: &Tensor,
    lambda_p: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let named = weights.to_named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let extractor = PerceptualExtractor::new(cfg.image_channels);
    grad_check_total(
        |tape, vars| {
            let p = Params::from_vars(&names, vars);
            let x = input.bind(tape);
            let gt = tape.constant(gt.clone());
            let preds = forward_tape(tape, &p, cfg, &x)?;
            Ok(loss_multiscale(tape, &preds, gt, lambda_p, &extractor)?.total)
        },
        &tensors,
        1e-5,
        seed,
        samples,
    )
}
