//! Variant comparison on a shared synthetic dataset: trains each model
//! variant with identical data and seeds, then compares test-split mAPs.

use crate::config::RunConfig;
use crate::error::Result;
use crate::synth::{generate_dataset, Dataset};
use crate::train::{evaluate_split, train, TrainOutcome};
use serde::Serialize;
use triplet_core::metrics::FamilyMeans;
use triplet_core::model::Variant;

/// One trained variant's test-split outcome.
#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub map: FamilyMeans,
    pub final_train_loss: f64,
}

/// Side-by-side comparison across variants.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub results: Vec<VariantResult>,
}

impl StudyReport {
    pub fn map_ivt(&self, variant: Variant) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.variant == variant.name())
            .and_then(|r| r.map.ivt)
    }
}

/// Trains one variant on an existing dataset and evaluates its test split.
pub fn run_variant(base: &RunConfig, variant: Variant, data: &Dataset) -> Result<VariantResult> {
    let mut run = base.clone();
    run.variant = variant;
    let outcome: TrainOutcome = train(&run, data)?;
    let report = evaluate_split(&outcome.model, &data.vocab, &data.test)?;
    Ok(VariantResult {
        variant: variant.name().to_string(),
        map: report.map,
        final_train_loss: outcome.log.last().map(|e| e.l_total).unwrap_or(f64::NAN),
    })
}

/// Runs the requested variants on one shared dataset.
pub fn ordering_study(base: &RunConfig, variants: &[Variant]) -> Result<StudyReport> {
    base.validate()?;
    let data = generate_dataset(&base.data, base.model.img_h, base.model.img_w, base.seed)?;
    let mut results = Vec::new();
    for &variant in variants {
        results.push(run_variant(base, variant, &data)?);
    }
    Ok(StudyReport { results })
}
