//! Training loop: batched SGD over synthetic scenes with the warm-up
//! schedule, per-epoch loss logging, and checkpoint emission.

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::optim::Sgd;
use crate::synth::{Dataset, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use triplet_core::layers::ParamReg;
use triplet_core::losses::{
    inverse_frequency_weights, multitask_combine, total_loss, weighted_bce, LossState,
    WEIGHT_CLIP,
};
use triplet_core::metrics::{evaluate, EvalReport, PredictionRecord};
use triplet_core::model::{Model, Variant};
use triplet_core::tensor::checkpoint::Checkpoint;
use triplet_core::vocab::TripletVocabulary;
use triplet_core::{Graph, NodeId};

/// Mean losses for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_i: f64,
    pub l_v: f64,
    pub l_t: f64,
    pub l_comp: f64,
    pub l_assoc: f64,
    pub l_total: f64,
}

/// A finished training run.
pub struct TrainOutcome {
    pub model: Model,
    pub loss_state: LossState,
    pub log: Vec<EpochLog>,
    /// Epoch whose checkpoint was kept when validation selection is on.
    pub selected_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn checkpoint(&mut self, run: &RunConfig) -> Checkpoint {
        let manifest = serde_json::json!({
            "variant": self.model.variant.name(),
            "config": run,
        });
        let mut ckpt = Checkpoint::new(manifest);
        let mut insert = |name: String, t: &mut triplet_core::Tensor| ckpt.insert(&name, t);
        self.model.visit(&mut insert);
        self.loss_state.visit(&mut insert);
        ckpt
    }

    /// Renders the loss log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,lr,l_i,l_v,l_t,l_comp,l_assoc,l_total\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.l_i, e.l_v, e.l_t, e.l_comp, e.l_assoc, e.l_total
            ));
        }
        out
    }
}

/// Builds the class-balancing loss state from training-split label counts.
pub fn loss_state_for(run: &RunConfig, vocab: &TripletVocabulary, train: &[Scene]) -> Result<LossState> {
    let mut counts_ivt = vec![0usize; vocab.num_triplets()];
    let mut counts_i = vec![0usize; vocab.num_instruments()];
    let mut counts_v = vec![0usize; vocab.num_verbs()];
    let mut counts_t = vec![0usize; vocab.num_targets()];
    for s in train {
        let (yi, yv, yt) = vocab.decompose_binary(&s.labels).map_err(HarnessError::Core)?;
        for (c, &y) in counts_ivt.iter_mut().zip(&s.labels) {
            *c += y as usize;
        }
        for (c, &y) in counts_i.iter_mut().zip(&yi) {
            *c += y as usize;
        }
        for (c, &y) in counts_v.iter_mut().zip(&yv) {
            *c += y as usize;
        }
        for (c, &y) in counts_t.iter_mut().zip(&yt) {
            *c += y as usize;
        }
    }
    let mut state = LossState::uniform(
        vocab.num_instruments(),
        vocab.num_verbs(),
        vocab.num_targets(),
        vocab.num_triplets(),
    );
    state.weights_i = inverse_frequency_weights(&counts_i)?;
    state.weights_v = inverse_frequency_weights(&counts_v)?;
    state.weights_t = inverse_frequency_weights(&counts_t)?;
    state.weights_ivt = inverse_frequency_weights(&counts_ivt)?;
    // The naive baseline has no component heads: its only signal is the
    // association loss, so it is never gated off.
    state.warmup_epochs = if run.variant == Variant::NaiveCnn {
        0
    } else {
        run.warmup_epochs()
    };
    Ok(state)
}

/// Scalar loss values observed for one frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameLosses {
    pub l_i: f64,
    pub l_v: f64,
    pub l_t: f64,
    pub l_comp: f64,
    pub l_assoc: f64,
    pub l_total: f64,
}

/// Builds the full training loss for one frame in `g`, returning the loss
/// node and its scalar parts.
pub fn frame_loss<R: Rng>(
    model: &Model,
    state: &LossState,
    vocab: &TripletVocabulary,
    scene: &Scene,
    epoch: usize,
    g: &mut Graph,
    reg: &mut ParamReg,
    rng: &mut R,
) -> Result<(NodeId, FrameLosses)> {
    let img = g.constant(scene.image.clone());
    let out = model.forward(g, img, true, rng, reg)?;
    let l_assoc = weighted_bce(g, out.logits_ivt, &scene.labels, &state.weights_ivt)?;

    let mut parts = FrameLosses::default();
    let loss = if let (Some(li), Some(lv), Some(lt)) = (out.logits_i, out.logits_v, out.logits_t) {
        let (yi, yv, yt) = vocab.decompose_binary(&scene.labels)?;
        let l_i = weighted_bce(g, li, &yi, &state.weights_i)?;
        let l_v = weighted_bce(g, lv, &yv, &state.weights_v)?;
        let l_t = weighted_bce(g, lt, &yt, &state.weights_t)?;
        let ws = state.bind(g, true, reg);
        let l_comp = multitask_combine(g, l_i, l_v, l_t, ws)?;
        let params: Vec<NodeId> = reg.entries().iter().map(|(_, id)| *id).collect();
        let total = total_loss(g, l_comp, l_assoc, epoch, &params, state)?;
        parts.l_i = g.value(l_i).item();
        parts.l_v = g.value(l_v).item();
        parts.l_t = g.value(l_t).item();
        parts.l_comp = g.value(l_comp).item();
        total
    } else {
        // Naive baseline: association loss plus weight decay only. Reusing
        // the total with the association term permanently gated off avoids
        // double-counting it.
        let params: Vec<NodeId> = reg.entries().iter().map(|(_, id)| *id).collect();
        let mut gated = state.clone();
        gated.warmup_epochs = usize::MAX;
        total_loss(g, l_assoc, l_assoc, epoch, &params, &gated)?
    };
    parts.l_assoc = g.value(l_assoc).item();
    parts.l_total = g.value(loss).item();
    Ok((loss, parts))
}

/// Trains one model on the dataset's training split. Deterministic for a
/// fixed (config, dataset): batching order, dropout, and updates all derive
/// from the run seed.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_model(
        run,
        data,
        Model::new(run.variant, &run.model, &mut seeded(run.seed, 0))
            .map_err(HarnessError::Core)?,
    )
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64_5f68_6172);
    rng.set_stream(stream);
    rng
}

/// Trains an already-constructed model (ablation entry point).
pub fn train_model(run: &RunConfig, data: &Dataset, mut model: Model) -> Result<TrainOutcome> {
    run.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::config("training split is empty"));
    }
    let mut state = loss_state_for(run, &data.vocab, &data.train)?;
    let mut sgd = Sgd::new(run.optim.clone());
    let mut log = Vec::with_capacity(run.epochs);
    let mut best: Option<(Model, LossState, f64, usize)> = None;

    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = seeded(run.seed, 1 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = FrameLosses::default();
        for (batch_idx, batch) in order.chunks(run.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for (k, &idx) in batch.iter().enumerate() {
                let scene = &data.train[idx];
                let mut g = Graph::new();
                let mut reg = ParamReg::new();
                let stream = 0x1000_0000
                    + (((epoch as u64) << 20) | ((batch_idx as u64) << 8) | k as u64);
                let mut drop_rng = seeded(run.seed, stream);
                let (loss, parts) =
                    frame_loss(&model, &state, &data.vocab, scene, epoch, &mut g, &mut reg, &mut drop_rng)?;
                if !parts.l_total.is_finite() {
                    return Err(HarnessError::Numeric(format!(
                        "non-finite loss at epoch {}, video {}, frame {}",
                        epoch, scene.video, scene.frame
                    )));
                }
                g.backward(loss).map_err(HarnessError::Core)?;
                for (name, id) in reg.entries() {
                    if let Some(grad) = g.grad(*id) {
                        let slot = grads
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; grad.len()]);
                        for (s, &d) in slot.iter_mut().zip(grad.data()) {
                            *s += scale * d;
                        }
                    }
                }
                sums.l_i += parts.l_i;
                sums.l_v += parts.l_v;
                sums.l_t += parts.l_t;
                sums.l_comp += parts.l_comp;
                sums.l_assoc += parts.l_assoc;
                sums.l_total += parts.l_total;
            }
            sgd.step(epoch, &grads, &mut |f| {
                model.visit(f);
                state.visit(f);
            })?;
            // Projection step: keep the learned loss precisions e^{-w} inside
            // the same clip range used for class weights. Small overfit runs
            // drive component losses to exactly zero, where an unbounded w
            // amplifies batch noise until it destroys the shared backbone.
            state.visit(&mut |name, t| {
                if name.starts_with("loss.w_") {
                    for v in t.data_mut() {
                        *v = v.clamp(-WEIGHT_CLIP.1.ln(), -WEIGHT_CLIP.0.ln());
                    }
                }
            });
        }

        let n = data.train.len() as f64;
        log.push(EpochLog {
            epoch,
            lr: sgd.lr_at(epoch),
            l_i: sums.l_i / n,
            l_v: sums.l_v / n,
            l_t: sums.l_t / n,
            l_comp: sums.l_comp / n,
            l_assoc: sums.l_assoc / n,
            l_total: sums.l_total / n,
        });

        let due = run.select_every > 0
            && !data.val.is_empty()
            && ((epoch + 1) % run.select_every == 0 || epoch + 1 == run.epochs);
        if due {
            let report = evaluate_split(&model, &data.vocab, &data.val)?;
            let score = report.map.ivt.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().map_or(true, |(_, _, s, _)| score > *s) {
                best = Some((model.clone(), state.clone(), score, epoch));
            }
        }
    }

    let mut selected_epoch = None;
    if let Some((m, s, _, e)) = best {
        model = m;
        state = s;
        selected_epoch = Some(e);
    }
    Ok(TrainOutcome { model, loss_state: state, log, selected_epoch })
}

/// Runs the model over a split in eval mode and collects per-frame records.
pub fn predict_records(model: &Model, scenes: &[Scene]) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut g = Graph::new();
        let mut reg = ParamReg::new();
        let mut rng = seeded(0, 0);
        let img = g.constant(scene.image.clone());
        let out = model.forward(&mut g, img, false, &mut rng, &mut reg)?;
        let probs = g.sigmoid(out.logits_ivt);
        let scores: Vec<f64> = g.value(probs).data().iter().map(|p| p.clamp(0.0, 1.0)).collect();
        records.push(PredictionRecord {
            video_id: scene.video_id(),
            frame_id: scene.frame,
            scores,
            labels: scene.labels.clone(),
        });
    }
    Ok(records)
}

/// Evaluates a model on a split, delegating to the metrics module.
pub fn evaluate_split(model: &Model, vocab: &TripletVocabulary, scenes: &[Scene]) -> Result<EvalReport> {
    let records = predict_records(model, scenes)?;
    evaluate(&records, vocab).map_err(HarnessError::Core)
}
