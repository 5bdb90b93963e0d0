use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FederationConfig;
use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::matching::{hungarian_loss, GroundTruth};
use crate::model::{forward_graph, predict, BoundParams, ModelConfig, NormStats, ParamTree, Predictions};
use crate::synthdata::{augment, resize, KeyFrameSample};
use crate::tensor::{mix64, DropoutStream, Mode, Tape, Tensor};

/// Everything a node keeps between rounds.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub params: ParamTree,
    pub stats: NormStats,
    pub optim: AdamW,
    pub rng: ChaCha8Rng,
    pub dropout: DropoutStream,
    pub epochs_done: usize,
}

/// Seed of node `index`'s private stream.
pub fn node_stream(seed: u64, index: usize) -> u64 {
    mix64(seed ^ mix64(0x6e6f_6465 ^ index as u64))
}

impl NodeState {
    pub fn new(params: ParamTree, model: &ModelConfig, stream: u64) -> Self {
        Self {
            params,
            stats: NormStats::new(model),
            optim: AdamW::new(),
            rng: ChaCha8Rng::seed_from_u64(stream),
            dropout: DropoutStream::new(mix64(stream)),
            epochs_done: 0,
        }
    }

    pub fn predict(&self, model: &ModelConfig, images: &Tensor) -> Result<Predictions> {
        predict(model, &self.params, &self.stats, images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOutcome {
    pub mean_loss: f64,
    pub steps: usize,
}

/// Stacks samples (resized to `size × size`) into `[B, 1, size, size]`.
pub fn stack_images(samples: &[KeyFrameSample], size: usize) -> Result<(Tensor, Vec<GroundTruth>)> {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let r = resize(s, size, size);
        data.extend_from_slice(r.image.data());
        gts.push(r.gt);
    }
    Ok((Tensor::new(vec![samples.len(), 1, size, size], data)?, gts))
}

/// Eval-mode predictions for `samples`, in chunks of `chunk` images.
pub fn predict_samples(state: &NodeState, model: &ModelConfig, samples: &[KeyFrameSample], chunk: usize) -> Result<Predictions> {
    let mut logits = Vec::new();
    let mut boxes = Vec::new();
    for part in samples.chunks(chunk.max(1)) {
        let (x, _) = stack_images(part, model.image_size)?;
        let p = state.predict(model, &x)?;
        logits.extend(p.class_logits.into_data());
        boxes.extend(p.boxes.into_data());
    }
    let (b, n, k) = (samples.len(), model.num_queries, model.num_classes + 1);
    Ok(Predictions { class_logits: Tensor::new(vec![b, n, k], logits)?, boxes: Tensor::new(vec![b, n, 4], boxes)? })
}

/// `epochs` passes of shuffled, augmented mini-batch AdamW over `data`.
/// Learning rates drop by `lr_gamma` once the node's cumulative epoch count
/// reaches `cfg.lr_step_epoch()`.
pub fn local_train(state: &mut NodeState, data: &[KeyFrameSample], cfg: &FederationConfig, epochs: usize) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Config("local training needs a non-empty dataset".into()));
    }
    let opt = AdamWConfig::new(cfg.lr_head, cfg.lr_backbone, cfg.weight_decay);
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for _ in 0..epochs {
        let scale = if state.epochs_done >= cfg.lr_step_epoch() { cfg.lr_gamma } else { 1.0 };
        // a fresh permutation per epoch, so splitting epochs across calls changes nothing
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        for batch in order.chunks(cfg.batch_size) {
            let augmented: Vec<_> = batch.iter().map(|&i| augment(&data[i], &mut state.rng, &cfg.augment)).collect();
            let (x, gts) = stack_images(&augmented, cfg.model.image_size)?;

            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &state.params, true);
            let xv = tape.constant(x);
            let (logits, boxes) =
                forward_graph(&cfg.model, &mut tape, &bound, &mut state.stats, xv, Mode::Train, &mut state.dropout)?;
            let out = hungarian_loss(&mut tape, logits, boxes, &gts, &cfg.loss)?;
            loss_sum += tape.value(out.loss).item();
            tape.backward(out.loss)?;
            let mut grads = bound.grads(&tape, &state.params);
            drop(tape);

            clip_global_norm(&mut grads, cfg.clip_norm);
            state.optim.step(&mut state.params, &grads, &opt, scale)?;
            steps += 1;
        }
        state.epochs_done += 1;
    }
    Ok(TrainOutcome { mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 }, steps })
}
