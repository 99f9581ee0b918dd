//! Full-batch overfitting on a small synthetic set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{rasterize_plane_mask, HorizonDepth, Layout, PlaneMask};
use crate::losses::{self, LossBreakdown, SEGMENT_WEIGHT};
use crate::model::{DopNet, ForwardCache, ModelConfig};
use crate::numerics::Tensor;
use crate::optim::Adam;
use crate::scene::StoredRoom;

/// One training example with targets at network resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    /// Ceiling/floor mask at the reference scale.
    pub mask: PlaneMask,
    pub depth: HorizonDepth,
}

impl Sample {
    pub fn new(image: Tensor, layout: &Layout, depth: HorizonDepth, config: &ModelConfig) -> Result<Sample> {
        Ok(Sample {
            image,
            mask: rasterize_plane_mask(layout, config.reference_grid())?,
            depth,
        })
    }

    pub fn from_room(room: &StoredRoom, config: &ModelConfig) -> Result<Sample> {
        Sample::new(room.image.clone(), &room.layout, room.depth.clone(), config)
    }
}

/// Loss of one sample and the forward state needed to differentiate it.
pub fn sample_loss(net: &DopNet, sample: &Sample) -> Result<(LossBreakdown, ForwardCache)> {
    let cache = net.forward(&sample.image)?;
    let seg = losses::bce_segment(&cache.logits, &sample.mask)?;
    let terms = losses::layout_loss(&cache.output.depth, cache.output.height, &sample.depth)?;
    Ok((losses::total_loss(seg, &terms), cache))
}

/// Adds `weight * d(total)/d(params)` into the parameter gradients.
pub fn accumulate_sample_grads(net: &mut DopNet, sample: &Sample, cache: &ForwardCache, weight: f64) -> Result<()> {
    let d_logits = losses::bce_segment_backward(&cache.logits, &sample.mask)?.scale(SEGMENT_WEIGHT * weight);
    let (d_depth, d_height) = losses::layout_loss_backward(&cache.output.depth, cache.output.height, &sample.depth)?;
    net.backward(cache, &d_logits, &d_depth.scale(weight), d_height * weight)
}

/// Mean loss over samples, without gradients.
pub fn evaluate(net: &DopNet, samples: &[Sample]) -> Result<LossBreakdown> {
    let items = samples
        .iter()
        .map(|s| Ok(sample_loss(net, s)?.0))
        .collect::<Result<Vec<_>>>()?;
    LossBreakdown::mean(&items).ok_or_else(|| Error::arg("evaluate", "no samples"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: usize,
    pub lr: f64,
    pub channels: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 500,
            lr: 1e-4,
            channels: 8,
            heads: 2,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::arg("RunConfig", format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::arg(
                "RunConfig",
                format!("{} channels not divisible by {} heads", self.channels, self.heads),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, image_height: usize) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            image_height,
        }
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub net: DopNet,
    /// Losses before each update, then once more after the last one:
    /// `steps + 1` entries.
    pub trace: Vec<TraceEntry>,
}

/// Adam on the mean sample loss, all samples every step. `on_step` sees each
/// trace entry as it is produced.
pub fn train(config: &RunConfig, samples: &[Sample], mut on_step: impl FnMut(&TraceEntry)) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples.first().ok_or_else(|| Error::arg("train", "no samples"))?;
    let image_height = first.image.dim(1);
    let mut net = DopNet::init(config.model_config(image_height), config.seed)?;
    let mut opt = Adam::new(config.lr)?;
    let weight = 1.0 / samples.len() as f64;
    let mut trace = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        net.params.zero_grads();
        let mut items = Vec::with_capacity(samples.len());
        for sample in samples {
            let (loss, cache) = sample_loss(&net, sample).map_err(|e| diverged(e, step))?;
            if step < config.steps {
                accumulate_sample_grads(&mut net, sample, &cache, weight)?;
            }
            items.push(loss);
        }
        let loss = LossBreakdown::mean(&items).expect("non-empty");
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, value: loss.total });
        }
        let entry = TraceEntry { step, loss };
        on_step(&entry);
        trace.push(entry);
        if step < config.steps {
            opt.step(&mut net.params);
        }
    }
    Ok(TrainOutcome { net, trace })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, value: f64::NAN },
        other => other,
    }
}
