use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    gaussian_target, heatmap_loss, offset_loss, total_loss, total_loss_var, HeatmapNorm, LossBreakdown,
    DEFAULT_LAMBDA_HEATMAP, DEFAULT_SIGMA,
};
use super::optim::{adam_step, lr_schedule, OptimState};
use crate::encoders::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::pipeline::{forward, ForwardPass, ModelConfig, ModelInput, Skeleton};
use crate::tensor::{Graph, Tensor, Var};

/// A sample with its frozen embeddings precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image: Image,
    pub bundle: EmbeddingBundle,
    pub skeleton: Skeleton,
    /// Ground-truth `N×2` normalized `(x, y)`.
    pub keypoints: Tensor,
}

impl PreparedSample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            image: &self.image,
            bundle: &self.bundle,
            skeleton: &self.skeleton,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_heatmap: f64,
    /// Target spread in grid cells.
    pub sigma: f64,
    pub norm: HeatmapNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_heatmap: DEFAULT_LAMBDA_HEATMAP,
            sigma: DEFAULT_SIGMA,
            norm: HeatmapNorm::L2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Seeds the batch order.
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            base_lr: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

/// Graph handles for one sample's objective.
pub struct SampleObjective {
    pub pass: ForwardPass,
    pub heatmap: Var,
    pub offset: Var,
    pub total: Var,
}

pub fn sample_objective(
    g: &mut Graph,
    store: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    sample: &PreparedSample,
) -> Result<SampleObjective> {
    let pass = forward(g, store, model, &sample.input())?;
    let target = gaussian_target(&sample.keypoints, pass.h, pass.w, loss.sigma)?;
    let heatmap = heatmap_loss(g, pass.heatmaps, &target, loss.norm)?;
    let offset = offset_loss(g, &pass.locations, &sample.keypoints)?;
    let total = total_loss_var(g, heatmap, offset, loss.lambda_heatmap)?;
    Ok(SampleObjective {
        pass,
        heatmap,
        offset,
        total,
    })
}

/// Mean loss over `batch` and the gradient of that mean, keyed by parameter.
/// Every parameter in `store` gets an entry.
pub fn batch_gradients(
    store: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &[&PreparedSample],
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(k, v)| (k.to_owned(), vec![0.0; v.len()]))
        .collect();
    let (mut heat, mut off) = (0.0, 0.0);
    for sample in batch {
        let mut g = Graph::new();
        let obj = sample_objective(&mut g, store, model, loss, sample)?;
        heat += g.value(obj.heatmap).item()?;
        off += g.value(obj.offset).item()?;
        let scaled = g.scale(obj.total, scale)?;
        for (name, grad) in g.backward(scaled)?.params() {
            let acc = grads.get_mut(&name).expect("bound names come from the store");
            for (a, v) in acc.iter_mut().zip(grad.data()) {
                *a += v;
            }
        }
    }
    let breakdown = total_loss(heat * scale, off * scale, loss.lambda_heatmap);
    let grads = grads
        .into_iter()
        .map(|(name, data)| {
            let shape = store.get(&name)?.shape().to_vec();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok((breakdown, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub heatmap_loss: f64,
    pub offset_loss: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub optim: OptimState,
    /// Loss before each update.
    pub history: Vec<StepRecord>,
}

/// Full-batch when the dataset fits in one batch; otherwise seeded
/// per-epoch shuffles cut into consecutive batches.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if n > batch {
            b.order.shuffle(&mut b.rng);
        }
        b
    }

    fn next(&mut self) -> Vec<usize> {
        if self.order.len() == self.batch {
            return self.order.clone();
        }
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    params: ParamStore,
    samples: &[PreparedSample],
) -> Result<TrainOutcome> {
    train_with(model, config, params, samples, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    model: &ModelConfig,
    config: &TrainConfig,
    mut params: ParamStore,
    samples: &[PreparedSample],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut optim = OptimState::new();
    let mut history = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(TrainOutcome { params, optim, history });
    }
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut batcher = Batcher::new(samples.len(), config.batch_size, config.seed);
    for step in 0..config.steps {
        let lr = lr_schedule(step, config.steps, config.base_lr);
        let batch: Vec<&PreparedSample> = batcher.next().into_iter().map(|i| &samples[i]).collect();
        let (loss, grads) = batch_gradients(&params, model, &config.loss, &batch).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss:?}"),
            });
        }
        let record = StepRecord {
            step,
            heatmap_loss: loss.heatmap,
            offset_loss: loss.offset,
            total: loss.total,
            lr,
        };
        on_step(&record);
        history.push(record);
        adam_step(&mut params, &grads, &mut optim, lr)?;
    }
    Ok(TrainOutcome { params, optim, history })
}

/// CSV with header `step,heatmap_loss,offset_loss,total,lr`.
pub fn write_history_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_is_full_batch_when_small() {
        let mut b = Batcher::new(5, 8, 1);
        assert_eq!(b.next(), vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batcher_covers_epoch() {
        let mut b = Batcher::new(12, 4, 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        let rec = StepRecord { step: 0, heatmap_loss: 0.5, offset_loss: 0.25, total: 1.25, lr: 0.001 };
        write_history_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,heatmap_loss,offset_loss,total,lr\n0,0.5,0.25,1.25,0.001\n");
    }
}
