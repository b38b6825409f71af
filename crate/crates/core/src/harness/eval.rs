use std::io::Write;

use super::dataset::SceneSample;
use super::pck::pck;
use crate::encoders::build_bundle;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::ModelConfig;
use crate::tensor::{Graph, Tensor};
use crate::training::{sample_objective, LossConfig, PreparedSample};

/// Runs the frozen encoders over a scene's image and prompts.
pub fn prepare(scene: &SceneSample, model: &ModelConfig) -> Result<PreparedSample> {
    Ok(PreparedSample {
        image: scene.image.clone(),
        bundle: build_bundle(&scene.prompts, &scene.image, model.encoder_dims())?,
        skeleton: scene.skeleton.clone(),
        keypoints: scene.keypoint_tensor(),
    })
}

/// Scenes paired with their encoded form.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub scenes: Vec<SceneSample>,
    pub prepared: Vec<PreparedSample>,
}

impl EvalSet {
    pub fn new(scenes: Vec<SceneSample>, model: &ModelConfig) -> Result<Self> {
        let prepared = scenes.iter().map(|s| prepare(s, model)).collect::<Result<_>>()?;
        Ok(EvalSet { scenes, prepared })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Aggregate metrics for one (config, split) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub config_id: String,
    pub split: String,
    pub samples: usize,
    pub thresholds: Vec<f64>,
    /// Mean PCK over samples, one per threshold.
    pub pck: Vec<f64>,
    /// Mean over `pck`; `None` when no thresholds were requested.
    pub mean_pck: Option<f64>,
    pub heatmap_loss: f64,
    pub offset_loss: f64,
    pub total_loss: f64,
}

impl MetricsRow {
    pub fn pck_at(&self, tau: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == tau).map(|i| self.pck[i])
    }
}

/// Metrics plus per-sample predictions and gate statistics.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub row: MetricsRow,
    pub predictions: Vec<Tensor>,
    /// Mean image-stream gate over all joints and samples, when gates exist.
    pub alpha_mean: Option<f64>,
    pub beta_mean: Option<f64>,
}

fn gate_mean(sum: f64, count: usize) -> Option<f64> {
    (count > 0).then(|| sum / count as f64)
}

/// Scores `scenes` with the given weights. Samples are visited in order so the
/// result is bitwise reproducible.
pub fn evaluate(
    store: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    set: &EvalSet,
    thresholds: &[f64],
    config_id: &str,
    split: &str,
) -> Result<Evaluation> {
    let (samples, scenes) = (&set.prepared, &set.scenes);
    if samples.is_empty() || samples.len() != scenes.len() {
        return Err(Error::Input("evaluation needs a non-empty, fully prepared sample set".into()));
    }
    let mut pck_sum = vec![0.0; thresholds.len()];
    let (mut heat, mut off, mut total) = (0.0, 0.0, 0.0);
    let (mut alpha, mut beta, mut alpha_n, mut beta_n) = (0.0, 0.0, 0, 0);
    let mut predictions = Vec::with_capacity(samples.len());
    for (sample, scene) in samples.iter().zip(scenes) {
        let mut g = Graph::new();
        let obj = sample_objective(&mut g, store, model, loss, sample)?;
        heat += g.value(obj.heatmap).item()?;
        off += g.value(obj.offset).item()?;
        total += g.value(obj.total).item()?;
        if let Some(a) = obj.pass.alpha {
            alpha += g.value(a).sum();
            alpha_n += g.value(a).len();
        }
        if let Some(b) = obj.pass.beta {
            beta += g.value(b).sum();
            beta_n += g.value(b).len();
        }
        let pred = obj.pass.keypoints(&g, model.offset_radius)?;
        for (acc, &tau) in pck_sum.iter_mut().zip(thresholds) {
            *acc += pck(&pred, &sample.keypoints, &scene.bbox, tau)?;
        }
        predictions.push(pred);
    }
    let n = samples.len() as f64;
    let pck: Vec<f64> = pck_sum.into_iter().map(|s| s / n).collect();
    let mean_pck = (!pck.is_empty()).then(|| pck.iter().sum::<f64>() / pck.len() as f64);
    Ok(Evaluation {
        row: MetricsRow {
            config_id: config_id.to_owned(),
            split: split.to_owned(),
            samples: samples.len(),
            thresholds: thresholds.to_vec(),
            pck,
            mean_pck,
            heatmap_loss: heat / n,
            offset_loss: off / n,
            total_loss: total / n,
        },
        predictions,
        alpha_mean: gate_mean(alpha, alpha_n),
        beta_mean: gate_mean(beta, beta_n),
    })
}

/// Header is `config,split,samples,pck@τ...,mean_pck,heatmap_loss,offset_loss,total_loss`.
/// All rows must share one threshold list.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let thresholds = rows.first().map(|r| r.thresholds.clone()).unwrap_or_default();
    if rows.iter().any(|r| r.thresholds != thresholds) {
        return Err(Error::Input("metrics rows use different thresholds".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["config".to_owned(), "split".to_owned(), "samples".to_owned()];
    header.extend(thresholds.iter().map(|t| format!("pck@{t}")));
    header.extend(["mean_pck", "heatmap_loss", "offset_loss", "total_loss"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.config_id.clone(), r.split.clone(), r.samples.to_string()];
        rec.extend(r.pck.iter().map(f64::to_string));
        rec.push(r.mean_pck.map(|m| m.to_string()).unwrap_or_default());
        rec.extend([r.heatmap_loss, r.offset_loss, r.total_loss].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let t: f64 = s
                .parse()
                .map_err(|_| Error::Input(format!("invalid threshold `{s}`")))?;
            if t > 0.0 && t.is_finite() {
                Ok(t)
            } else {
                Err(Error::Input(format!("threshold must be positive, got {s}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::synth_dataset;
    use crate::harness::pck::STANDARD_THRESHOLDS;
    use crate::pipeline::init_params;

    fn small_model() -> ModelConfig {
        ModelConfig {
            dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn run(thresholds: &[f64]) -> Evaluation {
        let model = small_model();
        let ds = synth_dataset(4, 3, 2).unwrap();
        let set = EvalSet::new(ds.samples, &model).unwrap();
        let store = init_params(&model, 1).unwrap();
        evaluate(&store, &model, &LossConfig::default(), &set, thresholds, "t", "train").unwrap()
    }

    #[test]
    fn pck_is_monotone_and_bounded() {
        let e = run(&STANDARD_THRESHOLDS);
        assert_eq!(e.row.samples, 6);
        for w in e.row.pck.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(e.row.pck.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(e.alpha_mean.is_some() && e.beta_mean.is_some());
    }

    #[test]
    fn empty_thresholds_give_loss_only_row() {
        let e = run(&[]);
        assert!(e.row.pck.is_empty());
        assert!(e.row.mean_pck.is_none());
        let mut buf = Vec::new();
        write_metrics_csv(&[e.row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "config,split,samples,mean_pck,heatmap_loss,offset_loss,total_loss");
        assert!(lines.next().unwrap().starts_with("t,train,6,,"));
    }

    #[test]
    fn csv_is_reproducible() {
        let write = || {
            let mut buf = Vec::new();
            write_metrics_csv(&[run(&[0.1, 0.2]).row], &mut buf).unwrap();
            buf
        };
        let a = write();
        assert_eq!(a, write());
        assert!(String::from_utf8(a).unwrap().starts_with("config,split,samples,pck@0.1,pck@0.2,mean_pck"));
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!(parse_thresholds("0.05, 0.2").unwrap(), vec![0.05, 0.2]);
        assert!(parse_thresholds("").unwrap().is_empty());
        assert!(parse_thresholds("0").is_err());
        assert!(parse_thresholds("x").is_err());
    }
}
