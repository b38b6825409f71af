use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, NoiseKind, NoiseSpec};
use super::dataset::{load_dataset, synth_dataset, Dataset, SceneSample};
use super::eval::{evaluate, EvalSet, Evaluation, MetricsRow};
use crate::dsfr::AblationFlags;
use crate::encoders::{perturb_prompt, stable_hash, PromptNoise, PromptSet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::init_params;
use crate::training::{train_with, Checkpoint, StepRecord};

/// Loads `config.data` when set, otherwise generates the dataset from the seed.
pub fn dataset_for(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.data {
        Some(dir) => load_dataset(dir),
        None => synth_dataset(
            config.seed,
            config.splits.category_count(),
            config.instances_per_category + config.heldout_instances,
        ),
    }
}

/// Named evaluation subsets implied by a config.
pub fn splits(config: &ExperimentConfig, ds: &Dataset) -> Vec<(&'static str, Vec<SceneSample>)> {
    let k = config.instances_per_category;
    let mut out = vec![("train", ds.select(&config.splits.train, 0..k))];
    if config.heldout_instances > 0 {
        out.push(("heldout", ds.select(&config.splits.train, k..k + config.heldout_instances)));
    }
    for (name, cats) in [("val", &config.splits.val), ("test", &config.splits.test)] {
        let scenes = ds.select(cats, 0..usize::MAX);
        if !scenes.is_empty() {
            out.push((name, scenes));
        }
    }
    out
}

fn instance_range(config: &ExperimentConfig, held_out: bool) -> Range<usize> {
    let k = config.instances_per_category;
    if held_out {
        k..k + config.heldout_instances
    } else {
        0..k
    }
}

pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

/// Trains on the training categories' first `instances_per_category` instances.
pub fn train_experiment(
    config: &ExperimentConfig,
    ds: &Dataset,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainedModel> {
    config.validate()?;
    let scenes = ds.select(&config.splits.train, instance_range(config, false));
    if scenes.is_empty() {
        return Err(Error::Input("dataset holds no training scenes for this config".into()));
    }
    let set = EvalSet::new(scenes, &config.model)?;
    let params = init_params(&config.model, config.seed)?;
    let out = train_with(&config.model, &config.train, params, &set.prepared, on_step)?;
    Ok(TrainedModel {
        checkpoint: Checkpoint {
            metadata: config.to_text(),
            params: out.params,
            optim: out.optim,
        },
        history: out.history,
    })
}

/// Config stored in a checkpoint, after checking the weights fit it.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::parse(&ckpt.metadata)?;
    check_compatible(&ckpt.params, &config)?;
    Ok(config)
}

/// Every parameter the config's architecture expects must exist with the right shape.
pub fn check_compatible(params: &ParamStore, config: &ExperimentConfig) -> Result<()> {
    let expected = init_params(&config.model, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::Config(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, config expects {}",
            params.len(),
            expected.len()
        )));
    }
    Ok(())
}

/// One row per split implied by the checkpoint's config.
pub fn eval_checkpoint(ckpt: &Checkpoint, ds: &Dataset, thresholds: &[f64], config_id: &str) -> Result<Vec<MetricsRow>> {
    let config = checkpoint_config(ckpt)?;
    let mut rows = Vec::new();
    for (split, scenes) in splits(&config, ds) {
        if scenes.is_empty() {
            continue;
        }
        let set = EvalSet::new(scenes, &config.model)?;
        rows.push(evaluate(&ckpt.params, &config.model, &config.loss(), &set, thresholds, config_id, split)?.row);
    }
    if rows.is_empty() {
        return Err(Error::Input("dataset holds no scenes for the checkpoint's splits".into()));
    }
    Ok(rows)
}

pub const ABLATIONS: [(&str, AblationFlags); 4] = [
    ("full", AblationFlags { use_hcmi: true, use_dsfr: true, use_learnable_weights: true }),
    ("no-hcmi", AblationFlags { use_hcmi: false, use_dsfr: true, use_learnable_weights: true }),
    ("no-dsfr", AblationFlags { use_hcmi: true, use_dsfr: false, use_learnable_weights: true }),
    ("no-lw", AblationFlags { use_hcmi: true, use_dsfr: true, use_learnable_weights: false }),
];

pub struct AblationRun {
    pub label: &'static str,
    pub config: ExperimentConfig,
    pub checkpoint: Checkpoint,
    pub row: MetricsRow,
}

/// Trains every variant with the base config's seed and data, scoring each on
/// held-out instances when the config has any, otherwise on the training set.
pub fn run_ablation(
    base: &ExperimentConfig,
    thresholds: &[f64],
    mut on_step: impl FnMut(&str, &StepRecord),
) -> Result<Vec<AblationRun>> {
    let ds = dataset_for(base)?;
    let held_out = base.heldout_instances > 0;
    let split = if held_out { "heldout" } else { "train" };
    let scenes = ds.select(&base.splits.train, instance_range(base, held_out));
    let mut runs = Vec::with_capacity(ABLATIONS.len());
    for (label, flags) in ABLATIONS {
        let config = base.with_flags(flags);
        let trained = train_experiment(&config, &ds, |r| on_step(label, r))?;
        let set = EvalSet::new(scenes.clone(), &config.model)?;
        let row = evaluate(&trained.checkpoint.params, &config.model, &config.loss(), &set, thresholds, label, split)?.row;
        runs.push(AblationRun {
            label,
            config,
            checkpoint: trained.checkpoint,
            row,
        });
    }
    Ok(runs)
}

/// Applies `noise` to each scene's prompts. The per-scene decision and the
/// perturbation are seeded by `seed` and the scene id.
pub fn apply_noise(scenes: &[SceneSample], noise: NoiseSpec, descriptions: &[String], seed: u64) -> Result<Vec<SceneSample>> {
    scenes
        .iter()
        .map(|scene| {
            let mut out = scene.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&scene.id.to_le_bytes()));
            match noise.kind {
                NoiseKind::None => {}
                NoiseKind::ClassSubstitute => {
                    if rng.random_bool(noise.rate) {
                        let category = perturb_prompt(&scene.prompts.category, PromptNoise::ClassSubstitute(descriptions), rng.random())?;
                        out.prompts = PromptSet::new(category, scene.prompts.keypoints.clone())?;
                    }
                }
                NoiseKind::Typo => {
                    let keypoints = scene
                        .prompts
                        .keypoints
                        .iter()
                        .map(|k| {
                            if rng.random_bool(noise.rate) {
                                perturb_prompt(k, PromptNoise::Typo, rng.random())
                            } else {
                                Ok(k.clone())
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    out.prompts = PromptSet::new(scene.prompts.category.clone(), keypoints)?;
                }
            }
            Ok(out)
        })
        .collect()
}

pub struct NoiseReport {
    pub noise: NoiseSpec,
    pub clean: Evaluation,
    pub noisy: Evaluation,
    /// Fraction of samples whose class embedding differs bitwise from the clean one.
    pub cls_changed: f64,
    /// Fraction of keypoint prompts that were altered.
    pub keypoint_prompts_changed: f64,
    /// Largest Levenshtein distance between a clean and a perturbed prompt.
    pub max_edit_distance: usize,
}

impl NoiseReport {
    /// `noisy − clean` per threshold.
    pub fn pck_deltas(&self) -> Vec<f64> {
        self.noisy.row.pck.iter().zip(&self.clean.row.pck).map(|(n, c)| n - c).collect()
    }

    /// Two-column `metric,value` CSV.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut put = |k: String, v: String| w.write_record([k, v]);
        put("kind".into(), self.noise.kind.as_str().into())?;
        put("rate".into(), self.noise.rate.to_string())?;
        for (t, d) in self.clean.row.thresholds.iter().zip(self.pck_deltas()) {
            put(format!("pck_delta@{t}"), d.to_string())?;
        }
        put("alpha_clean".into(), opt(self.clean.alpha_mean))?;
        put("alpha_noisy".into(), opt(self.noisy.alpha_mean))?;
        put("beta_clean".into(), opt(self.clean.beta_mean))?;
        put("beta_noisy".into(), opt(self.noisy.beta_mean))?;
        put("cls_changed".into(), self.cls_changed.to_string())?;
        put("keypoint_prompts_changed".into(), self.keypoint_prompts_changed.to_string())?;
        put("max_edit_distance".into(), self.max_edit_distance.to_string())?;
        w.flush()?;
        Ok(())
    }
}

/// Clean versus perturbed prompts on the checkpoint's training categories
/// (held-out instances when configured).
pub fn run_noise_suite(ckpt: &Checkpoint, ds: &Dataset, noise: NoiseSpec, thresholds: &[f64]) -> Result<NoiseReport> {
    if !(0.0..=1.0).contains(&noise.rate) {
        return Err(Error::Config("noise rate must lie in [0, 1]".into()));
    }
    let config = checkpoint_config(ckpt)?;
    let held_out = config.heldout_instances > 0;
    let split = if held_out { "heldout" } else { "train" };
    let scenes = ds.select(&config.splits.train, instance_range(&config, held_out));
    if scenes.is_empty() {
        return Err(Error::Input("dataset holds no scenes for the checkpoint's splits".into()));
    }
    let noisy_scenes = apply_noise(&scenes, noise, &ds.descriptions(), config.seed)?;

    let mut cls_changed = 0usize;
    let (mut kp_changed, mut kp_total, mut max_edit) = (0usize, 0usize, 0usize);
    for (c, n) in scenes.iter().zip(&noisy_scenes) {
        let pairs = std::iter::once((&c.prompts.category, &n.prompts.category))
            .chain(c.prompts.keypoints.iter().zip(&n.prompts.keypoints));
        for (a, b) in pairs {
            max_edit = max_edit.max(strsim::levenshtein(a, b));
        }
        kp_total += c.prompts.len();
        kp_changed += c.prompts.keypoints.iter().zip(&n.prompts.keypoints).filter(|(a, b)| a != b).count();
    }
    let clean_set = EvalSet::new(scenes, &config.model)?;
    let noisy_set = EvalSet::new(noisy_scenes, &config.model)?;
    for (c, n) in clean_set.prepared.iter().zip(&noisy_set.prepared) {
        let same = c.bundle.e_cls.data().iter().zip(n.bundle.e_cls.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        cls_changed += usize::from(!same);
    }
    let loss = config.loss();
    let clean = evaluate(&ckpt.params, &config.model, &loss, &clean_set, thresholds, "clean", split)?;
    let noisy_id = format!("{}@{}", noise.kind.as_str(), noise.rate);
    let noisy = evaluate(&ckpt.params, &config.model, &loss, &noisy_set, thresholds, &noisy_id, split)?;
    Ok(NoiseReport {
        noise,
        clean,
        noisy,
        cls_changed: cls_changed as f64 / clean_set.len() as f64,
        keypoint_prompts_changed: kp_changed as f64 / kp_total as f64,
        max_edit_distance: max_edit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "seed=3\ndim=8\npatch=16\nencoder_layers=1\ndecoder_layers=1\nsteps=2\nbatch_size=2\n\
             train_categories=0,1\nval_categories=2\ntest_categories=3\nheldout_instances=1",
        )
        .unwrap()
    }

    #[test]
    fn split_rows() {
        let config = tiny();
        let ds = dataset_for(&config).unwrap();
        let trained = train_experiment(&config, &ds, |_| {}).unwrap();
        assert_eq!(trained.history.len(), 2);
        let rows = eval_checkpoint(&trained.checkpoint, &ds, &[0.2], "tiny").unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.split.as_str()).collect();
        assert_eq!(names, ["train", "heldout", "val", "test"]);
        assert_eq!(rows[0].samples, 2);
        assert_eq!(rows[2].samples, 2);
    }

    #[test]
    fn incompatible_checkpoint_is_config_error() {
        let config = tiny();
        let ds = dataset_for(&config).unwrap();
        let mut ckpt = train_experiment(&config, &ds, |_| {}).unwrap().checkpoint;
        ckpt.metadata = ckpt.metadata.replace("dim=8", "dim=12");
        assert!(matches!(eval_checkpoint(&ckpt, &ds, &[0.2], "x"), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_variants_and_bypass_names() {
        let runs = run_ablation(&tiny(), &[0.2], |_, _| {}).unwrap();
        let labels: Vec<&str> = runs.iter().map(|r| r.label).collect();
        assert_eq!(labels, ["full", "no-hcmi", "no-dsfr", "no-lw"]);
        assert!(runs.iter().all(|r| r.config.seed == 3 && r.row.split == "heldout"));
        let names = |i: usize| runs[i].checkpoint.params.names().map(str::to_owned).collect::<Vec<_>>();
        assert!(names(2).iter().any(|n| n.starts_with("bypass.")));
        assert!(!names(2).iter().any(|n| n.starts_with("dsfr.")));
        assert!(!names(0).iter().any(|n| n.starts_with("bypass.")));
        assert!(!names(1).iter().any(|n| n.starts_with("hcmi.")));
        assert!(!names(3).iter().any(|n| n.contains("gate")));
    }

    #[test]
    fn noise_suite_plumbing() {
        let config = tiny();
        let ds = dataset_for(&config).unwrap();
        let ckpt = train_experiment(&config, &ds, |_| {}).unwrap().checkpoint;
        let none = run_noise_suite(&ckpt, &ds, NoiseSpec { kind: NoiseKind::ClassSubstitute, rate: 0.0 }, &[0.2]).unwrap();
        assert_eq!(none.cls_changed, 0.0);
        assert_eq!(none.clean.row.pck, none.noisy.row.pck);
        assert_eq!(none.clean.row.total_loss.to_bits(), none.noisy.row.total_loss.to_bits());

        let class = run_noise_suite(&ckpt, &ds, NoiseSpec { kind: NoiseKind::ClassSubstitute, rate: 1.0 }, &[0.2]).unwrap();
        assert_eq!(class.cls_changed, 1.0);
        assert_eq!(class.keypoint_prompts_changed, 0.0);

        let typo = run_noise_suite(&ckpt, &ds, NoiseSpec { kind: NoiseKind::Typo, rate: 1.0 }, &[0.2]).unwrap();
        assert_eq!(typo.keypoint_prompts_changed, 1.0);
        assert!(typo.max_edit_distance >= 1 && typo.max_edit_distance <= 2);
        assert_eq!(typo.cls_changed, 0.0);

        let mut buf = Vec::new();
        typo.write_summary_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("max_edit_distance,"));
    }
}
