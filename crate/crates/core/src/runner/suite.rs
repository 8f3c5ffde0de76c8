use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, ModelSegmenter};
use super::report::{make_triptychs, ReportBundle, SummaryRow};
use super::train::train_model;
use super::{Guidance, TrainConfig};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::motion_cues::LabelNoise;
use crate::objectives::{AblationMode, LossBreakdown};
use crate::scenegen::{generate_sequence, read_dataset, spec_family, write_json_file, VideoSample};

/// Seed of the initial-slot draws during evaluation.
pub const EVAL_SEED: u64 = 0xE7A1;

/// Offset between the seeds of generated training and evaluation scenes.
const EVAL_SCENE_OFFSET: u64 = 1 << 20;

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<VideoSample>,
    pub eval: Vec<VideoSample>,
}

impl ExperimentData {
    /// Reads the configured dataset directories, generating whatever is not
    /// given from the scene template.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let d = &config.data;
        let generate = |count: usize, seed: u64| -> Result<Vec<VideoSample>> {
            spec_family(&d.scene, count, seed).iter().map(generate_sequence).collect()
        };
        let train = match &d.train_dir {
            Some(dir) => read_dataset(dir)?,
            None => generate(d.num_train, d.seed)?,
        };
        let eval = match &d.eval_dir {
            Some(dir) => read_dataset(dir)?,
            None => generate(d.num_eval, d.seed.wrapping_add(EVAL_SCENE_OFFSET))?,
        };
        Ok(Self { train, eval })
    }
}

/// A named training configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub report: MetricReport,
    pub losses: Vec<LossBreakdown>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub model: Option<Model<f32>>,
}

fn run_one(name: &str, config: TrainConfig, data: &ExperimentData, seed: u64) -> Result<ExperimentResult> {
    let started = Instant::now();
    let outcome = train_model(&config, &data.train)?;
    let segmenter = ModelSegmenter {
        model: &outcome.model,
        seed: EVAL_SEED,
    };
    let report = evaluate(&segmenter, &data.eval, config.eval_mode, config.frames_per_clip)?;
    if let Some(dir) = &config.output_dir {
        write_json_file(&dir.join("metrics.json"), &report)?;
    }
    Ok(ExperimentResult {
        name: name.to_string(),
        seed,
        config,
        report,
        losses: outcome.losses,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: outcome.checkpoint,
        model: Some(outcome.model),
    })
}

/// Trains and evaluates one configuration, as given.
pub fn train(config: &TrainConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    run_one("train", config.clone(), &data, config.seed)
}

/// Runs every experiment once per seed offset. Seed `s` shifts both the
/// training seed and the model initialization seed by `s`. With `out_dir`,
/// each run writes into `out_dir/<name>_seed<s>`.
pub fn run_experiments(
    experiments: &[Experiment],
    data: &ExperimentData,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentResult>> {
    let mut results = Vec::with_capacity(experiments.len() * seeds.len());
    for exp in experiments {
        for &s in seeds {
            let mut config = exp.config.clone();
            config.seed = config.seed.wrapping_add(s);
            config.model.seed = config.model.seed.wrapping_add(s);
            config.output_dir = out_dir.map(|d| d.join(format!("{}_seed{s}", exp.name)));
            results.push(run_one(&exp.name, config, data, s)?);
        }
    }
    Ok(results)
}

fn variant(base: &TrainConfig, name: &str, edit: impl FnOnce(&mut TrainConfig)) -> Experiment {
    let mut config = base.clone();
    edit(&mut config);
    Experiment {
        name: name.to_string(),
        config,
    }
}

/// The objective ablation: full model and the three loss variants.
pub fn ablation_experiments(base: &TrainConfig) -> Vec<Experiment> {
    [
        AblationMode::Full,
        AblationMode::NonmovingBg,
        AblationMode::FullMapReg,
        AblationMode::UnweightedBce,
    ]
    .into_iter()
    .map(|mode| variant(base, mode.name(), |c| c.loss.ablation_mode = mode))
    .collect()
}

/// The full model against the same architecture without a background slot
/// or foreground/background term.
pub fn baseline_experiments(base: &TrainConfig) -> Vec<Experiment> {
    [AblationMode::Full, AblationMode::NoBgSlot]
        .into_iter()
        .map(|mode| variant(base, mode.name(), |c| c.loss.ablation_mode = mode))
        .collect()
}

/// Noisy pseudo-labels (the base label noise), the same labels after the
/// top-tier filter, and clean ground-truth guidance.
pub fn noise_experiments(base: &TrainConfig) -> Vec<Experiment> {
    vec![
        variant(base, "estimated", |c| c.guidance = Guidance::Estimated),
        variant(base, "estimated_filtered", |c| c.guidance = Guidance::EstimatedFiltered),
        variant(base, "gt", |c| {
            c.guidance = Guidance::Gt;
            c.label_noise = LabelNoise::default();
        }),
    ]
}

pub fn run_ablation_suite(
    base: &TrainConfig,
    data: &ExperimentData,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentResult>> {
    run_experiments(&ablation_experiments(base), data, seeds, out_dir)
}

pub fn run_noise_study(
    base: &TrainConfig,
    data: &ExperimentData,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentResult>> {
    run_experiments(&noise_experiments(base), data, seeds, out_dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Objective ablation plus the no-background-slot baseline.
    Table5,
    /// Noisy, filtered and ground-truth guidance.
    Table6,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table5" => Ok(Suite::Table5),
            "table6" => Ok(Suite::Table6),
            other => Err(crate::error::Error::InvalidConfig(format!("unknown suite {other:?}"))),
        }
    }
}

impl Suite {
    pub fn experiments(self, base: &TrainConfig) -> Vec<Experiment> {
        match self {
            Suite::Table5 => {
                let mut exps = ablation_experiments(base);
                exps.extend(baseline_experiments(base).into_iter().filter(|e| e.name != "full"));
                exps
            }
            Suite::Table6 => noise_experiments(base),
        }
    }

    /// Experiments shown side by side in the qualitative previews.
    fn preview_pair(self) -> (&'static str, &'static str) {
        match self {
            Suite::Table5 => ("no_bg_slot", "full"),
            Suite::Table6 => ("estimated", "estimated_filtered"),
        }
    }
}

/// Runs a suite and assembles its report, with previews from the first seed.
pub fn run_suite(
    suite: Suite,
    base: &TrainConfig,
    data: &ExperimentData,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<ReportBundle> {
    let results = run_experiments(&suite.experiments(base), data, seeds, out_dir)?;
    let (left, right) = suite.preview_pair();
    let find = |name: &str| results.iter().find(|r| r.name == name).and_then(|r| r.model.as_ref());
    let previews = match (find(left), find(right)) {
        (Some(a), Some(b)) => make_triptychs(
            &data.eval,
            (left, &ModelSegmenter { model: a, seed: EVAL_SEED }),
            (right, &ModelSegmenter { model: b, seed: EVAL_SEED }),
            PREVIEW_COUNT,
            base.frames_per_clip,
        )?,
        _ => Vec::new(),
    };
    Ok(ReportBundle {
        summary: summarize(&results),
        results,
        previews,
    })
}

const PREVIEW_COUNT: usize = 4;

/// Mean metrics per experiment name, in order of first appearance.
pub fn summarize(results: &[ExperimentResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in results {
        let row = match rows.iter_mut().position(|row| row.name == r.name) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(SummaryRow {
                    name: r.name.clone(),
                    ..Default::default()
                });
                rows.last_mut().unwrap()
            }
        };
        row.seeds.push(r.seed);
        row.fg_ari_per_seed.push(r.report.fg_ari);
        row.all_ari_per_seed.push(r.report.all_ari);
        row.jaccard_fg += r.report.jaccard_fg;
        row.jaccard_bg += r.report.jaccard_bg;
    }
    for row in &mut rows {
        let n = row.seeds.len() as f64;
        row.fg_ari = row.fg_ari_per_seed.iter().sum::<f64>() / n;
        row.all_ari = row.all_ari_per_seed.iter().sum::<f64>() / n;
        row.jaccard_fg /= n;
        row.jaccard_bg /= n;
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        let mut c = TrainConfig::preset("desk").unwrap();
        c.steps = 2;
        c.batch_size = 2;
        c.frames_per_clip = 2;
        c.data.num_train = 2;
        c.data.num_eval = 2;
        c.data.scene.num_frames = 3;
        c
    }

    #[test]
    fn experiment_lists_differ_only_where_intended() {
        let base = quick();
        let ablation = ablation_experiments(&base);
        let names: Vec<&str> = ablation.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["full", "nonmoving_bg", "full_map_reg", "unweighted_bce"]);
        for e in &ablation {
            let mut c = e.config.clone();
            c.loss.ablation_mode = base.loss.ablation_mode;
            assert_eq!(c, base);
        }
        let noise = noise_experiments(&base);
        assert_eq!(noise[2].config.guidance, Guidance::Gt);
        assert_eq!(baseline_experiments(&base)[1].config.loss.ablation_mode, AblationMode::NoBgSlot);
        let table5: Vec<String> = Suite::Table5.experiments(&base).into_iter().map(|e| e.name).collect();
        assert_eq!(table5, ["full", "nonmoving_bg", "full_map_reg", "unweighted_bce", "no_bg_slot"]);
        assert_eq!("table6".parse::<Suite>().unwrap(), Suite::Table6);
        assert!("table7".parse::<Suite>().is_err());
    }

    #[test]
    fn suite_runs_are_reproducible() {
        let base = quick();
        let data = ExperimentData::load(&base).unwrap();
        assert_eq!(data.train.len(), 2);
        assert_ne!(data.train[0].spec.seed, data.eval[0].spec.seed);
        let exps = baseline_experiments(&base);
        let a = run_experiments(&exps, &data, &[0, 1], None).unwrap();
        let b = run_experiments(&exps, &data, &[0, 1], None).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                serde_json::to_string(&x.report).unwrap(),
                serde_json::to_string(&y.report).unwrap()
            );
        }
        assert!(a[2].report.largest_segment_background);
        let rows = summarize(&a);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].seeds, vec![0, 1]);
        assert!((rows[0].fg_ari - (a[0].report.fg_ari + a[1].report.fg_ari) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn suite_bundle_has_previews() {
        let base = quick();
        let data = ExperimentData::load(&base).unwrap();
        let bundle = run_suite(Suite::Table6, &base, &data, &[0], None).unwrap();
        assert_eq!(bundle.results.len(), 3);
        assert_eq!(bundle.summary.len(), 3);
        assert_eq!(bundle.previews.len(), 2);
        assert_eq!(bundle.previews[0].model_name, "estimated_filtered");
    }
}
