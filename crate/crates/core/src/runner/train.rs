use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Guidance, TrainConfig};
use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{image_batch, CheckpointInfo, Model};
use crate::motion_cues::{
    extract_from_sample, filter_top_tier, gt_motion_masks, inject_label_noise, resize_set, BinaryMask,
};
use crate::objectives::{total_loss, FrameSupervision, LossBreakdown, LossConfig};
use crate::scenegen::VideoSample;

/// Per-frame guidance masks for one sequence, at attention resolution.
pub fn prepare_guidance(sample: &VideoSample, config: &TrainConfig) -> Result<Vec<Vec<BinaryMask>>> {
    let set = match config.guidance {
        Guidance::Gt => gt_motion_masks(sample),
        Guidance::Estimated | Guidance::EstimatedFiltered => {
            let mut set = extract_from_sample(sample, config.flow_thresholds);
            if !config.label_noise.is_clean() {
                // Pseudo-labels are a fixed property of the sequence, not of the run.
                set = inject_label_noise(&set, &config.label_noise, sample.spec.seed ^ 0x5EED_1ABE1)?;
            }
            if config.guidance == Guidance::EstimatedFiltered {
                set = filter_top_tier(&set, sample.height);
            }
            set
        }
    };
    let (gh, gw) = config.model.grid(sample.height, sample.width)?;
    let resized = resize_set(&set, gh, gw)?;
    Ok(resized
        .frames
        .into_iter()
        .map(|masks| masks.into_iter().map(|m| m.mask).collect())
        .collect())
}

/// First-order optimizer with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], step_size: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let lr = (step_size * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// A clip of the batch: sequence index and first frame.
pub type Clip = (usize, usize);

/// Owns the model and optimizer state for one training run.
pub struct Trainer<'a> {
    pub model: Model<f32>,
    config: &'a TrainConfig,
    samples: &'a [VideoSample],
    guidance: Vec<Vec<Vec<BinaryMask>>>,
    adam: Adam,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, samples: &'a [VideoSample]) -> Result<Self> {
        config.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("training needs at least one sequence".into()))?;
        for s in samples {
            if (s.height, s.width) != (first.height, first.width) {
                return Err(Error::Shape(format!(
                    "sequences of {}x{} and {}x{} cannot share a batch",
                    first.height, first.width, s.height, s.width
                )));
            }
            if s.num_frames < config.frames_per_clip {
                return Err(Error::Shape(format!(
                    "a sequence has {} frames but clips need {}",
                    s.num_frames, config.frames_per_clip
                )));
            }
        }
        let model = Model::<f32>::new(config.resolved_model())?;
        model.config.grid(first.height, first.width)?;
        let guidance = samples
            .iter()
            .map(|s| prepare_guidance(s, config))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            model,
            config,
            samples,
            guidance,
            adam,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> (Vec<Clip>, Tensor<f32>) {
        let t = self.config.frames_per_clip;
        let clips = (0..self.config.batch_size)
            .map(|_| {
                let s = rng.random_range(0..self.samples.len());
                (s, rng.random_range(0..=self.samples[s].num_frames - t))
            })
            .collect();
        let noise = self.model.sample_slot_noise(self.config.batch_size, rng);
        (clips, noise)
    }

    /// Loss and parameter gradients on one batch, without updating.
    pub fn loss_and_gradients(&self, clips: &[Clip], noise: Tensor<f32>) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
        let t_len = self.config.frames_per_clip;
        let frames: Vec<Vec<&[f32]>> = (0..t_len)
            .map(|t| clips.iter().map(|&(s, start)| self.samples[s].frame(start + t)).collect())
            .collect();
        let masks: Vec<Vec<&[BinaryMask]>> = (0..t_len)
            .map(|t| clips.iter().map(|&(s, start)| self.guidance[s][start + t].as_slice()).collect())
            .collect();
        let (h, w) = (self.samples[0].height, self.samples[0].width);
        let (breakdown, grads) = batch_loss(&self.model, &frames, &masks, (h, w), noise, &self.config.loss)?;
        if !breakdown.total.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                step: self.step,
                detail: format!("non-finite loss or gradient {breakdown:?} on batch {} with clips {clips:?}", self.step),
            });
        }
        Ok((breakdown, grads))
    }

    /// One optimizer update on the given batch.
    pub fn step_on(&mut self, clips: &[Clip], noise: Tensor<f32>) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.loss_and_gradients(clips, noise)?;
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.adam.step(&mut self.model.params, &grads, self.config.step_size * warm);
        self.step += 1;
        Ok(breakdown)
    }
}

/// Total loss of `model` on a batch of clips and its gradient with respect to
/// every parameter. `frames[t][b]` is frame `t` of clip `b` (HWC) and
/// `masks[t][b]` its guidance at attention resolution.
pub fn batch_loss<F: Scalar>(
    model: &Model<F>,
    frames: &[Vec<&[f32]>],
    masks: &[Vec<&[BinaryMask]>],
    (h, w): (usize, usize),
    noise: Tensor<F>,
    loss_config: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<F>>)> {
    let t_len = frames.len();
    let b_len = frames.first().map_or(0, Vec::len);
    if t_len == 0 || b_len == 0 || masks.len() != t_len {
        return Err(Error::Shape(format!("batch of {t_len} frames with {} mask sets", masks.len())));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let inputs: Vec<Var> = frames.iter().map(|batch| g.constant(image_batch(batch, h, w))).collect();
    let slots = model.initial_slots(&mut g, &p, noise);
    let outputs = model.forward_sequence(&mut g, &p, &inputs, slots)?;

    let to64 = |v: &[F]| v.iter().map(|x| x.to_f64()).collect::<Vec<f64>>();
    let mut reconstruction = Vec::new();
    let mut target = Vec::new();
    let mut attention = Vec::with_capacity(t_len * b_len);
    for (out, &frame) in outputs.iter().zip(&inputs) {
        reconstruction.extend(to64(&g.value(out.reconstruction).data));
        target.extend(to64(&g.value(frame).data));
        let a = &g.value(out.attention).data;
        attention.extend(a.chunks_exact(a.len() / b_len).map(to64));
    }
    let supervision: Vec<FrameSupervision<'_>> = (0..t_len * b_len)
        .map(|i| FrameSupervision {
            attention: &attention[i],
            masks: masks[i / b_len][i % b_len],
        })
        .collect();
    let loss = total_loss(&supervision, model.config.total_slots(), &reconstruction, &target, loss_config)?;

    let recon_per_frame = reconstruction.len() / t_len;
    let cast = |v: &[f64]| v.iter().map(|&x| F::from_f64(x)).collect::<Vec<F>>();
    let seeds: Vec<(Var, Vec<F>)> = outputs
        .iter()
        .enumerate()
        .flat_map(|(t, out)| {
            let attn: Vec<F> = loss.attention_grads[t * b_len..(t + 1) * b_len]
                .iter()
                .flat_map(|a| cast(a))
                .collect();
            let recon = cast(&loss.reconstruction_grad[t * recon_per_frame..(t + 1) * recon_per_frame]);
            [(out.attention, attn), (out.reconstruction, recon)]
        })
        .collect();
    let seed_refs: Vec<(Var, &[F])> = seeds.iter().map(|(v, s)| (*v, s.as_slice())).collect();
    g.backward(&seed_refs);
    let grads = p
        .vars
        .iter()
        .zip(&model.params)
        .map(|(&v, param)| g.grad(v).map_or_else(|| vec![F::ZERO; param.len()], <[F]>::to_vec))
        .collect();
    Ok((loss.breakdown, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains on in-memory sequences. With `output_dir` set, writes
/// `losses.jsonl` (one breakdown per step) and `model.ckpt`.
pub fn train_model(config: &TrainConfig, samples: &[VideoSample]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let out_dir = config.output_dir.as_deref();
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("losses.jsonl");
            Some((BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let context = serde_json::to_value(config).unwrap_or_default();
    let checkpoint = out_dir.map(|d| d.join("model.ckpt"));
    for step in 0..config.steps {
        let (clips, noise) = trainer.sample_batch(&mut rng);
        let breakdown = trainer.step_on(&clips, noise)?;
        if let Some((writer, path)) = log.as_mut() {
            let line = serde_json::to_string(&StepLog { step, loss: breakdown }).unwrap_or_default();
            writeln!(writer, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        losses.push(breakdown);
        let periodic = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
        if let (true, Some(path)) = (periodic, checkpoint.as_ref()) {
            let info = CheckpointInfo {
                step: (step + 1) as u64,
                context: context.clone(),
            };
            trainer.model.save(path, &info)?;
        }
    }
    if let Some((mut writer, path)) = log {
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = checkpoint.as_ref() {
        let info = CheckpointInfo {
            step: config.steps as u64,
            context,
        };
        trainer.model.save(path, &info)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        losses,
        checkpoint,
    })
}

#[derive(serde::Serialize)]
struct StepLog {
    step: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_sequence, spec_family};

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::preset("desk").unwrap();
        c.batch_size = 2;
        c.frames_per_clip = 2;
        c.steps = 3;
        c.data.scene.num_frames = 4;
        c
    }

    fn samples(config: &TrainConfig, n: usize) -> Vec<VideoSample> {
        spec_family(&config.data.scene, n, 5)
            .iter()
            .map(|s| generate_sequence(s).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let mut config = tiny_config();
        config.steps = 0;
        let data = samples(&config, 2);
        let out = train_model(&config, &data).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(out.model.params, Model::<f32>::new(config.resolved_model()).unwrap().params);
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config();
        let data = samples(&config, 3);
        let a = train_model(&config, &data).unwrap();
        let b = train_model(&config, &data).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.losses.iter().all(|l| (l.total - (l.mse + l.wbce + l.fgbg)).abs() < 1e-9));
    }

    #[test]
    fn writes_loss_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.output_dir = Some(dir.path().to_path_buf());
        config.checkpoint_every = 2;
        let data = samples(&config, 2);
        let out = train_model(&config, &data).unwrap();
        let log = fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["step", "mse", "wbce", "fgbg", "total"] {
            assert!(first.get(key).is_some(), "{key} missing from {first}");
        }
        let (loaded, info) = Model::<f32>::load(out.checkpoint.unwrap()).unwrap();
        assert_eq!(info.step, 3);
        assert_eq!(loaded.params, out.model.params);
    }

    #[test]
    fn rejects_short_or_mismatched_sequences() {
        let config = tiny_config();
        let mut data = samples(&config, 2);
        data[1].num_frames = 1;
        assert!(matches!(Trainer::new(&config, &data), Err(Error::Shape(_))));
        assert!(matches!(Trainer::new(&config, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn guidance_variants() {
        let mut config = tiny_config();
        let sample = &samples(&config, 1)[0];
        let (gh, gw) = config.model.grid(sample.height, sample.width).unwrap();
        let clean = prepare_guidance(sample, &config).unwrap();
        assert_eq!(clean.len(), sample.num_frames);
        assert!(clean.iter().flatten().all(|m| (m.height, m.width) == (gh, gw)));

        config.guidance = Guidance::Gt;
        assert_eq!(prepare_guidance(sample, &config).unwrap().len(), sample.num_frames);

        config.guidance = Guidance::Estimated;
        config.label_noise.spurious_rate = 3.0;
        let noisy = prepare_guidance(sample, &config).unwrap();
        assert_eq!(noisy, prepare_guidance(sample, &config).unwrap());
        config.guidance = Guidance::EstimatedFiltered;
        let filtered = prepare_guidance(sample, &config).unwrap();
        for (f, n) in filtered.iter().zip(&noisy) {
            assert!(f.len() <= n.len());
        }
    }
}
