//! Encoder, convGRU, slot attention with a reserved background slot, and the
//! mixture decoder.
//!
//! Every stage records itself on an [`autograd::Graph`](crate::autograd::Graph)
//! so one code path serves training, inference and gradient checks. Frames
//! enter as `[B, 3, h, w]`; attention maps leave as `[B, N, S]` with
//! `N = h' * w'` and `S = num_slots + 1`. With a background slot it sits at
//! column 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"BGSLOTCK";
const CHECKPOINT_VERSION: u32 = 1;
const ATTENTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Object slots `K`.
    pub num_slots: usize,
    pub slot_dim: usize,
    /// Channels `D'` of the spatio-temporal features.
    pub feature_dim: usize,
    /// Width `D` of the key and query projections.
    pub projection_dim: usize,
    pub downsample_factor: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: usize,
    /// When false the reserved column is replaced by one more object slot
    /// drawn from the shared Gaussian, keeping the slot count unchanged.
    pub background_slot: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_slots: 8,
            slot_dim: 64,
            feature_dim: 64,
            projection_dim: 64,
            downsample_factor: 4,
            encoder_channels: vec![64, 64],
            decoder_channels: 64,
            background_slot: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_slots == 0 {
            return bad("num_slots must be at least 1".into());
        }
        if self.slot_dim == 0 || self.feature_dim == 0 || self.projection_dim == 0 || self.decoder_channels == 0 {
            return bad("slot_dim, feature_dim, projection_dim and decoder_channels must be positive".into());
        }
        if !self.downsample_factor.is_power_of_two() {
            return bad(format!("downsample_factor {} is not a power of two", self.downsample_factor));
        }
        if self.encoder_channels.len() < self.stride_layers() {
            return bad(format!(
                "downsample_factor {} needs at least {} encoder layers",
                self.downsample_factor,
                self.stride_layers()
            ));
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder channel counts must be positive".into());
        }
        Ok(())
    }

    /// Columns of the attention maps.
    pub fn total_slots(&self) -> usize {
        self.num_slots + 1
    }

    /// Slots drawn from the shared Gaussian.
    pub fn sampled_slots(&self) -> usize {
        if self.background_slot {
            self.num_slots
        } else {
            self.num_slots + 1
        }
    }

    fn stride_layers(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.downsample_factor;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("frame {height}x{width} is not divisible by downsample factor {f}")));
        }
        Ok((height / f, width / f))
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

/// Positions of each parameter in [`Model::params`].
#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Conv>,
    encoder_out: Conv,
    gru_x: Conv,
    gru_h_gates: Conv,
    gru_h_candidate: Conv,
    position: Dense,
    key: Dense,
    value: Dense,
    query: Dense,
    slot_mu: usize,
    slot_log_std: usize,
    slot_background: Option<usize>,
    decoder_position: Dense,
    decoder_in: Conv,
    decoder_up: Vec<Conv>,
    decoder_out: Conv,
}

/// Parameters bound to one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Outputs of one frame of [`Model::forward_sequence`].
#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    /// `[B, S, slot_dim]`.
    pub slots: Var,
    /// `[B, N, S]`, rows sum to one.
    pub attention: Var,
    /// `[B, 3, h, w]`.
    pub reconstruction: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<F>>,
    layout: Layout,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<f64>>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, shape: Vec<usize>, std: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                z * std
            })
            .collect();
        self.names.push(name.to_string());
        self.params.push(Tensor::new(shape, data));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Conv {
        let fan_in = (inp * k * k) as f64;
        Conv {
            w: self.add(&format!("{name}.weight"), vec![out, inp, k, k], (2.0 / fan_in).sqrt()),
            b: self.add(&format!("{name}.bias"), vec![out], 0.0),
        }
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        Dense {
            w: self.add(&format!("{name}.weight"), vec![inp, out], (1.0 / inp as f64).sqrt()),
            b: self.add(&format!("{name}.bias"), vec![out], 0.0),
        }
    }
}

/// Four-channel coordinate grid `[N, 4]`: (y, x, 1 - y, 1 - x) in `[0, 1]`.
fn coordinate_grid<F: Scalar>(h: usize, w: usize) -> Tensor<F> {
    let lin = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let mut data = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (lin(y, h), lin(x, w));
            data.extend([fy, fx, 1.0 - fy, 1.0 - fx].map(F::from_f64));
        }
    }
    Tensor::new(vec![h * w, 4], data)
}

/// Stacks `B` frames stored as `h x w x 3` into a `[B, 3, h, w]` tensor.
pub fn image_batch<F: Scalar>(frames: &[&[f32]], height: usize, width: usize) -> Tensor<F> {
    let plane = height * width;
    let mut data = vec![F::ZERO; frames.len() * 3 * plane];
    for (b, frame) in frames.iter().enumerate() {
        assert_eq!(frame.len(), 3 * plane, "frame size");
        for p in 0..plane {
            for c in 0..3 {
                data[(b * 3 + c) * plane + p] = F::from_f64(f64::from(frame[p * 3 + c]));
            }
        }
    }
    Tensor::new(vec![frames.len(), 3, height, width], data)
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
        };
        let mut inp = 3;
        let mut encoder = Vec::new();
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            encoder.push(b.conv(&format!("encoder.{i}"), c, inp, 3));
            inp = c;
        }
        let d = config.feature_dim;
        let encoder_out = b.conv("encoder.out", d, inp, 3);
        let gru_x = b.conv("gru.x", 3 * d, d, 3);
        let gru_h_gates = b.conv("gru.h_gates", 2 * d, d, 3);
        let gru_h_candidate = b.conv("gru.h_candidate", d, d, 3);
        let position = b.dense("attention.position", 4, d);
        let key = b.dense("attention.key", d, config.projection_dim);
        let value = b.dense("attention.value", d, config.slot_dim);
        let query = b.dense("attention.query", config.slot_dim, config.projection_dim);
        let slot_mu = b.add("slots.mu", vec![config.slot_dim], 1.0);
        let slot_log_std = b.add("slots.log_std", vec![config.slot_dim], 0.0);
        let slot_background = config
            .background_slot
            .then(|| b.add("slots.background", vec![config.slot_dim], 1.0));
        let c = config.decoder_channels;
        let decoder_position = b.dense("decoder.position", 4, config.slot_dim);
        let decoder_in = b.conv("decoder.in", c, config.slot_dim, 3);
        let decoder_up = (0..config.stride_layers())
            .map(|i| b.conv(&format!("decoder.up.{i}"), c, c, 3))
            .collect();
        let decoder_out = b.conv("decoder.out", 3, c, 3);
        let Builder { names, params, .. } = b;
        Ok(Self {
            config,
            names,
            params: params.iter().map(Tensor::cast).collect(),
            layout: Layout {
                encoder,
                encoder_out,
                gru_x,
                gru_h_gates,
                gru_h_candidate,
                position,
                key,
                value,
                query,
                slot_mu,
                slot_log_std,
                slot_background,
                decoder_position,
                decoder_in,
                decoder_up,
                decoder_out,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Binds the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph<F>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.param(p.clone())).collect(),
        }
    }

    /// Binds the parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    fn conv(&self, g: &mut Graph<F>, p: &BoundParams, c: Conv, x: Var, stride: usize) -> Var {
        g.conv2d(x, p.vars[c.w], p.vars[c.b], stride, 1)
    }

    fn dense(&self, g: &mut Graph<F>, p: &BoundParams, d: Dense, x: Var) -> Var {
        g.linear(x, p.vars[d.w], p.vars[d.b])
    }

    fn check_frame(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, h, w] frames, got {shape:?}")));
        }
        self.config.grid(shape[2], shape[3])
    }

    /// `[B, 3, h, w]` to `[B, D', h', w']`.
    pub fn encode_frame(&self, g: &mut Graph<F>, p: &BoundParams, frame: Var) -> Result<Var> {
        self.check_frame(g.shape(frame))?;
        let strided = self.config.stride_layers();
        let mut x = frame;
        for (i, &layer) in self.layout.encoder.iter().enumerate() {
            let y = self.conv(g, p, layer, x, if i < strided { 2 } else { 1 });
            x = g.silu(y);
        }
        Ok(self.conv(g, p, self.layout.encoder_out, x, 1))
    }

    /// One convGRU update. `state` of `None` is the zero state.
    pub fn gru_step(&self, g: &mut Graph<F>, p: &BoundParams, x: Var, state: Option<Var>) -> Var {
        let d = self.config.feature_dim;
        let h = match state {
            Some(h) => h,
            None => {
                let shape = g.shape(x).to_vec();
                g.constant(Tensor::zeros(shape))
            }
        };
        let xs = self.conv(g, p, self.layout.gru_x, x, 1);
        let x_gates = g.channel_slice(xs, 0, 2 * d);
        let x_cand = g.channel_slice(xs, 2 * d, d);
        let h_gates = self.conv(g, p, self.layout.gru_h_gates, h, 1);
        let gate_pre = g.add(x_gates, h_gates);
        let gates = g.sigmoid(gate_pre);
        let z = g.channel_slice(gates, 0, d);
        let r = g.channel_slice(gates, d, d);
        let rh = g.mul(r, h);
        let h_cand = self.conv(g, p, self.layout.gru_h_candidate, rh, 1);
        let cand_pre = g.add(x_cand, h_cand);
        let n = g.tanh(cand_pre);
        // h' = (1 - z) * h + z * n
        let delta = g.sub(n, h);
        let step = g.mul(z, delta);
        g.add(h, step)
    }

    /// Runs the convGRU over a feature sequence, returning `H^t` per frame;
    /// the last element is the new recurrent state.
    pub fn temporal_fuse(&self, g: &mut Graph<F>, p: &BoundParams, features: &[Var], state: Option<Var>) -> Vec<Var> {
        let mut h = state;
        features
            .iter()
            .map(|&x| {
                let next = self.gru_step(g, p, x, h);
                h = Some(next);
                next
            })
            .collect()
    }

    /// Initial slots `[B, S, slot_dim]` from standard-normal `noise` of shape
    /// `[B, sampled_slots, slot_dim]`.
    pub fn initial_slots(&self, g: &mut Graph<F>, p: &BoundParams, noise: Tensor<F>) -> Var {
        let bg = self.layout.slot_background.map(|i| p.vars[i]);
        g.slot_init(bg, p.vars[self.layout.slot_mu], p.vars[self.layout.slot_log_std], noise)
    }

    pub fn sample_slot_noise(&self, batch: usize, rng: &mut impl Rng) -> Tensor<F> {
        let shape = vec![batch, self.config.sampled_slots(), self.config.slot_dim];
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z)
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Attention of `H^t` against the previous slots and the aggregated new
    /// slots. Returns `(S^t, W^t)`.
    pub fn slot_attention_step(&self, g: &mut Graph<F>, p: &BoundParams, features: Var, slots: Var) -> (Var, Var) {
        let shape = g.shape(features).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let grid = g.constant(coordinate_grid(h, w));
        let pos = self.dense(g, p, self.layout.position, grid);
        let tokens = g.to_tokens(features);
        let tokens = g.add_bcast(tokens, pos);
        let tokens = g.layer_norm(tokens);
        let k = self.dense(g, p, self.layout.key, tokens);
        let v = self.dense(g, p, self.layout.value, tokens);
        let s_norm = g.layer_norm(slots);
        let q = self.dense(g, p, self.layout.query, s_norm);
        let logits = g.batch_matmul(k, q, false, true);
        let logits = g.scale(logits, F::from_f64(1.0 / (self.config.projection_dim as f64).sqrt()));
        let attention = g.softmax(logits);
        let weights = g.col_normalize(attention, F::from_f64(ATTENTION_EPS));
        let new_slots = g.batch_matmul(weights, v, true, false);
        (new_slots, attention)
    }

    /// Attention-weighted slot mixture decoded to `[B, 3, h, w]`.
    pub fn decode(&self, g: &mut Graph<F>, p: &BoundParams, slots: Var, attention: Var, grid: (usize, usize)) -> Var {
        let (h, w) = grid;
        let mixture = g.batch_matmul(attention, slots, false, false);
        let coords = g.constant(coordinate_grid(h, w));
        let pos = self.dense(g, p, self.layout.decoder_position, coords);
        let mixture = g.add_bcast(mixture, pos);
        let x = g.from_tokens(mixture, h, w);
        let y = self.conv(g, p, self.layout.decoder_in, x, 1);
        let mut x = g.silu(y);
        for &layer in &self.layout.decoder_up {
            let up = g.upsample2(x);
            let y = self.conv(g, p, layer, up, 1);
            x = g.silu(y);
        }
        self.conv(g, p, self.layout.decoder_out, x, 1)
    }

    /// Encode, fuse, attend and decode each frame, threading slot and
    /// recurrent state. `frames` are `[B, 3, h, w]`.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        frames: &[Var],
        initial_slots: Var,
    ) -> Result<Vec<FrameOutput>> {
        let Some(&first) = frames.first() else {
            return Err(Error::Empty("forward over zero frames".into()));
        };
        let first_shape = g.shape(first).to_vec();
        let grid = self.check_frame(&first_shape)?;
        for &f in frames {
            if g.shape(f) != first_shape.as_slice() {
                return Err(Error::Shape(format!("frame shape {:?} differs from {first_shape:?}", g.shape(f))));
            }
        }
        let mut slots = initial_slots;
        let mut state = None;
        let mut out = Vec::with_capacity(frames.len());
        for &frame in frames {
            let features = self.encode_frame(g, p, frame)?;
            let h = self.gru_step(g, p, features, state);
            state = Some(h);
            let (new_slots, attention) = self.slot_attention_step(g, p, h, slots);
            let reconstruction = self.decode(g, p, new_slots, attention, grid);
            slots = new_slots;
            out.push(FrameOutput {
                slots,
                attention,
                reconstruction,
            });
        }
        Ok(out)
    }

    /// Attention maps `[B, N, S]` for each frame of a clip, without tracking
    /// gradients.
    pub fn infer(&self, frames: &[Tensor<F>], noise: Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let slots = self.initial_slots(&mut g, &p, noise);
        let outputs = self.forward_sequence(&mut g, &p, &vars, slots)?;
        Ok(outputs.iter().map(|o| g.value(o.attention).clone()).collect())
    }
}

/// Hard labels from one attention map (`N x S`, row-major, on an `h' x w'`
/// grid), nearest-neighbour upsampled to `height x width`. Ties go to the
/// lowest slot index.
pub fn predict_segmentation<F: Scalar>(
    attention: &[F],
    num_slots: usize,
    grid: (usize, usize),
    height: usize,
    width: usize,
) -> Vec<u16> {
    let (gh, gw) = grid;
    assert_eq!(attention.len(), gh * gw * num_slots, "attention size");
    let coarse: Vec<u16> = attention
        .chunks_exact(num_slots)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let cy = y * gh / height;
        for x in 0..width {
            out.push(coarse[cy * gw + x * gw / width]);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    context: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Metadata stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub step: u64,
    /// Free-form JSON supplied by the writer, e.g. the training configuration.
    pub context: serde_json::Value,
}

impl Model<f32> {
    /// Writes the binary checkpoint: magic, version, header length, JSON
    /// header, then each tensor as little-endian `f32` in manifest order.
    pub fn save(&self, path: impl AsRef<Path>, info: &CheckpointInfo) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: info.step,
            context: info.context.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(20 + json.len() + 4 * self.num_parameters());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in &self.params {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointInfo)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::corrupt(path, reason);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).unwrap_or_default();
        if header_len > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let mut model = Model::<f32>::new(header.config).map_err(|e| corrupt(&e.to_string()))?;
        if header.tensors.len() != model.params.len() {
            return Err(corrupt("parameter manifest does not match the architecture"));
        }
        let mut data = &body[header_len..];
        for ((entry, name), param) in header.tensors.iter().zip(&model.names).zip(&mut model.params) {
            if &entry.name != name || entry.shape != param.shape {
                return Err(corrupt(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let n = 4 * param.len();
            if data.len() < n {
                return Err(corrupt("truncated tensor data"));
            }
            for (dst, chunk) in param.data.iter_mut().zip(data[..n].chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok((
            model,
            CheckpointInfo {
                step: header.step,
                context: header.context,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_slots: 2,
            slot_dim: 4,
            feature_dim: 4,
            projection_dim: 4,
            downsample_factor: 4,
            encoder_channels: vec![3, 4],
            decoder_channels: 3,
            background_slot: true,
            seed: 7,
        }
    }

    fn random_frames(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
        let n = b * 3 * h * w;
        Tensor::new(vec![b, 3, h, w], (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    /// Gradient of `sum(probe * output)` w.r.t. `input` vs central differences.
    fn check_input_gradient(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let y = build(&mut g, x);
        let probe: Vec<f64> = (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.backward(&[(y, &probe)]);
        let analytic = g.grad(x).unwrap().to_vec();
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.param(t);
            let y = build(&mut g, x);
            g.value(y).data.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for j in (0..input.len()).step_by(7) {
            let (mut plus, mut minus) = (input.clone(), input.clone());
            plus.data[j] += h;
            minus.data[j] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {j}: {} vs {fd}", analytic[j]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.num_slots = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.downsample_factor = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.encoder_channels = vec![4];
        assert!(c.validate().is_err());
        assert!(tiny().grid(18, 16).is_err());
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let model = Model::<f64>::new(ModelConfig {
            encoder_channels: vec![4, 4],
            ..tiny()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_frames(&mut rng, 1, 64, 64);
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let a = g.constant(frame.clone());
        let b = g.constant(frame);
        let fa = model.encode_frame(&mut g, &p, a).unwrap();
        let fb = model.encode_frame(&mut g, &p, b).unwrap();
        assert_eq!(g.shape(fa), &[1, 4, 16, 16]);
        assert_eq!(g.value(fa), g.value(fb));
        let bad = g.constant(Tensor::zeros(vec![1, 3, 62, 64]));
        assert!(model.encode_frame(&mut g, &p, bad).is_err());
    }

    #[test]
    fn encoder_input_gradient() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = random_frames(&mut rng, 1, 8, 8);
        check_input_gradient(
            |g, x| {
                let p = model.bind_frozen(g);
                model.encode_frame(g, &p, x).unwrap()
            },
            frame,
        );
    }

    #[test]
    fn temporal_fusion_gradient() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(vec![1, 4, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());
        check_input_gradient(
            |g, x| {
                let p = model.bind_frozen(g);
                let hs = model.temporal_fuse(g, &p, &[x, x, x], None);
                hs[2]
            },
            x,
        );
    }

    #[test]
    fn temporal_fusion_converges_on_constant_input() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![1, 4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let xv = g.constant(x);
        let hs = model.temporal_fuse(&mut g, &p, &[xv; 80], None);
        let diffs: Vec<f64> = hs
            .windows(2)
            .map(|w| {
                let (a, b) = (g.value(w[0]), g.value(w[1]));
                a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        for pair in diffs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{diffs:?}");
        }
        assert!(diffs[diffs.len() - 1] < 1e-3 * diffs[0], "{diffs:?}");
    }

    #[test]
    fn single_frame_fusion_uses_zero_state() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(vec![1, 4, 2, 2], (0..16).map(f64::from).collect()));
        let zero = g.constant(Tensor::zeros(vec![1, 4, 2, 2]));
        let a = model.temporal_fuse(&mut g, &p, &[x], None)[0];
        let b = model.gru_step(&mut g, &p, x, Some(zero));
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let n = 2 * 4 * 3 * 5;
            let h = g.constant(Tensor::new(vec![2, 4, 3, 5], (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()));
            let s = model.initial_slots(&mut g, &p, model.sample_slot_noise(2, &mut rng));
            let (slots, w) = model.slot_attention_step(&mut g, &p, h, s);
            assert_eq!(g.shape(w), &[2, 15, 3]);
            assert_eq!(g.shape(slots), &[2, 3, 4]);
            for row in g.value(w).data.chunks_exact(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let fg: f64 = row[1..].iter().sum();
                assert!((fg - (1.0 - row[0])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_slot_attention_is_one() {
        // A model with no background column and K + 1 = 1 is not expressible
        // (K >= 1), so exercise the softmax on a single slot row directly.
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let h = g.constant(Tensor::new(vec![1, 4, 2, 2], (0..16).map(|i| f64::from(i) * 0.3).collect()));
        let one = g.constant(Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 0.0]));
        let (_, w) = model.slot_attention_step(&mut g, &p, h, one);
        assert!(g.value(w).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn object_slot_permutation_is_equivariant() {
        let model = Model::<f64>::new(ModelConfig {
            num_slots: 3,
            ..tiny()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = model.sample_slot_noise(1, &mut rng);
        let perm = [2usize, 0, 1];
        let d = model.config.slot_dim;
        let mut permuted = noise.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data[dst * d..(dst + 1) * d].copy_from_slice(&noise.data[src * d..(src + 1) * d]);
        }
        let h = Tensor::new(vec![1, 4, 3, 3], (0..36).map(|_| rng.random_range(-2.0..2.0)).collect());
        let run = |noise: Tensor<f64>| {
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let hv = g.constant(h.clone());
            let s = model.initial_slots(&mut g, &p, noise);
            let (s, w) = model.slot_attention_step(&mut g, &p, hv, s);
            (g.value(s).clone(), g.value(w).clone())
        };
        let (s0, w0) = run(noise);
        let (s1, w1) = run(permuted);
        let total = 4;
        for n in 0..9 {
            assert!((w0.data[n * total] - w1.data[n * total]).abs() < 1e-12);
            for (dst, &src) in perm.iter().enumerate() {
                assert!((w1.data[n * total + 1 + dst] - w0.data[n * total + 1 + src]).abs() < 1e-12);
            }
        }
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((s1.data[(1 + dst) * d + j] - s0.data[(1 + src) * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_shape_and_zero_attention() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let slots = g.constant(Tensor::new(vec![1, 3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()));
            let zero = g.constant(Tensor::zeros(vec![1, 4, 3]));
            let y = model.decode(&mut g, &p, slots, zero, (2, 2));
            assert_eq!(g.shape(y), &[1, 3, 8, 8]);
            outputs.push(g.value(y).clone());
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn decode_gradient_through_slots() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let attention: Vec<f64> = (0..4).flat_map(|_| [0.2, 0.5, 0.3]).collect();
        let slots = Tensor::new(vec![1, 3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        check_input_gradient(
            |g, s| {
                let p = model.bind_frozen(g);
                let w = g.constant(Tensor::new(vec![1, 4, 3], attention.clone()));
                model.decode(g, &p, s, w, (2, 2))
            },
            slots,
        );
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = Model::<f32>::new(ModelConfig {
            num_slots: 8,
            ..tiny()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<Tensor<f32>> = (0..5).map(|_| random_frames(&mut rng, 2, 16, 24).cast()).collect();
        let noise = model.sample_slot_noise(2, &mut rng);
        let a = model.infer(&frames, noise.clone()).unwrap();
        let b = model.infer(&frames, noise.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0].shape, vec![2, 24, 9]);
        let single = model.infer(&frames[..1], noise).unwrap();
        assert_eq!(single[0], a[0]);
    }

    #[test]
    fn segmentation_argmax_and_ties() {
        let one_hot: Vec<f64> = (0..4).flat_map(|n| (0..3).map(move |k| f64::from(u8::from(k == n % 3)))).collect();
        assert_eq!(predict_segmentation(&one_hot, 3, (2, 2), 2, 2), vec![0, 1, 2, 0]);
        let uniform = vec![1.0 / 3.0; 12];
        assert!(predict_segmentation(&uniform, 3, (2, 2), 4, 4).iter().all(|&l| l == 0));
        // Left half dominated by slot 2, right half by slot 1, at 2x upsampling.
        let w: Vec<f64> = (0..4).flat_map(|n| if n % 2 == 0 { [0.1, 0.3, 0.6] } else { [0.2, 0.7, 0.1] }).collect();
        let labels = predict_segmentation(&w, 3, (2, 2), 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(labels[y * 4 + x], if x < 2 { 2 } else { 1 });
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(tiny()).unwrap();
        let info = CheckpointInfo {
            step: 42,
            context: serde_json::json!({"frames_per_clip": 5}),
        };
        model.save(&path, &info).unwrap();
        let (loaded, loaded_info) = Model::<f32>::load(&path).unwrap();
        assert_eq!(loaded_info, info);
        assert_eq!(loaded.params, model.params);
        assert_eq!(loaded.config, model.config);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        let err = Model::<f32>::load(&path).unwrap_err().to_string();
        assert!(err.contains("m.ckpt"), "{err}");
        fs::write(&path, b"garbage").unwrap();
        assert!(Model::<f32>::load(&path).is_err());
    }
}
