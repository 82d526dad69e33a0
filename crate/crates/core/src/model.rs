//! Micro patch classifier with a shallow statistic-bridging hook.
//!
//! Pipeline: non-overlapping `P×P` patches → linear embedding (the shallow
//! feature map `z`, shape `[B, T, D]`) → optional statistic bridge →
//! `L` residual blocks (linear, layer normalization with learnable
//! scale/shift, ReLU) → mean over tokens → classifier head and an
//! L2-normalized projection head.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{io, Scalar, Tape, Tensor, Var};

/// Denominator guard of the statistic bridge.
pub const BRIDGE_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub proj_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            embed_dim: 64,
            blocks: 3,
            proj_dim: 32,
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch,
            self.embed_dim,
            self.proj_dim,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid(format!("zero extent in model config {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("embed.weight".into(), vec![self.patch_dim(), d], ParamKind::Weight),
            ("embed.bias".into(), vec![d], ParamKind::Bias),
        ];
        for b in 0..self.blocks {
            out.push((format!("blocks.{b}.linear.weight"), vec![d, d], ParamKind::Weight));
            out.push((format!("blocks.{b}.linear.bias"), vec![d], ParamKind::Bias));
            out.push((format!("blocks.{b}.norm.scale"), vec![d], ParamKind::NormScale));
            out.push((format!("blocks.{b}.norm.shift"), vec![d], ParamKind::NormShift));
        }
        out.push(("head.weight".into(), vec![d, self.classes], ParamKind::Weight));
        out.push(("head.bias".into(), vec![self.classes], ParamKind::Bias));
        out.push(("proj.weight".into(), vec![d, self.proj_dim], ParamKind::Weight));
        out.push(("proj.bias".into(), vec![self.proj_dim], ParamKind::Bias));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

/// All model parameters, stored in [`ModelConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-style normal initialization; norm scales start at one, all
    /// biases and shifts at zero.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape, kind)| match kind {
                ParamKind::Weight => {
                    let fan_in = shape[0] as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    Tensor::from_fn(&shape, |_| T::c(normal.sample(rng)))
                }
                ParamKind::NormScale => Tensor::ones(&shape),
                ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&shape),
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape, _)| Tensor::zeros(&shape))
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.config.layout().into_iter().map(|(_, _, k)| k).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamKind) -> bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .zip(self.kinds())
            .map(|(t, k)| tape.leaf(t.clone(), trainable(k)))
            .collect();
        ParamVars {
            config: self.config,
            vars,
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        self.bind(tape, |_| false)
    }

    /// Class probabilities of a batch without recording gradients.
    pub fn predict_probs(&self, images: &[Image]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let out = forward(&mut tape, &vars, images, None)?;
        Ok(tape.value(out.probs).clone())
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_probs(images)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for ((name, shape, _), t) in self.config.layout().into_iter().zip(&self.tensors) {
            let file = format!("{name}.bin");
            io::save(t, &dir.join(&file))?;
            entries.push(CheckpointEntry { name, shape, file });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.config,
            params: entries,
        };
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
        fs::write(dir.join("checkpoint.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("checkpoint.json"))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let layout = manifest.config.layout();
        if layout.len() != manifest.params.len()
            || layout.iter().zip(&manifest.params).any(|(l, e)| l.0 != e.name)
        {
            return Err(Error::format("checkpoint parameter list does not match config"));
        }
        let tensors = manifest
            .params
            .iter()
            .map(|e| io::load::<T>(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(manifest.config, tensors)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

/// Parameter handles on a tape, in [`ModelConfig::layout`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn from_vars(config: ModelConfig, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != config.layout().len() {
            return Err(Error::invalid("parameter handle count does not match config"));
        }
        Ok(ParamVars { config, vars })
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn embed(&self) -> (Var, Var) {
        (self.vars[0], self.vars[1])
    }

    fn block(&self, b: usize) -> [Var; 4] {
        let o = 2 + 4 * b;
        [self.vars[o], self.vars[o + 1], self.vars[o + 2], self.vars[o + 3]]
    }

    fn head(&self) -> (Var, Var) {
        let o = 2 + 4 * self.config.blocks;
        (self.vars[o], self.vars[o + 1])
    }

    fn proj(&self) -> (Var, Var) {
        let o = 4 + 4 * self.config.blocks;
        (self.vars[o], self.vars[o + 1])
    }
}

/// Per-instance target statistics handed to the bridge, each `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BridgeStats {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub probs: Var,
    /// Shallow feature map `[B, T, D]` as seen by the first block (after
    /// bridging, when a bridge was supplied).
    pub shallow: Var,
    /// Unit-norm projection embeddings `[B, D_proj]`.
    pub embedding: Var,
}

/// Offset subtracted from every pixel so patch features are zero-centred.
pub const PIXEL_CENTER: f64 = 0.5;

/// Splits images into row-major patch tokens, features ordered
/// (channel, row, column) inside each patch, each shifted by
/// [`PIXEL_CENTER`].
pub fn patchify<T: Scalar>(images: &[Image], config: &ModelConfig) -> Result<Tensor<T>> {
    let (s, p, ch) = (config.image_size, config.patch, config.channels);
    let grid = s / p;
    let pd = config.patch_dim();
    let mut data = Vec::with_capacity(images.len() * config.tokens() * pd);
    for img in images {
        if img.width() != s || img.height() != s || img.channels() != ch {
            return Err(Error::invalid(format!(
                "image {}x{}x{} does not match model input {s}x{s}x{ch}",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..ch {
                    for py in 0..p {
                        for px in 0..p {
                            data.push(T::c(f64::from(img.get(c, gx * p + px, gy * p + py)) - PIXEL_CENTER));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![images.len() * config.tokens(), pd],
        data,
    ))
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y).to_vec();
    let bias = tape.expand(b, &shape, &[0])?;
    tape.add(y, bias)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mu = tape.mean(x, &[1])?;
    let var = tape.var(x, &[1])?;
    let var = tape.add_scalar(var, T::c(NORM_EPS))?;
    let sd = tape.sqrt(var)?;
    let mu = tape.expand(mu, &shape, &[1])?;
    let sd = tape.expand(sd, &shape, &[1])?;
    let centered = tape.sub(x, mu)?;
    let normed = tape.div(centered, sd)?;
    let scale = tape.expand(scale, &shape, &[0])?;
    let shift = tape.expand(shift, &shape, &[0])?;
    let y = tape.mul(normed, scale)?;
    tape.add(y, shift)
}

fn l2_normalize<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let sq = tape.square(x)?;
    let ss = tape.sum(sq, &[1])?;
    let ss = tape.add_scalar(ss, T::c(L2_EPS))?;
    let norm = tape.sqrt(ss)?;
    let norm = tape.expand(norm, &shape, &[1])?;
    tape.div(x, norm)
}

/// Runs the classifier. When `bridge` is given, the shallow features are
/// restyled to its statistics before the first block; gradients flow
/// through the restyling.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    images: &[Image],
    bridge: Option<&BridgeStats>,
) -> Result<ForwardOut> {
    let cfg = params.config;
    let b = images.len();
    if b == 0 {
        return Err(Error::invalid("forward on an empty batch"));
    }
    let (t, d) = (cfg.tokens(), cfg.embed_dim);

    let patches = tape.constant(patchify(images, &cfg)?);
    let (ew, eb) = params.embed();
    let z = linear(tape, patches, ew, eb)?;
    let mut shallow = tape.reshape(z, &[b, t, d])?;
    if let Some(stats) = bridge {
        let sb = tape.shape(stats.mu)[0];
        if sb != b || tape.shape(stats.sigma)[0] != b {
            return Err(Error::invalid(format!(
                "bridge statistics for {sb} instances, batch has {b}"
            )));
        }
        shallow = statistic_bridge(tape, shallow, stats.mu, stats.sigma, BRIDGE_EPS)?;
    }

    let mut h = tape.reshape(shallow, &[b * t, d])?;
    for blk in 0..cfg.blocks {
        let [w, bias, scale, shift] = params.block(blk);
        let u = linear(tape, h, w, bias)?;
        let n = layer_norm(tape, u, scale, shift)?;
        let a = tape.relu(n)?;
        h = tape.add(h, a)?;
    }
    let h = tape.reshape(h, &[b, t, d])?;
    let pooled = tape.mean(h, &[1])?;

    let (hw, hb) = params.head();
    let logits = linear(tape, pooled, hw, hb)?;
    let probs = tape.softmax(logits)?;
    let (pw, pb) = params.proj();
    let proj = linear(tape, pooled, pw, pb)?;
    let embedding = l2_normalize(tape, proj)?;
    Ok(ForwardOut {
        logits,
        probs,
        shallow,
        embedding,
    })
}

/// Per-instance, per-channel mean and population standard deviation over
/// the token axis of `z: [B, T, D]`.
pub fn extract_stats<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<BridgeStats> {
    if tape.value(z).rank() != 3 {
        return Err(Error::invalid("extract_stats expects [B, T, D]"));
    }
    let mu = tape.mean(z, &[1])?;
    let var = tape.var(z, &[1])?;
    let sigma = tape.sqrt(var)?;
    Ok(BridgeStats { mu, sigma })
}

/// `σ_t · (z − μ̃) / (σ̃ + eps) + μ_t`, with `μ̃, σ̃` the token-axis statistics
/// of `z` itself.
///
/// `eps == 0` is accepted for exact checks; a constant channel then has no
/// defined output and surfaces as a non-finite error.
pub fn statistic_bridge<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    mu_t: Var,
    sigma_t: Var,
    eps: f64,
) -> Result<Var> {
    if eps < 0.0 {
        return Err(Error::invalid(format!("bridge eps must be non-negative, got {eps}")));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("statistic_bridge expects z of shape [B, T, D]"));
    }
    let stat_shape = [shape[0], shape[2]];
    for v in [mu_t, sigma_t] {
        if tape.shape(v) != stat_shape {
            return Err(Error::ShapeMismatch {
                op: "statistic_bridge",
                lhs: stat_shape.to_vec(),
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    if tape.value(sigma_t).data().iter().any(|&s| s < T::zero()) {
        return Err(Error::invalid("negative target standard deviation"));
    }
    let own = extract_stats(tape, z)?;
    let den = tape.add_scalar(own.sigma, T::c(eps))?;
    let ratio = tape.div(sigma_t, den)?;
    let mu_k = tape.expand(own.mu, &shape, &[1])?;
    let centered = tape.sub(z, mu_k)?;
    let ratio = tape.expand(ratio, &shape, &[1])?;
    let scaled = tape.mul(centered, ratio)?;
    let mu_t = tape.expand(mu_t, &shape, &[1])?;
    tape.add(scaled, mu_t)
}

/// `θ_T ← m·θ_T + (1 − m)·θ_S`, clamped into the closed interval spanned by
/// the two inputs so round-off can never leave it.
pub fn ema_update<T: Scalar>(
    teacher: &ModelParams<T>,
    student: &ModelParams<T>,
    momentum: f64,
) -> Result<ModelParams<T>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    if teacher.config != student.config {
        return Err(Error::invalid("teacher and student configs differ"));
    }
    let m = T::c(momentum);
    let one_minus = T::c(1.0 - momentum);
    let tensors = teacher
        .tensors
        .iter()
        .zip(&student.tensors)
        .map(|(tt, st)| {
            let data = tt
                .data()
                .iter()
                .zip(st.data())
                .map(|(&a, &b)| (m * a + one_minus * b).max(a.min(b)).min(a.max(b)))
                .collect();
            Tensor::from_parts(tt.shape().to_vec(), data)
        })
        .collect();
    Ok(ModelParams {
        config: teacher.config,
        tensors,
    })
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
