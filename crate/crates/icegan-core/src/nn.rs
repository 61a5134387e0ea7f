//! Neural building blocks: conv / transposed-conv / linear layers over the
//! tape, a named parameter registry with Adam state, the cosine learning
//! rate schedule, and the checkpoint file format.

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Geometry and channel contract of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

// ---- parameter registry ----

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Named map of trainable tensors plus per-parameter Adam moments.
#[derive(Default)]
pub struct ParamRegistry {
    params: IndexMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry::default()
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor) {
        assert!(
            !self.params.contains_key(path),
            "parameter registered twice: {path}"
        );
        let n = tensor.numel();
        self.params.insert(
            path.to_string(),
            Param {
                tensor: tensor.with_grad(),
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Parameter count under a path prefix; used for the model-size column
    /// of the ablation table.
    pub fn elements_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// One Adam update over every parameter; errors list parameters whose
    /// gradients were never populated.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        let missing: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.tensor.grad.is_none())
            .map(|(k, _)| k.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGrads(missing));
        }
        self.adam_step_prefix("", lr)
    }

    /// Adam over parameters whose path starts with `prefix`; parameters
    /// without gradients are skipped (their moments stay untouched).
    pub fn adam_step_prefix(&mut self, prefix: &str, lr: f64) -> Result<()> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        for (path, p) in self.params.iter_mut() {
            if !path.starts_with(prefix) {
                continue;
            }
            let Some(grad) = p.tensor.grad.as_ref() else {
                continue;
            };
            p.step += 1;
            let bc1 = 1.0 - BETA1.powi(p.step as i32);
            let bc2 = 1.0 - BETA2.powi(p.step as i32);
            for i in 0..grad.len() {
                let g = grad[i];
                p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * g;
                p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.tensor.data[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }

    /// Borrow a snapshot of all tensors for checkpointing.
    pub fn snapshot(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.clone(), &p.tensor)).collect()
    }
}

// ---- forward context: binds registry parameters onto a tape ----

/// Per-forward-pass binding of named parameters to tape leaves.
/// With `trainable = false` parameters enter the tape as constants, which
/// detaches everything computed from them.
pub struct ForwardCtx {
    pub tape: Tape,
    bound: IndexMap<String, Var>,
    pub trainable: bool,
}

impl ForwardCtx {
    pub fn new(trainable: bool) -> Self {
        ForwardCtx {
            tape: Tape::new(),
            bound: IndexMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, reg: &ParamRegistry, path: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(path) {
            return Ok(*v);
        }
        let p = reg.get(path)?;
        let var = self.tape.leaf_data(
            p.tensor.shape.clone(),
            p.tensor.data.clone(),
            self.trainable,
        );
        self.bound.insert(path.to_string(), var);
        Ok(var)
    }

    /// Accumulates tape gradients of every trainably-bound parameter back
    /// into the registry tensors.
    pub fn apply_grads(&self, reg: &mut ParamRegistry) -> Result<()> {
        for (path, var) in &self.bound {
            if let Some(g) = self.tape.grad(*var) {
                reg.get_mut(path)?.tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

// ---- layers ----

fn validate_image(shape: &[usize], spec: &ConvSpec, op: &'static str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::BadRank {
            op,
            expected: "[batch, channels, h, w] input",
            got: shape.to_vec(),
        });
    }
    if shape[1] != spec.in_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.in_channels,
            got: shape[1],
        });
    }
    Ok(())
}

/// Standard convolution, weight `[c_out, c_in, k, k]`, bias `[c_out,1,1]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub path: String,
}

impl Conv2d {
    pub fn new(path: impl Into<String>, spec: ConvSpec) -> Self {
        Conv2d { spec, path: path.into() }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng, gain: f64) {
        let s = &self.spec;
        let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
        let std = (2.0 / fan_in).sqrt() * gain;
        let w = Tensor::new(
            vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
            rng::normal_vec(rng, s.out_channels * s.in_channels * s.kernel * s.kernel, std),
        )
        .expect("static shape");
        reg.insert(&format!("{}.w", self.path), w);
        reg.insert(
            &format!("{}.b", self.path),
            Tensor::zeros(&[s.out_channels, 1, 1]),
        );
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<Var> {
        validate_image(ctx.tape.shape(x), &self.spec, "conv2d")?;
        let w = ctx.param(reg, &format!("{}.w", self.path))?;
        let b = ctx.param(reg, &format!("{}.b", self.path))?;
        let y = ctx.tape.conv2d(x, w, self.spec.geom())?;
        ctx.tape.add(y, b)
    }
}

/// Transposed convolution, weight `[c_in, c_out, k, k]`, bias `[c_out,1,1]`.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub spec: ConvSpec,
    pub path: String,
}

impl Deconv2d {
    pub fn new(path: impl Into<String>, spec: ConvSpec) -> Self {
        Deconv2d { spec, path: path.into() }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng, gain: f64) {
        let s = &self.spec;
        let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
        let std = (2.0 / fan_in).sqrt() * gain;
        let w = Tensor::new(
            vec![s.in_channels, s.out_channels, s.kernel, s.kernel],
            rng::normal_vec(rng, s.in_channels * s.out_channels * s.kernel * s.kernel, std),
        )
        .expect("static shape");
        reg.insert(&format!("{}.w", self.path), w);
        reg.insert(
            &format!("{}.b", self.path),
            Tensor::zeros(&[s.out_channels, 1, 1]),
        );
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<Var> {
        validate_image(ctx.tape.shape(x), &self.spec, "deconv2d")?;
        let w = ctx.param(reg, &format!("{}.w", self.path))?;
        let b = ctx.param(reg, &format!("{}.b", self.path))?;
        let y = ctx.tape.deconv2d(x, w, self.spec.geom())?;
        ctx.tape.add(y, b)
    }
}

/// Fully connected layer, weight stored `[in, out]` so the forward pass is
/// a plain matmul; bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub path: String,
}

impl Linear {
    pub fn new(path: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            path: path.into(),
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng, gain: f64) {
        let std = (2.0 / self.in_features as f64).sqrt() * gain;
        let w = Tensor::new(
            vec![self.in_features, self.out_features],
            rng::normal_vec(rng, self.in_features * self.out_features, std),
        )
        .expect("static shape");
        reg.insert(&format!("{}.w", self.path), w);
        reg.insert(&format!("{}.b", self.path), Tensor::zeros(&[self.out_features]));
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::BadRank {
                op: "linear",
                expected: "[batch, in_features] input",
                got: shape.to_vec(),
            });
        }
        let w = ctx.param(reg, &format!("{}.w", self.path))?;
        let b = ctx.param(reg, &format!("{}.b", self.path))?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

// ---- learning rate schedule ----

/// Cosine annealing from `base_lr` at epoch 0 down to `min_lr` at `t_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub t_max: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn cosine_lr(&self, epoch: usize) -> Result<f64> {
        if epoch > self.t_max {
            return Err(Error::EpochOutOfRange {
                epoch,
                t_max: self.t_max,
            });
        }
        if self.t_max == 0 {
            return Ok(self.base_lr);
        }
        let phase = std::f64::consts::PI * epoch as f64 / self.t_max as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + phase.cos()))
    }
}

// ---- checkpoint format ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"ICEG";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version u32, count u32, (path, tensor)*`.
pub fn save_checkpoint(reg: &ParamRegistry, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(reg.len() as u32).to_le_bytes())?;
        for (name, p) in reg.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            p.tensor.write_to(w)?;
        }
        Ok(())
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Loads tensors into a fresh registry. Optimizer moments restart at zero:
/// checkpoints carry weights only.
pub fn load_checkpoint(path: &Path) -> Result<ParamRegistry> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut reg = ParamRegistry::new();
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("non-utf8 parameter name: {e}")))?;
        let tensor = Tensor::read_from(&mut r).map_err(|e| Error::io(path, e))?;
        reg.insert(&name, tensor);
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut reg = ParamRegistry::new();
        let spec = ConvSpec::new(1, 1, 1, 1, 0);
        let conv = Conv2d::new("c", spec);
        reg.insert("c.w", Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        reg.insert("c.b", Tensor::zeros(&[1, 1, 1]));
        let mut ctx = ForwardCtx::new(false);
        let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let x = ctx.tape.leaf_data(vec![1, 1, 3, 3], data.clone(), false);
        let y = conv.forward(&mut ctx, &reg, x).unwrap();
        assert_eq!(ctx.tape.value(y), &data[..]);
    }

    #[test]
    fn conv_sum_pooling_by_hand() {
        // all-ones 4x4 input, 2x2 ones kernel, stride 2 -> 2x2 map of 4s.
        let mut reg = ParamRegistry::new();
        let spec = ConvSpec::new(1, 1, 2, 2, 0);
        let conv = Conv2d::new("c", spec);
        reg.insert("c.w", Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        reg.insert("c.b", Tensor::zeros(&[1, 1, 1]));
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf_data(vec![1, 1, 4, 4], vec![1.0; 16], false);
        let y = conv.forward(&mut ctx, &reg, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(ctx.tape.value(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut reg = ParamRegistry::new();
        let conv = Conv2d::new("c", ConvSpec::new(3, 4, 3, 1, 1));
        let mut r = stream(1, "w");
        conv.register(&mut reg, &mut r, 1.0);
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf_data(vec![1, 2, 8, 8], vec![0.0; 128], false);
        assert!(matches!(
            conv.forward(&mut ctx, &reg, x),
            Err(Error::ChannelMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn conv_degenerate_extent_rejected() {
        let mut reg = ParamRegistry::new();
        let conv = Conv2d::new("c", ConvSpec::new(1, 1, 5, 1, 0));
        let mut r = stream(1, "w");
        conv.register(&mut reg, &mut r, 1.0);
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf_data(vec![1, 1, 3, 3], vec![0.0; 9], false);
        assert!(matches!(
            conv.forward(&mut ctx, &reg, x),
            Err(Error::DegenerateExtent { .. })
        ));
    }

    #[test]
    fn deconv_broadcasts_kernel() {
        // 1x1 input of value v, 2x2 kernel K, stride 2 -> output v*K.
        let mut reg = ParamRegistry::new();
        let spec = ConvSpec::new(1, 1, 2, 2, 0);
        let deconv = Deconv2d::new("d", spec);
        let kernel = vec![1.0, 2.0, 3.0, 4.0];
        reg.insert("d.w", Tensor::new(vec![1, 1, 2, 2], kernel.clone()).unwrap());
        reg.insert("d.b", Tensor::zeros(&[1, 1, 1]));
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf_data(vec![1, 1, 1, 1], vec![2.5], false);
        let y = deconv.forward(&mut ctx, &reg, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 1, 2, 2]);
        let want: Vec<f64> = kernel.iter().map(|k| k * 2.5).collect();
        assert_eq!(ctx.tape.value(y), &want[..]);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // Constant grad 1: bias-corrected first step moves by ~lr.
        let mut reg = ParamRegistry::new();
        reg.insert("p", Tensor::scalar(1.0));
        reg.get_mut("p").unwrap().tensor.accumulate_grad(&[1.0]);
        reg.adam_step(1e-3).unwrap();
        let p = reg.get("p").unwrap().tensor.data[0];
        let moved = 1.0 - p;
        assert!((moved - 1e-3).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn adam_zero_grad_keeps_param() {
        let mut reg = ParamRegistry::new();
        reg.insert("p", Tensor::scalar(0.7));
        reg.get_mut("p").unwrap().tensor.accumulate_grad(&[0.0]);
        reg.adam_step(1e-2).unwrap();
        assert_eq!(reg.get("p").unwrap().tensor.data[0], 0.7);
    }

    #[test]
    fn adam_identical_params_update_identically() {
        let mut reg = ParamRegistry::new();
        reg.insert("a", Tensor::scalar(0.3));
        reg.insert("b", Tensor::scalar(0.3));
        reg.get_mut("a").unwrap().tensor.accumulate_grad(&[0.25]);
        reg.get_mut("b").unwrap().tensor.accumulate_grad(&[0.25]);
        reg.adam_step(1e-3).unwrap();
        assert_eq!(
            reg.get("a").unwrap().tensor.data[0],
            reg.get("b").unwrap().tensor.data[0]
        );
    }

    #[test]
    fn adam_missing_grads_itemized() {
        let mut reg = ParamRegistry::new();
        reg.insert("has", Tensor::scalar(1.0));
        reg.insert("missing1", Tensor::scalar(1.0));
        reg.insert("missing2", Tensor::scalar(1.0));
        reg.get_mut("has").unwrap().tensor.accumulate_grad(&[1.0]);
        match reg.adam_step(1e-3) {
            Err(Error::MissingGrads(paths)) => {
                assert_eq!(paths, vec!["missing1".to_string(), "missing2".to_string()]);
            }
            other => panic!("expected missing-grads error, got {other:?}"),
        }
    }

    #[test]
    fn adam_sign_flip_equivariance() {
        // Flipping all grads flips the update exactly.
        let grads = [0.13, -0.98, 0.44];
        let run = |sign: f64| {
            let mut reg = ParamRegistry::new();
            reg.insert("p", Tensor::new(vec![3], vec![0.0; 3]).unwrap());
            reg.get_mut("p")
                .unwrap()
                .tensor
                .accumulate_grad(&grads.iter().map(|g| g * sign).collect::<Vec<_>>());
            reg.adam_step(1e-2).unwrap();
            reg.get("p").unwrap().tensor.data.clone()
        };
        let pos = run(1.0);
        let negv = run(-1.0);
        for (a, b) in pos.iter().zip(&negv) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let sched = LrSchedule {
            base_lr: 1e-3,
            t_max: 100,
            min_lr: 0.0,
        };
        assert_eq!(sched.cosine_lr(0).unwrap(), 1e-3);
        assert!((sched.cosine_lr(100).unwrap()).abs() < 1e-19);
        assert!((sched.cosine_lr(50).unwrap() - 5e-4).abs() < 1e-12);
        assert!(matches!(
            sched.cosine_lr(101),
            Err(Error::EpochOutOfRange { .. })
        ));
        // Monotone nonincreasing over the horizon.
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = sched.cosine_lr(e).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("model.ckpt");
        let mut reg = ParamRegistry::new();
        let mut r = stream(3, "ckpt");
        let lin = Linear::new("fc", 4, 3);
        lin.register(&mut reg, &mut r, 1.0);
        save_checkpoint(&reg, &file).unwrap();

        // Magic bytes first.
        let bytes = std::fs::read(&file).unwrap();
        assert_eq!(&bytes[0..4], b"ICEG");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());

        let loaded = load_checkpoint(&file).unwrap();
        assert_eq!(loaded.len(), reg.len());
        for (name, p) in reg.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.tensor.shape, q.tensor.shape);
            assert_eq!(p.tensor.data, q.tensor.data);
        }
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("junk.ckpt");
        std::fs::write(&file, b"NOPE0000").unwrap();
        assert!(matches!(load_checkpoint(&file), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn forward_ctx_detaches_when_frozen() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(2.0));
        let mut ctx = ForwardCtx::new(false);
        let w = ctx.param(&reg, "w").unwrap();
        let x = ctx.tape.leaf_data(vec![1], vec![3.0], true);
        let y = ctx.tape.mul(w, x).unwrap();
        let loss = ctx.tape.sum(y);
        ctx.tape.backward(loss).unwrap();
        assert!(ctx.tape.grad(w).is_none());
        assert_eq!(ctx.tape.grad(x).unwrap(), &[2.0]);
    }
}
