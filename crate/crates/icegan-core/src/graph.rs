//! Graph reasoning over channel graphs: encoder features become supernodes,
//! a self-attention similarity map forms a fully connected channel graph,
//! a GCN with learnable adjacency reasons over it, and the result is
//! projected back and fused residually with the source features.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Deconv2d, ForwardCtx, Linear, ParamRegistry};
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which skip-path variant feeds the decoder at each encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrmMode {
    /// No encoder features reach the decoder.
    None,
    /// Plain skip connection.
    Skip,
    /// Squeeze-and-excitation channel gating on the skip.
    Se,
    /// Full graph reasoning module.
    Grm,
}

impl std::str::FromStr for GrmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GrmMode::None),
            "skip" => Ok(GrmMode::Skip),
            "se" => Ok(GrmMode::Se),
            "grm" => Ok(GrmMode::Grm),
            other => Err(Error::Config(format!(
                "unknown grm_mode {other:?}, expected none|skip|se|grm"
            ))),
        }
    }
}

/// Captured similarity and reasoned maps for inspection dumps.
#[derive(Default)]
pub struct GrmDump {
    pub similarity: Option<Tensor>,
    pub reasoned: Option<Tensor>,
}

/// One graph reasoning block for a fixed channel count. Spatial extents are
/// halved into supernodes and restored by the inverse projection, so the
/// block maps `[B,C,H,W] -> [B,C,H,W]`.
#[derive(Clone, Debug)]
pub struct GrmLevel {
    pub channels: usize,
    pub path: String,
    transform: Conv2d,
    inv: Deconv2d,
}

impl GrmLevel {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        let path = path.into();
        GrmLevel {
            channels,
            transform: Conv2d::new(
                format!("{path}.transform"),
                ConvSpec::new(channels, channels, 3, 2, 1),
            ),
            inv: Deconv2d::new(
                format!("{path}.inv"),
                ConvSpec::new(channels, channels, 4, 2, 1),
            ),
            path,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng) {
        let c = self.channels;
        self.transform.register(reg, rng, 1.0);
        self.inv.register(reg, rng, 1.0);
        let linear_std = 1.0 / (c as f64).sqrt();
        reg.insert(
            &format!("{}.phi", self.path),
            Tensor::new(vec![c, c], rng::normal_vec(rng, c * c, linear_std)).expect("square"),
        );
        reg.insert(
            &format!("{}.theta", self.path),
            Tensor::new(vec![c, c], rng::normal_vec(rng, c * c, linear_std)).expect("square"),
        );
        // Adjacency starts near zero so early training sits close to the
        // skip-connection regime; weight matrix starts near identity-free
        // mixing at linear scale.
        reg.insert(
            &format!("{}.adj", self.path),
            Tensor::new(vec![c, c], rng::normal_vec(rng, c * c, 0.01)).expect("square"),
        );
        reg.insert(
            &format!("{}.gcn_w", self.path),
            Tensor::new(vec![c, c], rng::normal_vec(rng, c * c, linear_std)).expect("square"),
        );
    }

    /// Overwrites parameters with the reduction configuration: identity
    /// maps, zero adjacency, identity GCN weight and a zeroed inverse
    /// projection. In this regime the block is exactly a skip connection.
    pub fn set_reduction_params(&self, reg: &mut ParamRegistry) -> Result<()> {
        let c = self.channels;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        for name in ["phi", "theta", "gcn_w"] {
            let p = reg.get_mut(&format!("{}.{name}", self.path))?;
            p.tensor.data.copy_from_slice(&eye);
        }
        reg.get_mut(&format!("{}.adj", self.path))?.tensor.data.fill(0.0);
        reg.get_mut(&format!("{}.inv.w", self.path))?.tensor.data.fill(0.0);
        reg.get_mut(&format!("{}.inv.b", self.path))?.tensor.data.fill(0.0);
        Ok(())
    }

    /// `[B,C,H,W] -> [B,C,(H/2)*(W/2)]` supernode features via the strided
    /// transform convolution. Odd or unit spatial extents are rejected.
    pub fn supernode_transform(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        f: Var,
    ) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        if shape.len() != 4 {
            return Err(Error::BadRank {
                op: "supernode_transform",
                expected: "[batch, channels, h, w]",
                got: shape,
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadGeometry {
                expected: "even spatial extents >= 2".into(),
                got: format!("{h}x{w}"),
            });
        }
        let y = self.transform.forward(ctx, reg, f)?;
        let ns = (h / 2) * (w / 2);
        ctx.tape.reshape(y, vec![shape[0], self.channels, ns])
    }

    /// Similarity map of one sample's supernode features:
    /// `M = phi(fhat) . theta(fhat)' / sqrt(n_s)`, shape `[C,C]`.
    pub fn similarity_map(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        fhat: Var,
    ) -> Result<Var> {
        let ns = ctx.tape.shape(fhat)[1];
        let phi = ctx.param(reg, &format!("{}.phi", self.path))?;
        let theta = ctx.param(reg, &format!("{}.theta", self.path))?;
        let pf = ctx.tape.matmul(phi, fhat)?;
        let tf = ctx.tape.matmul(theta, fhat)?;
        let tft = ctx.tape.transpose2(tf)?;
        let m = ctx.tape.matmul(pf, tft)?;
        Ok(ctx.tape.scale(m, 1.0 / (ns as f64).sqrt()))
    }

    /// GCN step over the channel graph: `relu((A + I) . M . W)`.
    pub fn gcn_update(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, m: Var) -> Result<Var> {
        let c = self.channels;
        let adj = ctx.param(reg, &format!("{}.adj", self.path))?;
        let w = ctx.param(reg, &format!("{}.gcn_w", self.path))?;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let i_c = ctx.tape.constant(vec![c, c], eye);
        let a_loop = ctx.tape.add(adj, i_c)?;
        let am = ctx.tape.matmul(a_loop, m)?;
        let amw = ctx.tape.matmul(am, w)?;
        Ok(ctx.tape.relu(amw))
    }

    /// Inverse projection and residual fuse for one sample:
    /// reshape(Mhat . fhat) back to half resolution, deconvolve up, add f.
    pub fn inverse_project_and_fuse(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        mhat: Var,
        fhat: Var,
        f: Var,
    ) -> Result<Var> {
        let fshape = ctx.tape.shape(f).to_vec();
        let (h, w) = (fshape[2], fshape[3]);
        let proj = ctx.tape.matmul(mhat, fhat)?;
        let half = ctx
            .tape
            .reshape(proj, vec![1, self.channels, h / 2, w / 2])?;
        let up = self.inv.forward(ctx, reg, half)?;
        if ctx.tape.shape(up) != fshape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "grm inverse projection".into(),
                lhs: ctx.tape.shape(up).to_vec(),
                rhs: fshape,
            });
        }
        ctx.tape.add(f, up)
    }

    /// Full block over a batch; optionally captures sample 0's similarity
    /// and reasoned maps.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        f: Var,
        mut dump: Option<&mut GrmDump>,
    ) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        let batch = shape[0];
        let (h, w) = (shape[2], shape[3]);
        let fhat_all = self.supernode_transform(ctx, reg, f)?;
        let ns = (h / 2) * (w / 2);
        let mut halves = Vec::with_capacity(batch);
        for b in 0..batch {
            let fhat_b = ctx.tape.slice_axis0(fhat_all, b, 1)?;
            let fhat = ctx.tape.reshape(fhat_b, vec![self.channels, ns])?;
            let m = self.similarity_map(ctx, reg, fhat)?;
            let mhat = self.gcn_update(ctx, reg, m)?;
            if b == 0 {
                if let Some(d) = dump.as_deref_mut() {
                    d.similarity = Some(ctx.tape.value_tensor(m));
                    d.reasoned = Some(ctx.tape.value_tensor(mhat));
                }
            }
            let proj = ctx.tape.matmul(mhat, fhat)?;
            halves.push(ctx.tape.reshape(proj, vec![1, self.channels, h / 2, w / 2])?);
        }
        let stacked = ctx.tape.concat(&halves, 0)?;
        let up = self.inv.forward(ctx, reg, stacked)?;
        ctx.tape.add(f, up)
    }
}

/// Squeeze-and-excitation gate: global average pool, bottleneck MLP,
/// sigmoid channel scaling. The ablation counterpart of the GRM.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub channels: usize,
    pub path: String,
    fc1: Linear,
    fc2: Linear,
}

impl SeGate {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        let path = path.into();
        let squeeze = (channels / 4).max(1);
        SeGate {
            channels,
            fc1: Linear::new(format!("{path}.fc1"), channels, squeeze),
            fc2: Linear::new(format!("{path}.fc2"), squeeze, channels),
            path,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng) {
        self.fc1.register(reg, rng, 1.0);
        self.fc2.register(reg, rng, 1.0);
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, f: Var) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let s3 = ctx.tape.sum_axis(f, 3)?;
        let s2 = ctx.tape.sum_axis(s3, 2)?;
        let pooled = ctx.tape.scale(s2, 1.0 / (h * w) as f64);
        let flat = ctx.tape.reshape(pooled, vec![b, c])?;
        let hid = self.fc1.forward(ctx, reg, flat)?;
        let hid = ctx.tape.relu(hid);
        let gate = self.fc2.forward(ctx, reg, hid)?;
        let gate = ctx.tape.sigmoid(gate);
        let gate4 = ctx.tape.reshape(gate, vec![b, c, 1, 1])?;
        ctx.tape.mul(f, gate4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::rng::stream;
    use crate::tape::Tape;

    fn setup(channels: usize) -> (GrmLevel, ParamRegistry) {
        let level = GrmLevel::new("grm", channels);
        let mut reg = ParamRegistry::new();
        let mut r = stream(11, "grm-test");
        level.register(&mut reg, &mut r);
        (level, reg)
    }

    fn set(reg: &mut ParamRegistry, path: &str, data: Vec<f64>) {
        reg.get_mut(path).unwrap().tensor.data.copy_from_slice(&data);
    }

    fn eye(c: usize) -> Vec<f64> {
        let mut e = vec![0.0; c * c];
        for i in 0..c {
            e[i * c + i] = 1.0;
        }
        e
    }

    #[test]
    fn supernode_shape_arithmetic() {
        let (level, reg) = setup(2);
        let mut ctx = ForwardCtx::new(false);
        let f = ctx.tape.leaf_data(vec![1, 2, 4, 4], (0..32).map(|i| i as f64).collect(), false);
        let fhat = level.supernode_transform(&mut ctx, &reg, f).unwrap();
        assert_eq!(ctx.tape.shape(fhat), &[1, 2, 4]);
    }

    #[test]
    fn supernode_rejects_odd_extents() {
        let (level, reg) = setup(2);
        let mut ctx = ForwardCtx::new(false);
        let f = ctx.tape.leaf_data(vec![1, 2, 5, 4], vec![0.0; 40], false);
        assert!(matches!(
            level.supernode_transform(&mut ctx, &reg, f),
            Err(Error::BadGeometry { .. })
        ));
        let f1 = ctx.tape.leaf_data(vec![1, 2, 4, 1], vec![0.0; 8], false);
        assert!(level.supernode_transform(&mut ctx, &reg, f1).is_err());
    }

    #[test]
    fn delta_kernel_subsamples() {
        // Centered delta kernel: supernodes equal the stride-2 subsample.
        let c = 2;
        let (level, mut reg) = setup(c);
        let mut w = vec![0.0; c * c * 9];
        for ch in 0..c {
            w[(ch * c + ch) * 9 + 4] = 1.0; // center tap of own channel
        }
        set(&mut reg, "grm.transform.w", w);
        set(&mut reg, "grm.transform.b", vec![0.0; c]);
        let mut ctx = ForwardCtx::new(false);
        let data: Vec<f64> = (0..c * 16).map(|i| i as f64).collect();
        let f = ctx.tape.leaf_data(vec![1, c, 4, 4], data.clone(), false);
        let fhat = level.supernode_transform(&mut ctx, &reg, f).unwrap();
        let v = ctx.tape.value(fhat);
        // stride-2 k=3 pad=1: output (oy,ox) samples input (2oy, 2ox).
        for ch in 0..c {
            for oy in 0..2 {
                for ox in 0..2 {
                    let want = data[ch * 16 + (2 * oy) * 4 + 2 * ox];
                    assert_eq!(v[ch * 4 + oy * 2 + ox], want);
                }
            }
        }
    }

    #[test]
    fn similarity_orthonormal_rows() {
        let c = 2;
        let (level, mut reg) = setup(c);
        set(&mut reg, "grm.phi", eye(c));
        set(&mut reg, "grm.theta", eye(c));
        let mut ctx = ForwardCtx::new(false);
        let fhat = ctx.tape.leaf_data(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let m = level.similarity_map(&mut ctx, &reg, fhat).unwrap();
        let v = ctx.tape.value(m);
        let s = 1.0 / 2.0_f64.sqrt();
        assert!((v[0] - s).abs() < 1e-15 && (v[3] - s).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn similarity_is_symmetric_psd_with_identity_maps() {
        let c = 5;
        let ns = 7;
        let (level, mut reg) = setup(c);
        set(&mut reg, "grm.phi", eye(c));
        set(&mut reg, "grm.theta", eye(c));
        let mut r = stream(5, "psd");
        let data: Vec<f64> = (0..c * ns).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(false);
        let fhat = ctx.tape.leaf_data(vec![c, ns], data, false);
        let m = level.similarity_map(&mut ctx, &reg, fhat).unwrap();
        let v = ctx.tape.value(m);
        for i in 0..c {
            for j in 0..c {
                assert_eq!(v[i * c + j], v[j * c + i], "symmetry at ({i},{j})");
            }
        }
        // Gram matrices are PSD: x' M x >= 0 for any x.
        for trial in 0..10 {
            let x: Vec<f64> = (0..c).map(|i| ((i + trial) as f64 * 0.77).sin()).collect();
            let mut q = 0.0;
            for i in 0..c {
                for j in 0..c {
                    q += x[i] * v[i * c + j] * x[j];
                }
            }
            assert!(q >= -1e-12, "quadratic form negative: {q}");
        }
    }

    #[test]
    fn similarity_matches_naive_dot_products() {
        let c = 6;
        let ns = 9;
        let (level, reg) = setup(c);
        let mut r = stream(17, "sim-oracle");
        let data: Vec<f64> = (0..c * ns).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(false);
        let fhat = ctx.tape.leaf_data(vec![c, ns], data.clone(), false);
        let m = level.similarity_map(&mut ctx, &reg, fhat).unwrap();
        let got = ctx.tape.value(m);

        // Naive: map rows by phi/theta then take scaled dot products.
        let phi = &reg.get("grm.phi").unwrap().tensor.data;
        let theta = &reg.get("grm.theta").unwrap().tensor.data;
        let map_rows = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c * ns];
            for i in 0..c {
                for j in 0..ns {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += w[i * c + k] * data[k * ns + j];
                    }
                    out[i * ns + j] = acc;
                }
            }
            out
        };
        let pf = map_rows(phi);
        let tf = map_rows(theta);
        let scale = 1.0 / (ns as f64).sqrt();
        for j in 0..c {
            for k in 0..c {
                let mut dot = 0.0;
                for s in 0..ns {
                    dot += pf[j * ns + s] * tf[k * ns + s];
                }
                assert!(
                    (got[j * c + k] - dot * scale).abs() < 1e-10,
                    "entry ({j},{k})"
                );
            }
        }
    }

    #[test]
    fn gcn_self_loop_identity_passthrough() {
        let c = 3;
        let (level, mut reg) = setup(c);
        set(&mut reg, "grm.adj", vec![0.0; c * c]);
        set(&mut reg, "grm.gcn_w", eye(c));
        let mut ctx = ForwardCtx::new(false);
        let m_data = vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0, 0.0, 1.5, 4.0];
        let m = ctx.tape.leaf_data(vec![c, c], m_data.clone(), false);
        let out = level.gcn_update(&mut ctx, &reg, m).unwrap();
        assert_eq!(ctx.tape.value(out), &m_data[..]);

        // A negative entry clamps to zero under the ReLU.
        let mut neg = m_data;
        neg[4] = -0.7;
        let m2 = ctx.tape.leaf_data(vec![c, c], neg.clone(), false);
        let out2 = level.gcn_update(&mut ctx, &reg, m2).unwrap();
        let v = ctx.tape.value(out2);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[0], neg[0]);
    }

    #[test]
    fn gcn_matches_naive_triple_loop() {
        let c = 5;
        let (level, reg) = setup(c);
        let mut r = stream(23, "gcn-oracle");
        let m_data: Vec<f64> = (0..c * c).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(false);
        let m = ctx.tape.leaf_data(vec![c, c], m_data.clone(), false);
        let out = level.gcn_update(&mut ctx, &reg, m).unwrap();
        let got = ctx.tape.value(out);

        let a = &reg.get("grm.adj").unwrap().tensor.data;
        let w = &reg.get("grm.gcn_w").unwrap().tensor.data;
        // (A+I)·M
        let mut am = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..c {
                    let aik = a[i * c + k] + if i == k { 1.0 } else { 0.0 };
                    acc += aik * m_data[k * c + j];
                }
                am[i * c + j] = acc;
            }
        }
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += am[i * c + k] * w[k * c + j];
                }
                let want = acc.max(0.0);
                assert!((got[i * c + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reduction_regime_is_bit_exact_skip() {
        let c = 4;
        let (level, mut reg) = setup(c);
        level.set_reduction_params(&mut reg).unwrap();
        let mut r = stream(31, "reduction");
        let data: Vec<f64> = (0..2 * c * 8 * 8).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(false);
        let f = ctx.tape.leaf_data(vec![2, c, 8, 8], data.clone(), false);
        let g = level.forward(&mut ctx, &reg, f, None).unwrap();
        assert_eq!(ctx.tape.value(g), &data[..], "reduction must equal skip exactly");
    }

    #[test]
    fn residual_identity_when_projection_zero() {
        // Zeroed inverse projection wipes the reasoning branch even with
        // generic graph parameters.
        let c = 3;
        let (level, mut reg) = setup(c);
        reg.get_mut("grm.inv.w").unwrap().tensor.data.fill(0.0);
        reg.get_mut("grm.inv.b").unwrap().tensor.data.fill(0.0);
        let mut r = stream(37, "resid");
        let data: Vec<f64> = (0..c * 16).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(false);
        let f = ctx.tape.leaf_data(vec![1, c, 4, 4], data.clone(), false);
        let g = level.forward(&mut ctx, &reg, f, None).unwrap();
        assert_eq!(ctx.tape.value(g), &data[..]);
    }

    #[test]
    fn adjacency_receives_gradient() {
        let c = 3;
        let (level, mut reg) = setup(c);
        let mut r = stream(41, "adj-grad");
        let data: Vec<f64> = (0..c * 16).map(|_| rng::normal(&mut r)).collect();
        let mut ctx = ForwardCtx::new(true);
        let f = ctx.tape.leaf_data(vec![1, c, 4, 4], data, false);
        let g = level.forward(&mut ctx, &reg, f, None).unwrap();
        let sq = ctx.tape.square(g);
        let loss = ctx.tape.sum(sq);
        ctx.tape.backward(loss).unwrap();
        ctx.apply_grads(&mut reg).unwrap();
        let adj_grad = reg.get("grm.adj").unwrap().tensor.grad.as_ref().unwrap().clone();
        let norm: f64 = adj_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "adjacency gradient vanished: {norm}");
    }

    #[test]
    fn grm_end_to_end_gradcheck() {
        let c = 2;
        let (level, reg) = setup(c);
        let mut r = stream(43, "grm-gc");
        let data: Vec<f64> = (0..c * 16).map(|_| rng::normal(&mut r)).collect();
        let f_tensor = Tensor::new(vec![1, c, 4, 4], data).unwrap();
        let report = gradcheck(
            |tape: &mut Tape, vars| {
                let mut ctx = ForwardCtx::new(false);
                std::mem::swap(&mut ctx.tape, tape);
                let g = level.forward(&mut ctx, &reg, vars[0], None)?;
                let sq = ctx.tape.square(g);
                let loss = ctx.tape.sum(sq);
                std::mem::swap(&mut ctx.tape, tape);
                Ok(loss)
            },
            &[("f", f_tensor)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }

    #[test]
    fn se_gate_shapes_and_bounds() {
        let se = SeGate::new("se", 4);
        let mut reg = ParamRegistry::new();
        let mut r = stream(47, "se");
        se.register(&mut reg, &mut r);
        let mut ctx = ForwardCtx::new(false);
        let data: Vec<f64> = (0..2 * 4 * 4 * 4).map(|i| (i as f64 * 0.1).sin()).collect();
        let f = ctx.tape.leaf_data(vec![2, 4, 4, 4], data.clone(), false);
        let g = se.forward(&mut ctx, &reg, f).unwrap();
        assert_eq!(ctx.tape.shape(g), &[2, 4, 4, 4]);
        // Sigmoid gate in (0,1): output magnitude bounded by input magnitude.
        for (y, x) in ctx.tape.value(g).iter().zip(&data) {
            assert!(y.abs() <= x.abs() + 1e-15);
        }
    }
}
