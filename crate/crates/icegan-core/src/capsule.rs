//! Multi-task discriminator: a PatchGAN feature encoder feeding primary
//! capsules, routed by agreement into an adversarial capsule (real/fake)
//! and per-class expression capsules, plus a reconstruction regularizer.
//! A plain CNN head stands in for the capsule layers on the ablation axis.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, ForwardCtx, Linear, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 128;
const NORM_GUARD: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscKind {
    Capsule,
    Cnn,
    CnnLarge,
}

impl std::str::FromStr for DiscKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capsule" => Ok(DiscKind::Capsule),
            "cnn" => Ok(DiscKind::Cnn),
            "cnn_large" => Ok(DiscKind::CnnLarge),
            other => Err(Error::Config(format!(
                "unknown discriminator {other:?}, expected capsule|cnn|cnn_large"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorCfg {
    /// PatchGAN channel plan; strides 2,2,2,1.
    pub patch_plan: Vec<usize>,
    pub n_prim: usize,
    pub d_prim: usize,
    pub d_adv: usize,
    pub d_exp: usize,
    pub routing_iters: usize,
    pub n_classes: usize,
    pub kind: DiscKind,
    /// Head width for the CNN ablation counterparts.
    pub cnn_width: usize,
    pub cnn_large_width: usize,
}

impl Default for DiscriminatorCfg {
    fn default() -> Self {
        DiscriminatorCfg {
            patch_plan: vec![64, 128, 256, 512],
            n_prim: 8,
            d_prim: 16,
            d_adv: 256,
            d_exp: 32,
            routing_iters: 3,
            n_classes: 3,
            kind: DiscKind::Capsule,
            cnn_width: 64,
            cnn_large_width: 2600,
        }
    }
}

/// Receptive field of the final units of a conv chain given (kernel, stride)
/// pairs from input to output.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Forward outputs of the discriminator on a batch.
pub struct DiscOut {
    /// ‖AdvCaps pose‖ in (0,1), interpreted as probability-of-real; `[B]`.
    pub adv_len: Var,
    /// Per-class pose lengths `[B, n_classes]`.
    pub exp_lengths: Var,
    /// Expression poses `[B, n_classes, d_exp]`; absent for CNN heads.
    pub exp_poses: Option<Var>,
    /// Final routing couplings `[B, L, n_classes]` for diagnostics.
    pub exp_couplings: Option<Tensor>,
}

pub struct Discriminator {
    pub cfg: DiscriminatorCfg,
    patch: Vec<Conv2d>,
    primary: Option<Conv2d>,
    recon: Option<(Linear, Linear, Linear)>,
    cnn_head: Option<(Conv2d, Conv2d)>,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorCfg) -> Self {
        assert_eq!(cfg.patch_plan.len(), 4, "PatchGAN uses four conv layers");
        let p = &cfg.patch_plan;
        let mut patch = Vec::new();
        for i in 0..4 {
            let c_in = if i == 0 { 1 } else { p[i - 1] };
            let stride = if i == 3 { 1 } else { 2 };
            patch.push(Conv2d::new(
                format!("disc.patch{}", i + 1),
                ConvSpec::new(c_in, p[i], 4, stride, 1),
            ));
        }
        let (primary, recon, cnn_head) = match cfg.kind {
            DiscKind::Capsule => {
                let primary = Conv2d::new(
                    "disc.primary",
                    ConvSpec::new(p[3], cfg.n_prim * cfg.d_prim, 4, 2, 1),
                );
                let recon_in = cfg.n_classes * cfg.d_exp;
                let recon = (
                    Linear::new("disc.recon1", recon_in, 512),
                    Linear::new("disc.recon2", 512, 1024),
                    Linear::new("disc.recon3", 1024, IMAGE_SIZE * IMAGE_SIZE),
                );
                (Some(primary), Some(recon), None)
            }
            DiscKind::Cnn | DiscKind::CnnLarge => {
                let width = if cfg.kind == DiscKind::Cnn {
                    cfg.cnn_width
                } else {
                    cfg.cnn_large_width
                };
                let a = Conv2d::new("disc.cnn_a", ConvSpec::new(p[3], width, 4, 2, 1));
                let b = Conv2d::new(
                    "disc.cnn_b",
                    ConvSpec::new(width, 1 + cfg.n_classes, 4, 1, 1),
                );
                (None, None, Some((a, b)))
            }
        };
        Discriminator {
            cfg,
            patch,
            primary,
            recon,
            cnn_head,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng) {
        for c in &self.patch {
            c.register(reg, rng, 1.0);
        }
        if let Some(primary) = &self.primary {
            primary.register(reg, rng, 1.0);
            let grid = self.primary_grid();
            let n_lower = self.cfg.n_prim * grid * grid;
            let route_std = |d_out: usize| 1.0 / (self.cfg.d_prim as f64 * d_out as f64).sqrt();
            reg.insert(
                "disc.route_adv.w",
                Tensor::new(
                    vec![n_lower, self.cfg.d_prim, self.cfg.d_adv],
                    crate::rng::normal_vec(
                        rng,
                        n_lower * self.cfg.d_prim * self.cfg.d_adv,
                        route_std(self.cfg.d_adv) * 4.0,
                    ),
                )
                .expect("static shape"),
            );
            reg.insert(
                "disc.route_exp.w",
                Tensor::new(
                    vec![n_lower, self.cfg.d_prim, self.cfg.n_classes * self.cfg.d_exp],
                    crate::rng::normal_vec(
                        rng,
                        n_lower * self.cfg.d_prim * self.cfg.n_classes * self.cfg.d_exp,
                        route_std(self.cfg.d_exp) * 4.0,
                    ),
                )
                .expect("static shape"),
            );
        }
        if let Some((r1, r2, r3)) = &self.recon {
            r1.register(reg, rng, 1.0);
            r2.register(reg, rng, 1.0);
            r3.register(reg, rng, 1.0);
        }
        if let Some((a, b)) = &self.cnn_head {
            a.register(reg, rng, 1.0);
            b.register(reg, rng, 1.0);
        }
    }

    /// Spatial grid side of the primary-capsule map on 128x128 inputs:
    /// 128 -> 64 -> 32 -> 16 -> 15 -> 7.
    pub fn primary_grid(&self) -> usize {
        let mut h = IMAGE_SIZE;
        for (i, _) in self.patch.iter().enumerate() {
            let s = if i == 3 { 1 } else { 2 };
            h = (h + 2 - 4) / s + 1;
        }
        (h + 2 - 4) / 2 + 1
    }

    pub fn n_lower(&self) -> usize {
        let g = self.primary_grid();
        self.cfg.n_prim * g * g
    }

    fn patch_forward(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
            return Err(Error::BadGeometry {
                expected: format!("[batch, 1, {IMAGE_SIZE}, {IMAGE_SIZE}]"),
                got: format!("{shape:?}"),
            });
        }
        let mut h = x;
        for conv in &self.patch {
            let y = conv.forward(ctx, reg, h)?;
            h = ctx.tape.leaky_relu(y, 0.2);
        }
        Ok(h)
    }

    /// Primary capsule bank `[B, L, d_prim]`, squashed.
    fn primary_caps(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<Var> {
        let features = self.patch_forward(ctx, reg, x)?;
        let primary = self.primary.as_ref().expect("capsule kind");
        let y = primary.forward(ctx, reg, features)?;
        let shape = ctx.tape.shape(y).to_vec();
        let (b, grid) = (shape[0], shape[2]);
        let pos = grid * shape[3];
        // [B, n_prim*d_prim, g, g] -> [B, n_prim, d_prim, pos] -> swap ->
        // [B, n_prim, pos, d_prim] -> [B, L, d_prim]
        let r = ctx
            .tape
            .reshape(y, vec![b, self.cfg.n_prim, self.cfg.d_prim, pos])?;
        let sw = ctx.tape.swap_axes(r, 2, 3)?;
        let u = ctx
            .tape
            .reshape(sw, vec![b, self.cfg.n_prim * pos, self.cfg.d_prim])?;
        squash(&mut ctx.tape, u)
    }

    /// Full capsule forward pass.
    pub fn discriminate(&self, ctx: &mut ForwardCtx, reg: &ParamRegistry, x: Var) -> Result<DiscOut> {
        match self.cfg.kind {
            DiscKind::Capsule => {
                let u = self.primary_caps(ctx, reg, x)?;
                let w_adv = ctx.param(reg, "disc.route_adv.w")?;
                let (v_adv, _) =
                    dynamic_route(&mut ctx.tape, u, w_adv, 1, self.cfg.d_adv, self.cfg.routing_iters)?;
                let adv_len2 = pose_lengths(&mut ctx.tape, v_adv)?;
                let b = ctx.tape.shape(adv_len2)[0];
                let adv_len = ctx.tape.reshape(adv_len2, vec![b])?;

                let w_exp = ctx.param(reg, "disc.route_exp.w")?;
                let (v_exp, exp_couplings) = dynamic_route(
                    &mut ctx.tape,
                    u,
                    w_exp,
                    self.cfg.n_classes,
                    self.cfg.d_exp,
                    self.cfg.routing_iters,
                )?;
                let exp_lengths = pose_lengths(&mut ctx.tape, v_exp)?;
                Ok(DiscOut {
                    adv_len,
                    exp_lengths,
                    exp_poses: Some(v_exp),
                    exp_couplings: Some(exp_couplings),
                })
            }
            DiscKind::Cnn | DiscKind::CnnLarge => {
                let features = self.patch_forward(ctx, reg, x)?;
                let (conv_a, conv_b) = self.cnn_head.as_ref().expect("cnn kind");
                let a = conv_a.forward(ctx, reg, features)?;
                let a = ctx.tape.leaky_relu(a, 0.2);
                let logits = conv_b.forward(ctx, reg, a)?;
                let shape = ctx.tape.shape(logits).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let s3 = ctx.tape.sum_axis(logits, 3)?;
                let s2 = ctx.tape.sum_axis(s3, 2)?;
                let pooled = ctx.tape.scale(s2, 1.0 / (shape[2] * shape[3]) as f64);
                let flat = ctx.tape.reshape(pooled, vec![b, c])?;
                // Channel 0 is the adversarial logit, the rest class logits.
                let by_chan = ctx.tape.transpose2(flat)?;
                let adv_row = ctx.tape.slice_axis0(by_chan, 0, 1)?;
                let adv_sig = ctx.tape.sigmoid(adv_row);
                let adv_len = ctx.tape.reshape(adv_sig, vec![b])?;
                let cls_rows = ctx.tape.slice_axis0(by_chan, 1, self.cfg.n_classes)?;
                let cls_logits = ctx.tape.transpose2(cls_rows)?;
                let exp_lengths = ctx.tape.softmax_last(cls_logits);
                Ok(DiscOut {
                    adv_len,
                    exp_lengths,
                    exp_poses: None,
                    exp_couplings: None,
                })
            }
        }
    }

    /// Reconstruction branch: zero-masks every class pose except the true
    /// one and decodes back to a `[B,1,128,128]` image in [0,1].
    pub fn reconstruct(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        exp_poses: Var,
        true_classes: &[usize],
    ) -> Result<Var> {
        let (r1, r2, r3) = self
            .recon
            .as_ref()
            .ok_or_else(|| Error::Config("reconstruction requires the capsule head".into()))?;
        let shape = ctx.tape.shape(exp_poses).to_vec();
        let (b, nc, d) = (shape[0], shape[1], shape[2]);
        if true_classes.len() != b {
            return Err(Error::Config("one true class per batch row".into()));
        }
        let mut mask = vec![0.0; b * nc];
        for (i, &c) in true_classes.iter().enumerate() {
            if c >= nc {
                return Err(Error::InvalidClass { got: c, n_classes: nc });
            }
            mask[i * nc + c] = 1.0;
        }
        let mask = ctx.tape.constant(vec![b, nc, 1], mask);
        let masked = ctx.tape.mul(exp_poses, mask)?;
        let flat = ctx.tape.reshape(masked, vec![b, nc * d])?;
        let h1 = r1.forward(ctx, reg, flat)?;
        let h1 = ctx.tape.relu(h1);
        let h2 = r2.forward(ctx, reg, h1)?;
        let h2 = ctx.tape.relu(h2);
        let out = r3.forward(ctx, reg, h2)?;
        let out = ctx.tape.sigmoid(out);
        ctx.tape.reshape(out, vec![b, 1, IMAGE_SIZE, IMAGE_SIZE])
    }
}

/// squash(s) = (‖s‖² / (1 + ‖s‖²)) · s/‖s‖ along the last axis, extended
/// continuously with squash(0) = 0. Output norms are strictly below 1.
pub fn squash(tape: &mut Tape, s: Var) -> Result<Var> {
    let rank = tape.shape(s).len();
    let sq = tape.square(s);
    let t = tape.sum_axis(sq, rank - 1)?;
    let guarded = tape.add_scalar(t, NORM_GUARD);
    let norm = tape.sqrt_(guarded);
    let denom = tape.add_scalar(t, 1.0);
    let factor = tape.div(norm, denom)?;
    tape.mul(s, factor)
}

/// Euclidean norms along the last axis, dropping it: `[.., d] -> [..]`.
pub fn pose_lengths(tape: &mut Tape, v: Var) -> Result<Var> {
    let rank = tape.shape(v).len();
    let sq = tape.square(v);
    let t = tape.sum_axis(sq, rank - 1)?;
    let guarded = tape.add_scalar(t, NORM_GUARD);
    let norm = tape.sqrt_(guarded);
    let mut shape = tape.shape(norm).to_vec();
    shape.pop();
    tape.reshape(norm, shape)
}

/// Routing by agreement. Coupling logits are recomputed from values each
/// iteration and enter the tape only as constants, so gradients flow
/// through the final coupling but not the logit recursion. Returns the
/// squashed upper poses `[B, U, d_out]` and the final couplings.
pub fn dynamic_route(
    tape: &mut Tape,
    u: Var,
    w: Var,
    n_upper: usize,
    d_out: usize,
    iters: usize,
) -> Result<(Var, Tensor)> {
    assert!(iters >= 1, "at least one routing iteration");
    let preds = tape.caps_predict(u, w)?; // [B, L, U*d_out]
    let shape = tape.shape(preds).to_vec();
    let (b, l) = (shape[0], shape[1]);
    let preds4 = tape.reshape(preds, vec![b, l, n_upper, d_out])?;
    let coupling = route_couplings(tape.value(preds4), b, l, n_upper, d_out, iters)?;
    let c = tape.constant(vec![b, l, n_upper, 1], coupling.clone());
    let weighted = tape.mul(preds4, c)?;
    let s = tape.sum_axis(weighted, 1)?; // [B, 1, U, d]
    let s = tape.reshape(s, vec![b, n_upper, d_out])?;
    let v = squash(tape, s)?;
    let couplings = Tensor::new(vec![b, l, n_upper], coupling)?;
    Ok((v, couplings))
}

/// Value-space squash used inside the routing iterations.
fn squash_rows(s: &mut [f64], d: usize) {
    for row in s.chunks_mut(d) {
        let t: f64 = row.iter().map(|x| x * x).sum();
        let factor = (t + NORM_GUARD).sqrt() / (1.0 + t);
        for x in row.iter_mut() {
            *x *= factor;
        }
    }
}

/// Runs the agreement iterations on plain values, returning flat couplings
/// `[B, L, U]`. Errors if logits stop being finite.
fn route_couplings(
    preds: &[f64],
    b: usize,
    l: usize,
    n_upper: usize,
    d_out: usize,
    iters: usize,
) -> Result<Vec<f64>> {
    let mut logits = vec![0.0; b * l * n_upper];
    let mut coupling = vec![0.0; b * l * n_upper];
    for it in 0..iters {
        softmax_last_dim(&logits, n_upper, &mut coupling);
        if it + 1 == iters {
            break;
        }
        // s[b,u,:] = sum_l c[b,l,u] * preds[b,l,u,:], then squash.
        let mut s = vec![0.0; b * n_upper * d_out];
        for bi in 0..b {
            for li in 0..l {
                for ui in 0..n_upper {
                    let cval = coupling[(bi * l + li) * n_upper + ui];
                    let p = &preds[((bi * l + li) * n_upper + ui) * d_out..][..d_out];
                    let dst = &mut s[(bi * n_upper + ui) * d_out..][..d_out];
                    for (dd, pp) in dst.iter_mut().zip(p) {
                        *dd += cval * pp;
                    }
                }
            }
        }
        squash_rows(&mut s, d_out);
        // Agreement update: b += <v_j, u_hat>.
        for bi in 0..b {
            for li in 0..l {
                for ui in 0..n_upper {
                    let p = &preds[((bi * l + li) * n_upper + ui) * d_out..][..d_out];
                    let v = &s[(bi * n_upper + ui) * d_out..][..d_out];
                    let dot: f64 = p.iter().zip(v).map(|(a, c)| a * c).sum();
                    let slot = &mut logits[(bi * l + li) * n_upper + ui];
                    *slot += dot;
                    if !slot.is_finite() {
                        return Err(Error::RoutingDiverged {
                            iteration: it,
                            detail: format!("logit[b={bi},l={li},u={ui}] = {slot}"),
                        });
                    }
                }
            }
        }
    }
    Ok(coupling)
}

fn softmax_last_dim(logits: &[f64], n: usize, out: &mut [f64]) {
    for (lrow, orow) in logits.chunks(n).zip(out.chunks_mut(n)) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &l) in orow.iter_mut().zip(lrow) {
            *o = (l - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
}

/// Per-iteration couplings for a single sample's predictions; used by the
/// agreement-monotonicity oracle and invariants tests.
pub fn route_coupling_trace(
    preds: &Tensor,
    n_upper: usize,
    d_out: usize,
    iters: usize,
) -> Result<Vec<Vec<f64>>> {
    let l = preds.shape[0];
    let flat = &preds.data;
    let mut trace = Vec::with_capacity(iters);
    for it in 1..=iters {
        let c = route_couplings(flat, 1, l, n_upper, d_out, it)?;
        trace.push(c);
    }
    Ok(trace)
}

/// Routing with externally fixed couplings: the forward map whose gradient
/// the tape actually computes. Used by the gradient checker.
pub fn route_with_fixed_coupling(
    tape: &mut Tape,
    u: Var,
    w: Var,
    coupling: &Tensor,
    n_upper: usize,
    d_out: usize,
) -> Result<Var> {
    let preds = tape.caps_predict(u, w)?;
    let shape = tape.shape(preds).to_vec();
    let (b, l) = (shape[0], shape[1]);
    let preds4 = tape.reshape(preds, vec![b, l, n_upper, d_out])?;
    let c = tape.constant(vec![b, l, n_upper, 1], coupling.data.clone());
    let weighted = tape.mul(preds4, c)?;
    let s = tape.sum_axis(weighted, 1)?;
    let s = tape.reshape(s, vec![b, n_upper, d_out])?;
    squash(tape, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    #[test]
    fn squash_zero_is_zero() {
        let mut tape = Tape::new();
        let s = tape.leaf_data(vec![1, 4], vec![0.0; 4], false);
        let v = squash(&mut tape, s).unwrap();
        assert_eq!(tape.value(v), &[0.0; 4]);
    }

    #[test]
    fn squash_unit_norm_halves() {
        let mut tape = Tape::new();
        let s = tape.leaf_data(vec![1, 2], vec![0.6, 0.8], false);
        let v = squash(&mut tape, s).unwrap();
        let out = tape.value(v);
        let norm = (out[0] * out[0] + out[1] * out[1]).sqrt();
        assert!((norm - 0.5).abs() < 1e-12, "norm {norm}");
        // Direction preserved.
        assert!((out[0] / out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_monotone_toward_one() {
        let mut tape = Tape::new();
        let mut prev = 0.0;
        for scale in [1.0, 10.0, 100.0] {
            let s = tape.leaf_data(vec![1, 3], vec![scale, 0.0, 0.0], false);
            let v = squash(&mut tape, s).unwrap();
            let n = tape.value(v)[0].abs();
            assert!(n > prev && n < 1.0, "norm {n} at scale {scale}");
            prev = n;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn squash_norms_strictly_below_one_in_bulk() {
        let mut r = stream(77, "squash-bulk");
        let mut tape = Tape::new();
        for _ in 0..200 {
            let scale = 10f64.powf(r.gen_range(-3.0..3.0));
            let data = normal_vec(&mut r, 8, scale);
            let s = tape.leaf_data(vec![1, 8], data, false);
            let v = squash(&mut tape, s).unwrap();
            let n: f64 = tape.value(v).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n < 1.0, "norm {n} not strictly below 1");
        }
    }

    #[test]
    fn single_upper_coupling_is_one() {
        let mut r = stream(5, "route1");
        let (l, d_in, d_out) = (6, 4, 5);
        let mut tape = Tape::new();
        let u = tape.leaf_data(vec![1, l, d_in], normal_vec(&mut r, l * d_in, 1.0), false);
        let w = tape.leaf_data(vec![l, d_in, d_out], normal_vec(&mut r, l * d_in * d_out, 0.5), false);
        for iters in [1, 3, 5] {
            let (_, c) = dynamic_route(&mut tape, u, w, 1, d_out, iters).unwrap();
            assert!(c.data.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn couplings_sum_to_one_every_iteration() {
        let mut r = stream(6, "route-sums");
        let (l, n_upper, d_out) = (10, 3, 4);
        let preds = Tensor::new(
            vec![l, n_upper * d_out],
            normal_vec(&mut r, l * n_upper * d_out, 1.0),
        )
        .unwrap();
        let trace = route_coupling_trace(&preds, n_upper, d_out, 4).unwrap();
        for (it, c) in trace.iter().enumerate() {
            for li in 0..l {
                let s: f64 = c[li * n_upper..(li + 1) * n_upper].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "iter {it} lower {li}: sum {s}");
            }
        }
    }

    #[test]
    fn agreement_concentrates_coupling() {
        // All lower capsules predict the same vector for upper 0 and noise
        // for the others: coupling entropy must not increase and mass must
        // shift toward upper 0.
        let (l, n_upper, d_out) = (12, 3, 4);
        let mut r = stream(7, "agreement");
        let target = [2.0, -1.0, 0.5, 1.5];
        let mut preds = vec![0.0; l * n_upper * d_out];
        for li in 0..l {
            for ui in 0..n_upper {
                for di in 0..d_out {
                    preds[(li * n_upper + ui) * d_out + di] = if ui == 0 {
                        target[di]
                    } else {
                        crate::rng::normal(&mut r) * 0.2
                    };
                }
            }
        }
        let preds = Tensor::new(vec![l, n_upper * d_out], preds).unwrap();
        let trace = route_coupling_trace(&preds, n_upper, d_out, 4).unwrap();
        let entropy = |c: &[f64]| -> f64 {
            let mut h = 0.0;
            for li in 0..l {
                for ui in 0..n_upper {
                    let p = c[li * n_upper + ui];
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
            }
            h / l as f64
        };
        let hs: Vec<f64> = trace.iter().map(|c| entropy(c)).collect();
        for w in hs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "entropy increased: {hs:?}");
        }
        let last = trace.last().unwrap();
        let mass0: f64 = (0..l).map(|li| last[li * n_upper]).sum::<f64>() / l as f64;
        assert!(mass0 > 0.5, "agreed capsule got {mass0}");
    }

    fn build(kind: DiscKind) -> (Discriminator, ParamRegistry) {
        let cfg = DiscriminatorCfg {
            patch_plan: vec![8, 12, 16, 20],
            n_prim: 2,
            d_prim: 4,
            d_adv: 8,
            d_exp: 6,
            cnn_width: 8,
            cnn_large_width: 16,
            kind,
            ..DiscriminatorCfg::default()
        };
        let disc = Discriminator::new(cfg);
        let mut reg = ParamRegistry::new();
        let mut r = stream(13, "disc");
        disc.register(&mut reg, &mut r);
        (disc, reg)
    }

    fn test_image(seed: u64) -> Tensor {
        let mut r = stream(seed, "disc-img");
        Tensor::new(
            vec![1, 1, IMAGE_SIZE, IMAGE_SIZE],
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|_| (crate::rng::normal(&mut r) * 0.4).tanh())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn receptive_field_is_seventy() {
        // PatchGAN strides 2,2,2,1 plus the primary-capsule conv stride 2,
        // all k=4: the units that feed routing see 70x70 patches.
        assert_eq!(receptive_field(&[(4, 2), (4, 2), (4, 2), (4, 1), (4, 2)]), 70);
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let (disc, reg) = build(DiscKind::Capsule);
        let img = test_image(20);
        let run = || {
            let mut ctx = ForwardCtx::new(false);
            let x = ctx.tape.leaf(&img);
            let out = disc.discriminate(&mut ctx, &reg, x).unwrap();
            (
                ctx.tape.value(out.adv_len).to_vec(),
                ctx.tape.value(out.exp_lengths).to_vec(),
            )
        };
        let (adv1, exp1) = run();
        let (adv2, exp2) = run();
        assert_eq!(adv1, adv2);
        assert_eq!(exp1, exp2);
        assert!(adv1[0] > 0.0 && adv1[0] < 1.0);
        assert!(exp1.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(exp1.len(), 3);
    }

    #[test]
    fn translation_sensitivity_of_exp_lengths() {
        // An 8px shift of a bright patch must change the class responses
        // even at random initialization.
        let (disc, reg) = build(DiscKind::Capsule);
        let mut base = vec![-0.2; IMAGE_SIZE * IMAGE_SIZE];
        for y in 40..56 {
            for x in 40..56 {
                base[y * IMAGE_SIZE + x] = 0.9;
            }
        }
        let mut shifted = vec![-0.2; IMAGE_SIZE * IMAGE_SIZE];
        for y in 40..56 {
            for x in 48..64 {
                shifted[y * IMAGE_SIZE + x] = 0.9;
            }
        }
        let eval = |data: Vec<f64>| {
            let mut ctx = ForwardCtx::new(false);
            let x = ctx
                .tape
                .leaf_data(vec![1, 1, IMAGE_SIZE, IMAGE_SIZE], data, false);
            let out = disc.discriminate(&mut ctx, &reg, x).unwrap();
            ctx.tape.value(out.exp_lengths).to_vec()
        };
        let a = eval(base);
        let b = eval(shifted);
        let linf = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(linf > 1e-6, "responses identical under translation: {linf}");
    }

    #[test]
    fn reconstruction_masks_and_bounds() {
        let (disc, reg) = build(DiscKind::Capsule);
        let img = test_image(21);
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf(&img);
        let out = disc.discriminate(&mut ctx, &reg, x).unwrap();
        let poses = out.exp_poses.unwrap();

        // Masking leaves exactly d_exp nonzero inputs per sample.
        let shape = ctx.tape.shape(poses).to_vec();
        let (nc, d) = (shape[1], shape[2]);
        let mut mask = vec![0.0; nc];
        mask[1] = 1.0;
        let mask_v = ctx.tape.constant(vec![1, nc, 1], mask);
        let masked = ctx.tape.mul(poses, mask_v).unwrap();
        let nz = ctx.tape.value(masked).iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, d);

        let recon = disc.reconstruct(&mut ctx, &reg, poses, &[1]).unwrap();
        assert_eq!(ctx.tape.shape(recon), &[1, 1, IMAGE_SIZE, IMAGE_SIZE]);
        assert!(ctx.tape.value(recon).iter().all(|&v| (0.0..=1.0).contains(&v)));

        assert!(matches!(
            disc.reconstruct(&mut ctx, &reg, poses, &[7]),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn cnn_counterpart_runs_and_bounds() {
        for kind in [DiscKind::Cnn, DiscKind::CnnLarge] {
            let (disc, reg) = build(kind);
            let img = test_image(22);
            let mut ctx = ForwardCtx::new(false);
            let x = ctx.tape.leaf(&img);
            let out = disc.discriminate(&mut ctx, &reg, x).unwrap();
            let adv = ctx.tape.value(out.adv_len);
            assert!(adv[0] > 0.0 && adv[0] < 1.0);
            let exp = ctx.tape.value(out.exp_lengths);
            assert!((exp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.exp_poses.is_none());
        }
    }

    #[test]
    fn cnn_large_exceeds_capsule_params() {
        let (_, reg_caps) = build(DiscKind::Capsule);
        let (_, reg_large) = build(DiscKind::CnnLarge);
        let (_, reg_small) = build(DiscKind::Cnn);
        let caps = reg_caps.elements_under("disc.");
        let large = reg_large.elements_under("disc.");
        let small = reg_small.elements_under("disc.");
        assert!(small < caps, "small cnn {small} vs capsule {caps}");
        assert!(large > small, "raising width must raise parameter count");
    }

    #[test]
    fn routing_gradcheck_fixed_coupling() {
        // The tape's routing gradient is exact for the fixed-coupling
        // forward map; verify against central differences.
        let (l, d_in, n_upper, d_out) = (5, 3, 2, 4);
        let mut r = stream(30, "route-gc");
        let u_t = Tensor::new(vec![1, l, d_in], normal_vec(&mut r, l * d_in, 0.8)).unwrap();
        let w_t = Tensor::new(vec![l, d_in, n_upper * d_out], normal_vec(&mut r, l * d_in * n_upper * d_out, 0.5)).unwrap();

        // Derive the coupling once from the unperturbed inputs.
        let mut tape = Tape::new();
        let u = tape.leaf(&u_t);
        let w = tape.leaf(&w_t);
        let (_, coupling) = dynamic_route(&mut tape, u, w, n_upper, d_out, 3).unwrap();

        let report = crate::gradcheck::gradcheck(
            |tape, vars| {
                let v = route_with_fixed_coupling(tape, vars[0], vars[1], &coupling, n_upper, d_out)?;
                let sq = tape.square(v);
                Ok(tape.sum(sq))
            },
            &[("u", u_t), ("w", w_t)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }

    #[test]
    fn routing_r1_gradcheck_full_function() {
        // With one iteration the coupling is a constant softmax(0), so the
        // whole routing function is differentiable end to end.
        let (l, d_in, n_upper, d_out) = (4, 3, 3, 3);
        let mut r = stream(31, "route-gc1");
        let u_t = Tensor::new(vec![1, l, d_in], normal_vec(&mut r, l * d_in, 0.8)).unwrap();
        let w_t = Tensor::new(
            vec![l, d_in, n_upper * d_out],
            normal_vec(&mut r, l * d_in * n_upper * d_out, 0.5),
        )
        .unwrap();
        let report = crate::gradcheck::gradcheck(
            |tape, vars| {
                let (v, _) = dynamic_route(tape, vars[0], vars[1], n_upper, d_out, 1)?;
                let sq = tape.square(v);
                Ok(tape.sum(sq))
            },
            &[("u", u_t), ("w", w_t)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_err());
    }
}
