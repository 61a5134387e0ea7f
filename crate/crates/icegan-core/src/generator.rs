//! Identity-aware encoder-decoder generator: the onset face is encoded to
//! an identity embedding, combined with noise and a class label into a
//! synthesis seed, and decoded back to an apex-expression face with
//! graph-reasoned skip features fused at every level.

use crate::error::{Error, Result};
use crate::graph::{GrmDump, GrmLevel, GrmMode, SeGate};
use crate::nn::{Conv2d, ConvSpec, Deconv2d, ForwardCtx, ParamRegistry};
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 128;
pub const ENC_LEVELS: usize = 6;

/// Generator family used by the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenArch {
    /// Full encoder-decoder with identity embedding.
    EncDec,
    /// Decoder fed by noise and class only, no encoder.
    DecoderOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCfg {
    /// Encoder channel plan, levels 1..6 over spatial 64,32,16,8,4,2.
    pub channel_plan: Vec<usize>,
    pub noise_dim: usize,
    pub n_classes: usize,
    pub grm_mode: GrmMode,
    pub arch: GenArch,
}

impl Default for GeneratorCfg {
    fn default() -> Self {
        GeneratorCfg {
            channel_plan: vec![20, 40, 80, 160, 320, 320],
            noise_dim: 100,
            n_classes: 3,
            grm_mode: GrmMode::Grm,
            arch: GenArch::EncDec,
        }
    }
}

impl GeneratorCfg {
    pub fn embed_dim(&self) -> usize {
        self.channel_plan[ENC_LEVELS - 1]
    }

    pub fn seed_dim(&self) -> usize {
        match self.arch {
            GenArch::EncDec => self.embed_dim() + self.noise_dim + self.n_classes,
            GenArch::DecoderOnly => self.noise_dim + self.n_classes,
        }
    }
}

enum SkipBlock {
    Passthrough,
    Se(SeGate),
    Grm(GrmLevel),
}

/// Per-level inspection dumps of the channel graphs (sample 0).
pub type GraphDumps = Vec<(usize, GrmDump)>;

pub struct Generator {
    pub cfg: GeneratorCfg,
    enc: Vec<Conv2d>,
    bottleneck: Conv2d,
    skips: Vec<(usize, SkipBlock)>,
    entry: Deconv2d,
    ups: Vec<Deconv2d>,
    head: Deconv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorCfg) -> Self {
        assert_eq!(cfg.channel_plan.len(), ENC_LEVELS, "six encoder levels");
        let p = &cfg.channel_plan;
        let mut enc = Vec::new();
        for i in 0..ENC_LEVELS {
            let c_in = if i == 0 { 1 } else { p[i - 1] };
            enc.push(Conv2d::new(
                format!("gen.enc{}", i + 1),
                ConvSpec::new(c_in, p[i], 4, 2, 1),
            ));
        }
        let bottleneck = Conv2d::new("gen.bottleneck", ConvSpec::new(p[5], cfg.embed_dim(), 2, 1, 0));

        let with_skips = cfg.arch == GenArch::EncDec && cfg.grm_mode != GrmMode::None;
        let mut skips = Vec::new();
        if with_skips {
            for level in 2..=ENC_LEVELS {
                let c = p[level - 1];
                let block = match cfg.grm_mode {
                    GrmMode::Skip => SkipBlock::Passthrough,
                    GrmMode::Se => SkipBlock::Se(SeGate::new(format!("gen.skip{level}"), c)),
                    GrmMode::Grm => SkipBlock::Grm(GrmLevel::new(format!("gen.skip{level}"), c)),
                    GrmMode::None => unreachable!(),
                };
                skips.push((level, block));
            }
        }

        let entry = Deconv2d::new("gen.entry", ConvSpec::new(cfg.seed_dim(), p[5], 4, 2, 1));
        // up{i} consumes the level-i decoder map (fused with the skip when
        // present) and produces the level-(i-1) map.
        let mut ups = Vec::new();
        for level in (2..=ENC_LEVELS).rev() {
            let c_in = if with_skips { 2 * p[level - 1] } else { p[level - 1] };
            ups.push(Deconv2d::new(
                format!("gen.up{level}"),
                ConvSpec::new(c_in, p[level - 2], 4, 2, 1),
            ));
        }
        let head_in = if with_skips { 2 * p[0] } else { p[0] };
        let head = Deconv2d::new("gen.head", ConvSpec::new(head_in, 1, 4, 2, 1));

        Generator {
            cfg,
            enc,
            bottleneck,
            skips,
            entry,
            ups,
            head,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut impl Rng) {
        for layer in &self.enc {
            layer.register(reg, rng, 1.0);
        }
        self.bottleneck.register(reg, rng, 1.0);
        for (_, block) in &self.skips {
            match block {
                SkipBlock::Passthrough => {}
                SkipBlock::Se(se) => se.register(reg, rng),
                SkipBlock::Grm(grm) => grm.register(reg, rng),
            }
        }
        self.entry.register(reg, rng, 1.0);
        for up in &self.ups {
            up.register(reg, rng, 1.0);
        }
        self.head.register(reg, rng, 1.0);
    }

    pub fn grm_levels(&self) -> Vec<&GrmLevel> {
        self.skips
            .iter()
            .filter_map(|(_, b)| match b {
                SkipBlock::Grm(g) => Some(g),
                _ => None,
            })
            .collect()
    }

    /// Encoder pass: returns the identity embedding `[B, embed, 1, 1]` and
    /// the per-level feature maps f1..f6.
    pub fn encode(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        x_on: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.tape.shape(x_on);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
            return Err(Error::BadGeometry {
                expected: format!("[batch, 1, {IMAGE_SIZE}, {IMAGE_SIZE}]"),
                got: format!("{shape:?}"),
            });
        }
        let mut feats = Vec::with_capacity(ENC_LEVELS);
        let mut x = x_on;
        for layer in &self.enc {
            let y = layer.forward(ctx, reg, x)?;
            x = ctx.tape.relu(y);
            feats.push(x);
        }
        let e = self.bottleneck.forward(ctx, reg, x)?;
        Ok((e, feats))
    }

    /// Concatenates embedding, noise and one-hot class into the synthesis
    /// seed `[B, embed+noise+classes, 1, 1]`.
    pub fn make_seed(
        &self,
        ctx: &mut ForwardCtx,
        e: Var,
        z: &Tensor,
        one_hot: &Tensor,
    ) -> Result<Var> {
        let b = ctx.tape.shape(e)[0];
        if z.shape != [b, self.cfg.noise_dim] {
            return Err(Error::BadGeometry {
                expected: format!("noise [{b}, {}]", self.cfg.noise_dim),
                got: format!("{:?}", z.shape),
            });
        }
        validate_one_hot(one_hot, b, self.cfg.n_classes)?;
        let zv = ctx
            .tape
            .leaf_data(vec![b, self.cfg.noise_dim, 1, 1], z.data.clone(), false);
        let cv = ctx
            .tape
            .leaf_data(vec![b, self.cfg.n_classes, 1, 1], one_hot.data.clone(), false);
        ctx.tape.concat(&[e, zv, cv], 1)
    }

    /// Seed for the decoder-only variant: noise and class only.
    pub fn make_seed_decoder_only(
        &self,
        ctx: &mut ForwardCtx,
        z: &Tensor,
        one_hot: &Tensor,
    ) -> Result<Var> {
        let b = z.shape[0];
        validate_one_hot(one_hot, b, self.cfg.n_classes)?;
        let zv = ctx
            .tape
            .leaf_data(vec![b, self.cfg.noise_dim, 1, 1], z.data.clone(), false);
        let cv = ctx
            .tape
            .leaf_data(vec![b, self.cfg.n_classes, 1, 1], one_hot.data.clone(), false);
        ctx.tape.concat(&[zv, cv], 1)
    }

    /// Applies the configured skip transform to each encoder level in
    /// [2,6], returning decoder-side skip features g2..g6 (indices 0..4).
    pub fn skip_features(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        feats: &[Var],
        mut dumps: Option<&mut GraphDumps>,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.skips.len());
        for (level, block) in &self.skips {
            let f = feats[*level - 1];
            let g = match block {
                SkipBlock::Passthrough => f,
                SkipBlock::Se(se) => se.forward(ctx, reg, f)?,
                SkipBlock::Grm(grm) => {
                    if let Some(d) = dumps.as_deref_mut() {
                        let mut dump = GrmDump::default();
                        let g = grm.forward(ctx, reg, f, Some(&mut dump))?;
                        d.push((*level, dump));
                        g
                    } else {
                        grm.forward(ctx, reg, f, None)?
                    }
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Decoder pass from the seed. `skips` are g2..g6 when the config has a
    /// skip path (plus the raw f1 routed to the head), empty otherwise.
    pub fn decode(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        seed: Var,
        skips: &[Var],
        f1: Option<Var>,
    ) -> Result<Var> {
        let with_skips = !self.ups.is_empty() && self.skips_active();
        if with_skips && skips.len() != ENC_LEVELS - 1 {
            return Err(Error::Config(format!(
                "expected {} skip features, got {}",
                ENC_LEVELS - 1,
                skips.len()
            )));
        }
        let entry = self.entry.forward(ctx, reg, seed)?;
        let mut x = ctx.tape.relu(entry); // f6_dec at 2x2
        for (idx, up) in self.ups.iter().enumerate() {
            let level = ENC_LEVELS - idx; // 6,5,..,2
            let input = if with_skips {
                let g = skips[level - 2];
                ctx.tape.concat(&[g, x], 1)?
            } else {
                x
            };
            let y = up.forward(ctx, reg, input)?;
            x = ctx.tape.relu(y);
        }
        let head_in = if with_skips {
            let f1 = f1.ok_or_else(|| Error::Config("level-1 features required".into()))?;
            ctx.tape.concat(&[f1, x], 1)?
        } else {
            x
        };
        let y = self.head.forward(ctx, reg, head_in)?;
        Ok(ctx.tape.tanh_(y))
    }

    fn skips_active(&self) -> bool {
        !self.skips.is_empty()
    }

    /// Full on-tape synthesis pass used by training: encode, reason,
    /// seed, decode.
    pub fn forward_train(
        &self,
        ctx: &mut ForwardCtx,
        reg: &ParamRegistry,
        x_on: Var,
        z: &Tensor,
        one_hot: &Tensor,
        dumps: Option<&mut GraphDumps>,
    ) -> Result<Var> {
        match self.cfg.arch {
            GenArch::EncDec => {
                let (e, feats) = self.encode(ctx, reg, x_on)?;
                let seed = self.make_seed(ctx, e, z, one_hot)?;
                let skips = self.skip_features(ctx, reg, &feats, dumps)?;
                let f1 = if self.skips_active() { Some(feats[0]) } else { None };
                self.decode(ctx, reg, seed, &skips, f1)
            }
            GenArch::DecoderOnly => {
                let seed = self.make_seed_decoder_only(ctx, z, one_hot)?;
                self.decode(ctx, reg, seed, &[], None)
            }
        }
    }

    /// Deterministic no-grad synthesis of a batch of one: draws z from the
    /// given stream and returns the synthetic image.
    pub fn synthesize(
        &self,
        reg: &ParamRegistry,
        x_on: &Tensor,
        class: usize,
        rng: &mut impl Rng,
        dumps: Option<&mut GraphDumps>,
    ) -> Result<Tensor> {
        if class >= self.cfg.n_classes {
            return Err(Error::InvalidClass {
                got: class,
                n_classes: self.cfg.n_classes,
            });
        }
        let mut ctx = ForwardCtx::new(false);
        let x = ctx.tape.leaf_data(x_on.shape.clone(), x_on.data.clone(), false);
        let z = Tensor::new(
            vec![1, self.cfg.noise_dim],
            rng::normal_vec(rng, self.cfg.noise_dim, 1.0),
        )?;
        let mut oh = vec![0.0; self.cfg.n_classes];
        oh[class] = 1.0;
        let one_hot = Tensor::new(vec![1, self.cfg.n_classes], oh)?;
        let out = self.forward_train(&mut ctx, reg, x, &z, &one_hot, dumps)?;
        Ok(ctx.tape.value_tensor(out))
    }
}

/// Every row must contain exactly one 1.0 and zeros elsewhere.
pub fn validate_one_hot(c: &Tensor, batch: usize, n_classes: usize) -> Result<()> {
    if c.shape != [batch, n_classes] {
        return Err(Error::BadGeometry {
            expected: format!("one-hot [{batch}, {n_classes}]"),
            got: format!("{:?}", c.shape),
        });
    }
    for row in c.data.chunks(n_classes) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != n_classes {
            return Err(Error::NotOneHot(row.to_vec()));
        }
    }
    Ok(())
}

pub fn one_hot_rows(classes: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * n_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::InvalidClass { got: c, n_classes });
        }
        data[i * n_classes + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), n_classes], data)
}
