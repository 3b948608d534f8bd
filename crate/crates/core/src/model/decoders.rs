use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{TapVar, LEAKY_SLOPE};
use super::{init_conv, init_linear, init_norm};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Residual blocks per classifier stage.
    pub blocks_per_stage: usize,
    /// Width of the first classifier stage; doubles per stage up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
    /// Hidden width of the reconstruction decoder.
    pub recon_channels: usize,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks_per_stage: 2,
            base_width: 16,
            max_width: 128,
            recon_channels: 32,
            num_classes: crate::degrade::DegradationFamily::COUNT,
        }
    }
}

impl DecoderConfig {
    pub fn stage_width(&self, stage: usize) -> usize {
        (self.base_width << stage.min(16)).min(self.max_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.max_width == 0 || self.recon_channels == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig("decoder widths must be positive and num_classes ≥ 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    ln1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Stage {
    omega: ParamId,
    proj: (ParamId, ParamId),
    down: Option<(ParamId, ParamId)>,
    blocks: Vec<ResBlock>,
}

/// Residual classifier fed by the scaled encoder taps, one tap per stage.
///
/// Stage `i` runs at `ceil(H / 2^i)`. Its input is the stride-2 transition of the previous stage
/// (nothing for stage 1) plus a 1×1 projection of `ω_i · F_i` resized to the stage resolution.
#[derive(Clone, Debug)]
pub struct ClsDecoder {
    stages: Vec<Stage>,
    final_ln: (ParamId, ParamId),
    fc: (ParamId, ParamId),
}

fn conv(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId), stride: usize) -> Var {
    let (w, b) = (g.param(store, p.0), g.param(store, p.1));
    let k = store.value(p.0).shape()[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Var {
    let (gamma, beta) = (g.param(store, p.0), g.param(store, p.1));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

impl ClsDecoder {
    pub fn new(
        tap_channels: &[usize],
        cfg: &DecoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if tap_channels.is_empty() {
            return Err(Error::InvalidConfig("classifier needs at least one tap".into()));
        }
        let grp = ParamGroup::Decoder;
        let mut stages = Vec::with_capacity(tap_channels.len());
        for (s, &tc) in tap_channels.iter().enumerate() {
            let i = s + 1;
            let w = cfg.stage_width(s);
            let omega = store.add(format!("cls.omega{i}"), Tensor::full(&[1], 1.0), grp);
            let proj = init_conv(store, rng, &format!("cls.proj{i}"), w, tc, 1, (1.0 / tc as f64).sqrt(), grp);
            let down = (s > 0).then(|| {
                let pw = cfg.stage_width(s - 1);
                init_conv(store, rng, &format!("cls.down{i}"), w, pw, 3, (2.0 / (pw * 9) as f64).sqrt(), grp)
            });
            let he = (2.0 / (w * 9) as f64).sqrt();
            let blocks = (1..=cfg.blocks_per_stage)
                .map(|b| {
                    let name = format!("cls.stage{i}.block{b}");
                    ResBlock {
                        ln1: init_norm(store, &format!("{name}.ln1"), w, grp),
                        conv1: init_conv(store, rng, &format!("{name}.conv1"), w, w, 3, he, grp),
                        ln2: init_norm(store, &format!("{name}.ln2"), w, grp),
                        conv2: init_conv(store, rng, &format!("{name}.conv2"), w, w, 3, 0.5 * he, grp),
                    }
                })
                .collect();
            stages.push(Stage { omega, proj, down, blocks });
        }
        let last = cfg.stage_width(tap_channels.len() - 1);
        let final_ln = init_norm(store, "cls.final_ln", last, grp);
        let fc = init_linear(store, rng, "cls.fc", cfg.num_classes, last, grp);
        Ok(Self { stages, final_ln, fc })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn omegas(&self) -> Vec<ParamId> {
        self.stages.iter().map(|s| s.omega).collect()
    }

    /// Logits for one sample. `input_hw` is the spatial size of the encoder input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, taps: &[TapVar], input_hw: (usize, usize)) -> Result<Var> {
        if taps.len() != self.stages.len() {
            return Err(Error::InvalidShape(format!(
                "{} taps for a classifier with {} stages",
                taps.len(),
                self.stages.len()
            )));
        }
        let (mut rh, mut rw) = (input_hw.0.div_ceil(2), input_hw.1.div_ceil(2));
        let mut x: Option<Var> = None;
        for (s, (stage, tap)) in self.stages.iter().zip(taps).enumerate() {
            if s > 0 {
                (rh, rw) = (rh.div_ceil(2), rw.div_ceil(2));
            }
            let omega = g.param(store, stage.omega);
            let scaled = g.scalar_mul(tap.var, omega);
            let resized = g.resize(scaled, rh, rw);
            let injected = conv(g, store, resized, stage.proj, 1);
            let mut h = match (x, stage.down) {
                (Some(prev), Some(down)) => {
                    let t = conv(g, store, prev, down, 2);
                    debug_assert_eq!(g.value(t).chw().1, rh);
                    g.add(t, injected)
                }
                _ => injected,
            };
            for b in &stage.blocks {
                let t = norm(g, store, h, b.ln1);
                let t = g.leaky_relu(t, LEAKY_SLOPE);
                let t = conv(g, store, t, b.conv1, 1);
                let t = norm(g, store, t, b.ln2);
                let t = g.leaky_relu(t, LEAKY_SLOPE);
                let t = conv(g, store, t, b.conv2, 1);
                h = g.add(h, t);
            }
            x = Some(h);
        }
        let h = norm(g, store, x.expect("at least one stage"), self.final_ln);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let pooled = g.global_avg_pool(h);
        let (w, b) = (g.param(store, self.fc.0), g.param(store, self.fc.1));
        Ok(g.linear(pooled, w, b))
    }
}

/// Conv, upsample to the input size, conv, then a projection to image channels.
#[derive(Clone, Debug)]
pub struct ReconDecoder {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl ReconDecoder {
    pub fn new(
        feature_channels: usize,
        out_channels: usize,
        cfg: &DecoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let rc = cfg.recon_channels;
        let grp = ParamGroup::Decoder;
        Ok(Self {
            conv1: init_conv(store, rng, "recon.conv1", rc, feature_channels, 3, (2.0 / (feature_channels * 9) as f64).sqrt(), grp),
            conv2: init_conv(store, rng, "recon.conv2", rc, rc, 3, (2.0 / (rc * 9) as f64).sqrt(), grp),
            out: init_conv(store, rng, "recon.out", out_channels, rc, 3, (1.0 / (rc * 9) as f64).sqrt(), grp),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_l: Var, out_hw: (usize, usize)) -> Var {
        let h = conv(g, store, f_l, self.conv1, 1);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.resize(h, out_hw.0, out_hw.1);
        let h = conv(g, store, h, self.conv2, 1);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        conv(g, store, h, self.out, 1)
    }
}
