use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init_conv;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::MaskMap;
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Topology {
    /// Every block is a stride-1 conv at full resolution.
    Plain,
    /// Down blocks, an optional bottleneck, then mirrored up blocks with additive skips.
    UnetLite,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "PLAIN" => Ok(Topology::Plain),
            "UNET_LITE" | "UNETLITE" => Ok(Topology::UnetLite),
            _ => Err(Error::InvalidConfig(format!("unknown topology {s:?}"))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Plain => "PLAIN",
            Topology::UnetLite => "UNET_LITE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    /// Output channels of each block, one entry per block.
    pub channels: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_topology")]
    pub topology: Topology,
    #[serde(default = "default_true")]
    pub masked_mode: bool,
}

fn default_in_channels() -> usize {
    3
}

fn default_topology() -> Topology {
    Topology::Plain
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            channels: vec![32, 32, 32, 32, 64, 64, 64, 64],
            in_channels: 3,
            topology: Topology::Plain,
            masked_mode: true,
        }
    }
}

/// What one encoder block does, derived from the config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub index: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Nearest-upsample the input to the resolution of this block's output before the conv.
    pub upsample_to: Option<usize>,
    /// Block whose output is added after the conv.
    pub skip_from: Option<usize>,
    pub residual: bool,
}

/// First tapped block: `floor(l/2) + 1`.
pub fn first_tap(num_blocks: usize) -> usize {
    num_blocks / 2 + 1
}

/// Tapped block indices `floor(l/2)+1 ..= l` (1-based).
pub fn tap_indices(num_blocks: usize) -> Vec<usize> {
    (first_tap(num_blocks)..=num_blocks).collect()
}

impl EncoderConfig {
    pub fn plain(channels: Vec<usize>) -> Self {
        Self {
            num_blocks: channels.len(),
            channels,
            ..Self::default()
        }
    }

    /// A UNET_LITE config. Down blocks take `down_channels` in order (the last entry repeats);
    /// each up block takes the width of its mirror, or of its skip source when it has one.
    pub fn unet_lite(down_channels: &[usize], num_blocks: usize) -> Self {
        let h = (num_blocks / 2).max(1);
        let pick = |i: usize| down_channels[(i - 1).min(down_channels.len() - 1)];
        let mut cfg = Self {
            num_blocks,
            channels: (1..=num_blocks).map(|i| pick(i.min(h))).collect(),
            topology: Topology::UnetLite,
            ..Self::default()
        };
        for p in cfg.plan_unchecked() {
            let m = num_blocks + 1 - p.index;
            if p.index > num_blocks - num_blocks / 2 {
                cfg.channels[p.index - 1] = match p.skip_from {
                    Some(s) => cfg.channels[s - 1],
                    None => cfg.channels[m - 1],
                };
            }
        }
        cfg
    }

    pub fn taps(&self) -> Vec<usize> {
        tap_indices(self.num_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_blocks < 2 {
            return bad(format!("num_blocks must be ≥ 2, got {}", self.num_blocks));
        }
        if self.channels.len() != self.num_blocks {
            return bad(format!("{} channel entries for {} blocks", self.channels.len(), self.num_blocks));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        for p in self.plan_unchecked() {
            if let Some(s) = p.skip_from {
                if self.channels[s - 1] != p.out_ch {
                    return bad(format!(
                        "block {} has {} channels but its skip from block {s} has {}",
                        p.index,
                        p.out_ch,
                        self.channels[s - 1]
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of stride-2 blocks in UNET_LITE.
    fn levels(&self) -> usize {
        let h = self.num_blocks / 2;
        h.saturating_sub(1).min(2)
    }

    fn plan_unchecked(&self) -> Vec<BlockPlan> {
        let l = self.num_blocks;
        let h = l / 2;
        let levels = self.levels();
        (1..=l)
            .map(|i| {
                let in_ch = if i == 1 { self.in_channels } else { self.channels[i - 2] };
                let out_ch = self.channels[i - 1];
                let mut plan = BlockPlan {
                    index: i,
                    in_ch,
                    out_ch,
                    stride: 1,
                    upsample_to: None,
                    skip_from: None,
                    residual: false,
                };
                if self.topology == Topology::UnetLite {
                    let down = (2..=1 + levels).contains(&i);
                    let m = l + 1 - i;
                    if down {
                        plan.stride = 2;
                    } else if i > l - h && (2..=1 + levels).contains(&m) {
                        plan.upsample_to = Some(m - 1);
                        plan.skip_from = Some(m - 1);
                    }
                }
                plan.residual = plan.stride == 1 && plan.skip_from.is_none() && in_ch == out_ch;
                plan
            })
            .collect()
    }

    pub fn plan(&self) -> Result<Vec<BlockPlan>> {
        self.validate()?;
        Ok(self.plan_unchecked())
    }

    /// Spatial size after each block for an `h × w` input.
    pub fn resolutions(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut res: Vec<(usize, usize)> = Vec::with_capacity(self.num_blocks);
        let mut cur = (h, w);
        for p in self.plan()? {
            if let Some(t) = p.upsample_to {
                cur = res[t - 1];
            }
            if p.stride == 2 {
                cur = (cur.0.div_ceil(2), cur.1.div_ceil(2));
            }
            res.push(cur);
        }
        Ok(res)
    }
}

/// One tapped feature as a graph node, with its kept map (`None` when unmasked).
#[derive(Clone, Debug)]
pub struct TapVar {
    pub block: usize,
    pub var: Var,
    pub trace: Option<Arc<Vec<f32>>>,
}

/// Tapped feature maps, shallowest first, each with its KEPT map (1 = kept).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub entries: Vec<PyramidEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidEntry {
    pub block: usize,
    pub feature: Tensor,
    pub trace: Vec<f32>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> &PyramidEntry {
        self.entries.last().expect("pyramid is never empty")
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.block).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    plans: Vec<BlockPlan>,
    weights: Vec<(ParamId, ParamId)>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let plans = cfg.plan()?;
        let weights = plans
            .iter()
            .map(|p| {
                let gain = if p.residual || p.skip_from.is_some() { 0.5 } else { 1.0 };
                init_conv(
                    store,
                    rng,
                    &format!("encoder.block{}", p.index),
                    p.out_ch,
                    p.in_ch,
                    3,
                    gain * (2.0 / (p.in_ch * 9) as f64).sqrt(),
                    ParamGroup::Encoder,
                )
            })
            .collect();
        Ok(Self { cfg, plans, weights })
    }

    pub fn plans(&self) -> &[BlockPlan] {
        &self.plans
    }

    /// Run the encoder on a `[C, H, W]` input node and return the tapped features.
    ///
    /// With a mask and `masked_mode`, the input and every conv output are multiplied by the
    /// KEPT map at their resolution, so nothing under a masked patch influences kept sites.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&MaskMap>) -> Result<Vec<TapVar>> {
        let (c, h, w) = g.value(x).chw();
        if c != self.cfg.in_channels {
            return Err(Error::InvalidShape(format!("encoder expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let res = self.cfg.resolutions(h, w)?;
        let masked = match mask {
            Some(m) if self.cfg.masked_mode => {
                if m.image_dims() != (h, w) {
                    return Err(Error::InvalidShape(format!(
                        "mask covers {:?} but the input is {h}×{w}",
                        m.image_dims()
                    )));
                }
                Some(m)
            }
            _ => None,
        };
        let trace_at = |r: (usize, usize)| masked.map(|m| Arc::new(m.kept_map_at(r.0, r.1)));
        let mut cur = match trace_at((h, w)) {
            Some(t) => g.mask(x, t),
            None => x,
        };
        let first = first_tap(self.cfg.num_blocks);
        let mut outs: Vec<Var> = Vec::with_capacity(self.plans.len());
        let mut taps = Vec::new();
        for (p, &(wid, bid)) in self.plans.iter().zip(&self.weights) {
            let trace = trace_at(res[p.index - 1]);
            let mut inp = cur;
            if p.upsample_to.is_some() {
                let (oh, ow) = res[p.index - 1];
                inp = g.nearest_resize(inp, oh, ow);
            }
            let (wv, bv) = (g.param(store, wid), g.param(store, bid));
            let mut y = g.conv2d(inp, wv, Some(bv), p.stride, 1);
            if let Some(t) = &trace {
                y = g.mask(y, t.clone());
            }
            y = g.leaky_relu(y, LEAKY_SLOPE);
            if p.residual {
                y = g.add(y, cur);
            }
            if let Some(s) = p.skip_from {
                y = g.add(y, outs[s - 1]);
            }
            outs.push(y);
            cur = y;
            if p.index >= first {
                taps.push(TapVar {
                    block: p.index,
                    var: y,
                    trace,
                });
            }
        }
        Ok(taps)
    }

    /// Inference forward producing a materialized pyramid.
    pub fn pyramid(&self, store: &ParamStore, x: &ImageTensor, mask: Option<&MaskMap>) -> Result<FeaturePyramid> {
        let mut g = Graph::inference();
        let xv = g.input(image_tensor(x));
        let taps = self.forward(&mut g, store, xv, mask)?;
        Ok(pyramid_from(&g, &taps))
    }
}

fn pyramid_from(g: &Graph, taps: &[TapVar]) -> FeaturePyramid {
    FeaturePyramid {
        entries: taps
            .iter()
            .map(|t| {
                let feature = g.value(t.var).clone();
                let (_, h, w) = feature.chw();
                PyramidEntry {
                    block: t.block,
                    trace: t.trace.as_ref().map(|m| m.as_ref().clone()).unwrap_or_else(|| vec![1.0; h * w]),
                    feature,
                }
            })
            .collect(),
    }
}

pub(crate) fn image_tensor(x: &ImageTensor) -> Tensor {
    let (h, w, c) = x.shape();
    Tensor::from_vec(&[c, h, w], x.data().to_vec()).expect("image shape")
}

/// Submanifold convolution: `conv(x ⊙ kept) ⊙ kept`, 3×3 or 1×1 with "same" padding.
///
/// Sites where `kept` is false are zero in the output, and values under them never reach kept sites.
pub fn masked_conv(x: &Tensor, kept: &[bool], weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, h, w) = x.chw();
    if kept.len() != h * w {
        return Err(Error::InvalidShape(format!("kept map has {} sites for a {h}×{w} feature", kept.len())));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != x.shape()[0] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
        return Err(Error::InvalidShape(format!("conv weight {ws:?} for input {:?}", x.shape())));
    }
    let map = Arc::new(kept.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect::<Vec<f32>>());
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let wv = g.input(weight.clone());
    let bv = bias.map(|b| g.input(b.clone()));
    let xm = g.mask(xv, map.clone());
    let y = g.conv2d(xm, wv, bv, 1, ws[2] / 2);
    let y = g.mask(y, map);
    Ok(g.value(y).clone())
}
