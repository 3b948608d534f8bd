//! Masked encoder, classification and reconstruction decoders, the restoration model used
//! for fine-tuning, and checkpoints.

mod checkpoint;
mod decoders;
mod encoder;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::{apply_mask, MaskMap};
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::seed::{derive_seed, rng_from};

pub use checkpoint::{
    export_encoder, import_encoder, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decoders::{ClsDecoder, DecoderConfig, ReconDecoder, LN_EPS};
pub use encoder::{
    first_tap, masked_conv, tap_indices, BlockPlan, Encoder, EncoderConfig, FeaturePyramid, PyramidEntry, TapVar,
    Topology, LEAKY_SLOPE,
};
pub(crate) use encoder::image_tensor;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape")
}

/// `{name}.weight` of shape `[out, inp, k, k]` drawn from `N(0, std²)` and a zero `{name}.bias`.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    std: f64,
    group: ParamGroup,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), normal_tensor(rng, &[out, inp, k, k], std), group);
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), group);
    (w, b)
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    inp: usize,
    group: ParamGroup,
) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), normal_tensor(rng, &[out, inp], (1.0 / inp as f64).sqrt()), group);
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), group);
    (w, b)
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, c: usize, group: ParamGroup) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), group);
    let b = store.add(format!("{name}.beta"), Tensor::zeros(&[c]), group);
    (g, b)
}

fn encoder_rng(seed: u64) -> ChaCha8Rng {
    rng_from(derive_seed(seed, &[0xe1c0, 1]))
}

/// Graph nodes of one pre-training forward pass.
#[derive(Clone, Debug)]
pub struct PretrainOutputs {
    pub taps: Vec<TapVar>,
    pub logits: Var,
    pub recon: Var,
}

/// Encoder plus both pre-training decoders, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct MaskDcptModel {
    pub encoder: Encoder,
    pub cls: ClsDecoder,
    pub recon: ReconDecoder,
    pub decoder_cfg: DecoderConfig,
    pub store: ParamStore,
}

impl MaskDcptModel {
    pub fn new(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(encoder_cfg, &mut store, &mut encoder_rng(seed))?;
        let tap_channels: Vec<usize> = encoder.cfg.taps().iter().map(|b| encoder.cfg.channels[b - 1]).collect();
        let cls = ClsDecoder::new(&tap_channels, &decoder_cfg, &mut store, &mut rng_from(derive_seed(seed, &[0xe1c0, 2])))?;
        let recon = ReconDecoder::new(
            *encoder.cfg.channels.last().expect("validated"),
            encoder.cfg.in_channels,
            &decoder_cfg,
            &mut store,
            &mut rng_from(derive_seed(seed, &[0xe1c0, 3])),
        )?;
        Ok(Self {
            encoder,
            cls,
            recon,
            decoder_cfg,
            store,
        })
    }

    pub fn encoder_cfg(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    /// Build the full forward for one sample. With a mask, the input is zero-filled under masked
    /// patches first; submanifold masking inside the encoder follows `masked_mode`.
    pub fn forward(&self, g: &mut Graph, x: &ImageTensor, mask: Option<&MaskMap>) -> Result<PretrainOutputs> {
        let masked;
        let input = match mask {
            Some(m) => {
                masked = apply_mask(x, m)?;
                &masked
            }
            None => x,
        };
        let xv = g.input(image_tensor(input));
        let taps = self.encoder.forward(g, &self.store, xv, mask)?;
        let hw = (x.height(), x.width());
        let logits = self.cls.forward(g, &self.store, &taps, hw)?;
        let recon = self.recon.forward(g, &self.store, taps.last().expect("taps").var, hw);
        Ok(PretrainOutputs { taps, logits, recon })
    }

    /// Tapped features of `x_bar` (already masked when a mask is given).
    pub fn forward_encoder(&self, x_bar: &ImageTensor, mask: Option<&MaskMap>) -> Result<FeaturePyramid> {
        self.encoder.pyramid(&self.store, x_bar, mask)
    }

    /// Class logits from a materialized pyramid; `input_hw` is the encoder input size.
    pub fn forward_cls_decoder(&self, pyr: &FeaturePyramid, input_hw: (usize, usize)) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let taps: Vec<TapVar> = pyr
            .entries
            .iter()
            .map(|e| TapVar {
                block: e.block,
                var: g.input(e.feature.clone()),
                trace: None,
            })
            .collect();
        let logits = self.cls.forward(&mut g, &self.store, &taps, input_hw)?;
        Ok(g.value(logits).data().to_vec())
    }

    pub fn forward_recon_decoder(&self, f_l: &Tensor, out_hw: (usize, usize)) -> Result<ImageTensor> {
        let c = *self.encoder.cfg.channels.last().expect("validated");
        if f_l.shape().len() != 3 || f_l.shape()[0] != c {
            return Err(Error::InvalidShape(format!("recon decoder expects {c} channels, got {:?}", f_l.shape())));
        }
        let mut g = Graph::inference();
        let fv = g.input(f_l.clone());
        let out = self.recon.forward(&mut g, &self.store, fv, out_hw);
        tensor_image(g.value(out))
    }

    /// Inference logits for one image and optional mask.
    pub fn logits(&self, x: &ImageTensor, mask: Option<&MaskMap>) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, x, mask)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn encoder_digest(&self) -> String {
        self.store.digest_where(|p| p.group == ParamGroup::Encoder)
    }

    pub fn decoder_digest(&self) -> String {
        self.store.digest_where(|p| p.group == ParamGroup::Decoder)
    }
}

pub(crate) fn tensor_image(t: &Tensor) -> Result<ImageTensor> {
    let (c, h, w) = t.chw();
    ImageTensor::from_planar(h, w, c, t.data().to_vec())
}

/// Restoration network for fine-tuning: the encoder plus a fresh conv head, `y = x + head(F_l)`.
#[derive(Clone, Debug)]
pub struct RestorationModel {
    pub encoder: Encoder,
    pub head: (ParamId, ParamId),
    pub store: ParamStore,
}

pub const HEAD_INIT_STD: f64 = 1e-3;

impl RestorationModel {
    /// Encoder initialized exactly as [`MaskDcptModel::new`] with the same seed, head drawn small.
    pub fn new(encoder_cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(encoder_cfg, &mut store, &mut encoder_rng(seed))?;
        let c = *encoder.cfg.channels.last().expect("validated");
        let head = init_conv(
            &mut store,
            &mut rng_from(derive_seed(seed, &[0xe1c0, 4])),
            "head",
            encoder.cfg.in_channels,
            c,
            3,
            HEAD_INIT_STD,
            ParamGroup::Head,
        );
        Ok(Self { encoder, head, store })
    }

    pub fn encoder_cfg(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    /// Residual restoration forward (no masking).
    pub fn forward(&self, g: &mut Graph, x: &ImageTensor) -> Result<Var> {
        let xv = g.input(image_tensor(x));
        let taps = self.encoder.forward(g, &self.store, xv, None)?;
        let f = taps.last().expect("taps").var;
        let f = g.resize(f, x.height(), x.width());
        let (w, b) = (g.param(&self.store, self.head.0), g.param(&self.store, self.head.1));
        let r = g.conv2d(f, w, Some(b), 1, 1);
        Ok(g.add(r, xv))
    }

    /// Restore one image, clipped to `[0, 1]`.
    pub fn restore(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let mut g = Graph::inference();
        let y = self.forward(&mut g, x)?;
        let mut out = tensor_image(g.value(y))?;
        out.clamp01();
        Ok(out)
    }

    pub fn encoder_digest(&self) -> String {
        self.store.digest_where(|p| p.group == ParamGroup::Encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{generate_mask, MaskingMethod};

    fn toy() -> MaskDcptModel {
        let dec = DecoderConfig {
            blocks_per_stage: 1,
            base_width: 4,
            max_width: 16,
            recon_channels: 6,
            num_classes: 5,
        };
        MaskDcptModel::new(EncoderConfig::plain(vec![6, 6, 8, 8]), dec, 3).unwrap()
    }

    fn img(seed: u64) -> ImageTensor {
        ImageTensor::from_fn(16, 16, 3, move |y, x, c| (((y * 7 + x * 3 + c) as u64 * (seed + 11)) % 13) as f32 / 13.0)
    }

    #[test]
    fn recon_shapes_follow_input() {
        let m = toy();
        for s in [16usize, 24] {
            let x = ImageTensor::filled(s, s, 3, 0.3);
            let mut g = Graph::inference();
            let out = m.forward(&mut g, &x, None).unwrap();
            assert_eq!(g.value(out.recon).shape(), &[3, s, s]);
            assert_eq!(g.value(out.logits).len(), 5);
        }
    }

    #[test]
    fn zero_pyramid_and_zero_omega() {
        let mut m = toy();
        let pyr = m.forward_encoder(&img(1), None).unwrap();
        let mut zero = pyr.clone();
        zero.entries.iter_mut().for_each(|e| e.feature.data_mut().fill(0.0));
        let a = m.forward_cls_decoder(&zero, (16, 16)).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.forward_cls_decoder(&zero, (16, 16)).unwrap());

        let base = m.forward_cls_decoder(&pyr, (16, 16)).unwrap();
        for id in m.cls.omegas() {
            m.store.value_mut(id).data_mut()[0] = 2.0;
        }
        let doubled = m.forward_cls_decoder(&pyr, (16, 16)).unwrap();
        assert!(base.iter().zip(&doubled).any(|(a, b)| a != b));

        for id in m.cls.omegas() {
            m.store.value_mut(id).data_mut()[0] = 0.0;
        }
        let p2 = m.forward_encoder(&img(2), None).unwrap();
        assert_eq!(m.forward_cls_decoder(&pyr, (16, 16)).unwrap(), m.forward_cls_decoder(&p2, (16, 16)).unwrap());
    }

    #[test]
    fn submanifold_invariance_of_logits() {
        let m = toy();
        let mask = generate_mask(16, 16, 4, 0.5, MaskingMethod::Random, 8).unwrap();
        let x = img(1);
        let mut y = x.clone();
        for c in 0..3 {
            for r in 0..16 {
                for col in 0..16 {
                    if !mask.pixel_kept(r, col) {
                        y.set(r, col, c, 1.0 - y.get(r, col, c));
                    }
                }
            }
        }
        assert_eq!(m.logits(&x, Some(&mask)).unwrap(), m.logits(&y, Some(&mask)).unwrap());
    }

    #[test]
    fn unmasked_equals_all_kept_mask() {
        let m = toy();
        let keep = MaskMap::all_kept(16, 16, 4).unwrap();
        let a = m.forward_encoder(&img(4), None).unwrap();
        let b = m.forward_encoder(&img(4), Some(&keep)).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.feature, y.feature);
        }
    }

    #[test]
    fn logits_permute_with_output_rows() {
        let mut m = toy();
        let x = img(5);
        let base = m.logits(&x, None).unwrap();
        let (w, b) = (m.store.find("cls.fc.weight").unwrap(), m.store.find("cls.fc.bias").unwrap());
        let perm = [3usize, 0, 4, 1, 2];
        let (wt, bt) = (m.store.value(w).clone(), m.store.value(b).clone());
        let cols = wt.shape()[1];
        for (new, &old) in perm.iter().enumerate() {
            m.store.value_mut(w).data_mut()[new * cols..(new + 1) * cols]
                .copy_from_slice(&wt.data()[old * cols..(old + 1) * cols]);
            m.store.value_mut(b).data_mut()[new] = bt.data()[old];
        }
        let permuted = m.logits(&x, None).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(permuted[new], base[old]);
        }
    }

    #[test]
    fn restoration_starts_near_identity() {
        let r = RestorationModel::new(EncoderConfig::plain(vec![6, 6, 8, 8]), 3).unwrap();
        let x = img(2);
        let y = r.restore(&x).unwrap();
        let max = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max < 0.05, "{max}");
        assert_eq!(r.encoder_digest(), toy().encoder_digest());
    }
}
