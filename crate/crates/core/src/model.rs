//! The full network: parameter layout, seeded initialisation, and a forward
//! pass that keeps every intermediate for the matching backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, BackboneCache, BackboneWeights, DeformWeights, MultiScaleFeatures, CSDA_SAMPLES};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::sequence::{self, AttentionGrads, AttentionWeights, HeadOutput, HeadWeights};
use crate::sphere::{EquirectGrid, SamplingGrid};

/// Downsampling from the input image to the reference scale.
pub const REF_STRIDE: usize = 16;

/// Pixels in `[0, 1]` enter the backbone as `(v - 0.5) * INPUT_GAIN`. Flat
/// synthetic shading has little contrast at unit gain, and Adam at small
/// learning rates cannot grow the first layer fast enough to compensate.
pub const INPUT_GAIN: f64 = 12.0;

/// Head weights start at this fraction of the usual `1/sqrt(C)` scale so the
/// initial depth and height stay near the 1 m bias point.
pub const HEAD_INIT_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    /// Input image height; width is twice this.
    pub image_height: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::arg("ModelConfig", "need at least two channels"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::arg(
                "ModelConfig",
                format!("{} channels not divisible by {} heads", self.channels, self.heads),
            ));
        }
        if self.image_height == 0 || self.image_height % 32 != 0 {
            return Err(Error::arg(
                "ModelConfig",
                format!("image height {} must be a positive multiple of 32", self.image_height),
            ));
        }
        Ok(())
    }

    pub fn reference_grid(&self) -> EquirectGrid {
        let h = self.image_height / REF_STRIDE;
        EquirectGrid::new(h, 2 * h).expect("validated height")
    }

    pub fn image_grid(&self) -> EquirectGrid {
        EquirectGrid::new(self.image_height, 2 * self.image_height).expect("validated height")
    }
}

fn conv_name(s: usize, part: &str) -> String {
    format!("backbone.conv{}.{part}", s + 1)
}

fn attn_names(prefix: &str) -> [String; 6] {
    ["query.weight", "query.bias", "key.weight", "key.bias", "value.weight", "value.bias"]
        .map(|p| format!("{prefix}.{p}"))
}

/// `ln(e - 1)`: the pre-activation at which softplus returns 1.
pub fn softplus_unit_bias() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

pub struct DopNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    grid: SamplingGrid,
}

impl DopNet {
    /// Fresh weights from a seeded ChaCha8 stream. Sampling offsets start at
    /// zero and the heads start at 1 m depth and height.
    pub fn init(config: ModelConfig, seed: u64) -> Result<DopNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut p = ParamStore::new();
        for s in 0..4 {
            let cin = if s == 0 { 3 } else { c };
            let std = (2.0 / (cin * 9) as f64).sqrt();
            p.insert(conv_name(s, "weight"), Tensor::randn(&[c, cin, 3, 3], std, &mut rng));
            p.insert(conv_name(s, "bias"), Tensor::zeros(&[c]));
        }
        let grid = SamplingGrid::new(config.reference_grid());
        let off = grid.offset_shape();
        p.insert("csda.offsets", Tensor::zeros(&off));
        let rows = config.heads * CSDA_SAMPLES;
        p.insert("csda.attn.weight", Tensor::randn(&[rows, c], 1.0 / (c as f64).sqrt(), &mut rng));
        p.insert("csda.attn.bias", Tensor::zeros(&[rows]));
        p.insert("flip.weight", Tensor::randn(&[c, c, 3, 3], (1.0 / (c * 9) as f64).sqrt(), &mut rng));
        p.insert("flip.bias", Tensor::zeros(&[c]));
        p.insert("flip.offsets", Tensor::zeros(&off));
        // A zero segmentation head starts with an even split between planes.
        p.insert("seg.weight", Tensor::zeros(&[1, c, 3, 3]));
        p.insert("seg.bias", Tensor::zeros(&[1]));
        let lin = 1.0 / (c as f64).sqrt();
        for plane in ["h", "v"] {
            p.insert(format!("graph.{plane}.weight"), Tensor::randn(&[c, c], lin, &mut rng));
        }
        for prefix in ["selfattn.h", "selfattn.v", "crossattn.hv", "crossattn.vh"] {
            for (k, name) in attn_names(prefix).into_iter().enumerate() {
                let t = if k % 2 == 0 {
                    Tensor::randn(&[c, c], lin, &mut rng)
                } else {
                    Tensor::zeros(&[c])
                };
                p.insert(name, t);
            }
        }
        p.insert("head.depth.weight", Tensor::randn(&[c], HEAD_INIT_SCALE * lin, &mut rng));
        p.insert("head.depth.bias", Tensor::scalar(softplus_unit_bias()));
        p.insert("head.height.weight", Tensor::randn(&[c], HEAD_INIT_SCALE * lin, &mut rng));
        p.insert("head.height.bias", Tensor::scalar(softplus_unit_bias()));
        Ok(DopNet { config, params: p, grid })
    }

    /// Wraps loaded weights, checking every expected tensor is present with
    /// the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<DopNet> {
        let reference = DopNet::init(config, 0)?;
        for (name, param) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != param.value.shape() {
                return Err(Error::WeightFormat(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    param.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::WeightFormat(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(DopNet {
            config,
            params,
            grid: reference.grid,
        })
    }

    /// Reads channel count, head count and image height back from weight
    /// shapes.
    pub fn infer_config(params: &ParamStore) -> Result<ModelConfig> {
        let conv = params.get("backbone.conv1.weight")?;
        let attn = params.get("csda.attn.weight")?;
        let off = params.get("csda.offsets")?;
        if conv.ndim() != 4 || attn.ndim() != 2 || off.ndim() != 4 {
            return Err(Error::WeightFormat("unexpected tensor ranks".into()));
        }
        let config = ModelConfig {
            channels: conv.dim(0),
            heads: attn.dim(0) / CSDA_SAMPLES,
            image_height: off.dim(0) * REF_STRIDE,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<DopNet> {
        let params = ParamStore::load(path)?;
        let config = DopNet::infer_config(&params)?;
        DopNet::from_params(config, params)
    }

    pub fn sampling_grid(&self) -> &SamplingGrid {
        &self.grid
    }

    fn w(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter set checked at construction")
    }

    fn backbone(&self) -> BackboneWeights<'_> {
        BackboneWeights {
            weights: [0, 1, 2, 3].map(|s| self.w(&conv_name(s, "weight"))),
            biases: [0, 1, 2, 3].map(|s| self.w(&conv_name(s, "bias"))),
        }
    }

    fn deform(&self) -> DeformWeights<'_> {
        DeformWeights {
            weight: self.w("flip.weight"),
            bias: self.w("flip.bias"),
            offsets: self.w("flip.offsets"),
        }
    }

    fn attention(&self, prefix: &str) -> AttentionWeights<'_> {
        let n = attn_names(prefix);
        AttentionWeights {
            wq: self.w(&n[0]),
            bq: self.w(&n[1]),
            wk: self.w(&n[2]),
            bk: self.w(&n[3]),
            wv: self.w(&n[4]),
            bv: self.w(&n[5]),
        }
    }

    fn head_weights(&self) -> HeadWeights<'_> {
        HeadWeights {
            depth_weight: self.w("head.depth.weight"),
            depth_bias: self.w("head.depth.bias"),
            height_weight: self.w("head.height.weight"),
            height_bias: self.w("head.height.bias"),
        }
    }

    /// Runs the network on an image `[3, H, 2H]`.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardCache> {
        let want = self.config.image_height;
        image.expect_shape("DopNet::forward", &[Some(3), Some(want), Some(2 * want)])?;
        let image = &image.map(|v| (v - 0.5) * INPUT_GAIN);
        let (feats, backbone_cache) = blocks::backbone_forward(image, &self.backbone())?;
        let gathered = blocks::multiscale_gather(&feats, &self.grid, self.w("csda.offsets"))?;
        let fms = blocks::csda_attend(&gathered, self.w("csda.attn.weight"), self.w("csda.attn.bias"), self.config.heads)?;
        let fu = blocks::soft_flip_fuse(&fms, &self.deform())?;
        let dis = blocks::disentangle(&fu, &fms, self.w("seg.weight"), self.w("seg.bias"))?;
        let qh0 = blocks::compress(&dis.horizontal)?;
        let qv0 = blocks::compress(&dis.vertical)?;

        let mut qh1 = sequence::channel_graph_attend(&qh0, self.w("graph.h.weight"))?;
        qh1.add_assign(&qh0)?;
        let mut qv1 = sequence::channel_graph_attend(&qv0, self.w("graph.v.weight"))?;
        qv1.add_assign(&qv0)?;
        let qh2 = sequence::self_attend(&qh1, &self.attention("selfattn.h"))?;
        let qv2 = sequence::self_attend(&qv1, &self.attention("selfattn.v"))?;
        let qh3 = sequence::cross_attend(&qh2, &qv2, &self.attention("crossattn.hv"))?;
        let qv3 = sequence::cross_attend(&qv2, &qh2, &self.attention("crossattn.vh"))?;
        let output = sequence::heads(&qv3, &qh3, &self.head_weights())?;
        if !output.depth.is_finite() || !output.height.is_finite() || !dis.logits.is_finite() {
            return Err(Error::NonFinite { op: "DopNet::forward" });
        }
        Ok(ForwardCache {
            feats,
            backbone_cache,
            gathered,
            fms,
            fu,
            hshape: dis.horizontal.shape().to_vec(),
            logits: dis.logits,
            qh: [qh0, qh1, qh2, qh3],
            qv: [qv0, qv1, qv2, qv3],
            output,
        })
    }

    /// Adds parameter gradients for cotangents on the segmentation logits,
    /// the depth sequence and the height into `self.params`.
    pub fn backward(&mut self, cache: &ForwardCache, d_logits: &Tensor, d_depth: &Tensor, d_height: f64) -> Result<()> {
        let grads = self.compute_grads(cache, d_logits, d_depth, d_height)?;
        for (name, g) in grads {
            self.params.accumulate(&name, &g)?;
        }
        Ok(())
    }

    fn compute_grads(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
        d_depth: &Tensor,
        d_height: f64,
    ) -> Result<Vec<(String, Tensor)>> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let [qh0, qh1, qh2, qh3] = &cache.qh;
        let [qv0, qv1, qv2, qv3] = &cache.qv;

        let hg = sequence::heads_backward(qv3, qh3, &self.head_weights(), d_depth, d_height)?;
        out.push(("head.depth.weight".into(), hg.depth_weight));
        out.push(("head.depth.bias".into(), hg.depth_bias));
        out.push(("head.height.weight".into(), hg.height_weight));
        out.push(("head.height.bias".into(), hg.height_bias));

        let push_attn = |out: &mut Vec<(String, Tensor)>, prefix: &str, g: AttentionGrads| {
            let n = attn_names(prefix);
            for (name, t) in n.into_iter().zip([g.wq, g.bq, g.wk, g.bk, g.wv, g.bv]) {
                out.push((name, t));
            }
        };

        let (mut dqh2, mut dqv2_from_h, g) =
            sequence::cross_attend_backward(qh2, qv2, &self.attention("crossattn.hv"), &hg.horizontal)?;
        push_attn(&mut out, "crossattn.hv", g);
        let (mut dqv2, dqh2_from_v, g) =
            sequence::cross_attend_backward(qv2, qh2, &self.attention("crossattn.vh"), &hg.vertical)?;
        push_attn(&mut out, "crossattn.vh", g);
        dqh2.add_assign(&dqh2_from_v)?;
        dqv2_from_h.add_assign(&dqv2)?;
        dqv2 = dqv2_from_h;

        let (mut dqh1, g) = sequence::self_attend_backward(qh1, &self.attention("selfattn.h"), &dqh2)?;
        push_attn(&mut out, "selfattn.h", g);
        let (mut dqv1, g) = sequence::self_attend_backward(qv1, &self.attention("selfattn.v"), &dqv2)?;
        push_attn(&mut out, "selfattn.v", g);

        let (dqh0, dwgh) = sequence::channel_graph_attend_backward(qh0, self.w("graph.h.weight"), &dqh1)?;
        dqh1.add_assign(&dqh0)?;
        out.push(("graph.h.weight".into(), dwgh));
        let (dqv0, dwgv) = sequence::channel_graph_attend_backward(qv0, self.w("graph.v.weight"), &dqv1)?;
        dqv1.add_assign(&dqv0)?;
        out.push(("graph.v.weight".into(), dwgv));

        let dh = blocks::compress_backward(&cache.hshape, &dqh1)?;
        let dv = blocks::compress_backward(&cache.hshape, &dqv1)?;
        let (dbase, dsw, dsb) = blocks::disentangle_backward(
            &cache.fu,
            &cache.fms,
            self.w("seg.weight"),
            self.w("seg.bias"),
            &dh,
            &dv,
            d_logits,
        )?;
        out.push(("seg.weight".into(), dsw));
        out.push(("seg.bias".into(), dsb));

        let (mut dfms, dfw, dfb, dfo) = blocks::soft_flip_fuse_backward(&cache.fms, &self.deform(), &dbase)?;
        dfms.add_assign(&dbase)?;
        out.push(("flip.weight".into(), dfw));
        out.push(("flip.bias".into(), dfb));
        out.push(("flip.offsets".into(), dfo));

        let (dgathered, daw, dab) = blocks::csda_attend_backward(
            &cache.gathered,
            self.w("csda.attn.weight"),
            self.w("csda.attn.bias"),
            self.config.heads,
            &dfms,
        )?;
        out.push(("csda.attn.weight".into(), daw));
        out.push(("csda.attn.bias".into(), dab));
        let (dscales, doff) =
            blocks::multiscale_gather_backward(&cache.feats, &self.grid, self.w("csda.offsets"), &dgathered)?;
        out.push(("csda.offsets".into(), doff));

        let (dws, dbs, _) = blocks::backbone_backward(&cache.backbone_cache, &cache.feats, &self.backbone(), &dscales)?;
        for (s, (dw, db)) in dws.into_iter().zip(dbs).enumerate() {
            out.push((conv_name(s, "weight"), dw));
            out.push((conv_name(s, "bias"), db));
        }
        Ok(out)
    }

    /// Forward pass returning only the head output.
    pub fn predict(&self, image: &Tensor) -> Result<HeadOutput> {
        Ok(self.forward(image)?.output)
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    feats: MultiScaleFeatures,
    backbone_cache: BackboneCache,
    gathered: Tensor,
    fms: Tensor,
    fu: Tensor,
    hshape: Vec<usize>,
    /// Segmentation logits at the reference scale.
    pub logits: Tensor,
    qh: [Tensor; 4],
    qv: [Tensor; 4],
    pub output: HeadOutput,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            channels: 4,
            heads: 2,
            image_height: 64,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..toy() }.validate().is_err());
        assert!(ModelConfig { image_height: 48, ..toy() }.validate().is_err());
        assert!(toy().validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_shapes_round_trip() {
        let a = DopNet::init(toy(), 5).unwrap();
        let b = DopNet::init(toy(), 5).unwrap();
        let c = DopNet::init(toy(), 6).unwrap();
        let w = |n: &DopNet| n.params.get("backbone.conv2.weight").unwrap().clone();
        assert_eq!(w(&a), w(&b));
        assert_ne!(w(&a), w(&c));
        assert_eq!(DopNet::infer_config(&a.params).unwrap(), toy());
    }

    #[test]
    fn forward_shapes() {
        let net = DopNet::init(toy(), 1).unwrap();
        let img = Tensor::full(&[3, 64, 128], 0.5);
        let f = net.forward(&img).unwrap();
        assert_eq!(f.logits.shape(), &[4, 8]);
        assert_eq!(f.output.depth.shape(), &[8]);
        assert!(f.output.height > 0.0);
        assert!(net.forward(&Tensor::zeros(&[3, 32, 64])).is_err());
    }
}
