//! Hierarchical attention encoder.
//!
//! Inputs arrive as three segments — arm-1 joints, arm-2 joints, visual
//! tokens — each prefixed with its learned CLS tokens. Segment-wise layers
//! attend within one segment at a time (shared weights across segments);
//! cross-segment layers attend only over the gathered CLS tokens and scatter
//! them back, leaving payload tokens untouched.

use std::rc::Rc;

use crate::config::{ModelConfig, Stacking};
use crate::error::{Error, Result};
use crate::nn::{
    embedding_init, sinusoidal_pe, sinusoidal_pe_2d, EncoderLayer, Fwd, Linear,
    PositionalEncoding,
};
use crate::rng::SeedTree;
use crate::tensor::{NodeId, ParamId, ParameterStore, Scalar, Tensor};

/// Which arm a joint vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    One,
    Two,
}

impl Arm {
    pub fn index(self) -> usize {
        match self {
            Arm::One => 0,
            Arm::Two => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::One => Arm::Two,
            Arm::Two => Arm::One,
        }
    }
}

/// The CLS-prefixed segments before/after encoder passes. Segment order is
/// [arm1, arm2, visual]; the visual segment is absent under `no_visual`.
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub segments: Vec<NodeId>,
    pub cls_counts: Vec<usize>,
}

impl SegmentSet {
    pub fn total_cls(&self) -> usize {
        self.cls_counts.iter().sum()
    }
}

/// Learned CLS embeddings, one bank per segment. A zero count means no bank.
#[derive(Debug, Clone)]
pub struct ClsBank {
    pub banks: Vec<Option<ParamId>>,
}

/// The six encoder outputs, split back into CLS and payload parts.
#[derive(Debug, Clone)]
pub struct EncodedState {
    pub cls_arm1: Option<NodeId>,
    pub payload_arm1: NodeId,
    pub cls_arm2: Option<NodeId>,
    pub payload_arm2: NodeId,
    pub cls_visual: Option<NodeId>,
    pub payload_visual: Option<NodeId>,
}

/// Strided 3x3 conv blocks, realized as im2col gathers plus matmuls so the
/// whole stem differentiates through the ordinary tape ops.
#[derive(Debug, Clone)]
pub struct ConvStem {
    convs: Vec<Linear>,
    plans: Vec<StemPlan>,
    in_h: usize,
    in_w: usize,
    in_c: usize,
}

#[derive(Debug, Clone)]
struct StemPlan {
    idx: Rc<Vec<i64>>,
    out_rows: usize,
    patch: usize,
}

fn im2col_indices(h: usize, w: usize, c: usize, stride: usize) -> (Vec<i64>, usize, usize) {
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let mut idx = Vec::with_capacity(oh * ow * 9 * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let iy = (oy * stride) as i64 + ky - 1;
                    let ix = (ox * stride) as i64 + kx - 1;
                    for ch in 0..c as i64 {
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            idx.push(-1);
                        } else {
                            idx.push((iy * w as i64 + ix) * c as i64 + ch);
                        }
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

impl ConvStem {
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let (mut h, mut w, mut c) = (cfg.image_h, cfg.image_w, cfg.image_c);
        let mut convs = Vec::new();
        let mut plans = Vec::new();
        for (i, (&out_c, &stride)) in cfg
            .stem_channels
            .iter()
            .zip(&cfg.stem_strides)
            .enumerate()
        {
            let (idx, oh, ow) = im2col_indices(h, w, c, stride);
            plans.push(StemPlan {
                idx: Rc::new(idx),
                out_rows: oh * ow,
                patch: 9 * c,
            });
            convs.push(Linear::init(
                store,
                rng,
                &format!("{name}.conv{i}"),
                9 * c,
                out_c,
                true,
            )?);
            h = oh;
            w = ow;
            c = out_c;
        }
        Ok(ConvStem {
            convs,
            plans,
            in_h: cfg.image_h,
            in_w: cfg.image_w,
            in_c: cfg.image_c,
        })
    }

    /// Image tokens before positional encoding. `image` is `[H*W, C]`.
    pub fn forward<F: Scalar>(&self, fx: &mut Fwd<F>, image: NodeId) -> Result<NodeId> {
        let s = fx.g.value(image).shape();
        if s != [self.in_h * self.in_w, self.in_c] {
            return Err(Error::dim(format!(
                "visual input shape {s:?}, expected [{}, {}]",
                self.in_h * self.in_w,
                self.in_c
            )));
        }
        let mut x = image;
        for (conv, plan) in self.convs.iter().zip(&self.plans) {
            let patches = fx
                .g
                .gather(x, plan.idx.clone(), &[plan.out_rows, plan.patch])?;
            let y = conv.forward(fx, patches)?;
            x = fx.g.relu(y);
        }
        Ok(x)
    }
}

/// The full encoder stack plus its input embeddings.
pub struct HierEncoder<F: Scalar> {
    pub joint_embed: Linear,
    pub stem: Option<ConvStem>,
    pub cls_bank: ClsBank,
    role_pe: Option<PositionalEncoding<F>>,
    seg_layers: Vec<EncoderLayer>,
    cross_layers: Vec<EncoderLayer>,
    seg_pe: Tensor<F>,
    vis_pe: Option<Tensor<F>>,
    cls_counts: Vec<usize>,
    stacking: Stacking,
    no_cross: bool,
    joints_per_arm: usize,
    d_model: usize,
}

impl<F: Scalar> HierEncoder<F> {
    pub fn init(store: &mut ParameterStore<F>, rng: &SeedTree, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let no_visual = cfg.ablation.no_visual;
        let cls_counts: Vec<usize> = if no_visual {
            cfg.cls_counts[..2].to_vec()
        } else {
            cfg.cls_counts.to_vec()
        };

        let joint_embed = Linear::init(store, rng, "embed.joint", 1, d, true)?;
        let stem = if no_visual {
            None
        } else {
            Some(ConvStem::init(store, rng, "stem", cfg)?)
        };

        let seg_names = ["cls.arm1", "cls.arm2", "cls.visual"];
        let mut banks = Vec::new();
        for (i, &count) in cls_counts.iter().enumerate() {
            banks.push(if count == 0 {
                None
            } else {
                let name = seg_names[i];
                Some(store.register(
                    name,
                    Tensor::from_vec(&[count, d], embedding_init(rng, name, count * d))?,
                    true,
                )?)
            });
        }

        let total_cls: usize = cls_counts.iter().sum();
        let role_pe = if total_cls == 0 {
            None
        } else {
            Some(PositionalEncoding::learned(
                store,
                rng,
                "enc.role_pe",
                total_cls,
                d,
            )?)
        };

        let mut seg_layers = Vec::new();
        for l in 0..cfg.l_seg {
            seg_layers.push(EncoderLayer::init(
                store,
                rng,
                &format!("enc.seg.{l}"),
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.dropout,
                cfg.pre_norm,
            )?);
        }
        let mut cross_layers = Vec::new();
        for l in 0..cfg.l_cross {
            cross_layers.push(EncoderLayer::init(
                store,
                rng,
                &format!("enc.cross.{l}"),
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.dropout,
                cfg.pre_norm,
            )?);
        }

        let max_seg_len = (cfg.cls_counts[0].max(cfg.cls_counts[1]) + cfg.joints_per_arm)
            .max(cfg.cls_counts[2] + cfg.visual_tokens());
        let seg_pe = sinusoidal_pe(max_seg_len, d)?;
        let vis_pe = if no_visual {
            None
        } else {
            let (gh, gw) = cfg.visual_grid();
            Some(sinusoidal_pe_2d(gh, gw, d)?)
        };

        Ok(HierEncoder {
            joint_embed,
            stem,
            cls_bank: ClsBank { banks },
            role_pe,
            seg_layers,
            cross_layers,
            seg_pe,
            vis_pe,
            cls_counts,
            stacking: cfg.stacking,
            no_cross: cfg.ablation.no_cross,
            joints_per_arm: cfg.joints_per_arm,
            d_model: d,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.cls_counts.len()
    }

    pub fn cls_counts(&self) -> &[usize] {
        &self.cls_counts
    }

    /// One token per joint scalar through the shared 1-to-d linear map.
    /// Joint identity comes from the positional encoding added at assembly.
    pub fn embed_joints(&self, fx: &mut Fwd<F>, qpos: &[F], arm: Arm) -> Result<NodeId> {
        if qpos.len() != self.joints_per_arm {
            return Err(Error::dim(format!(
                "arm {} joint vector has {} entries, expected {}",
                arm.index() + 1,
                qpos.len(),
                self.joints_per_arm
            )));
        }
        let col = fx
            .g
            .leaf(Tensor::from_vec(&[qpos.len(), 1], qpos.to_vec())?);
        self.joint_embed.forward(fx, col)
    }

    /// Conv stem plus 2-D positional encoding. `image` is `[H*W, C]`.
    pub fn embed_visual(&self, fx: &mut Fwd<F>, image: NodeId) -> Result<NodeId> {
        let stem = self
            .stem
            .as_ref()
            .ok_or_else(|| Error::usage("visual segment is disabled in this configuration"))?;
        let tokens = stem.forward(fx, image)?;
        let pe = fx.g.leaf(self.vis_pe.clone().expect("stem implies table"));
        fx.g.add(tokens, pe)
    }

    /// Prepend CLS tokens and add within-segment sinusoidal positions.
    pub fn assemble(
        &self,
        fx: &mut Fwd<F>,
        arm1_tokens: NodeId,
        arm2_tokens: NodeId,
        visual_tokens: Option<NodeId>,
    ) -> Result<SegmentSet> {
        let mut payloads = vec![arm1_tokens, arm2_tokens];
        match (visual_tokens, self.stem.is_some()) {
            (Some(v), true) => payloads.push(v),
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::usage(
                    "visual tokens supplied but the visual segment is disabled",
                ))
            }
            (None, true) => {
                return Err(Error::usage(
                    "visual tokens required by this configuration",
                ))
            }
        }
        let mut segments = Vec::with_capacity(payloads.len());
        for (i, &payload) in payloads.iter().enumerate() {
            if fx.g.value(payload).n_cols() != self.d_model {
                return Err(Error::dim(format!(
                    "segment {i} width {} != d_model {}",
                    fx.g.value(payload).n_cols(),
                    self.d_model
                )));
            }
            let seg = match self.cls_bank.banks[i] {
                Some(bank) => {
                    let cls = fx.param(bank);
                    fx.g.concat_rows(&[cls, payload])?
                }
                None => payload,
            };
            let n = fx.g.value(seg).shape()[0];
            let pe_all = fx.g.leaf(self.seg_pe.clone());
            let pe = fx.g.slice_rows(pe_all, 0, n)?;
            segments.push(fx.g.add(seg, pe)?);
        }
        Ok(SegmentSet {
            segments,
            cls_counts: self.cls_counts.clone(),
        })
    }

    /// Apply one encoder layer to each segment independently; the same layer
    /// parameters serve every segment.
    pub fn segment_wise_pass(
        &self,
        fx: &mut Fwd<F>,
        s: &SegmentSet,
        layer: &EncoderLayer,
    ) -> Result<SegmentSet> {
        let mut out = Vec::with_capacity(s.segments.len());
        for &seg in &s.segments {
            out.push(layer.forward(fx, seg)?);
        }
        Ok(SegmentSet {
            segments: out,
            cls_counts: s.cls_counts.clone(),
        })
    }

    /// Gather all CLS tokens in segment order, add the learned role
    /// embeddings, run one encoder layer, and scatter the results back into
    /// their CLS slots. Payload tokens pass through untouched. With zero CLS
    /// tokens everywhere this is the identity.
    pub fn cross_segment_pass(
        &self,
        fx: &mut Fwd<F>,
        s: &SegmentSet,
        layer: &EncoderLayer,
    ) -> Result<SegmentSet> {
        if s.total_cls() == 0 {
            return Ok(s.clone());
        }
        let mut gathered = Vec::new();
        for (&seg, &count) in s.segments.iter().zip(&s.cls_counts) {
            if count > 0 {
                gathered.push(fx.g.slice_rows(seg, 0, count)?);
            }
        }
        let mut cls = fx.g.concat_rows(&gathered)?;
        if let Some(pe) = &self.role_pe {
            cls = pe.add_to(fx, cls)?;
        }
        let encoded = layer.forward(fx, cls)?;

        let mut out = Vec::with_capacity(s.segments.len());
        let mut offset = 0;
        for (&seg, &count) in s.segments.iter().zip(&s.cls_counts) {
            if count == 0 {
                out.push(seg);
                continue;
            }
            let new_cls = fx.g.slice_rows(encoded, offset, count)?;
            offset += count;
            let total = fx.g.value(seg).shape()[0];
            let payload_len = total - count;
            if payload_len == 0 {
                out.push(new_cls);
            } else {
                let payload = fx.g.slice_rows(seg, count, payload_len)?;
                out.push(fx.g.concat_rows(&[new_cls, payload])?);
            }
        }
        Ok(SegmentSet {
            segments: out,
            cls_counts: s.cls_counts.clone(),
        })
    }

    /// Run the configured stack and split the result.
    pub fn encode(&self, fx: &mut Fwd<F>, s: SegmentSet) -> Result<EncodedState> {
        let mut cur = s;
        match self.stacking {
            Stacking::Interleaved => {
                let blocks = self.seg_layers.len().max(self.cross_layers.len());
                for l in 0..blocks {
                    if let Some(layer) = self.seg_layers.get(l) {
                        cur = self.segment_wise_pass(fx, &cur, layer)?;
                    }
                    if !self.no_cross {
                        if let Some(layer) = self.cross_layers.get(l) {
                            cur = self.cross_segment_pass(fx, &cur, layer)?;
                        }
                    }
                }
            }
            Stacking::Sequential => {
                for layer in &self.seg_layers {
                    cur = self.segment_wise_pass(fx, &cur, layer)?;
                }
                if !self.no_cross {
                    for layer in &self.cross_layers {
                        cur = self.cross_segment_pass(fx, &cur, layer)?;
                    }
                }
            }
        }
        self.split(fx, &cur)
    }

    fn split_segment(
        &self,
        fx: &mut Fwd<F>,
        seg: NodeId,
        count: usize,
    ) -> Result<(Option<NodeId>, NodeId)> {
        let total = fx.g.value(seg).shape()[0];
        if count == 0 {
            return Ok((None, seg));
        }
        let cls = fx.g.slice_rows(seg, 0, count)?;
        let payload = fx.g.slice_rows(seg, count, total - count)?;
        Ok((Some(cls), payload))
    }

    fn split(&self, fx: &mut Fwd<F>, s: &SegmentSet) -> Result<EncodedState> {
        let (cls_arm1, payload_arm1) = self.split_segment(fx, s.segments[0], s.cls_counts[0])?;
        let (cls_arm2, payload_arm2) = self.split_segment(fx, s.segments[1], s.cls_counts[1])?;
        let (cls_visual, payload_visual) = if s.segments.len() > 2 {
            let (c, p) = self.split_segment(fx, s.segments[2], s.cls_counts[2])?;
            (c, Some(p))
        } else {
            (None, None)
        };
        Ok(EncodedState {
            cls_arm1,
            payload_arm1,
            cls_arm2,
            payload_arm2,
            cls_visual,
            payload_visual,
        })
    }
}
