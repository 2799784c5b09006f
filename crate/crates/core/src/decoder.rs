//! Multi-arm decoder: two parallel arm-specific decoder stacks over
//! arm-specific memories, a synchronization block exchanging information
//! mid-stack, and per-arm action heads.
//!
//! Each arm's memory is `[own payload, other-arm CLS, visual CLS, visual
//! payload]`; the same layout serves both arms so that relabeling the arms
//! (inputs plus parameters) swaps the outputs bit-exactly. The decoder also
//! records every cross-attention weight matrix so attention mass on the
//! other arm's CLS span can be traced over a rollout.

use crate::config::ModelConfig;
use crate::encoder::{Arm, EncodedState};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_pe, DecoderLayer, EncoderLayer, Fwd, Linear};
use crate::rng::SeedTree;
use crate::tensor::{Graph, NodeId, ParameterStore, Scalar, Tensor};

/// Memory an arm decoder cross-attends into, plus the location of the
/// other arm's CLS rows for tracing and ablation.
#[derive(Debug, Clone)]
pub struct ArmContext {
    pub memory: NodeId,
    /// `(start, len)` of the other-arm CLS rows within `memory`.
    pub cls_span: Option<(usize, usize)>,
}

/// Cross-attention weights captured during one decode.
#[derive(Debug, Clone)]
pub struct ArmTrace {
    pub cls_span: Option<(usize, usize)>,
    /// `layers[l][h]` is the `k x n_mem` weight matrix of head `h` at layer `l`.
    pub layers: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub arms: [ArmTrace; 2],
}

impl DecodeTrace {
    /// Per arm, per layer, per head: attention mass on the other-arm CLS
    /// span, averaged over the chunk queries. Values lie in [0, 1].
    pub fn cls_mass<F: Scalar>(&self, g: &Graph<F>) -> Result<[Vec<Vec<f64>>; 2]> {
        let mut out: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for (a, arm) in self.arms.iter().enumerate() {
            let (start, len) = arm.cls_span.ok_or_else(|| {
                Error::usage("no CLS span in decoder memory (no-cls configuration)")
            })?;
            for heads in &arm.layers {
                let mut per_head = Vec::with_capacity(heads.len());
                for &w in heads {
                    let t = g.value(w);
                    let k = t.shape()[0];
                    let mut mass = 0.0;
                    for q in 0..k {
                        let row = t.row(q);
                        mass += row[start..start + len]
                            .iter()
                            .fold(0.0, |s, &v| s + v.as_f64());
                    }
                    per_head.push(mass / k as f64);
                }
                out[a].push(per_head);
            }
        }
        Ok(out)
    }
}

/// The two decoder stacks, synchronization block and action heads.
pub struct MultiArmDecoder<F: Scalar> {
    stacks: [Vec<DecoderLayer>; 2],
    sync: Vec<EncoderLayer>,
    sync_position: usize,
    action_heads: [Linear; 2],
    queries: Tensor<F>,
    no_cls: bool,
    no_sync: bool,
    chunk: usize,
    joints_per_arm: usize,
}

impl<F: Scalar> MultiArmDecoder<F> {
    pub fn init(store: &mut ParameterStore<F>, rng: &SeedTree, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut stacks = [Vec::new(), Vec::new()];
        for (i, stack) in stacks.iter_mut().enumerate() {
            for l in 0..cfg.l_dec {
                stack.push(DecoderLayer::init(
                    store,
                    rng,
                    &format!("dec.arm{}.{l}", i + 1),
                    d,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    cfg.dropout,
                    cfg.pre_norm,
                )?);
            }
        }
        let mut sync = Vec::new();
        for l in 0..cfg.l_sync {
            sync.push(EncoderLayer::init(
                store,
                rng,
                &format!("dec.sync.{l}"),
                d,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.dropout,
                cfg.pre_norm,
            )?);
        }
        let action_heads = [
            Linear::init(store, rng, "head.arm1", d, cfg.joints_per_arm, true)?,
            Linear::init(store, rng, "head.arm2", d, cfg.joints_per_arm, true)?,
        ];
        Ok(MultiArmDecoder {
            stacks,
            sync,
            sync_position: cfg.sync_position,
            action_heads,
            queries: sinusoidal_pe(cfg.chunk_size, d)?,
            no_cls: cfg.ablation.no_cls,
            no_sync: cfg.ablation.no_sync,
            chunk: cfg.chunk_size,
            joints_per_arm: cfg.joints_per_arm,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk
    }

    pub fn n_layers(&self) -> usize {
        self.stacks[0].len()
    }

    /// Positional target tokens that seed the chunk queries.
    pub fn target_queries(&self, fx: &mut Fwd<F>) -> NodeId {
        fx.g.leaf(self.queries.clone())
    }

    /// Assemble one arm's memory. `extra` rows (e.g. a latent token) are
    /// appended after the standard layout so the CLS span stays put.
    pub fn build_context(
        &self,
        fx: &mut Fwd<F>,
        arm: Arm,
        enc: &EncodedState,
        extra: Option<NodeId>,
    ) -> Result<ArmContext> {
        let (own_payload, other_cls) = match arm {
            Arm::One => (enc.payload_arm1, enc.cls_arm2),
            Arm::Two => (enc.payload_arm2, enc.cls_arm1),
        };
        let mut parts = vec![own_payload];
        let mut offset = fx.g.value(own_payload).shape()[0];
        let mut cls_span = None;
        if !self.no_cls {
            if let Some(c) = other_cls {
                let len = fx.g.value(c).shape()[0];
                cls_span = Some((offset, len));
                offset += len;
                parts.push(c);
            }
            if let Some(cv) = enc.cls_visual {
                offset += fx.g.value(cv).shape()[0];
                parts.push(cv);
            }
        }
        if let Some(pv) = enc.payload_visual {
            offset += fx.g.value(pv).shape()[0];
            parts.push(pv);
        }
        let _ = offset;
        if let Some(e) = extra {
            parts.push(e);
        }
        let memory = fx.g.concat_rows(&parts)?;
        Ok(ArmContext { memory, cls_span })
    }

    /// Decoder layers `0..sync_position`; cross-attention weights recorded.
    pub fn decode_front(
        &self,
        fx: &mut Fwd<F>,
        arm: Arm,
        ctx: &ArmContext,
        queries: NodeId,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        self.run_layers(fx, arm, ctx, queries, 0, self.sync_position)
    }

    /// Decoder layers `sync_position..l_dec` over the shared stream.
    pub fn decode_back(
        &self,
        fx: &mut Fwd<F>,
        arm: Arm,
        ctx: &ArmContext,
        shared: NodeId,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let n = self.stacks[arm.index()].len();
        self.run_layers(fx, arm, ctx, shared, self.sync_position, n)
    }

    fn run_layers(
        &self,
        fx: &mut Fwd<F>,
        arm: Arm,
        ctx: &ArmContext,
        mut stream: NodeId,
        from: usize,
        to: usize,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let mut weights = Vec::new();
        for layer in &self.stacks[arm.index()][from..to] {
            let (out, w) = layer.forward(fx, stream, ctx.memory)?;
            stream = out;
            weights.push(w);
        }
        Ok((stream, weights))
    }

    /// Exchange information between the arms' intermediate streams through
    /// the synchronization self-attention. Identity under `no_sync`.
    ///
    /// Each half is evaluated with its own rows first in the key order, so
    /// the block is exactly symmetric under arm relabeling while computing
    /// the same function as self-attention over the concatenation.
    pub fn sync_exchange(
        &self,
        fx: &mut Fwd<F>,
        h1: NodeId,
        h2: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (s1, s2) = (fx.g.value(h1).shape(), fx.g.value(h2).shape());
        if s1 != s2 {
            return Err(Error::dim(format!("sync_exchange: {s1:?} vs {s2:?}")));
        }
        if self.no_sync {
            return Ok((h1, h2));
        }
        let (mut a, mut b) = (h1, h2);
        for layer in &self.sync {
            let na = sync_half(layer, fx, a, b)?;
            let nb = sync_half(layer, fx, b, a)?;
            a = na;
            b = nb;
        }
        Ok((a, b))
    }

    /// Per-arm linear map from hidden tokens to normalized joint targets.
    pub fn action_head(&self, fx: &mut Fwd<F>, arm: Arm, hidden: NodeId) -> Result<NodeId> {
        self.action_heads[arm.index()].forward(fx, hidden)
    }

    /// Full pipeline: contexts, front halves, sync, back halves, heads.
    /// Returns the `k x 2J` action chunk (arm-1 columns first) and the
    /// recorded cross-attention trace.
    pub fn decode(
        &self,
        fx: &mut Fwd<F>,
        enc: &EncodedState,
        extra: Option<NodeId>,
    ) -> Result<(NodeId, DecodeTrace)> {
        let ctx1 = self.build_context(fx, Arm::One, enc, extra)?;
        let ctx2 = self.build_context(fx, Arm::Two, enc, extra)?;
        let q1 = self.target_queries(fx);
        let q2 = self.target_queries(fx);
        let (h1, mut w1) = self.decode_front(fx, Arm::One, &ctx1, q1)?;
        let (h2, mut w2) = self.decode_front(fx, Arm::Two, &ctx2, q2)?;
        let (s1, s2) = self.sync_exchange(fx, h1, h2)?;
        let (f1, back1) = self.decode_back(fx, Arm::One, &ctx1, s1)?;
        let (f2, back2) = self.decode_back(fx, Arm::Two, &ctx2, s2)?;
        w1.extend(back1);
        w2.extend(back2);
        let a1 = self.action_head(fx, Arm::One, f1)?;
        let a2 = self.action_head(fx, Arm::Two, f2)?;
        let chunk = fx.g.concat_cols(&[a1, a2])?;
        Ok((
            chunk,
            DecodeTrace {
                arms: [
                    ArmTrace {
                        cls_span: ctx1.cls_span,
                        layers: w1,
                    },
                    ArmTrace {
                        cls_span: ctx2.cls_span,
                        layers: w2,
                    },
                ],
            },
        ))
    }
}

/// One half of a synchronization layer: `own` rows attend over
/// `[own, other]` and pass through the layer's FFN and norms.
fn sync_half<F: Scalar>(
    layer: &EncoderLayer,
    fx: &mut Fwd<F>,
    own: NodeId,
    other: NodeId,
) -> Result<NodeId> {
    let mem = fx.g.concat_rows(&[own, other])?;
    if layer.pre_norm {
        let n_own = layer.norm1.forward(fx, own)?;
        let n_mem = layer.norm1.forward(fx, mem)?;
        let (a, _) = layer.attn.attend(fx, n_own, n_mem, n_mem)?;
        let a = fx.dropout(a, layer.dropout);
        let x1 = fx.g.add(own, a)?;
        let nx1 = layer.norm2.forward(fx, x1)?;
        let f = layer.ffn.forward(fx, nx1)?;
        let f = fx.dropout(f, layer.dropout);
        fx.g.add(x1, f)
    } else {
        let (a, _) = layer.attn.attend(fx, own, mem, mem)?;
        let a = fx.dropout(a, layer.dropout);
        let sum = fx.g.add(own, a)?;
        let x1 = layer.norm1.forward(fx, sum)?;
        let f = layer.ffn.forward(fx, x1)?;
        let f = fx.dropout(f, layer.dropout);
        let sum2 = fx.g.add(x1, f)?;
        layer.norm2.forward(fx, sum2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    fn cfg_small() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.d_model = 16;
        c.n_heads = 2;
        c.ffn_dim = 32;
        c.dropout = 0.0;
        c.stem_channels = vec![8, 16, 16];
        c
    }

    /// Handcrafted encoded state with the paper-profile token counts.
    fn enc_state(
        g: &mut Graph<f64>,
        d: usize,
        j: usize,
        cls: [usize; 3],
        visual: usize,
        seed: u64,
    ) -> EncodedState {
        let mk = |g: &mut Graph<f64>, n: usize, s: u64| g.leaf(rand_tokens(s, n, d));
        EncodedState {
            cls_arm1: (cls[0] > 0).then(|| mk(g, cls[0], seed)),
            payload_arm1: mk(g, j, seed + 1),
            cls_arm2: (cls[1] > 0).then(|| mk(g, cls[1], seed + 2)),
            payload_arm2: mk(g, j, seed + 3),
            cls_visual: (cls[2] > 0).then(|| mk(g, cls[2], seed + 4)),
            payload_visual: (visual > 0).then(|| mk(g, visual, seed + 5)),
        }
    }

    #[test]
    fn context_lengths_match_published_counts() {
        let mut cfg = cfg_small();
        cfg.joints_per_arm = 7;
        cfg.cls_counts = [7, 7, 5];
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 7, [7, 7, 5], 64, 10);
        let mut fx = Fwd::eval(&mut g, &store);
        let ctx = dec.build_context(&mut fx, Arm::One, &enc, None).unwrap();
        assert_eq!(g.value(ctx.memory).shape()[0], 7 + 7 + 5 + 64);
        assert_eq!(ctx.cls_span, Some((7, 7)));
    }

    #[test]
    fn no_cls_context_drops_both_cls_spans() {
        let mut cfg = cfg_small();
        cfg.joints_per_arm = 7;
        cfg.cls_counts = [7, 7, 5];
        cfg.ablation.no_cls = true;
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 7, [7, 7, 5], 64, 10);
        let mut fx = Fwd::eval(&mut g, &store);
        let ctx = dec.build_context(&mut fx, Arm::One, &enc, None).unwrap();
        assert_eq!(g.value(ctx.memory).shape()[0], 7 + 64);
        assert_eq!(ctx.cls_span, None);
    }

    #[test]
    fn cls_span_addresses_other_arm_rows_exactly() {
        let cfg = cfg_small();
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 4, cfg.cls_counts, 6, 30);
        let mut fx = Fwd::eval(&mut g, &store);
        for arm in [Arm::One, Arm::Two] {
            let ctx = dec.build_context(&mut fx, arm, &enc, None).unwrap();
            let (start, len) = ctx.cls_span.unwrap();
            let other = match arm {
                Arm::One => enc.cls_arm2.unwrap(),
                Arm::Two => enc.cls_arm1.unwrap(),
            };
            for r in 0..len {
                assert_eq!(
                    fx.g.value(ctx.memory).row(start + r),
                    fx.g.value(other).row(r)
                );
            }
        }
    }

    #[test]
    fn paper_profile_has_fifty_queries() {
        let mut cfg = cfg_small();
        cfg.chunk_size = 50;
        let mut store = ParameterStore::<f64>::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let mut fx = Fwd::eval(&mut g, &store);
        let q = dec.target_queries(&mut fx);
        assert_eq!(g.value(q).shape(), &[50, cfg.d_model]);
    }

    #[test]
    fn decode_front_matches_manual_composition() {
        let mut cfg = cfg_small();
        cfg.l_dec = 3;
        cfg.sync_position = 2;
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 4, cfg.cls_counts, 6, 40);
        let mut fx = Fwd::eval(&mut g, &store);
        let ctx = dec.build_context(&mut fx, Arm::One, &enc, None).unwrap();
        let q = dec.target_queries(&mut fx);
        let (front, w) = dec.decode_front(&mut fx, Arm::One, &ctx, q).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(fx.g.value(front).shape(), &[cfg.chunk_size, cfg.d_model]);

        let q2 = dec.target_queries(&mut fx);
        let (m1, _) = dec.stacks[0][0].forward(&mut fx, q2, ctx.memory).unwrap();
        let (m2, _) = dec.stacks[0][1].forward(&mut fx, m1, ctx.memory).unwrap();
        assert_eq!(fx.g.value(front).data(), fx.g.value(m2).data());
    }

    #[test]
    fn sync_split_of_concat_is_identity_without_attention() {
        let mut g = Graph::<f64>::new();
        let h1 = g.leaf(rand_tokens(1, 4, 8));
        let h2 = g.leaf(rand_tokens(2, 4, 8));
        let cat = g.concat_rows(&[h1, h2]).unwrap();
        let back1 = g.slice_rows(cat, 0, 4).unwrap();
        let back2 = g.slice_rows(cat, 4, 4).unwrap();
        assert_eq!(g.value(back1).data(), g.value(h1).data());
        assert_eq!(g.value(back2).data(), g.value(h2).data());
    }

    #[test]
    fn sync_output_halves_have_chunk_length_and_cross_sensitivity() {
        let cfg = cfg_small();
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let h1 = rand_tokens(3, cfg.chunk_size, cfg.d_model);
        let h2a = rand_tokens(4, cfg.chunk_size, cfg.d_model);
        let mut h2b = h2a.clone();
        h2b.data_mut()[0] += 0.25;

        let run = |h2: &Tensor<f64>| {
            let mut g = Graph::new();
            let n1 = g.leaf(h1.clone());
            let n2 = g.leaf(h2.clone());
            let mut fx = Fwd::eval(&mut g, &store);
            let (s1, s2) = dec.sync_exchange(&mut fx, n1, n2).unwrap();
            assert_eq!(g.value(s1).shape(), &[cfg.chunk_size, cfg.d_model]);
            assert_eq!(g.value(s2).shape(), &[cfg.chunk_size, cfg.d_model]);
            g.value(s1).clone()
        };
        assert_ne!(run(&h2a).data(), run(&h2b).data(), "s1 must depend on h2");
    }

    #[test]
    fn no_sync_pipeline_equals_plain_decoder_stack() {
        let mut cfg = cfg_small();
        cfg.ablation.no_sync = true;
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 4, cfg.cls_counts, 6, 50);
        let mut fx = Fwd::eval(&mut g, &store);
        let ctx = dec.build_context(&mut fx, Arm::One, &enc, None).unwrap();
        let q = dec.target_queries(&mut fx);
        let (h, _) = dec.decode_front(&mut fx, Arm::One, &ctx, q).unwrap();
        let (s1, _) = dec.sync_exchange(&mut fx, h, h).unwrap();
        let (f, _) = dec.decode_back(&mut fx, Arm::One, &ctx, s1).unwrap();

        let q2 = dec.target_queries(&mut fx);
        let mut stream = q2;
        for layer in &dec.stacks[0] {
            let (out, _) = layer.forward(&mut fx, stream, ctx.memory).unwrap();
            stream = out;
        }
        assert_eq!(fx.g.value(f).data(), fx.g.value(stream).data());
    }

    #[test]
    fn action_head_bias_row_for_zero_hidden() {
        let cfg = cfg_small();
        let mut store = ParameterStore::<f64>::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::zeros(&[cfg.chunk_size, cfg.d_model]));
        let mut fx = Fwd::eval(&mut g, &store);
        let a = dec.action_head(&mut fx, Arm::Two, zero).unwrap();
        assert_eq!(g.value(a).shape(), &[cfg.chunk_size, cfg.joints_per_arm]);
        let bias = store
            .value(dec.action_heads[1].b.unwrap())
            .data()
            .to_vec();
        for i in 0..cfg.chunk_size {
            assert_eq!(g.value(a).row(i), &bias[..]);
        }
    }

    #[test]
    fn full_decode_shapes_and_mass_bounds() {
        let mut cfg = cfg_small();
        cfg.joints_per_arm = 7;
        cfg.cls_counts = [7, 7, 5];
        cfg.chunk_size = 50;
        cfg.l_dec = 4;
        cfg.sync_position = 2;
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let mut g = Graph::new();
        let enc = enc_state(&mut g, cfg.d_model, 7, [7, 7, 5], 64, 60);
        let mut fx = Fwd::eval(&mut g, &store);
        let (chunk, trace) = dec.decode(&mut fx, &enc, None).unwrap();
        assert_eq!(g.value(chunk).shape(), &[50, 14]);
        let mass = trace.cls_mass(&g).unwrap();
        for arm in &mass {
            assert_eq!(arm.len(), 4);
            for layer in arm {
                assert_eq!(layer.len(), cfg.n_heads);
                for &m in layer {
                    assert!((0.0..=1.0 + 1e-9).contains(&m), "mass {m}");
                }
            }
        }
    }

    #[test]
    fn decoder_level_isolation_under_ablations() {
        let mut cfg = cfg_small();
        cfg.ablation.no_cls = true;
        cfg.ablation.no_sync = true;
        cfg.ablation.no_visual = true;
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();

        let run = |seed2: u64| {
            let mut g = Graph::new();
            let mut enc = enc_state(&mut g, cfg.d_model, 4, cfg.cls_counts, 6, 70);
            // no visual segment in this configuration
            enc.cls_visual = None;
            enc.payload_visual = None;
            enc.payload_arm2 = g.leaf(rand_tokens(seed2, 4, cfg.d_model));
            enc.cls_arm2 = Some(g.leaf(rand_tokens(seed2 + 1, cfg.cls_counts[1], cfg.d_model)));
            let mut fx = Fwd::eval(&mut g, &store);
            let (chunk, trace) = dec.decode(&mut fx, &enc, None).unwrap();
            assert!(trace.cls_mass(&g).is_err());
            g.value(chunk).clone()
        };
        let a = run(100);
        let b = run(200);
        for i in 0..cfg.chunk_size {
            // arm-1 columns bitwise equal, arm-2 columns differ
            assert_eq!(a.row(i)[..4], b.row(i)[..4]);
        }
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn full_model_is_sensitive_to_other_arm() {
        let cfg = cfg_small();
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &SeedTree::new(2), &cfg).unwrap();
        let run = |seed2: u64| {
            let mut g = Graph::new();
            let mut enc = enc_state(&mut g, cfg.d_model, 4, cfg.cls_counts, 6, 70);
            enc.cls_arm2 = Some(g.leaf(rand_tokens(seed2, cfg.cls_counts[1], cfg.d_model)));
            let mut fx = Fwd::eval(&mut g, &store);
            let (chunk, _) = dec.decode(&mut fx, &enc, None).unwrap();
            g.value(chunk).clone()
        };
        let a = run(100);
        let b = run(200);
        let delta = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .take(4 * 8)
            .fold(0.0f64, f64::max);
        assert!(delta > 0.0, "arm-1 outputs must react to arm-2 CLS changes");
    }

    #[test]
    fn relabeling_arms_swaps_outputs_exactly() {
        let cfg = cfg_small();
        let tree = SeedTree::new(2);
        let mut store = ParameterStore::new();
        let dec = MultiArmDecoder::init(&mut store, &tree, &cfg).unwrap();

        // second identical decoder whose store gets arm-swapped values
        let mut swapped = ParameterStore::new();
        let dec_swapped = MultiArmDecoder::init(&mut swapped, &tree, &cfg).unwrap();
        let swap_name = |name: &str| -> String {
            for (a, b) in [("dec.arm1", "dec.arm2"), ("head.arm1", "head.arm2")] {
                if let Some(rest) = name.strip_prefix(a) {
                    return format!("{b}{rest}");
                }
                if let Some(rest) = name.strip_prefix(b) {
                    return format!("{a}{rest}");
                }
            }
            name.to_string()
        };
        for id in store.sorted_ids() {
            let target = swapped.id(&swap_name(store.name(id))).unwrap();
            swapped.set_value(target, store.value(id).clone()).unwrap();
        }

        let j = cfg.joints_per_arm;
        let run = |dec: &MultiArmDecoder<f64>, store: &ParameterStore<f64>, swap: bool| {
            let mut g = Graph::new();
            let enc = enc_state(&mut g, cfg.d_model, j, cfg.cls_counts, 6, 80);
            let enc = if swap {
                EncodedState {
                    cls_arm1: enc.cls_arm2,
                    payload_arm1: enc.payload_arm2,
                    cls_arm2: enc.cls_arm1,
                    payload_arm2: enc.payload_arm1,
                    cls_visual: enc.cls_visual,
                    payload_visual: enc.payload_visual,
                }
            } else {
                enc
            };
            let mut fx = Fwd::eval(&mut g, store);
            let (chunk, _) = dec.decode(&mut fx, &enc, None).unwrap();
            g.value(chunk).clone()
        };

        let base = run(&dec, &store, false);
        let flipped = run(&dec_swapped, &swapped, true);
        for r in 0..cfg.chunk_size {
            assert_eq!(base.row(r)[..j], flipped.row(r)[j..2 * j], "row {r}");
            assert_eq!(base.row(r)[j..2 * j], flipped.row(r)[..j], "row {r}");
        }
    }

}
