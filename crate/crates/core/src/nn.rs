//! Transformer building blocks shared by the hierarchical encoder and the
//! multi-arm decoder: linear projections, multi-head attention, feed-forward
//! layers, positional encodings and dropout.
//!
//! Blocks own [`ParamId`]s, never tensors; a forward pass binds them onto the
//! caller's [`Graph`] through a [`Fwd`] context. Post-norm residual layout is
//! the default, with a pre-norm flag for the configurable variant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Graph, NodeId, ParamId, ParameterStore, Scalar, Tensor};

/// Everything a block needs during one forward pass. `dropout_rng` is `Some`
/// only in train mode; eval passes are deterministic.
pub struct Fwd<'a, F: Scalar> {
    pub g: &'a mut Graph<F>,
    pub store: &'a ParameterStore<F>,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, F: Scalar> Fwd<'a, F> {
    pub fn eval(g: &'a mut Graph<F>, store: &'a ParameterStore<F>) -> Self {
        Fwd {
            g,
            store,
            dropout_rng: None,
        }
    }

    pub fn train(
        g: &'a mut Graph<F>,
        store: &'a ParameterStore<F>,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Fwd {
            g,
            store,
            dropout_rng: Some(rng),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.g.param(self.store, id)
    }

    /// Inverted dropout: active only when a train-mode rng is present.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let shape = self.g.value(x).shape().to_vec();
        let keep = F::from_f64(1.0 / (1.0 - p));
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.g.leaf(Tensor::from_vec(&shape, mask).expect("mask shape"));
        self.g.mul(x, m).expect("same shape")
    }
}

/// Xavier-uniform init from the parameter's own named substream.
fn xavier<F: Scalar>(rng: &SeedTree, name: &str, fan_in: usize, fan_out: usize) -> Vec<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng.stream(name);
    (0..fan_in * fan_out)
        .map(|_| F::from_f64(r.random_range(-bound..bound)))
        .collect()
}

/// Small-normal init for embedding-like tables.
pub(crate) fn embedding_init<F: Scalar>(rng: &SeedTree, name: &str, n: usize) -> Vec<F> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
    let mut r = rng.stream(name);
    (0..n).map(|_| F::from_f64(normal.sample(&mut r))).collect()
}

/// `x @ W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Linear> {
        let wname = format!("{name}.w");
        let w = store.register(
            &wname,
            Tensor::from_vec(&[d_in, d_out], xavier(rng, &wname, d_in, d_out))?,
            true,
        )?;
        let b = if bias {
            Some(store.register(&format!("{name}.b"), Tensor::zeros(&[d_out]), true)?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<F: Scalar>(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId> {
        let w = fx.param(self.w);
        let y = fx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bn = fx.param(b);
                fx.g.add_row(y, bn)
            }
            None => Ok(y),
        }
    }
}

/// Per-row normalization with learned gain/bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        name: &str,
        d: usize,
    ) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: store.register(&format!("{name}.gain"), Tensor::full(&[d], F::one()), true)?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[d]), true)?,
            eps: 1e-5,
        })
    }

    pub fn forward<F: Scalar>(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId> {
        let gn = fx.param(self.gain);
        let bn = fx.param(self.bias);
        fx.g.layer_norm(x, gn, bn, self.eps)
    }
}

/// Scaled dot-product attention over `n_heads` column slices of d_model.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub d_model: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MultiHeadAttention {
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let proj = |suffix: &str, store: &mut ParameterStore<F>| -> Result<ParamId> {
            let pname = format!("{name}.{suffix}");
            store.register(
                &pname,
                Tensor::from_vec(&[d_model, d_model], xavier(rng, &pname, d_model, d_model))?,
                true,
            )
        };
        Ok(MultiHeadAttention {
            n_heads,
            d_model,
            w_q: proj("w_q", store)?,
            w_k: proj("w_k", store)?,
            w_v: proj("w_v", store)?,
            w_o: proj("w_o", store)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Returns the attended output (`n_q x d_model`) and one `n_q x n_k`
    /// weight matrix per head. Weight rows each sum to 1.
    pub fn attend<F: Scalar>(
        &self,
        fx: &mut Fwd<F>,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let d = self.d_model;
        for (role, id) in [("queries", queries), ("keys", keys), ("values", values)] {
            let s = fx.g.value(id).shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim(format!("attend: {role} shape {s:?}, want [*, {d}]")));
            }
        }
        let (nk, nv) = (fx.g.value(keys).shape()[0], fx.g.value(values).shape()[0]);
        if nk != nv {
            return Err(Error::dim(format!("attend: {nk} keys vs {nv} values")));
        }

        let wq = fx.param(self.w_q);
        let wk = fx.param(self.w_k);
        let wv = fx.param(self.w_v);
        let q = fx.g.matmul(queries, wq)?;
        let k = fx.g.matmul(keys, wk)?;
        let v = fx.g.matmul(values, wv)?;

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = fx.g.slice_cols(q, h * dh, dh)?;
            let kh = fx.g.slice_cols(k, h * dh, dh)?;
            let vh = fx.g.slice_cols(v, h * dh, dh)?;
            let kt = fx.g.transpose(kh)?;
            let scores = fx.g.matmul(qh, kt)?;
            let scaled = fx.g.scale(scores, scale);
            let w = fx.g.softmax_rows(scaled)?;
            let oh = fx.g.matmul(w, vh)?;
            heads.push(oh);
            weights.push(w);
        }
        let cat = fx.g.concat_cols(&heads)?;
        let wo = fx.param(self.w_o);
        let out = fx.g.matmul(cat, wo)?;
        Ok((out, weights))
    }
}

/// Two-linear feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        d_model: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            lin1: Linear::init(store, rng, &format!("{name}.lin1"), d_model, ffn_dim, true)?,
            lin2: Linear::init(store, rng, &format!("{name}.lin2"), ffn_dim, d_model, true)?,
        })
    }

    pub fn forward<F: Scalar>(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId> {
        let h = self.lin1.forward(fx, x)?;
        let r = fx.g.relu(h);
        self.lin2.forward(fx, r)
    }
}

/// Self-attention encoder layer (residual + norm around attention and FFN).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
    pub pre_norm: bool,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        dropout: f64,
        pre_norm: bool,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::init(store, rng, &format!("{name}.attn"), d_model, n_heads)?,
            ffn: FeedForward::init(store, rng, &format!("{name}.ffn"), d_model, ffn_dim)?,
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), d_model)?,
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), d_model)?,
            dropout,
            pre_norm,
        })
    }

    pub fn forward<F: Scalar>(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId> {
        if self.pre_norm {
            let nx = self.norm1.forward(fx, x)?;
            let (a, _) = self.attn.attend(fx, nx, nx, nx)?;
            let a = fx.dropout(a, self.dropout);
            let x1 = fx.g.add(x, a)?;
            let nx1 = self.norm2.forward(fx, x1)?;
            let f = self.ffn.forward(fx, nx1)?;
            let f = fx.dropout(f, self.dropout);
            fx.g.add(x1, f)
        } else {
            let (a, _) = self.attn.attend(fx, x, x, x)?;
            let a = fx.dropout(a, self.dropout);
            let sum = fx.g.add(x, a)?;
            let x1 = self.norm1.forward(fx, sum)?;
            let f = self.ffn.forward(fx, x1)?;
            let f = fx.dropout(f, self.dropout);
            let sum2 = fx.g.add(x1, f)?;
            self.norm2.forward(fx, sum2)
        }
    }
}

/// Decoder layer: self-attention over targets, cross-attention into memory,
/// feed-forward. No causal mask; all chunk queries decode in parallel.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    pub dropout: f64,
    pub pre_norm: bool,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        dropout: f64,
        pre_norm: bool,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::init(store, rng, &format!("{name}.self"), d_model, n_heads)?,
            cross_attn: MultiHeadAttention::init(store, rng, &format!("{name}.cross"), d_model, n_heads)?,
            ffn: FeedForward::init(store, rng, &format!("{name}.ffn"), d_model, ffn_dim)?,
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), d_model)?,
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), d_model)?,
            norm3: LayerNorm::init(store, &format!("{name}.norm3"), d_model)?,
            dropout,
            pre_norm,
        })
    }

    /// Returns the transformed target stream and the per-head cross-attention
    /// weights (`n_heads` matrices of `k x n_mem`).
    pub fn forward<F: Scalar>(
        &self,
        fx: &mut Fwd<F>,
        targets: NodeId,
        memory: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let ms = fx.g.value(memory).shape();
        if ms.len() != 2 || ms[0] == 0 {
            return Err(Error::usage("decoder layer: empty memory"));
        }
        if self.pre_norm {
            let nt = self.norm1.forward(fx, targets)?;
            let (a, _) = self.self_attn.attend(fx, nt, nt, nt)?;
            let a = fx.dropout(a, self.dropout);
            let t1 = fx.g.add(targets, a)?;
            let nt1 = self.norm2.forward(fx, t1)?;
            let (c, w) = self.cross_attn.attend(fx, nt1, memory, memory)?;
            let c = fx.dropout(c, self.dropout);
            let t2 = fx.g.add(t1, c)?;
            let nt2 = self.norm3.forward(fx, t2)?;
            let f = self.ffn.forward(fx, nt2)?;
            let f = fx.dropout(f, self.dropout);
            let t3 = fx.g.add(t2, f)?;
            Ok((t3, w))
        } else {
            let (a, _) = self.self_attn.attend(fx, targets, targets, targets)?;
            let a = fx.dropout(a, self.dropout);
            let sum = fx.g.add(targets, a)?;
            let t1 = self.norm1.forward(fx, sum)?;
            let (c, w) = self.cross_attn.attend(fx, t1, memory, memory)?;
            let c = fx.dropout(c, self.dropout);
            let sum2 = fx.g.add(t1, c)?;
            let t2 = self.norm2.forward(fx, sum2)?;
            let f = self.ffn.forward(fx, t2)?;
            let f = fx.dropout(f, self.dropout);
            let sum3 = fx.g.add(t2, f)?;
            let t3 = self.norm3.forward(fx, sum3)?;
            Ok((t3, w))
        }
    }
}

/// Interleaved sin/cos table: row `p`, frequency pair `j` uses rate
/// `10000^(-2j/d)`.
pub fn sinusoidal_pe<F: Scalar>(n: usize, d: usize) -> Result<Tensor<F>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal encoding width must be even, got {d}"
        )));
    }
    let mut data = vec![F::zero(); n * d];
    for p in 0..n {
        for j in 0..d / 2 {
            let rate = 10000f64.powf(-2.0 * j as f64 / d as f64);
            let angle = p as f64 * rate;
            data[p * d + 2 * j] = F::from_f64(angle.sin());
            data[p * d + 2 * j + 1] = F::from_f64(angle.cos());
        }
    }
    Tensor::from_vec(&[n, d], data)
}

/// 2-D variant for an `h x w` token grid: the first d/2 channels encode the
/// row coordinate, the rest the column coordinate. Tokens are row-major.
pub fn sinusoidal_pe_2d<F: Scalar>(h: usize, w: usize, d: usize) -> Result<Tensor<F>> {
    if d % 4 != 0 {
        return Err(Error::config(format!(
            "2-D sinusoidal encoding needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let ys = sinusoidal_pe::<F>(h, half)?;
    let xs = sinusoidal_pe::<F>(w, half)?;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(ys.row(y));
            data.extend_from_slice(xs.row(x));
        }
    }
    Tensor::from_vec(&[h * w, d], data)
}

/// Position table added to token sequences: a fixed sinusoidal table or a
/// learned embedding (used for the CLS role sequence).
#[derive(Debug, Clone)]
pub enum PositionalEncoding<F: Scalar> {
    Sinusoidal(Tensor<F>),
    Learned(ParamId),
}

impl<F: Scalar> PositionalEncoding<F> {
    pub fn sinusoidal(n_max: usize, d: usize) -> Result<Self> {
        Ok(PositionalEncoding::Sinusoidal(sinusoidal_pe(n_max, d)?))
    }

    pub fn learned(
        store: &mut ParameterStore<F>,
        rng: &SeedTree,
        name: &str,
        n: usize,
        d: usize,
    ) -> Result<Self> {
        let id = store.register(
            name,
            Tensor::from_vec(&[n, d], embedding_init(rng, name, n * d))?,
            true,
        )?;
        Ok(PositionalEncoding::Learned(id))
    }

    /// Add rows `0..len(x)` of the table to `x`.
    pub fn add_to(&self, fx: &mut Fwd<F>, x: NodeId) -> Result<NodeId> {
        let n = fx.g.value(x).shape()[0];
        let table = match self {
            PositionalEncoding::Sinusoidal(t) => {
                if n > t.shape()[0] {
                    return Err(Error::dim(format!(
                        "positional table has {} rows, sequence has {n}",
                        t.shape()[0]
                    )));
                }
                let node = fx.g.leaf(t.clone());
                fx.g.slice_rows(node, 0, n)?
            }
            PositionalEncoding::Learned(id) => {
                let node = fx.param(*id);
                let rows = fx.g.value(node).shape()[0];
                if n > rows {
                    return Err(Error::dim(format!(
                        "learned positional table has {rows} rows, sequence has {n}"
                    )));
                }
                if n == rows {
                    node
                } else {
                    fx.g.slice_rows(node, 0, n)?
                }
            }
        };
        fx.g.add(x, table)
    }
}
