//! Pre-norm transformer building blocks on the autodiff tensor.

use numerics::{layer_norm, Result as TensorResult, Tensor};

/// Supplies parameter tensors in a fixed declaration order, either freshly
/// initialized or rehydrated from a flat snapshot.
pub(crate) trait ParamBuilder {
    fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor;
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub(crate) struct RandomBuilder {
    pub rng: rand_chacha::ChaCha8Rng,
}

impl ParamBuilder for RandomBuilder {
    fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = self.rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
                })
                .collect(),
        };
        Tensor::param(data, shape).expect("parameter shapes are static")
    }
}

pub(crate) struct StoreBuilder<'a> {
    pub store: &'a [Vec<f64>],
    pub cursor: usize,
}

impl ParamBuilder for StoreBuilder<'_> {
    fn tensor(&mut self, shape: &[usize], _init: Init) -> Tensor {
        let data = self.store[self.cursor].clone();
        self.cursor += 1;
        Tensor::param(data, shape).expect("snapshot matches declaration order")
    }
}

pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(b: &mut dyn ParamBuilder, fan_in: usize, fan_out: usize) -> Linear {
        let std = (1.0 / fan_in as f64).sqrt();
        Linear {
            w: b.tensor(&[fan_in, fan_out], Init::Normal(std)),
            b: b.tensor(&[fan_out], Init::Zeros),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

pub(crate) struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: b.tensor(&[dim], Init::Ones),
            beta: b.tensor(&[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, 1e-5)
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

pub(crate) struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize, heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(b, dim, dim),
            wk: Linear::new(b, dim, dim),
            wv: Linear::new(b, dim, dim),
            wo: Linear::new(b, dim, dim),
            heads,
        }
    }

    /// Scaled dot-product attention of `q_in` over `kv_in`; `mask` is an
    /// additive [t, n] bias (0 or large negative).
    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> TensorResult<Tensor> {
        let dim = self.wq.w.shape()[0];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let mut out: Option<Tensor> = None;
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let mut scores = qh.matmul(&kh.transpose2d()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let attn = scores.softmax_last()?;
            let oh = attn.matmul(&vh)?;
            out = Some(match out {
                Some(acc) => acc.concat_cols(&oh)?,
                None => oh,
            });
        }
        self.wo.forward(&out.expect("at least one head"))
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        self.wq.collect(out);
        self.wk.collect(out);
        self.wv.collect(out);
        self.wo.collect(out);
    }
}

pub(crate) struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            lin1: Linear::new(b, dim, hidden),
            lin2: Linear::new(b, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.relu())
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        self.lin1.collect(out);
        self.lin2.collect(out);
    }
}

/// Pre-norm encoder block: self-attention then feed-forward, residual both.
pub(crate) struct EncoderBlock {
    ln1: LayerNormParams,
    attn: MultiHeadAttention,
    ln2: LayerNormParams,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize, heads: usize, ffn: usize) -> EncoderBlock {
        EncoderBlock {
            ln1: LayerNormParams::new(b, dim),
            attn: MultiHeadAttention::new(b, dim, heads),
            ln2: LayerNormParams::new(b, dim),
            ffn: FeedForward::new(b, dim, ffn),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.attn.forward(&normed, &normed, None)?)?;
        let out = x.add(&self.ffn.forward(&self.ln2.forward(&x)?)?)?;
        Ok(out)
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.ffn.collect(out);
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// multimodal memory, then feed-forward.
pub(crate) struct DecoderBlock {
    ln1: LayerNormParams,
    self_attn: MultiHeadAttention,
    ln2: LayerNormParams,
    cross_attn: MultiHeadAttention,
    ln3: LayerNormParams,
    ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize, heads: usize, ffn: usize) -> DecoderBlock {
        DecoderBlock {
            ln1: LayerNormParams::new(b, dim),
            self_attn: MultiHeadAttention::new(b, dim, heads),
            ln2: LayerNormParams::new(b, dim),
            cross_attn: MultiHeadAttention::new(b, dim, heads),
            ln3: LayerNormParams::new(b, dim),
            ffn: FeedForward::new(b, dim, ffn),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal_mask: &Tensor,
    ) -> TensorResult<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.self_attn.forward(&normed, &normed, Some(causal_mask))?)?;
        let x = x.add(
            &self
                .cross_attn
                .forward(&self.ln2.forward(&x)?, memory, None)?,
        )?;
        let out = x.add(&self.ffn.forward(&self.ln3.forward(&x)?)?)?;
        Ok(out)
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        self.ln1.collect(out);
        self.self_attn.collect(out);
        self.ln2.collect(out);
        self.cross_attn.collect(out);
        self.ln3.collect(out);
        self.ffn.collect(out);
    }
}

/// Additive (concat) attention parameters: score_j = vᵀ tanh(W1·state_j + W2·query).
pub(crate) struct AdditiveAttention {
    pub w1: Tensor,
    pub w2: Tensor,
    pub v: Tensor,
}

impl AdditiveAttention {
    pub fn new(b: &mut dyn ParamBuilder, dim: usize) -> AdditiveAttention {
        let std = (1.0 / dim as f64).sqrt();
        AdditiveAttention {
            w1: b.tensor(&[dim, dim], Init::Normal(std)),
            w2: b.tensor(&[dim, dim], Init::Normal(std)),
            v: b.tensor(&[dim], Init::Normal(std)),
        }
    }

    /// Raw scores [queries, states].
    pub fn scores(&self, states: &Tensor, queries: &Tensor) -> TensorResult<Tensor> {
        let keys = states.matmul(&self.w1)?;
        let qs = queries.matmul(&self.w2)?;
        numerics::additive_scores(&keys, &qs, &self.v)
    }

    pub fn collect(&self, out: &mut Vec<Tensor>) {
        out.push(self.w1.clone());
        out.push(self.w2.clone());
        out.push(self.v.clone());
    }
}
