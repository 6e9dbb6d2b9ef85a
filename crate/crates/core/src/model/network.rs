//! Encoder/fusion regressor over a flat parameter vector, with hand-written
//! reverse-mode gradients.

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::ModelError;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Atan,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, u: T) -> T {
        match self {
            Activation::Tanh => u.tanh(),
            Activation::Atan => u.atan(),
        }
    }

    /// Derivative at pre-activation `u` with output `a`.
    #[inline]
    fn grad<T: Real>(self, u: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Atan => T::one() / (T::one() + u * u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub sentiment_dim: usize,
    pub embedding_dim: usize,
    /// `false` drops the embedding encoder; fusion then sees the sentiment encoder only.
    pub use_embedding: bool,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub fusion_width: usize,
    pub fusion_blocks: usize,
    pub activation: Activation,
    pub prior_sigma: f64,
    pub noise_sigma_init: f64,
    pub target_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sentiment_dim: crate::features::SENTIMENT_DIM,
            embedding_dim: 256,
            use_embedding: true,
            encoder_width: 64,
            encoder_blocks: 2,
            fusion_width: 64,
            fusion_blocks: 2,
            activation: Activation::Tanh,
            prior_sigma: 1.0,
            noise_sigma_init: 0.5,
            target_floor: 1e-8,
        }
    }
}

impl ModelConfig {
    /// The same configuration with the embedding branch removed.
    pub fn sentiment_only(&self) -> Self {
        Self { use_embedding: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.sentiment_dim == 0 {
            return bad("sentiment_dim must be >= 1");
        }
        if self.use_embedding && self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1");
        }
        if self.encoder_width == 0 || self.fusion_width == 0 {
            return bad("widths must be >= 1");
        }
        for (name, x) in [
            ("prior_sigma", self.prior_sigma),
            ("noise_sigma_init", self.noise_sigma_init),
            ("target_floor", self.target_floor),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(ModelError::Config(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector; biases have `cols == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub slices: Vec<ParamSlice>,
}

impl Layout {
    pub fn n_params(&self) -> usize {
        self.slices.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// XXH64 of the canonical `name:rows:cols;` listing.
    pub fn hash(&self) -> u64 {
        let canon: String =
            self.slices.iter().map(|s| format!("{}:{}:{};", s.name, s.rows, s.cols)).collect();
        xxh64(canon.as_bytes(), 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    inner: Dense,
    outer: Dense,
}

#[derive(Debug, Clone)]
struct Stack {
    input: Dense,
    blocks: Vec<ResBlock>,
}

struct LayoutBuilder {
    slices: Vec<ParamSlice>,
    next: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let offset = self.next;
        self.slices.push(ParamSlice { name, offset, rows, cols });
        self.next += rows * cols;
        offset
    }

    fn dense(&mut self, prefix: &str, rows: usize, cols: usize) -> Dense {
        let w = self.tensor(format!("{prefix}.w"), rows, cols);
        let b = self.tensor(format!("{prefix}.b"), rows, 1);
        Dense { w, b, rows, cols }
    }

    fn stack(&mut self, prefix: &str, input: usize, width: usize, blocks: usize) -> Stack {
        let input = self.dense(&format!("{prefix}.in"), width, input);
        let blocks = (0..blocks)
            .map(|k| ResBlock {
                inner: self.dense(&format!("{prefix}.block{k}.inner"), width, width),
                outer: self.dense(&format!("{prefix}.block{k}.outer"), width, width),
            })
            .collect();
        Stack { input, blocks }
    }
}

/// Compiled architecture: offsets of every layer inside the flat vector.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    layout: Layout,
    sentiment: Stack,
    embedding: Option<Stack>,
    fusion: Stack,
    head: Dense,
    log_noise: usize,
}

/// Intermediate values of one stack needed by the backward pass.
#[derive(Debug, Clone, Default)]
struct StackTrace<T> {
    pre0: Vec<T>,
    /// `hidden[0]` is the input-layer output, `hidden[k + 1]` the output of block `k`.
    hidden: Vec<Vec<T>>,
    block_pre: Vec<Vec<T>>,
    block_act: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    sentiment: StackTrace<T>,
    embedding: Option<StackTrace<T>>,
    fused_input: Vec<T>,
    fusion: StackTrace<T>,
    pub output: T,
}

#[inline]
fn matvec_add<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *o = acc;
    }
}

/// `grad_w += dy x^T`, `grad_b += dy`, and `dx = W^T dy` when requested.
#[inline]
fn dense_backward<T: Real>(
    layer: Dense,
    theta: &[T],
    x: &[T],
    dy: &[T],
    grad: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (rows, cols) = (layer.rows, layer.cols);
    {
        let gw = &mut grad[layer.w..layer.w + rows * cols];
        for r in 0..rows {
            let d = dy[r];
            if d == T::zero() {
                continue;
            }
            for (g, xi) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *g += d * *xi;
            }
        }
    }
    for (g, d) in grad[layer.b..layer.b + rows].iter_mut().zip(dy) {
        *g += *d;
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
        let w = &theta[layer.w..layer.w + rows * cols];
        for r in 0..rows {
            let d = dy[r];
            for (o, wi) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *o += d * *wi;
            }
        }
    }
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = LayoutBuilder { slices: Vec::new(), next: 0 };
        let width = config.encoder_width;
        let sentiment = b.stack("sentiment", config.sentiment_dim, width, config.encoder_blocks);
        let embedding = config
            .use_embedding
            .then(|| b.stack("embedding", config.embedding_dim, width, config.encoder_blocks));
        let fused = if config.use_embedding { 2 * width } else { width };
        let fusion = b.stack("fusion", fused, config.fusion_width, config.fusion_blocks);
        let head = b.dense("head", 1, config.fusion_width);
        let log_noise = b.tensor("log_noise".into(), 1, 1);
        Ok(Self {
            config: config.clone(),
            layout: Layout { slices: b.slices },
            sentiment,
            embedding,
            fusion,
            head,
            log_noise,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn log_noise_index(&self) -> usize {
        self.log_noise
    }

    pub fn head_bias_index(&self) -> usize {
        self.head.b
    }

    /// Indices of weight matrices (not biases, not log_noise) with their fan-in.
    pub(crate) fn weight_tensors(&self) -> Vec<(std::ops::Range<usize>, usize)> {
        self.layout
            .slices
            .iter()
            .filter(|s| s.name.ends_with(".w"))
            .map(|s| (s.range(), s.cols))
            .collect()
    }

    pub fn check_dims(&self, s: &[impl Sized], e: &[impl Sized]) -> Result<(), ModelError> {
        if s.len() != self.config.sentiment_dim {
            return Err(ModelError::Dimension { what: "sentiment", expected: self.config.sentiment_dim, found: s.len() });
        }
        if self.config.use_embedding && e.len() != self.config.embedding_dim {
            return Err(ModelError::Dimension { what: "embedding", expected: self.config.embedding_dim, found: e.len() });
        }
        Ok(())
    }

    fn stack_forward<T: Real>(&self, stack: &Stack, theta: &[T], x: &[T], tr: &mut StackTrace<T>) {
        let act = self.config.activation;
        let l = stack.input;
        tr.pre0.resize(l.rows, T::zero());
        matvec_add(&theta[l.w..], &theta[l.b..], x, &mut tr.pre0);
        tr.hidden.clear();
        tr.hidden.push(tr.pre0.iter().map(|&u| act.apply(u)).collect());
        tr.block_pre.clear();
        tr.block_act.clear();
        for blk in &stack.blocks {
            let h = tr.hidden.last().unwrap();
            let mut u = vec![T::zero(); blk.inner.rows];
            matvec_add(&theta[blk.inner.w..], &theta[blk.inner.b..], h, &mut u);
            let a: Vec<T> = u.iter().map(|&v| act.apply(v)).collect();
            let mut out = vec![T::zero(); blk.outer.rows];
            matvec_add(&theta[blk.outer.w..], &theta[blk.outer.b..], &a, &mut out);
            out.iter_mut().zip(h).for_each(|(o, hi)| *o += *hi);
            tr.block_pre.push(u);
            tr.block_act.push(a);
            tr.hidden.push(out);
        }
    }

    /// Backpropagate `d_out` (gradient w.r.t. the stack output) into `grad`; returns the
    /// gradient w.r.t. the stack input when `want_input` is set.
    fn stack_backward<T: Real>(
        &self,
        stack: &Stack,
        theta: &[T],
        x: &[T],
        tr: &StackTrace<T>,
        mut dh: Vec<T>,
        grad: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let act = self.config.activation;
        for (k, blk) in stack.blocks.iter().enumerate().rev() {
            let h_in = &tr.hidden[k];
            let (u, a) = (&tr.block_pre[k], &tr.block_act[k]);
            let mut da = vec![T::zero(); blk.outer.cols];
            dense_backward(blk.outer, theta, a, &dh, grad, Some(&mut da));
            let du: Vec<T> = da.iter().zip(u.iter().zip(a)).map(|(d, (&ui, &ai))| *d * act.grad(ui, ai)).collect();
            let mut dh_in = vec![T::zero(); blk.inner.cols];
            dense_backward(blk.inner, theta, h_in, &du, grad, Some(&mut dh_in));
            dh.iter_mut().zip(dh_in).for_each(|(d, di)| *d += di);
        }
        let du0: Vec<T> = dh
            .iter()
            .zip(tr.pre0.iter().zip(&tr.hidden[0]))
            .map(|(d, (&u, &a))| *d * act.grad(u, a))
            .collect();
        if want_input {
            let mut dx = vec![T::zero(); stack.input.cols];
            dense_backward(stack.input, theta, x, &du0, grad, Some(&mut dx));
            Some(dx)
        } else {
            dense_backward(stack.input, theta, x, &du0, grad, None);
            None
        }
    }

    /// Predicted mean of log-volatility, keeping intermediates for [`Network::backward`].
    pub fn forward_trace<T: Real>(&self, theta: &[T], s: &[T], e: &[T], tr: &mut ForwardTrace<T>) {
        self.stack_forward(&self.sentiment, theta, s, &mut tr.sentiment);
        tr.fused_input.clear();
        tr.fused_input.extend_from_slice(tr.sentiment.hidden.last().unwrap());
        if let Some(stack) = &self.embedding {
            let et = tr.embedding.get_or_insert_with(StackTrace::default);
            self.stack_forward(stack, theta, e, et);
            tr.fused_input.extend_from_slice(et.hidden.last().unwrap());
        }
        let fused = std::mem::take(&mut tr.fused_input);
        self.stack_forward(&self.fusion, theta, &fused, &mut tr.fusion);
        tr.fused_input = fused;
        let mut y = [T::zero()];
        matvec_add(&theta[self.head.w..], &theta[self.head.b..], tr.fusion.hidden.last().unwrap(), &mut y);
        tr.output = y[0];
    }

    pub fn forward<T: Real>(&self, theta: &[T], s: &[T], e: &[T]) -> T {
        let mut tr = ForwardTrace::default();
        self.forward_trace(theta, s, e, &mut tr);
        tr.output
    }

    /// Accumulate `d_output * d(output)/d(theta)` into `grad`.
    pub fn backward<T: Real>(&self, theta: &[T], s: &[T], e: &[T], tr: &ForwardTrace<T>, d_output: T, grad: &mut [T]) {
        let top = tr.fusion.hidden.last().unwrap();
        let mut d_top = vec![T::zero(); self.head.cols];
        dense_backward(self.head, theta, top, &[d_output], grad, Some(&mut d_top));
        let d_fused = self
            .stack_backward(&self.fusion, theta, &tr.fused_input, &tr.fusion, d_top, grad, true)
            .unwrap();
        let w = self.config.encoder_width;
        self.stack_backward(&self.sentiment, theta, s, &tr.sentiment, d_fused[..w].to_vec(), grad, false);
        if let (Some(stack), Some(et)) = (&self.embedding, &tr.embedding) {
            self.stack_backward(stack, theta, e, et, d_fused[w..].to_vec(), grad, false);
        }
    }
}
