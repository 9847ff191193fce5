use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderOutput, SequenceEncoder};
use crate::corpus::{Segment, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{
    visit_matrix, visit_matrix_mut, visit_nested, visit_nested_mut, visit_vector, visit_vector_mut,
    Parameters, Visitor, VisitorMut,
};

const LN_EPS: f64 = 1e-12;

fn default_d() -> usize {
    64
}
fn default_layers() -> usize {
    1
}
fn default_heads() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            vocab_size: 0,
            max_len: 256,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("encoder {name} must be positive")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        4 * self.d
    }

    pub fn head_width(&self) -> usize {
        self.d / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ff: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            wq: m(d, d),
            bq: v(d),
            wk: m(d, d),
            bk: v(d),
            wv: m(d, d),
            bv: v(d),
            wo: m(d, d),
            bo: v(d),
            ln1_gain: v(d),
            ln1_bias: v(d),
            w_ff1: m(d, ff),
            b_ff1: v(ff),
            w_ff2: m(ff, d),
            b_ff2: v(d),
            ln2_gain: v(d),
            ln2_bias: v(d),
        }
    }
}

impl Parameters for LayerParams {
    fn visit(&self, f: &mut Visitor) {
        visit_matrix("attn.wq", &self.wq, f);
        visit_vector("attn.bq", &self.bq, f);
        visit_matrix("attn.wk", &self.wk, f);
        visit_vector("attn.bk", &self.bk, f);
        visit_matrix("attn.wv", &self.wv, f);
        visit_vector("attn.bv", &self.bv, f);
        visit_matrix("attn.wo", &self.wo, f);
        visit_vector("attn.bo", &self.bo, f);
        visit_vector("ln1.gain", &self.ln1_gain, f);
        visit_vector("ln1.bias", &self.ln1_bias, f);
        visit_matrix("ffn.w1", &self.w_ff1, f);
        visit_vector("ffn.b1", &self.b_ff1, f);
        visit_matrix("ffn.w2", &self.w_ff2, f);
        visit_vector("ffn.b2", &self.b_ff2, f);
        visit_vector("ln2.gain", &self.ln2_gain, f);
        visit_vector("ln2.bias", &self.ln2_bias, f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_matrix_mut("attn.wq", &mut self.wq, f);
        visit_vector_mut("attn.bq", &mut self.bq, f);
        visit_matrix_mut("attn.wk", &mut self.wk, f);
        visit_vector_mut("attn.bk", &mut self.bk, f);
        visit_matrix_mut("attn.wv", &mut self.wv, f);
        visit_vector_mut("attn.bv", &mut self.bv, f);
        visit_matrix_mut("attn.wo", &mut self.wo, f);
        visit_vector_mut("attn.bo", &mut self.bo, f);
        visit_vector_mut("ln1.gain", &mut self.ln1_gain, f);
        visit_vector_mut("ln1.bias", &mut self.ln1_bias, f);
        visit_matrix_mut("ffn.w1", &mut self.w_ff1, f);
        visit_vector_mut("ffn.b1", &mut self.b_ff1, f);
        visit_matrix_mut("ffn.w2", &mut self.w_ff2, f);
        visit_vector_mut("ffn.b2", &mut self.b_ff2, f);
        visit_vector_mut("ln2.gain", &mut self.ln2_gain, f);
        visit_vector_mut("ln2.bias", &mut self.ln2_bias, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embed_ln_gain: Array1<f64>,
    pub embed_ln_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
}

impl Parameters for EncoderParams {
    fn visit(&self, f: &mut Visitor) {
        visit_matrix("embed.token", &self.token_embedding, f);
        visit_matrix("embed.position", &self.position_embedding, f);
        visit_vector("embed.ln.gain", &self.embed_ln_gain, f);
        visit_vector("embed.ln.bias", &self.embed_ln_bias, f);
        for (i, layer) in self.layers.iter().enumerate() {
            visit_nested(&format!("layer{i}"), layer, f);
        }
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        visit_matrix_mut("embed.token", &mut self.token_embedding, f);
        visit_matrix_mut("embed.position", &mut self.position_embedding, f);
        visit_vector_mut("embed.ln.gain", &mut self.embed_ln_gain, f);
        visit_vector_mut("embed.ln.bias", &mut self.embed_ln_bias, f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_nested_mut(&format!("layer{i}"), layer, f);
        }
    }
}

/// Uniform `[-1/√d, 1/√d]` for matrices, ones for layer-norm gains, zeros
/// for every other vector.
pub(crate) fn init_uniform<P: Parameters>(params: &mut P, d: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (d as f64).sqrt();
    params.visit_mut(&mut |name, shape, data| {
        if shape.len() == 2 {
            data.iter_mut()
                .for_each(|x| *x = rng.random_range(-bound..=bound));
        } else if name.ends_with("gain") {
            data.fill(1.0);
        } else {
            data.fill(0.0);
        }
    });
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d;
        Self {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            embed_ln_gain: Array1::zeros(d),
            embed_ln_bias: Array1::zeros(d),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.ff_width()))
                .collect(),
        }
    }

    /// Seeded initialization; the same config always yields identical values.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_uniform(&mut params, config.d, &mut rng);
        Ok(params)
    }

    pub fn matches(&self, config: &EncoderConfig) -> bool {
        self.token_embedding.dim() == (config.vocab_size, config.d)
            && self.position_embedding.dim() == (config.max_len, config.d)
            && self.layers.len() == config.n_layers
            && self
                .layers
                .iter()
                .all(|l| l.w_ff1.dim() == (config.d, config.ff_width()))
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(z: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, d) = z.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = z.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            xhat[[r, c]] = (row[c] - mean) * inv;
        }
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dz = Array2::zeros((rows, d));
    for r in 0..rows {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / d as f64;
        let mean_gx = g.dot(&xh) / d as f64;
        for c in 0..d {
            dz[[r, c]] = cache.inv_std[r] * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dz
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Intermediates of one attention block.
#[derive(Debug, Clone)]
struct LayerTape {
    x: Array2<f64>,
    rows: usize,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    y: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    ln2: LnCache,
}

#[derive(Debug, Clone)]
pub struct TransformerTape {
    owner: (u64, u64),
    ids: Vec<u32>,
    embed_ln: LnCache,
    layers: Vec<LayerTape>,
}

impl TransformerTape {
    /// Attention distribution of `head` in `layer` (query rows × keys).
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].probs[head]
    }
}

static NEXT_ENCODER_ID: AtomicU64 = AtomicU64::new(1);

/// Reference encoder: token + position embeddings, layer norm, then
/// `n_layers` post-LN blocks of multi-head self-attention and a GELU
/// feed-forward. The pooled output is the final hidden state at position 0.
///
/// Only position 0 of the last block feeds the output, so that block
/// computes queries, residuals and the feed-forward for row 0 alone.
#[derive(Debug)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    params: EncoderParams,
    id: u64,
    version: u64,
}

impl Clone for TransformerEncoder {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone())
            .expect("cloned parameters match their config")
    }
}

impl TransformerEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(Error::ModelMismatch(
                "encoder parameter shapes do not match the config".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            id: NEXT_ENCODER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Mutable access invalidates every tape recorded so far.
    pub fn params_mut(&mut self) -> &mut EncoderParams {
        self.version += 1;
        &mut self.params
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    /// Grow the position table to `max_len`, initializing new rows like a
    /// fresh encoder would with `seed`.
    pub fn extend_positions(&mut self, max_len: usize, seed: u64) {
        let old = self.config.max_len;
        if max_len <= old {
            return;
        }
        let d = self.config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Array2::zeros((max_len, d));
        table.slice_mut(s![..old, ..]).assign(&self.params.position_embedding);
        for x in table.slice_mut(s![old.., ..]).iter_mut() {
            *x = rng.random_range(-bound..=bound);
        }
        self.params_mut().position_embedding = table;
        self.config.max_len = max_len;
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.ids.len(),
                max: self.config.max_len,
            });
        }
        if seq.ids.is_empty() || seq.segments.len() != seq.ids.len() {
            return Err(Error::DimensionMismatch {
                what: "sequence segments",
                expected: seq.ids.len(),
                got: seq.segments.len(),
            });
        }
        if seq.segments[0] == Segment::Padding {
            return Err(Error::InvalidConfig("sequence starts with padding".into()));
        }
        for (&id, seg) in seq.ids.iter().zip(&seq.segments) {
            if *seg != Segment::Padding && id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn layer_forward(&self, p: &LayerParams, x: Array2<f64>, rows: usize, key_mask: &[bool]) -> (Array2<f64>, LayerTape) {
        let d = self.config.d;
        let dh = self.config.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let x_r = x.slice(s![..rows, ..]);
        let q = x_r.dot(&p.wq) + &p.bq;
        let k = x.dot(&p.wk) + &p.bk;
        let v = x.dot(&p.wv) + &p.bv;
        let mut ctx = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in a.rows_mut() {
                masked_softmax(row.as_slice_mut().expect("row-major"), key_mask);
            }
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let z1 = &x_r + &(ctx.dot(&p.wo) + &p.bo);
        let (y, ln1) = layer_norm(&z1, &p.ln1_gain, &p.ln1_bias);
        let h_pre = y.dot(&p.w_ff1) + &p.b_ff1;
        let h_act = h_pre.mapv(gelu);
        let z2 = &y + &(h_act.dot(&p.w_ff2) + &p.b_ff2);
        let (out, ln2) = layer_norm(&z2, &p.ln2_gain, &p.ln2_bias);
        let tape = LayerTape {
            x,
            rows,
            q,
            k,
            v,
            probs,
            ctx,
            ln1,
            y,
            h_pre,
            h_act,
            ln2,
        };
        (out, tape)
    }

    fn layer_backward(&self, p: &LayerParams, t: &LayerTape, d_out: &Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
        let dh = self.config.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = t.rows;
        let x_r: ArrayView2<f64> = t.x.slice(s![..rows, ..]);

        let dz2 = layer_norm_backward(d_out, &t.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        g.w_ff2 += &t.h_act.t().dot(&dz2);
        g.b_ff2 += &dz2.sum_axis(Axis(0));
        let mut dh_pre = dz2.dot(&p.w_ff2.t());
        dh_pre.zip_mut_with(&t.h_pre, |dg, &x| *dg *= gelu_grad(x));
        g.w_ff1 += &t.y.t().dot(&dh_pre);
        g.b_ff1 += &dh_pre.sum_axis(Axis(0));
        let dy = dz2 + dh_pre.dot(&p.w_ff1.t());

        let dz1 = layer_norm_backward(&dy, &t.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        let mut dx = Array2::zeros(t.x.dim());
        dx.slice_mut(s![..rows, ..]).assign(&dz1);
        g.wo += &t.ctx.t().dot(&dz1);
        g.bo += &dz1.sum_axis(Axis(0));
        let dctx = dz1.dot(&p.wo.t());

        let mut dq = Array2::zeros(t.q.dim());
        let mut dk = Array2::zeros(t.k.dim());
        let mut dv = Array2::zeros(t.v.dim());
        for h in 0..self.config.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &t.probs[h];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&t.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let mut ds = a * &da;
            for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
                let total = ds_row.sum();
                ds_row.zip_mut_with(&a_row, |x, &p| *x -= p * total);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&t.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&t.q.slice(cols)));
        }
        g.wq += &x_r.t().dot(&dq);
        g.bq += &dq.sum_axis(Axis(0));
        g.wk += &t.x.t().dot(&dk);
        g.bk += &dk.sum_axis(Axis(0));
        g.wv += &t.x.t().dot(&dv);
        g.bv += &dv.sum_axis(Axis(0));
        {
            let mut dx_r = dx.slice_mut(s![..rows, ..]);
            dx_r += &dq.dot(&p.wq.t());
        }
        dx += &dk.dot(&p.wk.t());
        dx += &dv.dot(&p.wv.t());
        dx
    }
}

fn masked_softmax(row: &mut [f64], key_mask: &[bool]) {
    let max = row
        .iter()
        .zip(key_mask)
        .filter(|(_, &keep)| keep)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (x, &keep) in row.iter_mut().zip(key_mask) {
        *x = if keep { (*x - max).exp() } else { 0.0 };
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

impl SequenceEncoder for TransformerEncoder {
    type Tape = TransformerTape;
    type Grads = EncoderParams;

    fn width(&self) -> usize {
        self.config.d
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn zero_grads(&self) -> EncoderParams {
        EncoderParams::zeros(&self.config)
    }

    fn encode(&self, seq: &TokenSequence) -> Result<EncoderOutput<TransformerTape>> {
        self.check_sequence(seq)?;
        let len = seq.ids.len();
        let d = self.config.d;
        let key_mask: Vec<bool> = seq.segments.iter().map(|s| *s != Segment::Padding).collect();
        let p = &self.params;
        let mut e0 = Array2::zeros((len, d));
        for (i, (&id, &keep)) in seq.ids.iter().zip(&key_mask).enumerate() {
            if keep {
                let mut row = e0.row_mut(i);
                row += &p.token_embedding.row(id as usize);
                row += &p.position_embedding.row(i);
            }
        }
        let (mut x, embed_ln) = layer_norm(&e0, &p.embed_ln_gain, &p.embed_ln_bias);
        let n = p.layers.len();
        let mut layers = Vec::with_capacity(n);
        for (li, lp) in p.layers.iter().enumerate() {
            let rows = if li + 1 == n { 1 } else { len };
            let (out, tape) = self.layer_forward(lp, x, rows, &key_mask);
            layers.push(tape);
            x = out;
        }
        let pooled = x.row(0).to_vec();
        let ids = seq
            .ids
            .iter()
            .zip(&key_mask)
            .map(|(&id, &keep)| if keep { id } else { u32::MAX })
            .collect();
        Ok(EncoderOutput {
            pooled,
            tape: TransformerTape {
                owner: (self.id, self.version),
                ids,
                embed_ln,
                layers,
            },
        })
    }

    fn backprop_into(
        &self,
        output: &EncoderOutput<TransformerTape>,
        pooled_grad: &[f64],
        grads: &mut EncoderParams,
    ) -> Result<()> {
        let tape = &output.tape;
        if tape.owner != (self.id, self.version) {
            return Err(Error::StaleTape);
        }
        if pooled_grad.len() != self.config.d {
            return Err(Error::DimensionMismatch {
                what: "pooled gradient",
                expected: self.config.d,
                got: pooled_grad.len(),
            });
        }
        let mut d_x = Array2::from_shape_vec((1, self.config.d), pooled_grad.to_vec())
            .expect("shape checked above");
        for (li, lt) in tape.layers.iter().enumerate().rev() {
            d_x = self.layer_backward(&self.params.layers[li], lt, &d_x, &mut grads.layers[li]);
        }
        let p = &self.params;
        let d_e0 = layer_norm_backward(
            &d_x,
            &tape.embed_ln,
            &p.embed_ln_gain,
            &mut grads.embed_ln_gain,
            &mut grads.embed_ln_bias,
        );
        for (i, &id) in tape.ids.iter().enumerate() {
            if id == u32::MAX {
                continue;
            }
            let row = d_e0.row(i);
            let mut tok = grads.token_embedding.row_mut(id as usize);
            tok += &row;
            let mut pos = grads.position_embedding.row_mut(i);
            pos += &row;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, SEP};
    use crate::params::{finite_difference, max_relative_error};

    fn config(d: usize, heads: usize, layers: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            d,
            n_layers: layers,
            n_heads: heads,
            vocab_size: 12,
            max_len: 16,
            seed,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        let mut segments = vec![Segment::Query; ids.len()];
        segments[0] = Segment::Cls;
        TokenSequence {
            ids: ids.to_vec(),
            segments,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::init(&config(8, 2, 1, 1)).unwrap();
        let b = EncoderParams::init(&config(8, 2, 1, 1)).unwrap();
        let c = EncoderParams::init(&config(8, 2, 1, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 8f64.sqrt();
        a.visit(&mut |name, shape, data| {
            if shape.len() == 2 {
                assert!(data.iter().all(|x| x.abs() <= bound), "{name}");
            } else if name.ends_with("gain") {
                assert!(data.iter().all(|&x| x == 1.0));
            } else {
                assert!(data.iter().all(|&x| x == 0.0));
            }
        });
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(EncoderParams::init(&config(6, 4, 1, 0)).is_err());
        let mut c = config(8, 2, 1, 0);
        c.vocab_size = 0;
        assert!(TransformerEncoder::new(c).is_err());
    }

    #[test]
    fn zero_params_give_constant_output() {
        let cfg = config(8, 2, 2, 0);
        let mut params = EncoderParams::zeros(&cfg);
        params.visit_mut(&mut |name, _, d| {
            if name.ends_with("gain") {
                d.fill(1.0)
            }
        });
        let enc = TransformerEncoder::from_params(cfg, params).unwrap();
        let a = enc.encode(&seq(&[CLS, 5, 6, SEP])).unwrap();
        let b = enc.encode(&seq(&[CLS, 5, 6, SEP])).unwrap();
        assert_eq!(a.pooled, vec![0.0; 8]);
        assert_eq!(a.pooled, b.pooled);
    }

    #[test]
    fn padding_content_is_ignored() {
        let enc = TransformerEncoder::new(config(8, 2, 2, 3)).unwrap();
        let base = seq(&[CLS, 5, 6, SEP]);
        let a = enc.encode(&base.clone().padded_with(&[0, 0])).unwrap();
        let b = enc.encode(&base.clone().padded_with(&[7, 9])).unwrap();
        let c = enc.encode(&base).unwrap();
        assert_eq!(a.pooled, b.pooled);
        let close = a.pooled.iter().zip(&c.pooled).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let enc = TransformerEncoder::new(config(8, 2, 2, 4)).unwrap();
        let out = enc
            .encode(&seq(&[CLS, 5, 6, 7, SEP]).padded_with(&[1]))
            .unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let a = out.tape.attention(layer, head);
                for row in a.rows() {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert_eq!(row[5], 0.0);
                }
            }
        }
    }

    #[test]
    fn encode_errors() {
        let enc = TransformerEncoder::new(config(8, 2, 1, 0)).unwrap();
        assert!(matches!(
            enc.encode(&seq(&[CLS, 99])),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
        assert!(matches!(
            enc.encode(&seq(&[CLS; 17])),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut enc = TransformerEncoder::new(config(4, 2, 1, 0)).unwrap();
        let out = enc.encode(&seq(&[CLS, 5])).unwrap();
        enc.params_mut();
        assert!(matches!(enc.backprop(&out, &[1.0; 4]), Err(Error::StaleTape)));
        let other = TransformerEncoder::new(config(4, 2, 1, 0)).unwrap();
        let out = other.encode(&seq(&[CLS, 5])).unwrap();
        assert!(matches!(enc.backprop(&out, &[1.0; 4]), Err(Error::StaleTape)));
    }

    #[test]
    fn backprop_is_linear() {
        let enc = TransformerEncoder::new(config(8, 2, 2, 5)).unwrap();
        let out = enc.encode(&seq(&[CLS, 5, 6, SEP, 7, SEP])).unwrap();
        let zero = enc.backprop(&out, &[0.0; 8]).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let g1: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let g2: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let a = enc.backprop(&out, &g1).unwrap().flatten();
        let b = enc.backprop(&out, &g2).unwrap().flatten();
        let c = enc.backprop(&out, &sum).unwrap().flatten();
        for i in 0..a.len() {
            assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (d, heads, layers, seed) in [(8, 2, 1, 11), (4, 1, 2, 12), (8, 4, 2, 13)] {
            let cfg = config(d, heads, layers, seed);
            let enc = TransformerEncoder::new(cfg.clone()).unwrap();
            let s = seq(&[CLS, 5, 6, SEP, 7, 8, SEP, 9, SEP]);
            let weights: Vec<f64> = (0..d).map(|i| ((i + 1) as f64 * 0.7).sin()).collect();
            let out = enc.encode(&s).unwrap();
            let analytic = enc.backprop(&out, &weights).unwrap().flatten();
            let numeric = finite_difference(enc.params(), 1e-4, |p| {
                let e = TransformerEncoder::from_params(cfg.clone(), p.clone()).unwrap();
                let pooled = e.encode(&s).unwrap().pooled;
                pooled.iter().zip(&weights).map(|(a, b)| a * b).sum()
            });
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "d={d} layers={layers}: relative error {err}");
        }
    }
}
