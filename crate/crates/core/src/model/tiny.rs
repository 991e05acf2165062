//! A small causal self-attention model with a k-head output extension.
//!
//! The model reads `input ++ [SEP] ++ output_prefix` as one causal sequence
//! (SEP is an extra embedding row, never predicted). The decoder trunk is a
//! stack of pre-norm transformer blocks followed by a final layer norm. On
//! top of the trunk output `h` sits the head extension: one feedforward layer
//! of hidden width `k * d_hidden` and output width `k * d_model`, whose `k`
//! output chunks each get `h` added back before the shared vocabulary
//! projection turns them into logits for heads `0..k`. Head 0 also passes
//! through the extension.
//!
//! Parameters live in one flat `f64` store, split into three partitions
//! (base trunk, head extension, vocabulary projection). Stored values are
//! kept f32-representable so checkpoints round-trip bit-exactly; arithmetic
//! runs in f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax, BlockScores, ModelError, ScoringModel};
use crate::TokenId;

const LN_EPS: f64 = 1e-5;

/// Context token ids, the rows to score, and their labels.
type ExampleContext = (Vec<usize>, Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub num_layers: usize,
    pub attn_heads: usize,
    pub k_heads: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, width 64, feedforward 256, four attention heads.
    pub fn new(vocab_size: usize, k_heads: usize) -> Self {
        Self { vocab_size, d_model: 64, d_hidden: 256, num_layers: 2, attn_heads: 4, k_heads, max_context: 64, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.d_model == 0 || self.d_hidden == 0 || self.k_heads == 0 || self.max_context < 2 {
            return bad("d_model, d_hidden, k_heads must be >= 1 and max_context >= 2");
        }
        if self.attn_heads == 0 || !self.d_model.is_multiple_of(self.attn_heads) {
            return bad("attn_heads must divide d_model");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Base,
    HeadExtension,
    VocabProjection,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Base, Partition::HeadExtension, Partition::VocabProjection];
}

/// `true` marks a partition as frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub base: bool,
    pub head_extension: bool,
    pub vocab_projection: bool,
}

impl FreezeMask {
    pub fn all_frozen() -> Self {
        Self { base: true, head_extension: true, vocab_projection: true }
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        match p {
            Partition::Base => self.base,
            Partition::HeadExtension => self.head_extension,
            Partition::VocabProjection => self.vocab_projection,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_ff1: usize,
    b_ff1: usize,
    w_ff2: usize,
    b_ff2: usize,
}

/// Offsets of every tensor in the flat parameter store.
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerLayout>,
    lnf_g: usize,
    lnf_b: usize,
    base_end: usize,
    w_e1: usize,
    b_e1: usize,
    w_e2: usize,
    b_e2: usize,
    ext_end: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let (d, f, v, kh) = (c.d_model, c.d_hidden, c.vocab_size, c.k_heads);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take((v + 1) * d);
        let pos_emb = take(c.max_context * d);
        let layers = (0..c.num_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_ff1: take(d * f),
                b_ff1: take(f),
                w_ff2: take(f * d),
                b_ff2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let base_end = take(0);
        let w_e1 = take(d * kh * f);
        let b_e1 = take(kh * f);
        let w_e2 = take(kh * f * kh * d);
        let b_e2 = take(kh * d);
        let ext_end = take(0);
        let w_out = take(d * v);
        let b_out = take(v);
        let total = take(0);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, base_end, w_e1, b_e1, w_e2, b_e2, ext_end, w_out, b_out, total }
    }

    fn range(&self, p: Partition) -> std::ops::Range<usize> {
        match p {
            Partition::Base => 0..self.base_end,
            Partition::HeadExtension => self.base_end..self.ext_end,
            Partition::VocabProjection => self.ext_end..self.total,
        }
    }
}

fn mat(p: &[f64], off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("layout")
}

fn vec1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

fn mat_mut(p: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut p[off..off + r * c]).expect("layout")
}

fn vec_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}

/// `x W + b`.
fn affine(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulate `dW += x^T dy`, `db += sum(dy)`; return `dy W^T` if asked.
fn affine_backward(
    grad: &mut [f64],
    x: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    w: ArrayView2<f64>,
    w_off: usize,
    b_off: usize,
    want_dx: bool,
) -> Option<Array2<f64>> {
    let (r, c) = w.dim();
    {
        let mut gw = mat_mut(grad, w_off, r, c);
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut gw);
    }
    {
        let mut gb = vec_mut(grad, b_off, c);
        gb += &dy.sum_axis(Axis(0));
    }
    want_dx.then(|| dy.dot(&w.t()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &g + b;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    grad: &mut [f64],
    dy: &Array2<f64>,
    cache: &NormCache,
    g: ArrayView1<f64>,
    g_off: usize,
    b_off: usize,
) -> Array2<f64> {
    let d = dy.ncols();
    {
        let mut gg = vec_mut(grad, g_off, d);
        gg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut gb = vec_mut(grad, b_off, d);
        gb += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.dim());
    let n = d as f64;
    for t in 0..dy.nrows() {
        let dxh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dxh = dxh.sum() / n;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let r = cache.rstd[t];
        for j in 0..d {
            dx[[t, j]] = r * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

struct LayerCache {
    n1: NormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    n2: NormCache,
    f: Array2<f64>,
    hpre: Array2<f64>,
    hact: Array2<f64>,
}

struct TrunkCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    nf: NormCache,
}

struct HeadCache {
    hsel: Array2<f64>,
    a1: Array2<f64>,
    u: Array2<f64>,
}

/// One training pair prepared for a specific head.
struct Example<'a> {
    input: &'a [TokenId],
    target: &'a [TokenId],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyBlockModel {
    config: ModelConfig,
    layout_total: usize,
    params: Vec<f64>,
    freeze: FreezeMask,
}

impl TinyBlockModel {
    /// Fresh model; weights uniform in `±1/sqrt(fan_in)`, biases zero,
    /// norm gains one.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v, kh) = (config.d_model, config.d_hidden, config.vocab_size, config.k_heads);
        let mut fill = |params: &mut [f64], off: usize, n: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[off..off + n] {
                *p = f64::from(rng.gen_range(-a..a) as f32);
            }
        };
        fill(&mut params, layout.tok_emb, (v + 1) * d, d);
        fill(&mut params, layout.pos_emb, config.max_context * d, d);
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
            fill(&mut params, l.w_qkv, d * 3 * d, d);
            fill(&mut params, l.w_o, d * d, d);
            fill(&mut params, l.w_ff1, d * f, d);
            fill(&mut params, l.w_ff2, f * d, f);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.w_e1, d * kh * f, d);
        fill(&mut params, layout.w_e2, kh * f * kh * d, kh * f);
        fill(&mut params, layout.w_out, d * v, d);
        Ok(Self { config, layout_total: layout.total, params, freeze: FreezeMask::default() })
    }

    pub(crate) fn from_parts(config: ModelConfig, partitions: [Vec<f64>; 3]) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = Vec::with_capacity(layout.total);
        for (p, values) in Partition::ALL.iter().zip(partitions) {
            if values.len() != layout.range(*p).len() {
                return Err(ModelError::Invalid(format!(
                    "{p:?} partition has {} values, expected {}",
                    values.len(),
                    layout.range(*p).len()
                )));
            }
            params.extend(values);
        }
        Ok(Self { config, layout_total: layout.total, params, freeze: FreezeMask::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        self.freeze
    }

    pub fn set_freeze_mask(&mut self, mask: FreezeMask) {
        self.freeze = mask;
    }

    pub fn num_parameters(&self) -> usize {
        self.layout_total
    }

    pub fn partition_range(&self, p: Partition) -> std::ops::Range<usize> {
        self.layout().range(p)
    }

    pub fn partition(&self, p: Partition) -> &[f64] {
        &self.params[self.layout().range(p)]
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    /// Raw parameter access. Values written here are used as-is; checkpoints
    /// store them as f32.
    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Same base trunk and vocabulary projection, fresh `k_heads`-wide head
    /// extension initialized from `seed`.
    pub fn with_heads(&self, k_heads: usize, seed: u64) -> Result<Self, ModelError> {
        let config = ModelConfig { k_heads, seed, ..self.config };
        let fresh = Self::new(config)?;
        let base = self.partition(Partition::Base).to_vec();
        let ext = fresh.partition(Partition::HeadExtension).to_vec();
        let proj = self.partition(Partition::VocabProjection).to_vec();
        let mut m = Self::from_parts(config, [base, ext, proj])?;
        m.freeze = self.freeze;
        Ok(m)
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    fn sep(&self) -> usize {
        self.config.vocab_size
    }

    fn context(&self, parts: &[&[TokenId]], sep_after_first: bool) -> Result<Vec<usize>, ModelError> {
        let v = self.config.vocab_size;
        let mut ctx = Vec::new();
        for (i, part) in parts.iter().enumerate() {
            for &t in *part {
                if t as usize >= v {
                    return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
                }
                ctx.push(t as usize);
            }
            if i == 0 && sep_after_first {
                ctx.push(self.sep());
            }
        }
        if ctx.len() > self.config.max_context {
            return Err(ModelError::ContextOverflow { needed: ctx.len(), max: self.config.max_context });
        }
        Ok(ctx)
    }

    fn trunk(&self, p: &[f64], lay: &Layout, tokens: Vec<usize>) -> (Array2<f64>, TrunkCache) {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_hidden);
        let t_len = tokens.len();
        let tok = mat(p, lay.tok_emb, c.vocab_size + 1, d);
        let pos = mat(p, lay.pos_emb, c.max_context, d);
        let mut x = Array2::zeros((t_len, d));
        for (t, &id) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&tok.row(id));
            row += &pos.row(t);
        }
        let hd = d / c.attn_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut caches = Vec::with_capacity(lay.layers.len());
        for l in &lay.layers {
            let (a, n1) = layer_norm(&x, vec1(p, l.ln1_g, d), vec1(p, l.ln1_b, d));
            let qkv = affine(&a.view(), mat(p, l.w_qkv, d, 3 * d), vec1(p, l.b_qkv, 3 * d));
            let mut o = Array2::zeros((t_len, d));
            let mut probs = Vec::with_capacity(c.attn_heads);
            for h in 0..c.attn_heads {
                let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let mut sc = q.dot(&k.t());
                for i in 0..t_len {
                    let mut row = sc.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..t_len {
                        if j <= i {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row /= sum;
                }
                o.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&sc.dot(&v));
                probs.push(sc);
            }
            let attn = affine(&o.view(), mat(p, l.w_o, d, d), vec1(p, l.b_o, d));
            let x1 = &x + &attn;
            let (fx, n2) = layer_norm(&x1, vec1(p, l.ln2_g, d), vec1(p, l.ln2_b, d));
            let hpre = affine(&fx.view(), mat(p, l.w_ff1, d, f), vec1(p, l.b_ff1, f));
            let hact = hpre.mapv(gelu);
            let ff = affine(&hact.view(), mat(p, l.w_ff2, f, d), vec1(p, l.b_ff2, d));
            let x2 = &x1 + &ff;
            caches.push(LayerCache { n1, a, qkv, probs, o, n2, f: fx, hpre, hact });
            x = x2;
        }
        let (h, nf) = layer_norm(&x, vec1(p, lay.lnf_g, d), vec1(p, lay.lnf_b, d));
        (h, TrunkCache { tokens, layers: caches, nf })
    }

    fn trunk_backward(&self, p: &[f64], lay: &Layout, grad: &mut [f64], cache: &TrunkCache, dh: Array2<f64>) {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_hidden);
        let hd = d / c.attn_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dx = layer_norm_backward(grad, &dh, &cache.nf, vec1(p, lay.lnf_g, d), lay.lnf_g, lay.lnf_b);
        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feedforward branch
            let dhact =
                affine_backward(grad, &lc.hact.view(), &dx.view(), mat(p, l.w_ff2, f, d), l.w_ff2, l.b_ff2, true)
                    .expect("dx");
            let mut dhpre = dhact;
            dhpre.zip_mut_with(&lc.hpre, |g, &x| *g *= gelu_grad(x));
            let dfx = affine_backward(grad, &lc.f.view(), &dhpre.view(), mat(p, l.w_ff1, d, f), l.w_ff1, l.b_ff1, true)
                .expect("dx");
            let dx1 = &dx + &layer_norm_backward(grad, &dfx, &lc.n2, vec1(p, l.ln2_g, d), l.ln2_g, l.ln2_b);
            // attention branch
            let d_o =
                affine_backward(grad, &lc.o.view(), &dx1.view(), mat(p, l.w_o, d, d), l.w_o, l.b_o, true).expect("dx");
            let mut dqkv = Array2::zeros(lc.qkv.dim());
            for h in 0..c.attn_heads {
                let q = lc.qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = lc.qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
                let v = lc.qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
                let pr = &lc.probs[h];
                let doh = d_o.slice(s![.., h * hd..(h + 1) * hd]);
                let dp = doh.dot(&v.t());
                let dv = pr.t().dot(&doh);
                let mut ds = dp;
                for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(pr.rows()) {
                    let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    ds_row.zip_mut_with(&p_row, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
            }
            let da =
                affine_backward(grad, &lc.a.view(), &dqkv.view(), mat(p, l.w_qkv, d, 3 * d), l.w_qkv, l.b_qkv, true)
                    .expect("dx");
            dx = &dx1 + &layer_norm_backward(grad, &da, &lc.n1, vec1(p, l.ln1_g, d), l.ln1_g, l.ln1_b);
        }
        for (t, &id) in cache.tokens.iter().enumerate() {
            let row = dx.row(t);
            let mut ge = vec_mut(grad, lay.tok_emb + id * d, d);
            ge += &row;
            let mut gp = vec_mut(grad, lay.pos_emb + t * d, d);
            gp += &row;
        }
    }

    /// Extension hidden layer at selected trunk rows.
    fn head_hidden(&self, p: &[f64], lay: &Layout, h: &Array2<f64>, rows: &[usize]) -> HeadCache {
        let c = &self.config;
        let (d, kf) = (c.d_model, c.k_heads * c.d_hidden);
        let hsel = h.select(Axis(0), rows);
        let a1 = affine(&hsel.view(), mat(p, lay.w_e1, d, kf), vec1(p, lay.b_e1, kf));
        let u = a1.mapv(gelu);
        HeadCache { hsel, a1, u }
    }

    /// Raw logits for head `head` at the cached rows.
    fn head_logits(&self, p: &[f64], lay: &Layout, hc: &HeadCache, head: usize) -> (Array2<f64>, Array2<f64>) {
        let c = &self.config;
        let (d, kf, v) = (c.d_model, c.k_heads * c.d_hidden, c.vocab_size);
        let w2 = mat(p, lay.w_e2, kf, c.k_heads * d);
        let b2 = vec1(p, lay.b_e2, c.k_heads * d);
        let cols = head * d..(head + 1) * d;
        let mut out = hc.u.dot(&w2.slice(s![.., cols.clone()]));
        out += &b2.slice(s![cols]);
        out += &hc.hsel;
        let logits = affine(&out.view(), mat(p, lay.w_out, d, v), vec1(p, lay.b_out, v));
        (out, logits)
    }

    fn log_probs(&self, p: &[f64], lay: &Layout, hc: &HeadCache, head: usize) -> Array2<f64> {
        let (_, mut logits) = self.head_logits(p, lay, hc, head);
        for mut row in logits.rows_mut() {
            log_softmax(row.as_slice_mut().expect("contiguous"));
        }
        logits
    }

    /// Raw per-head logits after `prefix`, for inspecting the shared projection.
    pub fn logits_after(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        let lay = self.layout();
        let ctx = self.context(&[input, prefix], true)?;
        let last = ctx.len() - 1;
        let (h, _) = self.trunk(&self.params, &lay, ctx);
        let hc = self.head_hidden(&self.params, &lay, &h, &[last]);
        Ok((0..self.config.k_heads).map(|hh| self.head_logits(&self.params, &lay, &hc, hh).1.row(0).to_vec()).collect())
    }

    fn example_context(&self, ex: &Example, head: usize) -> Result<Option<ExampleContext>, ModelError> {
        let m = ex.target.len();
        if m <= head {
            return Ok(None);
        }
        // hidden state at input.len() + j conditions on target[..j]
        let visible = &ex.target[..m - 1 - head];
        let ctx = self.context(&[ex.input, visible], true)?;
        let n = ex.input.len();
        let rows: Vec<usize> = (0..m - head).map(|j| n + j).collect();
        let labels: Vec<usize> = ex.target[head..].iter().map(|&t| t as usize).collect();
        Ok(Some((ctx, rows, labels)))
    }

    fn count_positions(pairs: &[(&[TokenId], &[TokenId])], head: usize) -> usize {
        pairs.iter().map(|(_, y)| y.len().saturating_sub(head)).sum()
    }

    /// Mean cross-entropy of `head` predicting each target shifted by `head`
    /// (token-level mean over the batch), evaluated at parameters `p`.
    pub fn loss_with(&self, p: &[f64], pairs: &[(&[TokenId], &[TokenId])], head: usize) -> Result<f64, ModelError> {
        self.check_head(head)?;
        let lay = self.layout();
        let total = Self::count_positions(pairs, head);
        if total == 0 {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for &(input, target) in pairs {
            let Some((ctx, rows, labels)) = self.example_context(&Example { input, target }, head)? else { continue };
            let (h, _) = self.trunk(p, &lay, ctx);
            let hc = self.head_hidden(p, &lay, &h, &rows);
            let lp = self.log_probs(p, &lay, &hc, head);
            for (r, &y) in labels.iter().enumerate() {
                loss -= lp[[r, y]];
            }
        }
        Ok(loss / total as f64)
    }

    pub fn sub_loss(&self, pairs: &[(&[TokenId], &[TokenId])], head: usize) -> Result<f64, ModelError> {
        self.loss_with(&self.params, pairs, head)
    }

    /// Mean of the sub-losses of all heads.
    pub fn mean_head_loss(&self, pairs: &[(&[TokenId], &[TokenId])]) -> Result<f64, ModelError> {
        let k = self.config.k_heads;
        let mut total = 0.0;
        for head in 0..k {
            total += self.sub_loss(pairs, head)?;
        }
        Ok(total / k as f64)
    }

    /// Loss and full analytic gradient (all partitions) for `head`.
    pub fn loss_and_grad(
        &self,
        pairs: &[(&[TokenId], &[TokenId])],
        head: usize,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.loss_and_grad_masked(pairs, head, FreezeMask::default())
    }

    /// Gradient entries of frozen partitions are left at zero; when the base
    /// is frozen the trunk backward pass is skipped.
    pub fn loss_and_grad_masked(
        &self,
        pairs: &[(&[TokenId], &[TokenId])],
        head: usize,
        mask: FreezeMask,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_head(head)?;
        let p = &self.params;
        let lay = self.layout();
        let c = &self.config;
        let (d, kf) = (c.d_model, c.k_heads * c.d_hidden);
        let mut grad = vec![0.0; lay.total];
        let total = Self::count_positions(pairs, head);
        if total == 0 {
            return Ok((0.0, grad));
        }
        let norm = 1.0 / total as f64;
        let mut loss = 0.0;
        for &(input, target) in pairs {
            let Some((ctx, rows, labels)) = self.example_context(&Example { input, target }, head)? else { continue };
            let (h, tc) = self.trunk(p, &lay, ctx);
            let hc = self.head_hidden(p, &lay, &h, &rows);
            let (out, mut dlogits) = self.head_logits(p, &lay, &hc, head);
            for (r, &y) in labels.iter().enumerate() {
                let mut row = dlogits.row_mut(r);
                log_softmax(row.as_slice_mut().expect("contiguous"));
                loss -= row[y];
                row.mapv_inplace(f64::exp);
                row[y] -= 1.0;
                row *= norm;
            }
            // vocabulary projection
            let dout = affine_backward(
                &mut grad,
                &out.view(),
                &dlogits.view(),
                mat(p, lay.w_out, d, c.vocab_size),
                lay.w_out,
                lay.b_out,
                true,
            )
            .expect("dx");
            if mask.head_extension && mask.base {
                continue;
            }
            // head extension: out = hsel + u W2[:, head] + b2[head]
            let w2 = mat(p, lay.w_e2, kf, c.k_heads * d);
            let cols = head * d..(head + 1) * d;
            {
                let mut gw2 = mat_mut(&mut grad, lay.w_e2, kf, c.k_heads * d);
                let mut gw2h = gw2.slice_mut(s![.., cols.clone()]);
                general_mat_mul(1.0, &hc.u.t(), &dout, 1.0, &mut gw2h);
            }
            {
                let mut gb2 = vec_mut(&mut grad, lay.b_e2 + head * d, d);
                gb2 += &dout.sum_axis(Axis(0));
            }
            let mut da1 = dout.dot(&w2.slice(s![.., cols]).t());
            da1.zip_mut_with(&hc.a1, |g, &x| *g *= gelu_grad(x));
            let dhsel_ext = affine_backward(
                &mut grad,
                &hc.hsel.view(),
                &da1.view(),
                mat(p, lay.w_e1, d, kf),
                lay.w_e1,
                lay.b_e1,
                !mask.base,
            );
            if mask.base {
                continue;
            }
            let dhsel = dout + &dhsel_ext.expect("dx");
            let mut dh = Array2::zeros(h.dim());
            for (r, &row) in rows.iter().enumerate() {
                let mut target_row = dh.row_mut(row);
                target_row += &dhsel.row(r);
            }
            self.trunk_backward(p, &lay, &mut grad, &tc, dh);
        }
        for part in Partition::ALL {
            if mask.is_frozen(part) {
                grad[lay.range(part)].fill(0.0);
            }
        }
        Ok((loss * norm, grad))
    }

    fn check_head(&self, head: usize) -> Result<(), ModelError> {
        if head >= self.config.k_heads {
            return Err(ModelError::Invalid(format!("head {head} out of range for {} heads", self.config.k_heads)));
        }
        Ok(())
    }

    /// SGD update on unfrozen partitions; results rounded to f32.
    pub(crate) fn apply_update(&mut self, update: &[f64]) {
        let lay = self.layout();
        for part in Partition::ALL {
            if self.freeze.is_frozen(part) {
                continue;
            }
            let range = lay.range(part);
            for (p, u) in self.params[range.clone()].iter_mut().zip(&update[range]) {
                *p = f64::from((*p - u) as f32);
            }
        }
    }

    fn grid_rows(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
        heads: usize,
    ) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let lay = self.layout();
        let ctx = self.context(&[input, prefix, candidates], true)?;
        let first = input.len() + prefix.len();
        let rows: Vec<usize> = (first..=first + candidates.len()).collect();
        let (h, _) = self.trunk(&self.params, &lay, ctx);
        let hc = self.head_hidden(&self.params, &lay, &h, &rows);
        let per_head: Vec<Array2<f64>> = (0..heads).map(|hh| self.log_probs(&self.params, &lay, &hc, hh)).collect();
        Ok((0..rows.len()).map(|r| per_head.iter().map(|lp| lp.row(r).to_vec()).collect()).collect())
    }
}

impl ScoringModel for TinyBlockModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn num_heads(&self) -> usize {
        self.config.k_heads
    }

    fn score_grid(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<BlockScores, ModelError> {
        let rows = self.grid_rows(input, prefix, candidates, self.config.k_heads)?;
        BlockScores::from_rows(prefix.len(), rows)
    }

    fn score_base(
        &self,
        input: &[TokenId],
        prefix: &[TokenId],
        candidates: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let rows = self.grid_rows(input, prefix, candidates, 1)?;
        Ok(rows.into_iter().map(|mut r| r.swap_remove(0)).collect())
    }
}
