//! Pre-norm encoder-decoder transformer with a hand-written backward pass.
//!
//! Activations are row-major `[batch * len, width]` buffers. Attention
//! heads are column blocks of the projected buffers and are addressed with
//! strided GEMM views, so no head reshuffling copies are needed.

use rand::Rng;

use super::params::{AttnH, DecLayerH, EncLayerH, Lin, Norm, TransformerParams};
use super::scalar::{gemm, Scalar, View};
use crate::protocol::EncodedExample;
use crate::subword::{BOS, EOS, PAD};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;

/// Padded batch of examples. Decoder input is `BOS y`, output is `y EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Self {
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.source_ids.len()).max().unwrap_or(0);
        let tgt_len = examples.iter().map(|e| e.target_ids.len() + 1).max().unwrap_or(0);
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, e) in examples.iter().enumerate() {
            src[b * src_len..b * src_len + e.source_ids.len()].copy_from_slice(&e.source_ids);
            tgt_in[b * tgt_len] = BOS;
            for (t, &id) in e.target_ids.iter().enumerate() {
                tgt_in[b * tgt_len + t + 1] = id;
                tgt_out[b * tgt_len + t] = id;
            }
            tgt_out[b * tgt_len + e.target_ids.len()] = EOS;
        }
        Self { size, src_len, tgt_len, src, tgt_in, tgt_out }
    }

    /// One sequence; decoder input is `BOS prefix`, no loss targets.
    pub fn single(source_ids: &[u32], target_prefix_ids: &[u32]) -> Self {
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(target_prefix_ids);
        Self {
            size: 1,
            src_len: source_ids.len(),
            tgt_len: tgt_in.len(),
            src: source_ids.to_vec(),
            tgt_out: vec![PAD; tgt_in.len()],
            tgt_in,
        }
    }

    /// Padded token count used for batch budgeting.
    pub fn padded_tokens(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = T::c(angle.sin());
            pe[pos * d + 2 * i + 1] = T::c(angle.cos());
        }
    }
    pe
}

fn linear<T: Scalar>(p: &[T], l: Lin, x: &[T], rows: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * l.out);
    for _ in 0..rows {
        y.extend_from_slice(&p[l.b..l.b + l.out]);
    }
    gemm(
        T::one(),
        x,
        View::rm(0, rows, l.inp, l.inp),
        p,
        View::rm(l.w, l.out, l.inp, l.inp).t(),
        T::one(),
        &mut y,
        View::rm(0, rows, l.out, l.out),
    );
    y
}

/// Accumulates weight/bias gradients and adds the input gradient to `dx`.
fn linear_back<T: Scalar>(p: &[T], g: &mut [T], l: Lin, x: &[T], rows: usize, dy: &[T], dx: &mut [T]) {
    gemm(
        T::one(),
        dy,
        View::rm(0, rows, l.out, l.out).t(),
        x,
        View::rm(0, rows, l.inp, l.inp),
        T::one(),
        g,
        View::rm(l.w, l.out, l.inp, l.inp),
    );
    let gb = &mut g[l.b..l.b + l.out];
    for row in dy.chunks_exact(l.out) {
        for (a, &d) in gb.iter_mut().zip(row) {
            *a += d;
        }
    }
    gemm(
        T::one(),
        dy,
        View::rm(0, rows, l.out, l.out),
        p,
        View::rm(l.w, l.out, l.inp, l.inp),
        T::one(),
        dx,
        View::rm(0, rows, l.inp, l.inp),
    );
}

struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(p: &[T], n: Norm, x: &[T], d: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let (gamma, beta) = (&p[n.g..n.g + d], &p[n.b..n.b + d]);
    let inv_d = T::c(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_back<T: Scalar>(p: &[T], g: &mut [T], n: Norm, c: &NormCache<T>, dy: &[T], d: usize) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let gamma = &p[n.g..n.g + d];
    let inv_d = T::c(1.0 / d as f64);
    for r in 0..rows {
        let (dyr, xh) = (&dy[r * d..(r + 1) * d], &c.xhat[r * d..(r + 1) * d]);
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..d {
            g[n.g + i] += dyr[i] * xh[i];
            g[n.b + i] += dyr[i];
            let dxh = dyr[i] * gamma[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        for i in 0..d {
            let dxh = dyr[i] * gamma[i];
            dx[r * d + i] = c.rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

fn dropout<T: Scalar, R: Rng + ?Sized>(x: &mut [T], rate: f64, rng: Option<&mut R>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen_bool(rate) { T::zero() } else { keep })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

fn apply_mask<T: Scalar>(dx: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, k) in dx.iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

struct Shape {
    batch: usize,
    tq: usize,
    tk: usize,
    heads: usize,
    d: usize,
}

impl Shape {
    fn dk(&self) -> usize {
        self.d / self.heads
    }

    fn q_view(&self, b: usize, h: usize) -> View {
        View::rm(b * self.tq * self.d + h * self.dk(), self.tq, self.dk(), self.d)
    }

    fn k_view(&self, b: usize, h: usize) -> View {
        View::rm(b * self.tk * self.d + h * self.dk(), self.tk, self.dk(), self.d)
    }

    fn p_view(&self, b: usize, h: usize) -> View {
        View::rm((b * self.heads + h) * self.tq * self.tk, self.tq, self.tk, self.tk)
    }
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

/// Multi-head attention. `key_valid` masks padded keys (`[batch * tk]`);
/// `causal` additionally hides keys after the query position.
fn attention<T: Scalar>(
    p: &[T],
    a: AttnH,
    q_in: &[T],
    kv_in: &[T],
    s: &Shape,
    key_valid: Option<&[bool]>,
    causal: bool,
) -> (Vec<T>, AttnCache<T>) {
    let q = linear(p, a.q, q_in, s.batch * s.tq);
    let k = linear(p, a.k, kv_in, s.batch * s.tk);
    let v = linear(p, a.v, kv_in, s.batch * s.tk);
    let scale = T::c(1.0 / (s.dk() as f64).sqrt());
    let mut probs = vec![T::zero(); s.batch * s.heads * s.tq * s.tk];
    let mut ctx = vec![T::zero(); s.batch * s.tq * s.d];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let pv = s.p_view(b, h);
            gemm(scale, &q, s.q_view(b, h), &k, s.k_view(b, h).t(), T::zero(), &mut probs, pv);
            for i in 0..s.tq {
                let row = &mut probs[pv.offset + i * s.tk..pv.offset + (i + 1) * s.tk];
                let visible = |j: usize| {
                    key_valid.is_none_or(|m| m[b * s.tk + j]) && (!causal || j <= i)
                };
                let mut max = T::neg_infinity();
                for (j, &x) in row.iter().enumerate() {
                    if visible(j) && x > max {
                        max = x;
                    }
                }
                let mut sum = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if visible(j) { (*x - max).exp() } else { T::zero() };
                    sum += *x;
                }
                let inv = T::one() / sum;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            gemm(T::one(), &probs, pv, &v, s.k_view(b, h), T::zero(), &mut ctx, s.q_view(b, h));
        }
    }
    let out = linear(p, a.o, &ctx, s.batch * s.tq);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Returns gradients with respect to the query input and the key/value
/// input.
fn attention_back<T: Scalar>(
    p: &[T],
    g: &mut [T],
    a: AttnH,
    c: &AttnCache<T>,
    q_in: &[T],
    kv_in: &[T],
    s: &Shape,
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let (rq, rk) = (s.batch * s.tq, s.batch * s.tk);
    let mut dctx = vec![T::zero(); rq * s.d];
    linear_back(p, g, a.o, &c.ctx, rq, dout, &mut dctx);
    let scale = T::c(1.0 / (s.dk() as f64).sqrt());
    let mut dq = vec![T::zero(); rq * s.d];
    let mut dk = vec![T::zero(); rk * s.d];
    let mut dv = vec![T::zero(); rk * s.d];
    let mut dp = vec![T::zero(); s.tq * s.tk];
    let local = View::rm(0, s.tq, s.tk, s.tk);
    for b in 0..s.batch {
        for h in 0..s.heads {
            let pv = s.p_view(b, h);
            let (qv, kv) = (s.q_view(b, h), s.k_view(b, h));
            gemm(T::one(), &dctx, qv, &c.v, kv.t(), T::zero(), &mut dp, local);
            gemm(T::one(), &c.probs, pv.t(), &dctx, qv, T::zero(), &mut dv, kv);
            for i in 0..s.tq {
                let prow = &c.probs[pv.offset + i * s.tk..pv.offset + (i + 1) * s.tk];
                let drow = &mut dp[i * s.tk..(i + 1) * s.tk];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &x) in drow.iter_mut().zip(prow) {
                    *d = x * (*d - dot);
                }
            }
            gemm(scale, &dp, local, &c.k, kv, T::zero(), &mut dq, qv);
            gemm(scale, &dp, local.t(), &c.q, qv, T::zero(), &mut dk, kv);
        }
    }
    let mut dq_in = vec![T::zero(); rq * s.d];
    linear_back(p, g, a.q, q_in, rq, &dq, &mut dq_in);
    let mut dkv_in = vec![T::zero(); rk * s.d];
    linear_back(p, g, a.k, kv_in, rk, &dk, &mut dkv_in);
    linear_back(p, g, a.v, kv_in, rk, &dv, &mut dkv_in);
    (dq_in, dkv_in)
}

struct FfnCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

fn feed_forward<T: Scalar>(p: &[T], ff1: Lin, ff2: Lin, x: &[T], rows: usize) -> (Vec<T>, FfnCache<T>) {
    let pre = linear(p, ff1, x, rows);
    let act: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
    let out = linear(p, ff2, &act, rows);
    (out, FfnCache { pre, act })
}

fn feed_forward_back<T: Scalar>(
    p: &[T],
    g: &mut [T],
    ff1: Lin,
    ff2: Lin,
    c: &FfnCache<T>,
    x: &[T],
    rows: usize,
    dout: &[T],
) -> Vec<T> {
    let mut dact = vec![T::zero(); c.act.len()];
    linear_back(p, g, ff2, &c.act, rows, dout, &mut dact);
    for (d, &pre) in dact.iter_mut().zip(&c.pre) {
        if pre <= T::zero() {
            *d = T::zero();
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    linear_back(p, g, ff1, x, rows, &dact, &mut dx);
    dx
}

struct EncLayerCache<T> {
    n1: NormCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    n2: NormCache<T>,
    h2: Vec<T>,
    ffn: FfnCache<T>,
    drop2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    n1: NormCache<T>,
    h1: Vec<T>,
    self_attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    n2: NormCache<T>,
    h2: Vec<T>,
    cross: AttnCache<T>,
    drop2: Option<Vec<T>>,
    n3: NormCache<T>,
    h3: Vec<T>,
    ffn: FfnCache<T>,
    drop3: Option<Vec<T>>,
}

/// Everything the backward pass needs, plus the output log-probabilities
/// (`[batch * tgt_len, vocab]`).
pub struct ForwardCache<T> {
    src_valid: Vec<bool>,
    src_drop: Option<Vec<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_norm: NormCache<T>,
    enc_out: Vec<T>,
    tgt_drop: Option<Vec<T>>,
    dec: Vec<DecLayerCache<T>>,
    dec_norm: NormCache<T>,
    dec_out: Vec<T>,
    pub log_probs: Vec<T>,
}

fn embed<T: Scalar>(p: &[T], offset: usize, ids: &[u32], len: usize, d: usize) -> Vec<T> {
    let pe = positional_encoding::<T>(len, d);
    let scale = T::c((d as f64).sqrt());
    let mut x = vec![T::zero(); ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        let row = &p[offset + id as usize * d..offset + (id as usize + 1) * d];
        let pos = r % len;
        for i in 0..d {
            x[r * d + i] = row[i] * scale + pe[pos * d + i];
        }
    }
    x
}

fn embed_back<T: Scalar>(g: &mut [T], offset: usize, ids: &[u32], dx: &[T], d: usize) {
    let scale = T::c((d as f64).sqrt());
    for (r, &id) in ids.iter().enumerate() {
        let row = &mut g[offset + id as usize * d..offset + (id as usize + 1) * d];
        for i in 0..d {
            row[i] += dx[r * d + i] * scale;
        }
    }
}

fn check_lengths<T: Scalar>(params: &TransformerParams<T>, batch: &Batch) -> Result<()> {
    let max = params.config.max_positions;
    for len in [batch.src_len, batch.tgt_len] {
        if len > max {
            return Err(Error::ExceedsMaxPositions { len, max });
        }
    }
    let vocab = params.config.vocab_size as u32;
    if let Some(&bad) = batch.src.iter().chain(&batch.tgt_in).find(|&&id| id >= vocab) {
        return Err(Error::UnknownTokenId(bad));
    }
    if batch.src_len == 0 {
        return Err(Error::Protocol("empty source sequence".into()));
    }
    Ok(())
}

/// Teacher-forced forward pass. Dropout is active iff `rng` is given.
pub fn forward_batch<T: Scalar, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    batch: &Batch,
    mut rng: Option<&mut R>,
) -> Result<ForwardCache<T>> {
    check_lengths(params, batch)?;
    let cfg = &params.config;
    let (p, hd) = (&params.data[..], &params.layout.handles);
    let (d, heads, rate) = (cfg.d_model, cfg.n_heads, cfg.dropout);
    let (bsz, sl, tl) = (batch.size, batch.src_len, batch.tgt_len);
    let src_valid: Vec<bool> = batch.src.iter().map(|&t| t != PAD).collect();

    let mut x = embed(p, hd.embed, &batch.src, sl, d);
    let src_drop = dropout(&mut x, rate, rng.as_deref_mut());
    let enc_shape = Shape { batch: bsz, tq: sl, tk: sl, heads, d };
    let mut enc = Vec::with_capacity(hd.enc.len());
    for l in &hd.enc {
        let (h1, n1) = layer_norm(p, l.attn_norm, &x, d);
        let (mut a, attn) = attention(p, l.attn, &h1, &h1, &enc_shape, Some(&src_valid), false);
        let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
        add_into(&mut x, &a);
        let (h2, n2) = layer_norm(p, l.ffn_norm, &x, d);
        let (mut f, ffn) = feed_forward(p, l.ff1, l.ff2, &h2, bsz * sl);
        let drop2 = dropout(&mut f, rate, rng.as_deref_mut());
        add_into(&mut x, &f);
        enc.push(EncLayerCache { n1, h1, attn, drop1, n2, h2, ffn, drop2 });
    }
    let (enc_out, enc_norm) = layer_norm(p, hd.enc_norm, &x, d);

    let mut y = embed(p, hd.embed, &batch.tgt_in, tl, d);
    let tgt_drop = dropout(&mut y, rate, rng.as_deref_mut());
    let self_shape = Shape { batch: bsz, tq: tl, tk: tl, heads, d };
    let cross_shape = Shape { batch: bsz, tq: tl, tk: sl, heads, d };
    let mut dec = Vec::with_capacity(hd.dec.len());
    for l in &hd.dec {
        let (h1, n1) = layer_norm(p, l.self_norm, &y, d);
        let (mut a, self_attn) = attention(p, l.self_attn, &h1, &h1, &self_shape, None, true);
        let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
        add_into(&mut y, &a);
        let (h2, n2) = layer_norm(p, l.cross_norm, &y, d);
        let (mut c, cross) = attention(p, l.cross_attn, &h2, &enc_out, &cross_shape, Some(&src_valid), false);
        let drop2 = dropout(&mut c, rate, rng.as_deref_mut());
        add_into(&mut y, &c);
        let (h3, n3) = layer_norm(p, l.ffn_norm, &y, d);
        let (mut f, ffn) = feed_forward(p, l.ff1, l.ff2, &h3, bsz * tl);
        let drop3 = dropout(&mut f, rate, rng.as_deref_mut());
        add_into(&mut y, &f);
        dec.push(DecLayerCache { n1, h1, self_attn, drop1, n2, h2, cross, drop2, n3, h3, ffn, drop3 });
    }
    let (dec_out, dec_norm) = layer_norm(p, hd.dec_norm, &y, d);
    let out = Lin { w: hd.out_w, b: hd.out_b, out: cfg.vocab_size, inp: d };
    let mut log_probs = linear(p, out, &dec_out, bsz * tl);
    for row in log_probs.chunks_exact_mut(cfg.vocab_size) {
        log_softmax_in_place(row);
    }
    Ok(ForwardCache {
        src_valid,
        src_drop,
        enc,
        enc_norm,
        enc_out,
        tgt_drop,
        dec,
        dec_norm,
        dec_out,
        log_probs,
    })
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Gradients of all parameters given the gradient of the loss with respect
/// to the output logits.
pub fn backward_batch<T: Scalar>(
    params: &TransformerParams<T>,
    batch: &Batch,
    cache: &ForwardCache<T>,
    dlogits: &[T],
) -> Vec<T> {
    let cfg = &params.config;
    let (p, hd) = (&params.data[..], &params.layout.handles);
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let (bsz, sl, tl) = (batch.size, batch.src_len, batch.tgt_len);
    let mut g = vec![T::zero(); p.len()];

    let out = Lin { w: hd.out_w, b: hd.out_b, out: cfg.vocab_size, inp: d };
    let mut dz = vec![T::zero(); bsz * tl * d];
    linear_back(p, &mut g, out, &cache.dec_out, bsz * tl, dlogits, &mut dz);
    let mut dy = layer_norm_back(p, &mut g, hd.dec_norm, &cache.dec_norm, &dz, d);

    let self_shape = Shape { batch: bsz, tq: tl, tk: tl, heads, d };
    let cross_shape = Shape { batch: bsz, tq: tl, tk: sl, heads, d };
    let mut d_enc_out = vec![T::zero(); bsz * sl * d];
    for (l, c) in hd.dec.iter().zip(&cache.dec).rev() {
        let l: &DecLayerH = l;
        let mut df = dy.clone();
        apply_mask(&mut df, &c.drop3);
        let dh3 = feed_forward_back(p, &mut g, l.ff1, l.ff2, &c.ffn, &c.h3, bsz * tl, &df);
        add_into(&mut dy, &layer_norm_back(p, &mut g, l.ffn_norm, &c.n3, &dh3, d));

        let mut dc = dy.clone();
        apply_mask(&mut dc, &c.drop2);
        let (dh2, denc) = attention_back(p, &mut g, l.cross_attn, &c.cross, &c.h2, &cache.enc_out, &cross_shape, &dc);
        add_into(&mut d_enc_out, &denc);
        add_into(&mut dy, &layer_norm_back(p, &mut g, l.cross_norm, &c.n2, &dh2, d));

        let mut da = dy.clone();
        apply_mask(&mut da, &c.drop1);
        let (dq, dkv) = attention_back(p, &mut g, l.self_attn, &c.self_attn, &c.h1, &c.h1, &self_shape, &da);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        add_into(&mut dy, &layer_norm_back(p, &mut g, l.self_norm, &c.n1, &dh1, d));
    }
    apply_mask(&mut dy, &cache.tgt_drop);
    embed_back(&mut g, hd.embed, &batch.tgt_in, &dy, d);

    let mut dx = layer_norm_back(p, &mut g, hd.enc_norm, &cache.enc_norm, &d_enc_out, d);
    let enc_shape = Shape { batch: bsz, tq: sl, tk: sl, heads, d };
    for (l, c) in hd.enc.iter().zip(&cache.enc).rev() {
        let l: &EncLayerH = l;
        let mut df = dx.clone();
        apply_mask(&mut df, &c.drop2);
        let dh2 = feed_forward_back(p, &mut g, l.ff1, l.ff2, &c.ffn, &c.h2, bsz * sl, &df);
        add_into(&mut dx, &layer_norm_back(p, &mut g, l.ffn_norm, &c.n2, &dh2, d));

        let mut da = dx.clone();
        apply_mask(&mut da, &c.drop1);
        let (dq, dkv) = attention_back(p, &mut g, l.attn, &c.attn, &c.h1, &c.h1, &enc_shape, &da);
        let mut dh1 = dq;
        add_into(&mut dh1, &dkv);
        add_into(&mut dx, &layer_norm_back(p, &mut g, l.attn_norm, &c.n1, &dh1, d));
    }
    apply_mask(&mut dx, &cache.src_drop);
    embed_back(&mut g, hd.embed, &batch.src, &dx, d);
    let _ = &cache.src_valid;
    g
}

/// Per-position log-distributions for one source and target prefix. Row `t`
/// conditions on the whole source and on prefix tokens before `t`; there
/// are `prefix.len() + 1` rows.
pub fn forward<T: Scalar>(
    params: &TransformerParams<T>,
    source_ids: &[u32],
    target_prefix_ids: &[u32],
) -> Result<Vec<Vec<T>>> {
    let batch = Batch::single(source_ids, target_prefix_ids);
    let cache = forward_batch::<T, rand_chacha::ChaCha8Rng>(params, &batch, None)?;
    Ok(cache
        .log_probs
        .chunks_exact(params.config.vocab_size)
        .map(<[T]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            dropout: 0.0,
            vocab_size: 20,
            max_positions: 24,
            tied_embeddings: true,
        }
    }

    fn params() -> TransformerParams<f64> {
        TransformerParams::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        let p = params();
        let rows = forward(&p, &[12, 13, 14, 9], &[15, 16, 17]).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            let s: f64 = r.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn causal() {
        let p = params();
        let a = forward(&p, &[12, 13, 9], &[15, 16, 17, 18]).unwrap();
        let b = forward(&p, &[12, 13, 9], &[15, 16, 19, 18]).unwrap();
        // Prefix index 2 is decoder input position 3: rows 0..=2 cannot see it.
        for t in 0..=2 {
            for (x, y) in a[t].iter().zip(&b[t]) {
                assert!((x - y).abs() < 1e-12, "row {t}");
            }
        }
        assert!(a[3].iter().zip(&b[3]).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn padding_is_invisible() {
        let p = params();
        let ex_short = EncodedExample { source_ids: vec![12, 13, 9], target_ids: vec![15, 16], task: crate::protocol::TaskKind::Trn };
        let ex_long = EncodedExample { source_ids: vec![12, 13, 14, 15, 16, 9], target_ids: vec![17], task: crate::protocol::TaskKind::Trn };
        let batch = Batch::from_examples(&[&ex_short, &ex_long]);
        assert_eq!(batch.src_len, 6);
        let cache = forward_batch::<f64, ChaCha8Rng>(&p, &batch, None).unwrap();
        let alone = forward(&p, &[12, 13, 9], &[15, 16]).unwrap();
        let v = p.config.vocab_size;
        for t in 0..3 {
            for i in 0..v {
                assert!((cache.log_probs[t * v + i] - alone[t][i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_overlong_and_bad_ids() {
        let p = params();
        let long: Vec<u32> = vec![12; 30];
        assert!(matches!(forward(&p, &long, &[]), Err(Error::ExceedsMaxPositions { len: 30, max: 24 })));
        assert!(forward(&p, &[12], &long).is_err());
        assert!(matches!(forward(&p, &[99], &[]), Err(Error::UnknownTokenId(99))));
    }

    #[test]
    fn batch_layout() {
        let ex = EncodedExample { source_ids: vec![10, 11], target_ids: vec![12, 13], task: crate::protocol::TaskKind::Trn };
        let b = Batch::from_examples(&[&ex]);
        assert_eq!(b.tgt_in, [BOS, 12, 13]);
        assert_eq!(b.tgt_out, [12, 13, EOS]);
        assert_eq!(b.target_tokens(), 3);
    }
}
