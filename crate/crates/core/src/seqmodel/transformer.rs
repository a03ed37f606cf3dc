//! Small pre-norm transformer over a sequence of `[states.., tokens..]` with a
//! causal mask. All parameters live in one flat vector; gradients are
//! computed by hand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
pub const CHECKPOINT_KIND: &str = "transformer";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_state: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size, which is also the output dimension.
    pub vocab: usize,
    /// Longest supported sequence (states plus tokens).
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_state: 4, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 8, vocab: 17, max_len: 8 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_state, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.vocab, self.max_len];
        if dims.contains(&0) || self.d_model % self.n_heads != 0 || self.max_len < 2 {
            return Err(Error::Config(format!("invalid transformer configuration {self:?}")));
        }
        Ok(())
    }

    fn meta(&self) -> [(&'static str, usize); 7] {
        [
            ("d_state", self.d_state),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len()]
    }
    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len()]
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    state_w: Slot,
    state_b: Slot,
    tok_emb: Slot,
    pos_emb: Slot,
    layers: Vec<LayerSlots>,
    lnf_g: Slot,
    lnf_b: Slot,
    w_o: Slot,
    names: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let mut names = Vec::new();
        let mut off = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            names.push((name, s));
            s
        };
        let d = c.d_model;
        let state_w = add("state_proj.weight".into(), c.d_state, d);
        let state_b = add("state_proj.bias".into(), 1, d);
        let tok_emb = add("token_emb".into(), c.vocab, d);
        let pos_emb = add("pos_emb".into(), c.max_len, d);
        let layers = (0..c.n_layers)
            .map(|l| {
                let mut a = |n: &str, r, cc| add(format!("layers.{l}.{n}"), r, cc);
                LayerSlots {
                    ln1_g: a("ln1.gamma", 1, d),
                    ln1_b: a("ln1.beta", 1, d),
                    wq: a("attn.wq", d, d),
                    bq: a("attn.bq", 1, d),
                    wk: a("attn.wk", d, d),
                    bk: a("attn.bk", 1, d),
                    wv: a("attn.wv", d, d),
                    bv: a("attn.bv", 1, d),
                    wo: a("attn.wo", d, d),
                    bo: a("attn.bo", 1, d),
                    ln2_g: a("ln2.gamma", 1, d),
                    ln2_b: a("ln2.beta", 1, d),
                    w1: a("ffn.w1", d, c.d_ff),
                    b1: a("ffn.b1", 1, c.d_ff),
                    w2: a("ffn.w2", c.d_ff, d),
                    b2: a("ffn.b2", 1, d),
                }
            })
            .collect();
        let lnf_g = add("ln_f.gamma".into(), 1, d);
        let lnf_b = add("ln_f.beta".into(), 1, d);
        let w_o = add("head.w_o".into(), d + 1, c.vocab);
        Self { state_w, state_b, tok_emb, pos_emb, layers, lnf_g, lnf_b, w_o, names, total: off }
    }
}

/// Decision transformer `T = T2 ∘ T1`: `T1` maps the sequence to
/// representations, `T2` is the output layer `[h; 1]ᵀ W_O` plus softmax.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    params: Vec<f64>,
    layout: Layout,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

// out[n×m] += a[n×k] · w[k×m]
fn matmul_acc(out: &mut [f64], a: &[f64], w: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += av * wv;
            }
        }
    }
}

// y = x·W + b
fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    matmul_acc(&mut out, x, w, n, k, m);
    out
}

// gW += xᵀ·dy, gb += Σ dy, returns dx = dy·Wᵀ
fn linear_back(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    k: usize,
    m: usize,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) -> Vec<f64> {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for kk in 0..k {
            let xv = x[i * k + kk];
            if xv == 0.0 {
                continue;
            }
            for (g, d) in gw[kk * m..(kk + 1) * m].iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..n {
            for (g, d) in gb.iter_mut().zip(&dy[i * m..(i + 1) * m]) {
                *g += d;
            }
        }
    }
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        for kk in 0..k {
            let wr = &w[kk * m..(kk + 1) * m];
            dx[i * k + kk] = wr.iter().zip(&dy[i * m..(i + 1) * m]).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let r = &x[i * d..(i + 1) * d];
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let xh = (r[j] - mean) * rs;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(c: &LnCache, g: &[f64], dy: &[f64], n: usize, d: usize, gg: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let mut dxh = vec![0.0; d];
        for j in 0..d {
            let dyv = dy[i * d + j];
            gg[j] += dyv * c.xhat[i * d + j];
            gb[j] += dyv;
            dxh[j] = dyv * g[j];
        }
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(&c.xhat[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = c.rstd[i] * (dxh[j] - m1 - c.xhat[i * d + j] * m2);
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × n × n attention weights
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    f1: Vec<f64>,
    r: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Cache {
    n: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final representations, n × d.
    h: Vec<f64>,
}

impl TransformerModel {
    /// Randomly initialized model.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |p: &mut [f64], s: Slot, bound: f64, rng: &mut ChaCha8Rng| {
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in s.of_mut(p) {
                *v = rng.sample(dist);
            }
        };
        let d = config.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        uniform(&mut params, layout.state_w, inv(config.d_state), &mut rng);
        uniform(&mut params, layout.state_b, inv(config.d_state), &mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in layout.tok_emb.of_mut(&mut params) {
            *v = rng.sample(normal);
        }
        for v in layout.pos_emb.of_mut(&mut params) {
            *v = 0.1 * rng.sample::<f64, _>(normal);
        }
        let xavier = (6.0 / (2 * d) as f64).sqrt();
        for l in &layout.layers {
            for s in [l.ln1_g, l.ln2_g] {
                s.of_mut(&mut params).fill(1.0);
            }
            for s in [l.wq, l.wk, l.wv] {
                uniform(&mut params, s, xavier, &mut rng);
            }
            uniform(&mut params, l.wo, inv(d), &mut rng);
            uniform(&mut params, l.w1, inv(d), &mut rng);
            uniform(&mut params, l.b1, inv(d), &mut rng);
            uniform(&mut params, l.w2, inv(config.d_ff), &mut rng);
            uniform(&mut params, l.b2, inv(config.d_ff), &mut rng);
        }
        layout.lnf_g.of_mut(&mut params).fill(1.0);
        uniform(&mut params, layout.w_o, inv(d), &mut rng);
        Ok(Self { config, params, layout })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Names and flat offset ranges of every parameter tensor.
    pub fn parameter_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layout.names.iter().map(|(n, s)| (n.clone(), s.off..s.off + s.len())).collect()
    }

    /// Range of the output layer `W_O` in the flat parameter vector.
    pub fn w_o_range(&self) -> std::ops::Range<usize> {
        let s = self.layout.w_o;
        s.off..s.off + s.len()
    }

    /// Output layer as a `(d + 1) × vocab` matrix with the bias in the last row.
    pub fn w_o(&self) -> DMatrix<f64> {
        let s = self.layout.w_o;
        DMatrix::from_row_slice(s.rows, s.cols, s.of(&self.params))
    }

    pub fn set_w_o(&mut self, w: &DMatrix<f64>) -> Result<()> {
        let s = self.layout.w_o;
        if w.shape() != (s.rows, s.cols) {
            return Err(Error::domain("output matrix shape mismatch"));
        }
        let dst = s.of_mut(&mut self.params);
        for r in 0..s.rows {
            for c in 0..s.cols {
                dst[r * s.cols + c] = w[(r, c)];
            }
        }
        Ok(())
    }

    fn check_inputs(&self, states: &[[f64; 4]], tokens: &[usize]) -> Result<()> {
        if states.is_empty() || tokens.is_empty() {
            return Err(Error::domain("state and token sequences must be nonempty"));
        }
        if self.config.d_state != 4 {
            return Err(Error::Config("state inputs are 4-dimensional".into()));
        }
        if states.len() + tokens.len() > self.config.max_len {
            return Err(Error::domain(format!(
                "sequence length {} exceeds max_len {}",
                states.len() + tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab) {
            return Err(Error::domain(format!("token {t} outside vocabulary")));
        }
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite state"));
        }
        Ok(())
    }

    fn forward_cache(&self, states: &[[f64; 4]], tokens: &[usize]) -> Cache {
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let d = c.d_model;
        let n = states.len() + tokens.len();
        let mut x = Vec::with_capacity(n * d);
        for s in states {
            x.extend(linear(s, l.state_w.of(p), l.state_b.of(p), 1, c.d_state, d));
        }
        for t in tokens {
            x.extend_from_slice(&l.tok_emb.of(p)[t * d..(t + 1) * d]);
        }
        for (v, pe) in x.iter_mut().zip(l.pos_emb.of(p)) {
            *v += pe;
        }
        let nh = c.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(c.n_layers);
        for ls in &l.layers {
            let (a, ln1) = layer_norm(&x, ls.ln1_g.of(p), ls.ln1_b.of(p), n, d);
            let q = linear(&a, ls.wq.of(p), ls.bq.of(p), n, d, d);
            let k = linear(&a, ls.wk.of(p), ls.bk.of(p), n, d, d);
            let v = linear(&a, ls.wv.of(p), ls.bv.of(p), n, d, d);
            let mut probs = vec![0.0; nh * n * n];
            let mut o = vec![0.0; n * d];
            for h in 0..nh {
                for i in 0..n {
                    let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s: f64 =
                            (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() * scale;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut sum = 0.0;
                    for rj in row.iter_mut().take(i + 1) {
                        *rj = (*rj - mx).exp();
                        sum += *rj;
                    }
                    for j in 0..=i {
                        row[j] /= sum;
                        for e in 0..dh {
                            o[i * d + h * dh + e] += row[j] * v[j * d + h * dh + e];
                        }
                    }
                }
            }
            let att = linear(&o, ls.wo.of(p), ls.bo.of(p), n, d, d);
            for (xv, av) in x.iter_mut().zip(&att) {
                *xv += av;
            }
            let (b, ln2) = layer_norm(&x, ls.ln2_g.of(p), ls.ln2_b.of(p), n, d);
            let f1 = linear(&b, ls.w1.of(p), ls.b1.of(p), n, d, c.d_ff);
            let r: Vec<f64> = f1.iter().map(|v| v.max(0.0)).collect();
            let f2 = linear(&r, ls.w2.of(p), ls.b2.of(p), n, c.d_ff, d);
            for (xv, fv) in x.iter_mut().zip(&f2) {
                *xv += fv;
            }
            caches.push(LayerCache { ln1, a, q, k, v, probs, o, ln2, b, f1, r });
        }
        let (h, lnf) = layer_norm(&x, l.lnf_g.of(p), l.lnf_b.of(p), n, d);
        Cache { n, layers: caches, lnf, h }
    }

    /// Accumulate into `grad` the gradient for `dh`, the derivative of the
    /// loss with respect to the final representations (n × d).
    fn backward_cache(&self, states: &[[f64; 4]], tokens: &[usize], cache: &Cache, dh: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let l = &self.layout;
        let p = &self.params;
        let d = c.d_model;
        let n = cache.n;
        let nh = c.n_heads;
        let dhd = d / nh;
        let scale = 1.0 / (dhd as f64).sqrt();

        let (gg, gb) = split_two(grad, l.lnf_g, l.lnf_b);
        let mut dx = layer_norm_back(&cache.lnf, l.lnf_g.of(p), dh, n, d, gg, gb);

        for (ls, lc) in l.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block
            let mut dr = {
                let (gw, gbb) = split_two(grad, ls.w2, ls.b2);
                linear_back(&lc.r, ls.w2.of(p), &dx, n, c.d_ff, d, gw, Some(gbb))
            };
            for (g, f) in dr.iter_mut().zip(&lc.f1) {
                if *f <= 0.0 {
                    *g = 0.0;
                }
            }
            let db = {
                let (gw, gbb) = split_two(grad, ls.w1, ls.b1);
                linear_back(&lc.b, ls.w1.of(p), &dr, n, d, c.d_ff, gw, Some(gbb))
            };
            let dxm = {
                let (gg, gbb) = split_two(grad, ls.ln2_g, ls.ln2_b);
                layer_norm_back(&lc.ln2, ls.ln2_g.of(p), &db, n, d, gg, gbb)
            };
            for (a, b) in dx.iter_mut().zip(&dxm) {
                *a += b;
            }
            // attention block
            let d_o = {
                let (gw, gbb) = split_two(grad, ls.wo, ls.bo);
                linear_back(&lc.o, ls.wo.of(p), &dx, n, d, d, gw, Some(gbb))
            };
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for h in 0..nh {
                for i in 0..n {
                    let row = &lc.probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut dp = vec![0.0; i + 1];
                    for j in 0..=i {
                        for e in 0..dhd {
                            let g = d_o[i * d + h * dhd + e];
                            dp[j] += g * lc.v[j * d + h * dhd + e];
                            dv[j * d + h * dhd + e] += row[j] * g;
                        }
                    }
                    let dot: f64 = (0..=i).map(|j| dp[j] * row[j]).sum();
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - dot) * scale;
                        for e in 0..dhd {
                            dq[i * d + h * dhd + e] += ds * lc.k[j * d + h * dhd + e];
                            dk[j * d + h * dhd + e] += ds * lc.q[i * d + h * dhd + e];
                        }
                    }
                }
            }
            let mut da = vec![0.0; n * d];
            for (w, bb, dy) in [(ls.wq, ls.bq, &dq), (ls.wk, ls.bk, &dk), (ls.wv, ls.bv, &dv)] {
                let (gw, gbb) = split_two(grad, w, bb);
                let part = linear_back(&lc.a, w.of(p), dy, n, d, d, gw, Some(gbb));
                for (a, b) in da.iter_mut().zip(&part) {
                    *a += b;
                }
            }
            let dxa = {
                let (gg, gbb) = split_two(grad, ls.ln1_g, ls.ln1_b);
                layer_norm_back(&lc.ln1, ls.ln1_g.of(p), &da, n, d, gg, gbb)
            };
            for (a, b) in dx.iter_mut().zip(&dxa) {
                *a += b;
            }
        }
        // embeddings
        for (g, v) in l.pos_emb.of_mut(grad).iter_mut().zip(&dx) {
            *g += v;
        }
        let ns = states.len();
        for (i, s) in states.iter().enumerate() {
            let (gw, gbb) = split_two(grad, l.state_w, l.state_b);
            linear_back(s, l.state_w.of(p), &dx[i * d..(i + 1) * d], 1, c.d_state, d, gw, Some(gbb));
        }
        let te = l.tok_emb.of_mut(grad);
        for (i, t) in tokens.iter().enumerate() {
            for e in 0..d {
                te[t * d + e] += dx[(ns + i) * d + e];
            }
        }
    }

    /// Representations `T1(X, Y_prefix)`: one row of length `d_model` per
    /// prefix token.
    pub fn t1_forward(&self, states: &[[f64; 4]], prefix: &[usize]) -> Result<DMatrix<f64>> {
        self.check_inputs(states, prefix)?;
        let cache = self.forward_cache(states, prefix);
        let d = self.config.d_model;
        let ns = states.len();
        Ok(DMatrix::from_row_slice(prefix.len(), d, &cache.h[ns * d..]))
    }

    /// `T2`: logits `[h; 1]ᵀ W_O` for each row of `h`.
    pub fn t2_logits(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.w_o();
        let d = self.config.d_model;
        let mut out = h * w.rows(0, d);
        for mut r in out.row_iter_mut() {
            r += w.row(d);
        }
        out
    }

    /// Output distribution for each prefix position.
    pub fn predict_probs(&self, states: &[[f64; 4]], prefix: &[usize]) -> Result<DMatrix<f64>> {
        let logits = self.t2_logits(&self.t1_forward(states, prefix)?);
        let mut out = logits.clone();
        for (i, row) in logits.row_iter().enumerate() {
            let p = crate::moments::softmax_blocks(&DVector::from_iterator(row.len(), row.iter().copied()), row.len());
            out.row_mut(i).copy_from(&p.transpose());
        }
        Ok(out)
    }

    /// Cross-entropy of `targets[i]` at prefix position `i`, summed over
    /// positions, with its gradient scaled by `weight` and added to `grad`.
    pub fn loss_and_grad(
        &self,
        states: &[[f64; 4]],
        prefix: &[usize],
        targets: &[usize],
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_inputs(states, prefix)?;
        if targets.len() != prefix.len() || targets.iter().any(|t| *t >= self.config.vocab) {
            return Err(Error::domain("one valid target per prefix position is required"));
        }
        let cache = self.forward_cache(states, prefix);
        let d = self.config.d_model;
        let v = self.config.vocab;
        let ns = states.len();
        let w = self.layout.w_o.of(&self.params);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; prefix.len() * v];
        for (i, &t) in targets.iter().enumerate() {
            let h = &cache.h[(ns + i) * d..(ns + i + 1) * d];
            let mut logits = w[d * v..].to_vec();
            matmul_acc(&mut logits, h, w, 1, d, v);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            loss += lse - logits[t];
            for k in 0..v {
                dlogits[i * v + k] = weight * ((logits[k] - lse).exp() - if k == t { 1.0 } else { 0.0 });
            }
        }
        if let Some(grad) = grad {
            let n = cache.n;
            let mut dh = vec![0.0; n * d];
            let gw = self.layout.w_o.of_mut(grad);
            for i in 0..prefix.len() {
                let h = &cache.h[(ns + i) * d..(ns + i + 1) * d];
                let dl = &dlogits[i * v..(i + 1) * v];
                for a in 0..d {
                    for k in 0..v {
                        gw[a * v + k] += h[a] * dl[k];
                        dh[(ns + i) * d + a] += w[a * v + k] * dl[k];
                    }
                }
                for k in 0..v {
                    gw[d * v + k] += dl[k];
                }
            }
            self.backward_cache(states, prefix, &cache, &dh, grad);
        }
        Ok(loss)
    }

    pub fn tensor_names(config: &TransformerConfig) -> Vec<String> {
        Layout::new(config).names.into_iter().map(|(n, _)| n).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        for (k, v) in self.config.meta() {
            ck.meta.insert(k.into(), v.to_string());
        }
        for (name, s) in &self.layout.names {
            ck.push(name, s.rows, s.cols, s.of(&self.params));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let c = config_from(ck)?;
        c.validate()?;
        let layout = Layout::new(&c);
        let mut params = vec![0.0; layout.total];
        for (name, s) in &layout.names {
            let t = ck.tensor(name)?;
            if (t.rows, t.cols) != (s.rows, s.cols) {
                return Err(Error::Parse(format!(
                    "tensor `{name}` has shape {}x{}, expected {}x{}",
                    t.rows, t.cols, s.rows, s.cols
                )));
            }
            s.of_mut(&mut params).copy_from_slice(&t.data);
        }
        Ok(Self { config: c, params, layout })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ck = Checkpoint::parse_with(text, CHECKPOINT_KIND, |ck| Ok(Self::tensor_names(&config_from(ck)?)))?;
        Self::from_checkpoint(&ck)
    }
}

fn config_from(ck: &Checkpoint) -> Result<TransformerConfig> {
    Ok(TransformerConfig {
        d_state: ck.meta_parse("d_state")?,
        d_model: ck.meta_parse("d_model")?,
        n_layers: ck.meta_parse("n_layers")?,
        n_heads: ck.meta_parse("n_heads")?,
        d_ff: ck.meta_parse("d_ff")?,
        vocab: ck.meta_parse("vocab")?,
        max_len: ck.meta_parse("max_len")?,
    })
}

/// Two disjoint mutable parameter slices.
fn split_two(p: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.off + a.len() <= b.off || b.off + b.len() <= a.off);
    if a.off < b.off {
        let (lo, hi) = p.split_at_mut(b.off);
        (&mut lo[a.off..a.off + a.len()], &mut hi[..b.len()])
    } else {
        let (lo, hi) = p.split_at_mut(a.off);
        (&mut hi[..a.len()], &mut lo[b.off..b.off + b.len()])
    }
}
