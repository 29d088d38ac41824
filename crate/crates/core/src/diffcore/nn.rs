//! Parameterised layers built from tape primitives.
//!
//! Layers hold [`ParamId`] handles only; values live in a [`ParamStore`] that
//! is passed to every forward call.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, ModelRng, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: Real = 1e-5;

/// Forward-pass mode. Training carries the random source for dropout and
/// gate noise.
pub enum Mode<'a> {
    Train(&'a mut ModelRng),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout in training mode, identity otherwise.
pub fn dropout(g: &mut Graph, x: Var, rate: Real, mode: &mut Mode) -> Var {
    match mode {
        Mode::Train(rng) => g.dropout(x, rate, *rng),
        Mode::Infer => x,
    }
}

/// `mu + ε ⊙ sigma` with `ε ~ N(0, I)` drawn from `rng`; ε enters the tape
/// as a constant.
pub fn gaussian_reparameterize<R: Rng>(g: &mut Graph, mu: Var, sigma: Var, rng: &mut R) -> Var {
    let shape = g.shape(mu).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<Real> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect();
    let e = g.constant(Tensor::new(shape, eps));
    let noise = g.mul(e, sigma);
    g.add(mu, noise)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ModelRng,
    ) -> Self {
        let w = store.uniform_fan_in(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let bias = store.zeros(format!("{name}.bias"), &[d]);
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Single-layer gated recurrent unit with gate order (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut ModelRng) -> Self {
        let w_ih = store.uniform_fan_in(format!("{name}.w_ih"), &[d_in, 3 * hidden], d_in, rng);
        let w_hh = store.uniform_fan_in(format!("{name}.w_hh"), &[hidden, 3 * hidden], hidden, rng);
        let b_ih = store.zeros(format!("{name}.b_ih"), &[3 * hidden]);
        let b_hh = store.zeros(format!("{name}.b_hh"), &[3 * hidden]);
        Gru {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            d_in,
            hidden,
        }
    }

    /// One cell update given the input projection `gi = x W_ih + b_ih`
    /// (shape `[B, 3H]`) and the previous state `h` (`[B, H]`).
    fn cell(&self, g: &mut Graph, store: &ParamStore, gi: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_hh = g.param(store, self.w_hh);
        let b_hh = g.param(store, self.b_hh);
        let gh = g.matmul(h, w_hh);
        let gh = g.add_row(gh, b_hh);
        let gi_r = g.slice(gi, 1, 0, hd);
        let gi_z = g.slice(gi, 1, hd, hd);
        let gi_n = g.slice(gi, 1, 2 * hd, hd);
        let gh_r = g.slice(gh, 1, 0, hd);
        let gh_z = g.slice(gh, 1, hd, hd);
        let gh_n = g.slice(gh, 1, 2 * hd, hd);
        let r = g.add(gi_r, gh_r);
        let r = g.sigmoid(r);
        let z = g.add(gi_z, gh_z);
        let z = g.sigmoid(z);
        let rn = g.mul(r, gh_n);
        let n = g.add(gi_n, rn);
        let n = g.tanh(n);
        // h' = (1 − z) ⊙ n + z ⊙ h = n + z ⊙ (h − n)
        let d = g.sub(h, n);
        let zd = g.mul(z, d);
        g.add(n, zd)
    }

    /// One step on input `x[B, C]` from state `h[B, H]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let gi = g.matmul(x, w_ih);
        let gi = g.add_row(gi, b_ih);
        self.cell(g, store, gi, h)
    }

    /// Runs `x[B, T, C]` left to right from a zero state; returns `h_T[B, H]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        assert!(t >= 1, "GRU needs at least one step");
        assert_eq!(s[2], self.d_in, "GRU input width mismatch");
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let gi_all = g.matmul(x, w_ih);
        let gi_all = g.add_row(gi_all, b_ih);
        let mut h = g.constant(Tensor::zeros(&[b, self.hidden]));
        for ti in 0..t {
            let gi = g.slice(gi_all, 1, ti, 1);
            let gi = g.reshape(gi, &[b, 3 * self.hidden]);
            h = self.cell(g, store, gi, h);
        }
        h
    }
}

/// Attention layer hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: Real,
    pub rope: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head width, got {}",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut ModelRng) -> Self {
        let d = cfg.d;
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            cfg: cfg.clone(),
        }
    }

    /// `x[B, N, d] → [B, N, d]`; with rotary embedding enabled, token `n`
    /// of each sequence sits at position `n`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let mut q = g.split_heads(q, h);
        let mut k = g.split_heads(k, h);
        let v = g.split_heads(v, h);
        if self.cfg.rope {
            q = g.rope(q);
            k = g.rope(k);
        }
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as Real).sqrt());
        let a = g.softmax(scores);
        let ctx = g.bmm(a, v, false);
        let ctx = g.merge_heads(ctx, h);
        self.o.forward(g, store, ctx)
    }
}

/// Position-wise `W2 GELU(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_hidden: usize, d_out: usize, rng: &mut ModelRng) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d, d_hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.l1.forward(g, store, x);
        let y = g.gelu(y);
        self.l2.forward(g, store, y)
    }
}

/// Post-norm Transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut ModelRng) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d, cfg.d_ff, cfg.d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: &mut Mode) -> Var {
        let rate = self.attn.cfg.dropout;
        let a = self.attn.forward(g, store, x);
        let a = dropout(g, a, rate, mode);
        let x1 = g.add(x, a);
        let x1 = self.ln1.forward(g, store, x1);
        let f = self.ffn.forward(g, store, x1);
        let f = dropout(g, f, rate, mode);
        let x2 = g.add(x1, f);
        self.ln2.forward(g, store, x2)
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check_params;
    use super::super::kernels::{sigmoid, softmax_row};
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ModelRng {
        ModelRng::seed_from_u64(seed)
    }

    fn randn(r: &mut ModelRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn zero_all(store: &mut ParamStore) {
        for p in store.params_mut() {
            p.value.fill(0.0);
        }
    }

    // plain-vector GRU cell with the same gate layout
    fn cell_ref(store: &ParamStore, gru: &Gru, x: &[Real], h: &[Real]) -> Vec<Real> {
        let hd = gru.hidden;
        let (wi, wh) = (store.value(gru.w_ih), store.value(gru.w_hh));
        let (bi, bh) = (store.value(gru.b_ih), store.value(gru.b_hh));
        let proj = |w: &Tensor, b: &Tensor, v: &[Real], col: usize| -> Real {
            b.data()[col] + v.iter().enumerate().map(|(i, a)| a * w.data()[i * 3 * hd + col]).sum::<Real>()
        };
        (0..hd)
            .map(|j| {
                let r = sigmoid(proj(wi, bi, x, j) + proj(wh, bh, h, j));
                let z = sigmoid(proj(wi, bi, x, hd + j) + proj(wh, bh, h, hd + j));
                let n = (proj(wi, bi, x, 2 * hd + j) + r * proj(wh, bh, h, 2 * hd + j)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn gru_zero_params_give_zero_state() {
        let mut r = rng(0);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut r);
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(randn(&mut r, &[2, 5, 3]));
        let h = gru.encode(&mut g, &store, x);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_unrolled_cells() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut r);
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = randn(&mut r, &shape);
        }
        let xt = randn(&mut r, &[1, 3, 3]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let h = gru.encode(&mut g, &store, x);
        let mut href = vec![0.0; 4];
        for t in 0..3 {
            href = cell_ref(&store, &gru, &xt.data()[t * 3..(t + 1) * 3], &href);
        }
        for (a, b) in g.value(h).data().iter().zip(&href) {
            assert!((a - b).abs() < 1e-12);
        }
        // T = 1 is one cell step from zero
        let mut g = Graph::new();
        let x1 = g.constant(Tensor::new(vec![1, 1, 3], xt.data()[..3].to_vec()));
        let h1 = gru.encode(&mut g, &store, x1);
        let r1 = cell_ref(&store, &gru, &xt.data()[..3], &[0.0; 4]);
        for (a, b) in g.value(h1).data().iter().zip(&r1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn attn_cfg(d: usize, heads: usize, rope: bool) -> AttentionConfig {
        AttentionConfig {
            d,
            heads,
            d_ff: 2 * d,
            dropout: 0.0,
            rope,
        }
    }

    fn randomize(store: &mut ParamStore, r: &mut ModelRng) {
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = randn(r, &shape);
        }
    }

    fn lin_ref(store: &ParamStore, l: &Linear, x: &[Real]) -> Vec<Real> {
        let w = store.value(l.w);
        (0..l.d_out)
            .map(|j| {
                let b = l.b.map_or(0.0, |b| store.value(b).data()[j]);
                b + (0..l.d_in).map(|i| x[i] * w.data()[i * l.d_out + j]).sum::<Real>()
            })
            .collect()
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", &attn_cfg(4, 2, true), &mut r);
        randomize(&mut store, &mut r);
        let xt = randn(&mut r, &[1, 1, 4]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = mha.forward(&mut g, &store, x);
        let expect = lin_ref(&store, &mha.o, &lin_ref(&store, &mha.v, xt.data()));
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_scores_mean_pool_values() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", &attn_cfg(4, 2, false), &mut r);
        randomize(&mut store, &mut r);
        for id in [mha.q.w, mha.q.b.unwrap(), mha.k.w, mha.k.b.unwrap()] {
            store.value_mut(id).fill(0.0);
        }
        let xt = randn(&mut r, &[1, 3, 4]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = mha.forward(&mut g, &store, x);
        let vs: Vec<Vec<Real>> = (0..3).map(|n| lin_ref(&store, &mha.v, xt.row(n))).collect();
        let mean: Vec<Real> = (0..4).map(|j| vs.iter().map(|v| v[j]).sum::<Real>() / 3.0).collect();
        let expect = lin_ref(&store, &mha.o, &mean);
        for n in 0..3 {
            for j in 0..4 {
                assert!((g.value(y).data()[n * 4 + j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    // dense-matrix attention, one head at a time
    fn mha_ref(store: &ParamStore, mha: &MultiHeadAttention, x: &Tensor) -> Vec<Real> {
        let (n, d) = (x.shape()[1], x.shape()[2]);
        let h = mha.cfg.heads;
        let dh = d / h;
        let q: Vec<Vec<Real>> = (0..n).map(|i| lin_ref(store, &mha.q, x.row(i))).collect();
        let k: Vec<Vec<Real>> = (0..n).map(|i| lin_ref(store, &mha.k, x.row(i))).collect();
        let v: Vec<Vec<Real>> = (0..n).map(|i| lin_ref(store, &mha.v, x.row(i))).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for hh in 0..h {
            let part = |m: &Vec<Real>, pos: usize| -> Vec<Real> {
                let s = m[hh * dh..(hh + 1) * dh].to_vec();
                if mha.cfg.rope {
                    super::super::rope_rotate(&s, pos).unwrap()
                } else {
                    s
                }
            };
            for i in 0..n {
                let qi = part(&q[i], i);
                let mut logits: Vec<Real> = (0..n)
                    .map(|j| {
                        let kj = part(&k[j], j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<Real>() / (dh as Real).sqrt()
                    })
                    .collect();
                softmax_row(&mut logits);
                for j in 0..n {
                    for e in 0..dh {
                        ctx[i][hh * dh + e] += logits[j] * v[j][hh * dh + e];
                    }
                }
            }
        }
        ctx.iter().flat_map(|c| lin_ref(store, &mha.o, c)).collect()
    }

    #[test]
    fn attention_matches_dense_reference() {
        for rope in [false, true] {
            let mut r = rng(4);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "a", &attn_cfg(4, 2, rope), &mut r);
            randomize(&mut store, &mut r);
            let xt = randn(&mut r, &[1, 3, 4]);
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let y = mha.forward(&mut g, &store, x);
            let expect = mha_ref(&store, &mha, &xt);
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "rope={rope}");
            }
        }
    }

    #[test]
    fn encoder_zero_weights_is_double_layer_norm() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let cfg = attn_cfg(4, 2, false);
        let blk = EncoderBlock::new(&mut store, "enc", &cfg, &mut r);
        for p in store.params_mut() {
            if !p.name.contains(".ln") {
                p.value.fill(0.0);
            }
        }
        let xt = randn(&mut r, &[2, 3, 4]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = blk.forward(&mut g, &store, x, &mut Mode::Infer);
        let mut g2 = Graph::new();
        let x2 = g2.constant(xt);
        let l1 = blk.ln1.forward(&mut g2, &store, x2);
        let l2 = blk.ln2.forward(&mut g2, &store, l1);
        assert_eq!(g.value(y).data(), g2.value(l2).data());
    }

    #[test]
    fn encoder_inference_is_deterministic() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let mut cfg = attn_cfg(4, 2, true);
        cfg.dropout = 0.1;
        let blk = EncoderBlock::new(&mut store, "enc", &cfg, &mut r);
        let xt = randn(&mut r, &[2, 5, 4]);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let y = blk.forward(&mut g, &store, x, &mut Mode::Infer);
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let cfg = attn_cfg(4, 2, true);
        let blk = EncoderBlock::new(&mut store, "enc", &cfg, &mut r);
        randomize(&mut store, &mut r);
        let xt = randn(&mut r, &[2, 3, 4]);
        let target = randn(&mut r, &[2, 3, 4]);
        let build = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(xt.clone());
            let y = blk.forward(g, s, x, &mut Mode::Infer);
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            let d = g.square(d);
            g.mean(d)
        };
        let rep = check_params(&mut store, &build, 1e-5, usize::MAX);
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut r);
        randomize(&mut store, &mut r);
        let xt = randn(&mut r, &[2, 4, 3]);
        let build = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(xt.clone());
            let h = gru.encode(g, s, x);
            let h = g.square(h);
            g.sum(h)
        };
        let rep = check_params(&mut store, &build, 1e-5, usize::MAX);
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }

    #[test]
    fn reparameterize_degenerate_and_moments() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::vector(vec![0.3, -0.7]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let y = gaussian_reparameterize(&mut g, mu, zero, &mut rng(9));
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);

        let n = 100_000;
        let mut g = Graph::new();
        let mu = g.constant(Tensor::full(&[n], 0.5));
        let sig = g.constant(Tensor::full(&[n], 2.0));
        let y = gaussian_reparameterize(&mut g, mu, sig, &mut rng(10));
        let mean = g.value(y).sum() / n as Real;
        let se = 2.0 / (n as Real).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se);

        let draw = |seed| {
            let mut g = Graph::new();
            let mu = g.constant(Tensor::zeros(&[4]));
            let s = g.constant(Tensor::full(&[4], 1.0));
            let y = gaussian_reparameterize(&mut g, mu, s, &mut rng(seed));
            g.value(y).clone()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn reparameterize_routes_gradient_to_mu_and_sigma() {
        let mut store = ParamStore::new();
        let mu = store.add("mu", Tensor::vector(vec![0.1, 0.2, 0.3]));
        let sig = store.add("sig", Tensor::vector(vec![0.5, 1.0, 1.5]));
        let build = |g: &mut Graph, s: &ParamStore| {
            let m = g.param(s, mu);
            let sg = g.param(s, sig);
            let y = gaussian_reparameterize(g, m, sg, &mut rng(12));
            let y = g.square(y);
            g.sum(y)
        };
        let rep = check_params(&mut store, &build, 1e-5, usize::MAX);
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
        assert!(store.grad(sig).data().iter().all(|&v| v != 0.0));
    }
}
