//! Stage-2 model: trend/seasonal decomposition, a temporal encoder that
//! reads the stock's code as a structure token, code-routed sparse experts
//! and a factor-pricing head.

mod gate;

pub use gate::{load_balance, routing_fractions, sparse_softmax, top_k, GatingOutput};

use rand::SeedableRng;

use crate::datapanel::DateBatch;
use crate::diffcore::nn::{dropout, gaussian_reparameterize, AttentionConfig, EncoderBlock, FeedForward, LayerNorm, Linear, Mode};
use crate::diffcore::{Graph, ModelRng, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::spatial::{broadcast_rows, CodeAssignment};

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConfig {
    pub lookback: usize,
    pub n_features: usize,
    pub n_priors: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: Real,
    pub trend_window: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_moe: usize,
    pub lambda_balance: Real,
    pub lambda_reg: Real,
}

impl TemporalConfig {
    pub fn new(lookback: usize, n_features: usize, n_priors: usize, d_s: usize) -> Self {
        TemporalConfig {
            lookback,
            n_features,
            n_priors,
            d_s,
            d_t: 64,
            heads: 2,
            d_ff: 128,
            dropout: 0.1,
            trend_window: 5,
            n_experts: 2,
            top_k: 1,
            d_moe: 64,
            lambda_balance: 1e-2,
            lambda_reg: 1e-4,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d_t,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            rope: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top-k {} must lie in 1..={} experts",
                self.top_k, self.n_experts
            )));
        }
        if self.trend_window == 0 || self.trend_window % 2 == 0 {
            return Err(Error::Config(format!("trend window {} must be odd", self.trend_window)));
        }
        if !(self.lambda_balance >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lookback == 0 || self.n_features == 0 || self.d_s == 0 || self.d_moe == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Centred moving average over edge-replicated padding, per channel of a
/// row-major `[T, C]` window. Returns `(trend, x − trend)`.
pub fn trend_seasonal_decompose(x: &[Real], t: usize, c: usize, w: usize) -> (Vec<Real>, Vec<Real>) {
    assert!(w % 2 == 1, "window must be odd");
    assert_eq!(x.len(), t * c);
    let half = w / 2;
    let mut trend = vec![0.0; t * c];
    for ch in 0..c {
        for s in 0..t {
            let mut acc = 0.0;
            for o in 0..w {
                let idx = (s + o).saturating_sub(half).min(t - 1);
                acc += x[idx * c + ch];
            }
            trend[s * c + ch] = acc / w as Real;
        }
    }
    let seasonal = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    (trend, seasonal)
}

/// Tape handles and routing of one stage-2 forward pass.
#[derive(Clone, Debug)]
pub struct TemporalPass {
    pub y_hat: Var,
    pub alpha: Var,
    pub prior_term: Var,
    pub latent_term: Var,
    pub beta_p: Var,
    pub beta_l: Var,
    pub gating: GatingOutput,
    pub mse: Var,
    pub balance: Var,
    pub reg: Var,
    pub total: Var,
}

/// Inference output for one stock.
#[derive(Clone, Debug, PartialEq)]
pub struct StockPrediction {
    pub score: Real,
    pub alpha: Real,
    pub prior_term: Real,
    pub latent_term: Real,
    pub experts: Vec<usize>,
    pub gate_weights: Vec<Real>,
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    pub cfg: TemporalConfig,
    pub store: ParamStore,
    seasonal: Linear,
    trend: Linear,
    token: Linear,
    encoder: EncoderBlock,
    ln_h: LayerNorm,
    ln_z: LayerNorm,
    proj: Linear,
    glu_a: Linear,
    glu_b: Linear,
    glu_o: Linear,
    gate_ln: LayerNorm,
    gate_mu: Linear,
    gate_sigma: Linear,
    experts: Vec<FeedForward>,
    base_p: Linear,
    base_l: Linear,
    mod_p: Linear,
    mod_l: Linear,
    w_alpha: Linear,
    factor: Linear,
}

impl TemporalModel {
    pub fn new(cfg: TemporalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let r = &mut rng;
        let s = &mut ParamStore::new();
        let (c, dt, ds, p, dm) = (cfg.n_features, cfg.d_t, cfg.d_s, cfg.n_priors, cfg.d_moe);
        let seasonal = Linear::new(s, "seasonal", c, dt, true, r);
        let trend = Linear::new(s, "trend", c, dt, true, r);
        let token = Linear::new(s, "token", ds, dt, true, r);
        let encoder = EncoderBlock::new(s, "tenc", &cfg.attention(), r);
        let ln_h = LayerNorm::new(s, "fuse.ln_h", dt);
        let ln_z = LayerNorm::new(s, "fuse.ln_z", ds);
        let proj = Linear::new(s, "fuse.proj", dt + ds, dt, true, r);
        let glu_a = Linear::new(s, "fuse.a", dt, cfg.d_ff, true, r);
        let glu_b = Linear::new(s, "fuse.b", dt, cfg.d_ff, true, r);
        let glu_o = Linear::new(s, "fuse.o", cfg.d_ff, dt, true, r);
        let gate_ln = LayerNorm::new(s, "gate.ln", ds);
        let gate_mu = Linear::new(s, "gate.mu", ds, cfg.n_experts, true, r);
        let gate_sigma = Linear::new(s, "gate.sigma", ds, cfg.n_experts, true, r);
        let experts = (0..cfg.n_experts)
            .map(|j| FeedForward::new(s, &format!("expert{j}"), dt, dm, dm, r))
            .collect();
        let base_p = Linear::new(s, "load.base_p", dt, p, false, r);
        let base_l = Linear::new(s, "load.base_l", dt, ds, false, r);
        let mod_p = Linear::new(s, "load.mod_p", dm, 2 * p, true, r);
        let mod_l = Linear::new(s, "load.mod_l", dm, 2 * ds, true, r);
        // modulation starts near γ = 1
        for (lin, d) in [(&mod_p, p), (&mod_l, ds)] {
            s.value_mut(lin.b.unwrap()).data_mut()[..d].fill(1.0);
        }
        let w_alpha = Linear::new(s, "load.alpha", dm, 1, false, r);
        let factor = Linear::new(s, "factor", ds, ds, true, r);
        Ok(TemporalModel {
            store: std::mem::take(s),
            cfg,
            seasonal,
            trend,
            token,
            encoder,
            ln_h,
            ln_z,
            proj,
            glu_a,
            glu_b,
            glu_o,
            gate_ln,
            gate_mu,
            gate_sigma,
            experts,
            base_p,
            base_l,
            mod_p,
            mod_l,
            w_alpha,
            factor,
        })
    }

    fn check_inputs(&self, b: &DateBatch, a: &CodeAssignment) {
        assert_eq!(b.lookback, self.cfg.lookback, "batch lookback differs from the model");
        assert_eq!(b.n_features, self.cfg.n_features, "batch feature width differs from the model");
        assert_eq!(b.prior.len(), self.cfg.n_priors, "batch prior width differs from the model");
        assert_eq!(a.zq.len(), b.len() * self.cfg.d_s, "code assignment does not match the batch");
    }

    /// Trend and seasonal parts of every window in the batch, each `[n, T, C]`.
    pub fn decomposed_input(&self, b: &DateBatch) -> (Tensor, Tensor) {
        let (t, c) = (self.cfg.lookback, self.cfg.n_features);
        let mut tr = Vec::with_capacity(b.x.len());
        let mut se = Vec::with_capacity(b.x.len());
        for k in 0..b.len() {
            let w: Vec<Real> = b.window(k).iter().map(|&v| v as Real).collect();
            let (a, s) = trend_seasonal_decompose(&w, t, c, self.cfg.trend_window);
            tr.extend(a);
            se.extend(s);
        }
        let shape = vec![b.len(), t, c];
        (Tensor::new(shape.clone(), tr), Tensor::new(shape, se))
    }

    /// Structure-token output `h_temp[n, d_t]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, b: &DateBatch, zq: Var, mode: &mut Mode) -> Var {
        let n = b.len();
        let dt = self.cfg.d_t;
        let (tr, se) = self.decomposed_input(b);
        let tr = g.constant(tr);
        let se = g.constant(se);
        let xs = self.seasonal.forward(g, store, se);
        let xt = self.trend.forward(g, store, tr);
        let x = g.add(xs, xt);
        let tok = self.token.forward(g, store, zq);
        let tok = g.reshape(tok, &[n, 1, dt]);
        let seq = g.concat(&[tok, x], 1);
        let out = self.encoder.forward(g, store, seq, mode);
        let h = g.slice(out, 1, 0, 1);
        g.reshape(h, &[n, dt])
    }

    /// `[LN(h); LN(z_q)]` projected to `d_t`, then a residual GEGLU block.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, h: Var, zq: Var, mode: &mut Mode) -> Var {
        let lh = self.ln_h.forward(g, store, h);
        let lz = self.ln_z.forward(g, store, zq);
        let cat = g.concat(&[lh, lz], 1);
        let v = self.proj.forward(g, store, cat);
        let a = self.glu_a.forward(g, store, v);
        let bb = self.glu_b.forward(g, store, v);
        let bb = g.gelu(bb);
        let ab = g.mul(a, bb);
        let ab = dropout(g, ab, self.cfg.dropout, mode);
        let o = self.glu_o.forward(g, store, ab);
        g.add(v, o)
    }

    /// Sparse gate weights `[n, M_e]` from the codes alone. Training samples
    /// logits around μ; inference uses μ.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, zq: Var, mode: &mut Mode) -> (Var, GatingOutput) {
        let m = self.cfg.n_experts;
        let k = self.cfg.top_k;
        let zl = self.gate_ln.forward(g, store, zq);
        let mu = self.gate_mu.forward(g, store, zl);
        let s = self.gate_sigma.forward(g, store, zl);
        let sigma = g.softplus(s);
        let logits = match mode {
            Mode::Train(rng) => gaussian_reparameterize(g, mu, sigma, &mut **rng),
            Mode::Infer => mu,
        };
        let lv = g.value(logits).data().to_vec();
        let flat = g.frozen_indices(|| lv.chunks(m).flat_map(|row| top_k(row, k)).collect());
        let selected: Vec<Vec<usize>> = flat.chunks(k).map(<[usize]>::to_vec).collect();
        let mut mask = vec![false; lv.len()];
        for (i, sel) in selected.iter().enumerate() {
            sel.iter().for_each(|&j| mask[i * m + j] = true);
        }
        let w = g.masked_softmax(logits, &mask);
        let out = GatingOutput {
            n_experts: m,
            selected,
            weights: g.value(w).data().to_vec(),
            mu: g.value(mu).data().to_vec(),
            sigma: g.value(sigma).data().to_vec(),
        };
        (w, out)
    }

    fn expert(&self, g: &mut Graph, store: &ParamStore, j: usize, u: Var, mode: &mut Mode) -> Var {
        let e = &self.experts[j];
        let y = e.l1.forward(g, store, u);
        let y = g.gelu(y);
        let y = dropout(g, y, self.cfg.dropout, mode);
        e.l2.forward(g, store, y)
    }

    /// `Σ_j G_j ξ_j(u)`, evaluating each expert only on the stocks routed to it.
    pub fn mixture(&self, g: &mut Graph, store: &ParamStore, u: Var, w: Var, gating: &GatingOutput, mode: &mut Mode) -> Var {
        let n = g.shape(u)[0];
        let mut m = g.constant(Tensor::zeros(&[n, self.cfg.d_moe]));
        for j in 0..self.cfg.n_experts {
            let rows: Vec<usize> = (0..n).filter(|&i| gating.selected[i].contains(&j)).collect();
            if rows.is_empty() {
                continue;
            }
            let uj = g.gather_rows(u, &rows);
            let out = self.expert(g, store, j, uj, mode);
            let col = g.slice(w, 1, j, 1);
            let col = g.gather_rows(col, &rows);
            let col = g.reshape(col, &[rows.len()]);
            let weighted = g.row_scale(out, col);
            let placed = g.scatter_rows(weighted, &rows, n);
            m = g.add(m, placed);
        }
        m
    }

    /// Full stage-2 objective on one date; `assign` carries the frozen codes.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, b: &DateBatch, assign: &CodeAssignment, mode: &mut Mode) -> TemporalPass {
        self.check_inputs(b, assign);
        let cfg = &self.cfg;
        let n = b.len();
        let (p, ds) = (cfg.n_priors, cfg.d_s);
        let zq = g.constant(Tensor::matrix(n, ds, assign.zq.clone()));
        let h = self.encode(g, store, b, zq, mode);
        let u = self.fuse(g, store, h, zq, mode);
        let (w, gating) = self.gate(g, store, zq, mode);
        let m = self.mixture(g, store, u, w, &gating, mode);

        let bp0 = self.base_p.forward(g, store, h);
        let bl0 = self.base_l.forward(g, store, h);
        let mp = self.mod_p.forward(g, store, m);
        let ml = self.mod_l.forward(g, store, m);
        let modulate = |g: &mut Graph, base: Var, gd: Var, d: usize| {
            let gamma = g.slice(gd, 1, 0, d);
            let delta = g.slice(gd, 1, d, d);
            let scaled = g.mul(gamma, base);
            g.add(scaled, delta)
        };
        let beta_p = modulate(g, bp0, mp, p);
        let beta_l = modulate(g, bl0, ml, ds);
        let alpha = self.w_alpha.forward(g, store, m);
        let alpha = g.reshape(alpha, &[n]);

        let prior: Vec<Real> = b.prior.iter().map(|&v| v as Real).collect();
        let fp = broadcast_rows(g, &prior, n);
        let fl = self.factor.forward(g, store, zq);
        let prior_term = g.row_dot(beta_p, fp);
        let latent_term = g.row_dot(beta_l, fl);
        let y_hat = g.add(alpha, prior_term);
        let y_hat = g.add(y_hat, latent_term);

        let y: Vec<Real> = b.y.iter().map(|&v| if v.is_finite() { v as Real } else { 0.0 }).collect();
        let y = g.constant(Tensor::new(vec![n], y));
        let d = g.sub(y_hat, y);
        let sq = g.square(d);
        let mse = g.mean(sq);

        let f = routing_fractions(&gating.selected, cfg.n_experts);
        let fm = broadcast_rows(g, &f, n);
        let fw = g.mul(w, fm);
        let s = g.sum(fw);
        let balance = g.scale(s, cfg.n_experts as Real / n as Real);

        let np = g.row_norm(beta_p);
        let nl = g.row_norm(beta_l);
        let norms = g.add(np, nl);
        let reg = g.mean(norms);

        let wb = g.scale(balance, cfg.lambda_balance);
        let wr = g.scale(reg, cfg.lambda_reg);
        let total = g.add(mse, wb);
        let total = g.add(total, wr);
        TemporalPass {
            y_hat,
            alpha,
            prior_term,
            latent_term,
            beta_p,
            beta_l,
            gating,
            mse,
            balance,
            reg,
            total,
        }
    }

    /// Inference-mode scores with their pricing decomposition and routing.
    pub fn predict(&self, b: &DateBatch, assign: &CodeAssignment) -> Vec<StockPrediction> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, &self.store, b, assign, &mut Mode::Infer);
        let v = |x: Var| g.value(x).data().to_vec();
        let (y, a, pt, lt) = (v(pass.y_hat), v(pass.alpha), v(pass.prior_term), v(pass.latent_term));
        (0..b.len())
            .map(|i| StockPrediction {
                score: y[i],
                alpha: a[i],
                prior_term: pt[i],
                latent_term: lt[i],
                experts: pass.gating.selected[i].clone(),
                gate_weights: pass.gating.selected_weights(i),
            })
            .collect()
    }
}
