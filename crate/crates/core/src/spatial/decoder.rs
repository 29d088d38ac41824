use crate::diffcore::nn::Linear;
use crate::diffcore::{Graph, ModelRng, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Transposed-convolution kernel width of the skip path.
pub const SKIP_KERNEL: usize = 4;

/// Number of length-doubling blocks taking `t0` to `t`.
pub fn upsample_blocks(t: usize, t0: usize) -> Result<usize> {
    if t0 == 0 || t % t0 != 0 || !(t / t0).is_power_of_two() {
        return Err(Error::Config(format!(
            "decoder needs lookback / base length to be a power of two, got {t} / {t0}"
        )));
    }
    Ok((t / t0).trailing_zeros() as usize)
}

#[derive(Clone, Debug)]
struct UpBlock {
    expand: Linear,
    film: Linear,
    skip: ParamId,
}

/// FiLM-conditioned multi-resolution decoder. Works channels-last: a code
/// becomes `[B, T0, H]`, each block doubles the length, and a position-wise
/// projection maps `H` to the feature width.
#[derive(Clone, Debug)]
pub struct Decoder {
    input: Linear,
    blocks: Vec<UpBlock>,
    output: Linear,
    hidden: usize,
    t0: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        d_code: usize,
        n_priors: usize,
        hidden: usize,
        t0: usize,
        t: usize,
        n_features: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let k_u = upsample_blocks(t, t0)?;
        let input = Linear::new(store, "dec.in", d_code, hidden * t0, true, rng);
        let blocks = (0..k_u)
            .map(|b| UpBlock {
                expand: Linear::new(store, &format!("dec.up{b}.expand"), hidden, 2 * hidden, true, rng),
                film: Linear::new(store, &format!("dec.up{b}.film"), n_priors, 2 * hidden, true, rng),
                skip: store.uniform_fan_in(
                    format!("dec.up{b}.skip"),
                    &[SKIP_KERNEL, hidden, hidden],
                    hidden * SKIP_KERNEL / 2,
                    rng,
                ),
            })
            .collect();
        let output = Linear::new(store, "dec.out", hidden, n_features, true, rng);
        Ok(Decoder {
            input,
            blocks,
            output,
            hidden,
            t0,
        })
    }

    /// `zq[B, d_s]`, `prior[B, P]` → `x̂[B, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, zq: Var, prior: Var) -> Var {
        let b = g.shape(zq)[0];
        let h = self.hidden;
        let x = self.input.forward(g, store, zq);
        let x = g.gelu(x);
        let mut x = g.reshape(x, &[b, self.t0, h]);
        let mut len = self.t0;
        for blk in &self.blocks {
            let e = blk.expand.forward(g, store, x);
            let e = g.gelu(e);
            // sub-pixel shuffle: [B, L, 2H] row-major is [B, 2L, H]
            let up = g.reshape(e, &[b, 2 * len, h]);
            let gb = blk.film.forward(g, store, prior);
            let gamma = g.slice(gb, 1, 0, h);
            let beta = g.slice(gb, 1, h, h);
            let up = g.film(up, gamma, beta);
            let w = g.param(store, blk.skip);
            let skip = g.conv_transpose1d(x, w);
            x = g.add(up, skip);
            len *= 2;
        }
        self.output.forward(g, store, x)
    }
}

/// Per-sample squared reconstruction error summed over `T × C`, averaged
/// over the batch.
pub fn recon_loss(g: &mut Graph, x: Var, x_hat: Var) -> Var {
    let b = g.shape(x)[0] as Real;
    let d = g.sub(x, x_hat);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / b)
}

/// Stacks one vector into `n` identical rows.
pub fn broadcast_rows(g: &mut Graph, v: &[Real], n: usize) -> Var {
    let mut data = Vec::with_capacity(n * v.len());
    for _ in 0..n {
        data.extend_from_slice(v);
    }
    g.constant(Tensor::matrix(n, v.len(), data))
}
