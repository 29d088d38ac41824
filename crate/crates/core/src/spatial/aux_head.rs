use crate::diffcore::nn::{FeedForward, Gru, Linear};
use crate::diffcore::{Graph, ModelRng, ParamId, ParamStore, Tensor, Var};

/// Autoregressive multi-horizon return head. An MLP of `[z_q; f_p]` sets
/// the initial recurrent state; the first step reads a learned start token
/// and every later step reads the previous prediction through `w_fb`.
#[derive(Clone, Debug)]
pub struct AuxHead {
    init: FeedForward,
    cell: Gru,
    start: ParamId,
    feedback: ParamId,
    out: Linear,
    pub horizons: usize,
}

impl AuxHead {
    pub fn new(store: &mut ParamStore, d_code: usize, n_priors: usize, hidden: usize, horizons: usize, rng: &mut ModelRng) -> Self {
        AuxHead {
            init: FeedForward::new(store, "aux.init", d_code + n_priors, hidden, hidden, rng),
            cell: Gru::new(store, "aux.gru", d_code, hidden, rng),
            start: store.zeros("aux.start", &[d_code]),
            feedback: store.uniform_fan_in("aux.feedback", &[1, d_code], 1, rng),
            out: Linear::new(store, "aux.out", hidden, 1, true, rng),
            horizons,
        }
    }

    /// `zq[B, d_s]`, `prior[B, P]` → `ŷ[B, N_h]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, zq: Var, prior: Var) -> Var {
        let b = g.shape(zq)[0];
        let d_code = g.shape(zq)[1];
        let cat = g.concat(&[zq, prior], 1);
        let h0 = self.init.forward(g, store, cat);
        let mut h = g.tanh(h0);
        let zeros = g.constant(Tensor::zeros(&[b, d_code]));
        let start = g.param(store, self.start);
        let mut input = g.add_row(zeros, start);
        let w_fb = g.param(store, self.feedback);
        let mut outs = Vec::with_capacity(self.horizons);
        for _ in 0..self.horizons {
            h = self.cell.step(g, store, input, h);
            let y = self.out.forward(g, store, h);
            input = g.matmul(y, w_fb);
            outs.push(y);
        }
        g.concat(&outs, 1)
    }
}

/// Mean squared error over every element.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::kernels::sigmoid;
    use crate::diffcore::Real;
    use rand::{Rng, SeedableRng};

    fn setup(horizons: usize) -> (ParamStore, AuxHead, ModelRng) {
        let mut rng = ModelRng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = AuxHead::new(&mut store, 3, 2, 4, horizons, &mut rng);
        for p in store.params_mut() {
            if p.name == "aux.start" {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        }
        (store, head, rng)
    }

    fn run(store: &ParamStore, head: &AuxHead, z: &[Real], p: &[Real]) -> Vec<Real> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::matrix(1, 3, z.to_vec()));
        let pv = g.constant(Tensor::matrix(1, 2, p.to_vec()));
        let y = head.forward(&mut g, store, zv, pv);
        g.value(y).data().to_vec()
    }

    #[test]
    fn zero_weights_emit_the_output_bias() {
        let (mut store, head, _) = setup(4);
        for p in store.params_mut() {
            let v = if p.name == "aux.out.b" { 0.3 } else { 0.0 };
            p.value.fill(v);
        }
        assert_eq!(run(&store, &head, &[1.0, 2.0, 3.0], &[0.5, -0.5]), vec![0.3; 4]);
    }

    #[test]
    fn three_steps_match_a_manual_trace() {
        let (store, head, _) = setup(3);
        let z = [0.4, -0.2, 0.9];
        let p = [0.1, -0.7];
        let got = run(&store, &head, &z, &p);

        let val = |name: &str| store.value(store.find(name).unwrap()).data().to_vec();
        let lin = |x: &[Real], w: &[Real], b: &[Real], dout: usize| -> Vec<Real> {
            (0..dout)
                .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * dout + j]).sum::<Real>())
                .collect()
        };
        let gelu = crate::diffcore::kernels::gelu;
        let cat: Vec<Real> = z.iter().chain(&p).copied().collect();
        let a = lin(&cat, &val("aux.init.l1.w"), &val("aux.init.l1.b"), 4);
        let a: Vec<Real> = a.into_iter().map(gelu).collect();
        let mut h: Vec<Real> = lin(&a, &val("aux.init.l2.w"), &val("aux.init.l2.b"), 4)
            .into_iter()
            .map(Real::tanh)
            .collect();
        let mut input = val("aux.start");
        let mut ys = Vec::new();
        for _ in 0..3 {
            let gi = lin(&input, &val("aux.gru.w_ih"), &val("aux.gru.b_ih"), 12);
            let gh = lin(&h, &val("aux.gru.w_hh"), &val("aux.gru.b_hh"), 12);
            h = (0..4)
                .map(|j| {
                    let r = sigmoid(gi[j] + gh[j]);
                    let zz = sigmoid(gi[4 + j] + gh[4 + j]);
                    let n = (gi[8 + j] + r * gh[8 + j]).tanh();
                    (1.0 - zz) * n + zz * h[j]
                })
                .collect();
            let y = lin(&h, &val("aux.out.w"), &val("aux.out.b"), 1)[0];
            input = val("aux.feedback").iter().map(|w| w * y).collect();
            ys.push(y);
        }
        for (a, b) in got.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {ys:?}");
        }
        let (s1, h1, _) = setup(1);
        assert_eq!(run(&s1, &h1, &z, &p).len(), 1);
    }
}
