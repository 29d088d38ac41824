use crate::diffcore::Real;

/// Indices of the `k` largest entries, largest first; ties go to the lower
/// index.
pub fn top_k(logits: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax restricted to the top `k` logits; every other weight is zero.
pub fn sparse_softmax(logits: &[Real], k: usize) -> (Vec<usize>, Vec<Real>) {
    let sel = top_k(logits, k);
    let max = logits[sel[0]];
    let mut w = vec![0.0; logits.len()];
    let mut s = 0.0;
    for &j in &sel {
        w[j] = (logits[j] - max).exp();
        s += w[j];
    }
    w.iter_mut().for_each(|v| *v /= s);
    (sel, w)
}

/// Fraction of stocks routed to each expert, `f_j`.
pub fn routing_fractions(selected: &[Vec<usize>], n_experts: usize) -> Vec<Real> {
    let mut f = vec![0.0; n_experts];
    for s in selected {
        for &j in s {
            f[j] += 1.0;
        }
    }
    let n = selected.len().max(1) as Real;
    f.iter_mut().for_each(|v| *v /= n);
    f
}

/// `M_e Σ_j f_j P_j` with `P_j` the mean gate weight of expert `j` over
/// the rows of `weights[n, M_e]`.
pub fn load_balance(selected: &[Vec<usize>], weights: &[Real], n_experts: usize) -> Real {
    let f = routing_fractions(selected, n_experts);
    let n = selected.len().max(1) as Real;
    let mut p = vec![0.0; n_experts];
    for row in weights.chunks(n_experts) {
        p.iter_mut().zip(row).for_each(|(a, b)| *a += b / n);
    }
    n_experts as Real * f.iter().zip(&p).map(|(a, b)| a * b).sum::<Real>()
}

/// Per-stock routing of one cross-section.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingOutput {
    pub n_experts: usize,
    /// Selected experts per stock, highest weight first.
    pub selected: Vec<Vec<usize>>,
    /// Sparse gate weights, `[n, M_e]`.
    pub weights: Vec<Real>,
    pub mu: Vec<Real>,
    pub sigma: Vec<Real>,
}

impl GatingOutput {
    pub fn row(&self, i: usize) -> &[Real] {
        &self.weights[i * self.n_experts..(i + 1) * self.n_experts]
    }

    /// Weights of stock `i`'s selected experts, in selection order.
    pub fn selected_weights(&self, i: usize) -> Vec<Real> {
        self.selected[i].iter().map(|&j| self.row(i)[j]).collect()
    }
}
