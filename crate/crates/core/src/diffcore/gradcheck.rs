//! Central finite-difference checks against the tape gradients.

use rand::{Rng, SeedableRng};

use super::{FrozenLog, Graph, ModelRng, ParamId, ParamStore, Real, Tensor, Var};

/// Difference step for single primitives.
pub const PRIMITIVE_STEP: Real = 1e-5;
/// Difference step for whole objectives. Their loss values are larger, so
/// rounding at the primitive step would swamp gradients near the 1e-6 floor.
pub const OBJECTIVE_STEP: Real = 1e-3;

/// Outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: Real,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error with a small absolute floor on the denominator so that
/// gradients which are zero up to rounding compare absolutely.
pub fn rel_err(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn eval(store: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var, log: &FrozenLog) -> Real {
    let mut g = Graph::replaying(log.clone());
    let loss = build(&mut g, store);
    g.value(loss).item()
}

/// Compares the tape gradient of the scalar built by `build` against the
/// fourth-order central difference with step `h` for every scalar in `store` (or at most
/// `max_per_param` evenly spaced entries of each array).
///
/// Stop-gradient values and discrete choices are frozen at the base point, so
/// the probed function is the surrogate whose derivative the tape computes.
pub fn check_params(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
    h: Real,
    max_per_param: usize,
) -> GradCheck {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward_into(loss, store);
    let log = g.into_frozen_log();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let step = (n / max_per_param.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let analytic = store.grad(id).data()[j];
            let orig = store.value(id).data()[j];
            let mut at = |x: Real| {
                store.value_mut(id).data_mut()[j] = x;
                eval(store, build, &log)
            };
            let (f1, f2) = (at(orig + h) - at(orig - h), at(orig + 2.0 * h) - at(orig - 2.0 * h));
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (8.0 * f1 - f2) / (12.0 * h);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = format!(
                    "{}[{j}] analytic {analytic:e} numeric {numeric:e}",
                    store.iter().nth(id.index()).unwrap().name
                );
            }
        }
    }
    report
}

fn rand_tensor<R: Rng>(r: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Checks a single primitive: inputs of the given shapes become random
/// parameters, and the output is reduced against a fixed random projection so
/// every output entry carries a distinct upstream gradient.
pub fn check_op(shapes: &[&[usize]], op: &dyn Fn(&mut Graph, &[Var]) -> Var, seed: u64) -> GradCheck {
    let mut r = ModelRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), rand_tensor(&mut r, s)))
        .collect();
    let build = |g: &mut Graph, s: &ParamStore| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = op(g, &vars);
        let mut pr = ModelRng::seed_from_u64(seed ^ 0x5eed);
        let w = rand_tensor(&mut pr, g.shape(out));
        let w = g.constant(w);
        let p = g.mul(out, w);
        g.sum(p)
    };
    check_params(&mut store, &build, PRIMITIVE_STEP, usize::MAX)
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

/// Finite-difference check of every tape primitive on small random inputs.
pub fn primitive_suite() -> Vec<(&'static str, GradCheck)> {
    let mask = vec![true, false, true, true, false, true, false, false];
    let cases: Vec<OpCase> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![vec![2, 3, 4], vec![4]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("mul_row", vec![vec![2, 3, 4], vec![4]], Box::new(|g, v| g.mul_row(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![5]], Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        ("sigmoid", vec![vec![6]], Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", vec![vec![6]], Box::new(|g, v| g.tanh(v[0]))),
        ("gelu", vec![vec![6]], Box::new(|g, v| g.gelu(v[0]))),
        ("softplus", vec![vec![6]], Box::new(|g, v| g.softplus(v[0]))),
        ("exp", vec![vec![6]], Box::new(|g, v| g.exp(v[0]))),
        ("square", vec![vec![6]], Box::new(|g, v| g.square(v[0]))),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|g, v| g.bmm(v[0], v[1], false))),
        ("bmm_t", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|g, v| g.bmm(v[0], v[1], true))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| g.softmax(v[0]))),
        (
            "masked_softmax",
            vec![vec![2, 4]],
            Box::new(move |g, v| g.masked_softmax(v[0], &mask)),
        ),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "cross_entropy",
            vec![vec![3, 4]],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 3, 0])),
        ),
        ("reshape", vec![vec![2, 3, 4]], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        (
            "concat",
            vec![vec![2, 3, 4], vec![2, 2, 4]],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", vec![vec![2, 5, 3]], Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        (
            "gather_rows",
            vec![vec![4, 3]],
            Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ),
        (
            "scatter_rows",
            vec![vec![3, 2]],
            Box::new(|g, v| g.scatter_rows(v[0], &[4, 0, 2], 5)),
        ),
        ("split_heads", vec![vec![2, 3, 4]], Box::new(|g, v| g.split_heads(v[0], 2))),
        ("merge_heads", vec![vec![4, 3, 2]], Box::new(|g, v| g.merge_heads(v[0], 2))),
        ("rope", vec![vec![2, 5, 4]], Box::new(|g, v| g.rope(v[0]))),
        (
            "sum",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let s = g.sum(v[0]);
                g.square(s)
            }),
        ),
        (
            "mean",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let s = g.mean(v[0]);
                g.square(s)
            }),
        ),
        ("sum_last", vec![vec![3, 4]], Box::new(|g, v| g.sum_last(v[0]))),
        ("row_norm", vec![vec![3, 4]], Box::new(|g, v| g.row_norm(v[0]))),
        ("row_dot", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.row_dot(v[0], v[1]))),
        ("row_scale", vec![vec![3, 4], vec![3]], Box::new(|g, v| g.row_scale(v[0], v[1]))),
        ("pair_dist", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| g.pair_dist(v[0], v[1]))),
        (
            "straight_through",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|g, v| {
                let st = g.straight_through(v[0], v[1]);
                g.square(st)
            }),
        ),
        (
            "detach",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let d = g.detach(v[0]);
                g.mul(v[0], d)
            }),
        ),
        (
            "conv_transpose1d",
            vec![vec![2, 3, 4], vec![4, 4, 5]],
            Box::new(|g, v| g.conv_transpose1d(v[0], v[1])),
        ),
        (
            "film",
            vec![vec![2, 3, 4], vec![2, 4], vec![2, 4]],
            Box::new(|g, v| g.film(v[0], v[1], v[2])),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, op))| {
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            (name, check_op(&refs, op.as_ref(), 100 + i as u64))
        })
        .collect()
}
