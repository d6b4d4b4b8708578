//! Central finite-difference verification of analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Seeded uniform(-1, 1) tensor with values in `(-1e-3, 1e-3)` rejected so
/// that no input sits on a relu kink.
pub fn random_input(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("dims match data")
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", t.dims())));
    }
    Ok(t.data()[0])
}

/// Checks every element of every input. `f` maps the bound inputs to a
/// scalar. Returns the maximum of `|a - n| / max(1, |a| + |n|)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Model-level check: compares gradients of up to `per_tensor` seeded
/// elements of every trainable weight and of every input tensor.
pub fn grad_check_model<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let run = |st: &ParamStore<f64>, xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Option<(ParamStore<f64>, Vec<Vec<f64>>)>)> {
        let mut st = st.clone();
        let mut g = Graph::new();
        let bound = st.bind(&mut g)?;
        let vars = xs.iter().map(|x| g.leaf(x.clone(), grads)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &mut st, &bound, &vars)?;
        let value = scalar_of(&g, out)?;
        if !grads {
            return Ok((value, None));
        }
        g.backward(out)?;
        st.zero_grads();
        st.accumulate_grads(&g, &bound);
        let input_grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
            .collect();
        Ok((value, Some((st, input_grads))))
    };

    let (_, analytic) = run(store, inputs, true)?;
    let (with_grads, input_grads) = analytic.expect("gradients requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        }
    };

    let mut worst = 0.0f64;
    let trainable: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    for (id, n) in trainable {
        for j in pick(n) {
            let mut st = store.clone();
            let orig = st.value(id).data()[j];
            st.get_mut(id).value.data_mut()[j] = orig + STEP;
            let (plus, _) = run(&st, inputs, false)?;
            st.get_mut(id).value.data_mut()[j] = orig - STEP;
            let (minus, _) = run(&st, inputs, false)?;
            let a = with_grads.get(id).grad[j];
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in pick(xs[i].len()) {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let (plus, _) = run(store, &xs, false)?;
            xs[i].data_mut()[j] = orig - STEP;
            let (minus, _) = run(store, &xs, false)?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(input_grads[i][j], (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}
