//! Layers shared by the encoder and decoder. Each takes a parameter-name
//! prefix and binds `{prefix}.w`, `{prefix}.b` and so on from the session.

use crate::autodiff::Var;
use crate::error::Result;

use super::params::Session;

/// `x W (+ b)` for `x: [n, in]`.
pub fn linear<'t>(s: &Session<'t>, prefix: &str, x: Var<'t>, bias: bool) -> Result<Var<'t>> {
    let y = x.matmul(s.param(&format!("{prefix}.w"))?)?;
    if bias {
        y.add_bias(s.param(&format!("{prefix}.b"))?)
    } else {
        Ok(y)
    }
}

/// Input half of a GRU for a whole sequence: `X W_ih + b_ih`, `[L, 3H]`.
pub fn gru_inputs<'t>(s: &Session<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(s.param(&format!("{prefix}.w_ih"))?)?
        .add_bias(s.param(&format!("{prefix}.b_ih"))?)
}

/// One GRU step from precomputed input gates `gx: [1, 3H]`, gate order
/// reset, update, candidate:
/// `r = σ(x_r + h_r)`, `z = σ(x_z + h_z)`, `n = tanh(x_n + r ⊙ h_n)`,
/// `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_step<'t>(s: &Session<'t>, prefix: &str, gx: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let hidden = h.shape()[1];
    let gh = h
        .matmul(s.param(&format!("{prefix}.w_hh"))?)?
        .add_bias(s.param(&format!("{prefix}.b_hh"))?)?;
    let part = |v: Var<'t>, i: usize| v.slice(1, i * hidden, hidden);
    let r = part(gx, 0)?.add(part(gh, 0)?)?.sigmoid();
    let z = part(gx, 1)?.add(part(gh, 1)?)?.sigmoid();
    let n = part(gx, 2)?.add(r.mul(part(gh, 2)?)?)?.tanh();
    z.one_minus().mul(n)?.add(z.mul(h)?)
}

/// Runs a GRU over every row of `x` from a zero state, forwards or
/// backwards. Returns the states in input order, `[L, H]`.
pub fn gru_sequence<'t>(
    s: &Session<'t>,
    prefix: &str,
    x: Var<'t>,
    hidden: usize,
    reverse: bool,
) -> Result<Var<'t>> {
    let gx = gru_inputs(s, prefix, x)?;
    let len = x.shape()[0];
    let mut h = s.tape.constant(crate::autodiff::Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(len);
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        h = gru_step(s, prefix, gx.row(t)?, h)?;
        states.push(h);
    }
    if reverse {
        states.reverse();
    }
    s.tape.concat(&states, 0)
}

/// Key side of an additive attention scorer, computed once per memory:
/// `M W_key`.
pub fn attention_keys<'t>(s: &Session<'t>, prefix: &str, memory: Var<'t>) -> Result<Var<'t>> {
    memory.matmul(s.param(&format!("{prefix}.w_key"))?)
}

/// Additive attention logits `v · tanh(K + q W_query + b)` for each key row.
pub fn attention_logits<'t>(
    s: &Session<'t>,
    prefix: &str,
    keys: Var<'t>,
    query: Var<'t>,
) -> Result<Var<'t>> {
    let q = query
        .matmul(s.param(&format!("{prefix}.w_query"))?)?
        .add_bias(s.param(&format!("{prefix}.b"))?)?
        .flatten();
    Ok(keys
        .add_bias(q)?
        .tanh()
        .matmul(s.param(&format!("{prefix}.v"))?)?
        .flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::params::ParamStore;

    fn gru_store(prefix: &str, input: usize, hidden: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in [
            ("w_ih", vec![input, 3 * hidden]),
            ("w_hh", vec![hidden, 3 * hidden]),
            ("b_ih", vec![3 * hidden]),
            ("b_hh", vec![3 * hidden]),
        ] {
            let full = format!("{prefix}.{name}");
            let mut t = crate::model::params::init_tensor(&full, &shape, seed);
            if shape.len() == 1 {
                t.data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| *x = 0.1 * (i as f64 - 1.0));
            }
            store.insert(full, t);
        }
        store
    }

    /// Plain scalar-loop GRU recurrence.
    fn reference_gru(store: &ParamStore, xs: &[Vec<f64>], hidden: usize) -> Vec<Vec<f64>> {
        let get = |n: &str| store.get(&format!("g.{n}")).unwrap().clone();
        let (wih, whh, bih, bhh) = (get("w_ih"), get("w_hh"), get("b_ih"), get("b_hh"));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![0.0; hidden];
        let mut out = Vec::new();
        for x in xs {
            let gate = |g: usize, j: usize| {
                let col = g * hidden + j;
                let xi: f64 = x.iter().enumerate().map(|(k, v)| v * wih.at2(k, col)).sum::<f64>() + bih.data()[col];
                let hi: f64 = h.iter().enumerate().map(|(k, v)| v * whh.at2(k, col)).sum::<f64>() + bhh.data()[col];
                (xi, hi)
            };
            let next: Vec<f64> = (0..hidden)
                .map(|j| {
                    let (xr, hr) = gate(0, j);
                    let (xz, hz) = gate(1, j);
                    let (xn, hn) = gate(2, j);
                    let r = sig(xr + hr);
                    let z = sig(xz + hz);
                    let n = (xn + r * hn).tanh();
                    (1.0 - z) * n + z * h[j]
                })
                .collect();
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let store = gru_store("g", 2, 3, 11);
        let xs = vec![vec![0.5, -1.0], vec![0.2, 0.3], vec![-0.7, 0.9]];
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let x = tape.constant(Tensor::matrix(3, 2, xs.concat()).unwrap());
        let fwd = gru_sequence(&s, "g", x, 3, false).unwrap().value();
        let expect = reference_gru(&store, &xs, 3);
        for (a, b) in fwd.data().iter().zip(expect.concat()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bwd = gru_sequence(&s, "g", x, 3, true).unwrap().value();
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut expect = reference_gru(&store, &rev, 3);
        expect.reverse();
        for (a, b) in bwd.data().iter().zip(expect.concat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let mut store = ParamStore::new();
        store.insert("g.w_ih", Tensor::zeros(&[2, 6]));
        store.insert("g.w_hh", Tensor::zeros(&[2, 6]));
        store.insert("g.b_ih", Tensor::zeros(&[6]));
        store.insert("g.b_hh", Tensor::zeros(&[6]));
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let x = tape.constant(Tensor::full(&[4, 2], 3.0));
        let h = gru_sequence(&s, "g", x, 2, false).unwrap().value();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_logits_by_hand() {
        let mut store = ParamStore::new();
        store.insert("a.w_key", Tensor::eye(2));
        store.insert("a.w_query", Tensor::eye(2));
        store.insert("a.b", Tensor::vector(vec![0.0, 0.0]));
        store.insert("a.v", Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let mem = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap());
        let q = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let keys = attention_keys(&s, "a", mem).unwrap();
        let l = attention_logits(&s, "a", keys, q).unwrap().value();
        let expect = [1.5f64.tanh() + 0.5f64.tanh(), 0.5f64.tanh() + (-0.5f64).tanh()];
        assert!((l.data()[0] - expect[0]).abs() < 1e-15);
        assert!((l.data()[1] - expect[1]).abs() < 1e-15);
    }
}
