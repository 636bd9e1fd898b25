//! Embedding lookup, LSTM cell, bidirectional runner, and the narrow tanh
//! hidden layer.

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform Glorot initialization, range `±sqrt(6 / (rows + cols))`.
pub fn glorot<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], bound)
}

pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub rows: usize,
    pub dim: usize,
    pub oov_row: usize,
}

impl EmbeddingTable {
    pub fn register<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        matrix: Tensor<T>,
        oov_row: usize,
        trainable: bool,
    ) -> Result<Self> {
        let &[rows, dim] = matrix.shape() else {
            return Err(Error::invalid("embedding", "table must be 2-D"));
        };
        if oov_row >= rows {
            return Err(Error::invalid(
                "embedding",
                format!("oov row {oov_row} outside table of {rows} rows"),
            ));
        }
        let param = params.add(name, matrix, trainable);
        Ok(Self {
            param,
            rows,
            dim,
            oov_row,
        })
    }

    pub fn lookup<T: Real>(&self, tape: &mut Tape<'_, T>, id: usize) -> Result<Var> {
        if id >= self.rows {
            return Err(Error::invalid(
                "embedding_lookup",
                format!("id {id} outside vocabulary of {}", self.rows),
            ));
        }
        let table = tape.param(self.param);
        tape.pick_row(table, id)
    }
}

/// Packed LSTM weights. Gate blocks along the `4·hidden` axis are ordered
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

impl LstmParams {
    /// Glorot weights, forget-gate bias 1, remaining biases 0.
    pub fn init<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wi = glorot(rng, input_dim, 4 * hidden);
        let wr = glorot(rng, hidden, 4 * hidden);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(T::of(FORGET_BIAS_INIT));
        Self {
            input_weights: params.add(format!("{prefix}.input_weights"), wi, true),
            recurrent_weights: params.add(format!("{prefix}.recurrent_weights"), wr, true),
            bias: params.add(format!("{prefix}.bias"), b, true),
            input_dim,
            hidden,
        }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<'_, T>) -> BoundLstm {
        BoundLstm {
            wi: tape.param(self.input_weights),
            wr: tape.param(self.recurrent_weights),
            b: tape.param(self.bias),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

/// LSTM weights registered on a particular tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub wi: Var,
    pub wr: Var,
    pub b: Var,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BoundLstm {
    pub fn zero_state<T: Real>(&self, tape: &mut Tape<'_, T>) -> (Var, Var) {
        let h = tape.constant_vec(vec![T::zero(); self.hidden]);
        let c = tape.constant_vec(vec![T::zero(); self.hidden]);
        (h, c)
    }

    /// One step of the standard (non-peephole) cell:
    /// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let n = self.hidden;
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::Shape {
                op: "lstm_step",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        if tape.shape(h_prev) != [n] || tape.shape(c_prev) != [n] {
            return Err(Error::Shape {
                op: "lstm_step",
                lhs: tape.shape(h_prev).to_vec(),
                rhs: vec![n],
            });
        }
        let xw = tape.matmul(x, self.wi)?;
        let hw = tape.matmul(h_prev, self.wr)?;
        let pre = tape.add(xw, hw)?;
        let pre = tape.add(pre, self.b)?;

        let i = tape.slice(pre, 0, n)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(pre, n, n)?;
        let f = tape.sigmoid(f);
        let g = tape.slice(pre, 2 * n, n)?;
        let g = tape.tanh(g);
        let o = tape.slice(pre, 3 * n, n)?;
        let o = tape.sigmoid(o);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs over `inputs` from zero state, left to right, returning every
    /// hidden state.
    pub fn run<T: Real>(&self, tape: &mut Tape<'_, T>, inputs: &[Var]) -> Result<Vec<Var>> {
        let (mut h, mut c) = self.zero_state(tape);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.step(tape, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// `[forward_t; backward_t]` for each position.
    pub per_step: Vec<Var>,
    /// Forward state after the last input.
    pub forward_last: Var,
    /// Backward state after reading back to the first input.
    pub backward_first: Var,
}

pub fn bilstm_run<T: Real>(
    tape: &mut Tape<'_, T>,
    inputs: &[Var],
    fwd: &BoundLstm,
    bwd: &BoundLstm,
) -> Result<BiLstmOutput> {
    if inputs.is_empty() {
        return Err(Error::invalid("bilstm_run", "empty input sequence"));
    }
    if fwd.hidden != bwd.hidden {
        return Err(Error::invalid(
            "bilstm_run",
            format!("hidden sizes differ: {} vs {}", fwd.hidden, bwd.hidden),
        ));
    }
    let forward = fwd.run(tape, inputs)?;
    let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
    let mut backward = bwd.run(tape, &reversed)?;
    backward.reverse();

    let per_step = forward
        .iter()
        .zip(&backward)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiLstmOutput {
        per_step,
        forward_last: *forward.last().unwrap(),
        backward_first: backward[0],
    })
}

/// `tanh(W · h)`, no bias.
pub fn dense_tanh<T: Real>(tape: &mut Tape<'_, T>, h: Var, weights: Var) -> Result<Var> {
    let z = tape.matmul(weights, h)?;
    Ok(tape.tanh(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm_with(
        params: &mut ParamSet<f64>,
        input_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LstmParams::init(params, "lstm", input_dim, hidden, &mut rng)
    }

    /// Plain-array LSTM cell, independent of the tape.
    fn reference_step(
        p: &ParamSet<f64>,
        lp: &LstmParams,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let n = lp.hidden;
        let wi = p.tensor(lp.input_weights).data();
        let wr = p.tensor(lp.recurrent_weights).data();
        let b = p.tensor(lp.bias).data();
        let mut pre = b.to_vec();
        for (j, v) in pre.iter_mut().enumerate() {
            for (k, xk) in x.iter().enumerate() {
                *v += xk * wi[k * 4 * n + j];
            }
            for (k, hk) in h.iter().enumerate() {
                *v += hk * wr[k * 4 * n + j];
            }
        }
        let mut h2 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for u in 0..n {
            let i = sigmoid(pre[u]);
            let f = sigmoid(pre[n + u]);
            let g = pre[2 * n + u].tanh();
            let o = sigmoid(pre[3 * n + u]);
            c2[u] = f * c[u] + i * g;
            h2[u] = o * c2[u].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn identity_table_lookup() {
        let mut params = ParamSet::<f64>::new();
        let m = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let table = EmbeddingTable::register(&mut params, "emb", m, 0, true).unwrap();
        let mut tape = Tape::with_params(&params);
        let r = table.lookup(&mut tape, 1).unwrap();
        assert_eq!(tape.value(r), &[0.0, 1.0, 0.0]);
        assert!(table.lookup(&mut tape, 3).is_err());
    }

    #[test]
    fn lookup_gradient_hits_only_that_row() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table =
            EmbeddingTable::register(&mut params, "emb", uniform(&mut rng, &[3, 2], 1.0), 0, true)
                .unwrap();
        let mut tape = Tape::with_params(&params);
        let a = table.lookup(&mut tape, 0).unwrap();
        let b = table.lookup(&mut tape, 0).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let sa = tape.sum(a);
        let g = tape.backward(sa).unwrap();
        assert_eq!(g.param(table.param).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        let mut tape = Tape::with_params(&params);
        let a = table.lookup(&mut tape, 0).unwrap();
        let b = table.lookup(&mut tape, 0).unwrap();
        let ab = tape.add(a, b).unwrap();
        let s = tape.sum(ab);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(table.param).unwrap(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oov_row_must_be_in_table() {
        let mut params = ParamSet::<f64>::new();
        assert!(EmbeddingTable::register(&mut params, "e", Tensor::zeros(&[2, 2]), 2, true).is_err());
    }

    #[test]
    fn zero_cell_stays_zero() {
        let mut params = ParamSet::<f64>::new();
        let lp = lstm_with(&mut params, 2, 3, 0);
        for id in [lp.input_weights, lp.recurrent_weights, lp.bias] {
            params.tensor_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::with_params(&params);
        let cell = lp.bind(&mut tape);
        let x = tape.constant_vec(vec![0.0, 0.0]);
        let (h0, c0) = cell.zero_state(&mut tape);
        let (h, c) = cell.step(&mut tape, x, h0, c0).unwrap();
        assert_eq!(tape.value(h), &[0.0; 3]);
        assert_eq!(tape.value(c), &[0.0; 3]);
    }

    #[test]
    fn forget_bias_keeps_memory() {
        let mut params = ParamSet::<f64>::new();
        let lp = lstm_with(&mut params, 1, 1, 0);
        params.tensor_mut(lp.input_weights).data_mut().fill(0.0);
        params.tensor_mut(lp.recurrent_weights).data_mut().fill(0.0);
        assert_eq!(params.tensor(lp.bias).data(), &[0.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::with_params(&params);
        let cell = lp.bind(&mut tape);
        let x = tape.constant_vec(vec![0.0]);
        let h0 = tape.constant_vec(vec![0.0]);
        let c0 = tape.constant_vec(vec![1.0]);
        let (h, c) = cell.step(&mut tape, x, h0, c0).unwrap();
        let expect_c = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.scalar(c) - expect_c).abs() < 1e-12);
        assert!((tape.scalar(c) - 0.7311).abs() < 1e-4);
        assert!((tape.scalar(h) - 0.5 * expect_c.tanh()).abs() < 1e-12);
        assert!((tape.scalar(h) - 0.3118).abs() < 1e-4);
    }

    #[test]
    fn step_rejects_wrong_dims() {
        let mut params = ParamSet::<f64>::new();
        let lp = lstm_with(&mut params, 2, 3, 0);
        let mut tape = Tape::with_params(&params);
        let cell = lp.bind(&mut tape);
        let x = tape.constant_vec(vec![0.0; 3]);
        let (h, c) = cell.zero_state(&mut tape);
        assert!(cell.step(&mut tape, x, h, c).is_err());
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let lp = lstm_with(&mut params, 3, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = uniform(&mut rng, &[3], 1.0);
        let h0: Tensor<f64> = uniform(&mut rng, &[4], 0.5);
        let c0: Tensor<f64> = uniform(&mut rng, &[4], 0.5);
        let ids = [lp.input_weights, lp.recurrent_weights, lp.bias];
        let report = finite_difference_check(&mut params, &ids, 1e-5, |tape| {
            let cell = lp.bind(tape);
            let xv = tape.constant(x.clone());
            let hv = tape.constant(h0.clone());
            let cv = tape.constant(c0.clone());
            let (h, _) = cell.step(tape, xv, hv, cv)?;
            Ok(tape.sum(h))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    #[test]
    fn bilstm_single_token() {
        let mut params = ParamSet::<f64>::new();
        let f = lstm_with(&mut params, 2, 3, 1);
        let mut p2 = ParamSet::new();
        let b = lstm_with(&mut p2, 2, 3, 2);
        let b = LstmParams {
            input_weights: params.add("b.wi", p2.tensor(b.input_weights).clone(), true),
            recurrent_weights: params.add("b.wr", p2.tensor(b.recurrent_weights).clone(), true),
            bias: params.add("b.b", p2.tensor(b.bias).clone(), true),
            ..b
        };
        let mut tape = Tape::with_params(&params);
        let (fb, bb) = (f.bind(&mut tape), b.bind(&mut tape));
        let x = tape.constant_vec(vec![0.3, -0.8]);
        let out = bilstm_run(&mut tape, &[x], &fb, &bb).unwrap();
        assert_eq!(out.per_step.len(), 1);
        let (hf, _) = reference_step(&params, &f, &[0.3, -0.8], &[0.0; 3], &[0.0; 3]);
        let (hb, _) = reference_step(&params, &b, &[0.3, -0.8], &[0.0; 3], &[0.0; 3]);
        let expect: Vec<f64> = hf.iter().chain(&hb).copied().collect();
        let got = tape.value(out.per_step[0]);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(tape.value(out.forward_last), &got[..3]);
        assert_eq!(tape.value(out.backward_first), &got[3..]);
        assert!(bilstm_run(&mut tape, &[], &fb, &bb).is_err());
    }

    #[test]
    fn bilstm_matches_reference_loop() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = LstmParams::init(&mut params, "f", 2, 3, &mut rng);
        let b = LstmParams::init(&mut params, "b", 2, 3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| uniform::<f64, _>(&mut rng, &[2], 1.0).data().to_vec())
            .collect();

        let mut fwd = Vec::new();
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for x in &xs {
            (h, c) = reference_step(&params, &f, x, &h, &c);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); 3];
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in (0..3).rev() {
            (h, c) = reference_step(&params, &b, &xs[t], &h, &c);
            bwd[t] = h.clone();
        }

        let mut tape = Tape::with_params(&params);
        let (fb, bb) = (f.bind(&mut tape), b.bind(&mut tape));
        let inputs: Vec<Var> = xs.iter().map(|x| tape.constant_vec(x.clone())).collect();
        let out = bilstm_run(&mut tape, &inputs, &fb, &bb).unwrap();
        for t in 0..3 {
            let expect: Vec<f64> = fwd[t].iter().chain(&bwd[t]).copied().collect();
            for (g, e) in tape.value(out.per_step[t]).iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LstmParams::init(&mut params, "f", 2, 3, &mut rng);
        let b = LstmParams::init(&mut params, "b", 2, 3, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut rng, &[2], 1.0)).collect();

        let mut tape = Tape::with_params(&params);
        let (fb, bb) = (f.bind(&mut tape), b.bind(&mut tape));
        let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let rev: Vec<Var> = inputs.iter().rev().copied().collect();
        let orig = bilstm_run(&mut tape, &inputs, &fb, &bb).unwrap();
        let swapped = bilstm_run(&mut tape, &rev, &bb, &fb).unwrap();
        let n = inputs.len();
        for t in 0..n {
            let o = tape.value(orig.per_step[t]).to_vec();
            let s = tape.value(swapped.per_step[n - 1 - t]).to_vec();
            assert_eq!(&s[..3], &o[3..]);
            assert_eq!(&s[3..], &o[..3]);
        }
    }

    #[test]
    fn dense_tanh_matches_direct_evaluation() {
        let mut tape = Tape::<f64>::new();
        let w = [0.5, -1.0, 0.25, 2.0, -0.3, 0.1, 0.7, -0.6];
        let h = [0.2, -0.4, 0.9, 0.1];
        let wv = tape.constant(Tensor::new(vec![2, 4], w.to_vec()).unwrap());
        let hv = tape.constant_vec(h.to_vec());
        let d = dense_tanh(&mut tape, hv, wv).unwrap();
        for r in 0..2 {
            let z: f64 = (0..4).map(|k| w[r * 4 + k] * h[k]).sum();
            assert!((tape.value(d)[r] - z.tanh()).abs() < 1e-15);
        }
        let zero = tape.constant(Tensor::zeros(&[2, 4]));
        let d0 = dense_tanh(&mut tape, hv, zero).unwrap();
        assert_eq!(tape.value(d0), &[0.0, 0.0]);
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(dense_tanh(&mut tape, hv, bad).is_err());
    }

    #[test]
    fn full_stack_gradient_check() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let emb = EmbeddingTable::register(
            &mut params,
            "emb",
            uniform(&mut rng, &[5, 3], 0.5),
            0,
            true,
        )
        .unwrap();
        let f = LstmParams::init(&mut params, "f", 3, 4, &mut rng);
        let b = LstmParams::init(&mut params, "b", 3, 4, &mut rng);
        let wd = params.add("wd", glorot(&mut rng, 2, 8), true);
        let ids: Vec<_> = params.ids().collect();
        let report = finite_difference_check(&mut params, &ids, 1e-5, |tape| {
            let (fb, bb) = (f.bind(tape), b.bind(tape));
            let xs = [1, 3, 1, 4]
                .iter()
                .map(|&i| emb.lookup(tape, i))
                .collect::<Result<Vec<_>>>()?;
            let out = bilstm_run(tape, &xs, &fb, &bb)?;
            let w = tape.param(wd);
            let ds = out
                .per_step
                .iter()
                .map(|&h| dense_tanh(tape, h, w))
                .collect::<Result<Vec<_>>>()?;
            let all = tape.concat(&ds)?;
            Ok(tape.sum(all))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(25))]

            #[test]
            fn per_step_length_and_bounded_output(len in 1usize..=50, seed in any::<u64>()) {
                let mut params = ParamSet::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = LstmParams::init(&mut params, "f", 2, 3, &mut rng);
                let b = LstmParams::init(&mut params, "b", 2, 3, &mut rng);
                let mut tape = Tape::with_params(&params);
                let (fb, bb) = (f.bind(&mut tape), b.bind(&mut tape));
                let xs: Vec<Var> = (0..len)
                    .map(|_| tape.constant(uniform(&mut rng, &[2], 3.0)))
                    .collect();
                let out = bilstm_run(&mut tape, &xs, &fb, &bb).unwrap();
                prop_assert_eq!(out.per_step.len(), len);
                for &h in &out.per_step {
                    prop_assert_eq!(tape.value(h).len(), 6);
                    prop_assert!(tape.value(h).iter().all(|v| v.abs() < 1.0));
                }
            }

            #[test]
            fn init_is_seed_deterministic(seed in any::<u64>()) {
                let mk = || {
                    let mut params = ParamSet::<f32>::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    LstmParams::init(&mut params, "f", 3, 2, &mut rng);
                    params
                };
                prop_assert_eq!(mk(), mk());
            }
        }
    }
}
