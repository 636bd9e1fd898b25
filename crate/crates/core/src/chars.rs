//! Character-level word composition and the two ways of merging it with the
//! word embedding: concatenation and a per-feature sigmoid gate.

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{bilstm_run, glorot, uniform, BoundLstm, EmbeddingTable, LstmParams};

/// Range of the uniform initialization for character embeddings.
pub const CHAR_EMBEDDING_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
pub struct CharComposerParams {
    pub char_embeddings: EmbeddingTable,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// `[word_dim, 2·char_hidden]`
    pub projection: ParamId,
    pub word_dim: usize,
}

impl CharComposerParams {
    pub fn init<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        char_vocab: usize,
        oov_char: usize,
        char_dim: usize,
        char_hidden: usize,
        word_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = uniform(rng, &[char_vocab, char_dim], CHAR_EMBEDDING_INIT);
        let char_embeddings =
            EmbeddingTable::register(params, "char_embeddings", table, oov_char, true)?;
        let fwd = LstmParams::init(params, "char_lstm.fwd", char_dim, char_hidden, rng);
        let bwd = LstmParams::init(params, "char_lstm.bwd", char_dim, char_hidden, rng);
        let projection = params.add(
            "char_projection",
            glorot(rng, word_dim, 2 * char_hidden),
            true,
        );
        Ok(Self {
            char_embeddings,
            fwd,
            bwd,
            projection,
            word_dim,
        })
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<'_, T>) -> BoundComposer {
        BoundComposer {
            table: self.char_embeddings,
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
            projection: tape.param(self.projection),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundComposer {
    pub table: EmbeddingTable,
    pub fwd: BoundLstm,
    pub bwd: BoundLstm,
    pub projection: Var,
}

/// `m = tanh(W_m · [fwd_last; bwd_first])` over the character BiLSTM.
pub fn compose_word<T: Real>(
    tape: &mut Tape<'_, T>,
    composer: &BoundComposer,
    char_ids: &[usize],
) -> Result<Var> {
    if char_ids.is_empty() {
        return Err(Error::invalid("compose_word", "empty character sequence"));
    }
    let chars = char_ids
        .iter()
        .map(|&c| composer.table.lookup(tape, c))
        .collect::<Result<Vec<_>>>()?;
    let out = bilstm_run(tape, &chars, &composer.fwd, &composer.bwd)?;
    let joint = tape.concat(&[out.forward_last, out.backward_first])?;
    let m = tape.matmul(composer.projection, joint)?;
    Ok(tape.tanh(m))
}

pub fn combine_concat<T: Real>(tape: &mut Tape<'_, T>, x: Var, m: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(m) {
        return Err(Error::Shape {
            op: "combine_concat",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(m).to_vec(),
        });
    }
    tape.concat(&[x, m])
}

/// Three square `[word_dim, word_dim]` gate matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_word: ParamId,
    pub w_char: ParamId,
    pub w_out: ParamId,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init<T: Real, R: Rng>(params: &mut ParamSet<T>, dim: usize, rng: &mut R) -> Self {
        Self {
            w_word: params.add("gate.word_weights", glorot(rng, dim, dim), true),
            w_char: params.add("gate.char_weights", glorot(rng, dim, dim), true),
            w_out: params.add("gate.output_weights", glorot(rng, dim, dim), true),
            dim,
        }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<'_, T>) -> BoundAttention {
        BoundAttention {
            w_word: tape.param(self.w_word),
            w_char: tape.param(self.w_char),
            w_out: tape.param(self.w_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub w_word: Var,
    pub w_char: Var,
    pub w_out: Var,
}

/// `z = σ(W3 · tanh(W1·x + W2·m))`, `x̃ = z⊙x + (1−z)⊙m`. Returns `(x̃, z)`.
pub fn combine_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    m: Var,
    gate: &BoundAttention,
) -> Result<(Var, Var)> {
    if tape.shape(x) != tape.shape(m) {
        return Err(Error::Shape {
            op: "combine_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(m).to_vec(),
        });
    }
    let a = tape.matmul(gate.w_word, x)?;
    let b = tape.matmul(gate.w_char, m)?;
    let hidden = tape.add(a, b)?;
    let hidden = tape.tanh(hidden);
    let z = tape.matmul(gate.w_out, hidden)?;
    let z = tape.sigmoid(z);

    let zx = tape.mul(z, x)?;
    let rest = tape.one_minus(z)?;
    let rm = tape.mul(rest, m)?;
    let mixed = tape.add(zx, rm)?;
    Ok((mixed, z))
}

/// `Σ_t g_t (1 − cos(m_t, x_t))` with `g_t = 0` for OOV tokens. The word
/// embeddings enter through a stop-gradient, so this term only trains the
/// character side.
pub fn char_aux_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    m_seq: &[Var],
    x_seq: &[Var],
    oov_mask: &[bool],
) -> Result<Var> {
    if m_seq.len() != x_seq.len() || m_seq.len() != oov_mask.len() {
        return Err(Error::invalid(
            "char_aux_loss",
            format!(
                "sequence lengths differ: {} m, {} x, {} mask",
                m_seq.len(),
                x_seq.len(),
                oov_mask.len()
            ),
        ));
    }
    let mut terms = Vec::new();
    for ((&m, &x), &oov) in m_seq.iter().zip(x_seq).zip(oov_mask) {
        if oov {
            continue;
        }
        let target = tape.stop_gradient(x);
        let cos = tape.cosine_similarity(m, target)?;
        terms.push(tape.one_minus(cos)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant_vec(vec![T::zero()]));
    }
    let all = tape.concat(&terms)?;
    Ok(tape.sum(all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn composer(params: &mut ParamSet<f64>, seed: u64) -> CharComposerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = CharComposerParams::init(params, 6, 0, 3, 4, 5, &mut rng).unwrap();
        // Character embeddings large enough to make the check meaningful.
        *params.tensor_mut(c.char_embeddings.param) = uniform(&mut rng, &[6, 3], 1.0);
        c.word_dim = 5;
        c
    }

    #[test]
    fn zero_projection_gives_zero_m() {
        let mut params = ParamSet::new();
        let c = composer(&mut params, 1);
        params.tensor_mut(c.projection).data_mut().fill(0.0);
        let mut tape = Tape::with_params(&params);
        let bc = c.bind(&mut tape);
        let m = compose_word(&mut tape, &bc, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(m), &[0.0; 5]);
    }

    #[test]
    fn empty_word_rejected() {
        let mut params = ParamSet::new();
        let c = composer(&mut params, 1);
        let mut tape = Tape::with_params(&params);
        let bc = c.bind(&mut tape);
        assert!(compose_word(&mut tape, &bc, &[]).is_err());
    }

    #[test]
    fn single_char_word_matches_hand_evaluation() {
        let mut params = ParamSet::new();
        let c = composer(&mut params, 3);
        let mut tape = Tape::with_params(&params);
        let bc = c.bind(&mut tape);
        let m = compose_word(&mut tape, &bc, &[4]).unwrap();

        let emb = params.tensor(c.char_embeddings.param).row(4).to_vec();
        let step = |lp: &LstmParams| -> Vec<f64> {
            let n = lp.hidden;
            let wi = params.tensor(lp.input_weights).data();
            let b = params.tensor(lp.bias).data();
            (0..n)
                .map(|u| {
                    let pre = |gate: usize| {
                        let j = gate * n + u;
                        b[j] + emb.iter().enumerate().map(|(k, e)| e * wi[k * 4 * n + j]).sum::<f64>()
                    };
                    let c = sigmoid(pre(0)) * pre(2).tanh();
                    sigmoid(pre(3)) * c.tanh()
                })
                .collect()
        };
        let joint: Vec<f64> = step(&c.fwd).into_iter().chain(step(&c.bwd)).collect();
        let wm = params.tensor(c.projection);
        for r in 0..5 {
            let z: f64 = wm.row(r).iter().zip(&joint).map(|(w, h)| w * h).sum();
            assert!((tape.value(m)[r] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn homographs_compose_identically() {
        let mut params = ParamSet::new();
        let c = composer(&mut params, 2);
        let mut tape = Tape::with_params(&params);
        let bc = c.bind(&mut tape);
        let a = compose_word(&mut tape, &bc, &[1, 5, 2]).unwrap();
        let b = compose_word(&mut tape, &bc, &[1, 5, 2]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn concat_combiner() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant_vec(vec![1.0, 2.0]);
        let m = tape.constant_vec(vec![3.0, 4.0]);
        let c = combine_concat(&mut tape, x, m).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.constant_vec(vec![0.0, 0.0]);
        let c = combine_concat(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 0.0, 0.0]);
        let short = tape.constant_vec(vec![1.0]);
        assert!(combine_concat(&mut tape, x, short).is_err());

        let big = tape.constant_vec(vec![0.1; 300]);
        let c = combine_concat(&mut tape, big, big).unwrap();
        assert_eq!(tape.shape(c), &[600]);
    }

    fn gate_tape(w: [&[f64]; 3], dim: usize) -> (ParamSet<f64>, AttentionParams) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AttentionParams::init(&mut params, dim, &mut rng);
        for (id, w) in [a.w_word, a.w_char, a.w_out].into_iter().zip(w) {
            *params.tensor_mut(id) = Tensor::new(vec![dim, dim], w.to_vec()).unwrap();
        }
        (params, a)
    }

    #[test]
    fn zero_gate_weights_average() {
        let zero = [0.0; 4];
        let (params, a) = gate_tape([&zero, &zero, &zero], 2);
        let mut tape = Tape::with_params(&params);
        let g = a.bind(&mut tape);
        let x = tape.constant_vec(vec![1.0, -3.0]);
        let m = tape.constant_vec(vec![0.5, 5.0]);
        let (mixed, z) = combine_attention(&mut tape, x, m, &g).unwrap();
        assert_eq!(tape.value(z), &[0.5, 0.5]);
        assert_eq!(tape.value(mixed), &[0.75, 1.0]);
    }

    #[test]
    fn equal_inputs_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::<f64>::new();
        let a = AttentionParams::init(&mut params, 3, &mut rng);
        let mut tape = Tape::with_params(&params);
        let g = a.bind(&mut tape);
        let x = tape.constant_vec(vec![0.2, -0.7, 1.1]);
        let (mixed, _) = combine_attention(&mut tape, x, x, &g).unwrap();
        for (a, b) in tape.value(mixed).iter().zip([0.2, -0.7, 1.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_matches_hand_evaluation() {
        let w1 = [0.3, -0.2, 0.5, 0.1, 0.4, -0.6, -0.3, 0.2, 0.7];
        let w2 = [-0.5, 0.2, 0.1, 0.3, -0.1, 0.4, 0.6, -0.2, 0.05];
        let w3 = [1.0, -0.5, 0.25, 0.2, 0.8, -0.4, -0.7, 0.3, 0.9];
        let x = [0.4, -0.9, 0.3];
        let m = [-0.2, 0.6, 0.8];
        let (params, a) = gate_tape([&w1, &w2, &w3], 3);
        let mut tape = Tape::with_params(&params);
        let g = a.bind(&mut tape);
        let xv = tape.constant_vec(x.to_vec());
        let mv = tape.constant_vec(m.to_vec());
        let (mixed, z) = combine_attention(&mut tape, xv, mv, &g).unwrap();

        let mv3 = |w: &[f64], v: &[f64]| -> Vec<f64> {
            (0..3).map(|r| (0..3).map(|k| w[r * 3 + k] * v[k]).sum()).collect()
        };
        let h: Vec<f64> = mv3(&w1, &x)
            .iter()
            .zip(mv3(&w2, &m))
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let zz: Vec<f64> = mv3(&w3, &h).into_iter().map(sigmoid).collect();
        for i in 0..3 {
            assert!((tape.value(z)[i] - zz[i]).abs() < 1e-14);
            let e = zz[i] * x[i] + (1.0 - zz[i]) * m[i];
            assert!((tape.value(mixed)[i] - e).abs() < 1e-14);
            assert!(tape.value(z)[i] > 0.0 && tape.value(z)[i] < 1.0);
        }
    }

    #[test]
    fn aux_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let x1 = tape.leaf(Tensor::vector(vec![0.3, -0.4]));
        let x2 = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let l = char_aux_loss(&mut tape, &[x1, x2], &[x1, x2], &[false, false]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-7);

        let m1 = tape.leaf(Tensor::vector(vec![9.0, 9.0]));
        let l = char_aux_loss(&mut tape, &[m1, m1], &[x1, x2], &[true, true]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let neg = tape.scale(x2, -1.0).unwrap();
        let l = char_aux_loss(&mut tape, &[m1, neg], &[x1, x2], &[true, false]).unwrap();
        assert!((tape.scalar(l) - 2.0).abs() < 1e-7);

        assert!(char_aux_loss(&mut tape, &[m1], &[x1, x2], &[true, false]).is_err());
    }

    #[test]
    fn aux_loss_does_not_reach_word_side() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.4, 0.9]));
        let m = tape.leaf(Tensor::vector(vec![0.5, 0.1, -0.2]));
        let l = char_aux_loss(&mut tape, &[m], &[x], &[false]).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.of(x).is_none());
        assert!(g.of(m).unwrap().iter().any(|&v| v != 0.0));
    }
}
