//! Coarse-grained branch: a single-layer GRU over the scalar similarity
//! sequence.
//!
//! Gate weights act on the concatenation `[h_{t−1}, s_t]`, so each is
//! `H × (H + 1)`:
//!
//! ```text
//! z  = σ(W_z·[h, s] + b_z)
//! r  = σ(W_r·[h, s] + b_r)
//! h̃  = tanh(W_h·[r ⊙ h, s] + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CmtaError, Result};
use crate::params::{xavier_uniform, zeros_bias, ParamStore};
use crate::tensor::{Real, Tensor};

/// Parameter ids of one GRU inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub hidden: usize,
    pub w_z: usize,
    pub w_r: usize,
    pub w_h: usize,
    pub b_z: usize,
    pub b_r: usize,
    pub b_h: usize,
}

/// The GRU parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn register<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, hidden: usize, rng: &mut R) -> Self {
        let mut w = |name: &str, store: &mut ParamStore<F>| store.add(format!("gru.{name}"), xavier_uniform(hidden, hidden + 1, rng));
        let w_z = w("w_z", store);
        let w_r = w("w_r", store);
        let w_h = w("w_h", store);
        GruParams {
            hidden,
            w_z,
            w_r,
            w_h,
            b_z: store.add("gru.b_z", zeros_bias(hidden)),
            b_r: store.add("gru.b_r", zeros_bias(hidden)),
            b_h: store.add("gru.b_h", zeros_bias(hidden)),
        }
    }

    pub fn ids(&self) -> [usize; 6] {
        [self.w_z, self.w_r, self.w_h, self.b_z, self.b_r, self.b_h]
    }

    pub fn bind<'a, F: Real>(&self, tape: &mut Tape<'a, F>, store: &'a ParamStore<F>) -> GruVars {
        GruVars {
            w_z: store.bind(tape, self.w_z),
            w_r: store.bind(tape, self.w_r),
            w_h: store.bind(tape, self.w_h),
            b_z: store.bind(tape, self.b_z),
            b_r: store.bind(tape, self.b_r),
            b_h: store.bind(tape, self.b_h),
        }
    }
}

/// One recurrence step. `h_prev` is `1×H`, `s_t` is `1×1`.
pub fn gru_cell<F: Real>(tape: &mut Tape<'_, F>, h_prev: Var, s_t: Var, p: &GruVars) -> Result<Var> {
    let hs = tape.concat_cols(&[h_prev, s_t])?;

    let z = tape.matmul_bt(hs, p.w_z)?;
    let z = tape.add_row(z, p.b_z)?;
    let z = tape.sigmoid(z);

    let r = tape.matmul_bt(hs, p.w_r)?;
    let r = tape.add_row(r, p.b_r)?;
    let r = tape.sigmoid(r);

    let rh = tape.mul(r, h_prev)?;
    let rhs = tape.concat_cols(&[rh, s_t])?;
    let cand = tape.matmul_bt(rhs, p.w_h)?;
    let cand = tape.add_row(cand, p.b_h)?;
    let cand = tape.tanh(cand);

    // (1 − z) ⊙ h + z ⊙ h̃ = h + z ⊙ (h̃ − h)
    let diff = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, diff)?;
    tape.add(h_prev, step)
}

/// Folds [`gru_cell`] over a `T×1` sequence starting from `h0` (`1×H`) and
/// returns the final hidden state `h_T`.
pub fn gru_forward<F: Real>(tape: &mut Tape<'_, F>, seq: Var, p: &GruVars, h0: Var) -> Result<Var> {
    let (steps, width) = (tape.value(seq).rows(), tape.value(seq).cols());
    if steps == 0 || width != 1 {
        return Err(CmtaError::config(format!(
            "GRU input must be a non-empty T×1 sequence, got {:?}",
            tape.value(seq).shape()
        )));
    }
    let mut h = h0;
    for t in 0..steps {
        let s_t = tape.slice_rows(seq, t, 1)?;
        h = gru_cell(tape, h, s_t, p)?;
    }
    Ok(h)
}

/// Zero initial state `1×H`.
pub fn initial_state<F: Real>(tape: &mut Tape<'_, F>, hidden: usize) -> Var {
    tape.constant(Tensor::zeros(&[1, hidden]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_store(hidden: usize) -> (ParamStore<f64>, GruParams) {
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, hidden, &mut ChaCha8Rng::seed_from_u64(0));
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        (store, p)
    }

    #[test]
    fn zero_weights_halve_state() {
        let (store, p) = zero_store(3);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let s = tape.constant(Tensor::from_rows(&[vec![0.9]]).unwrap());
        let out = gru_cell(&mut tape, h, s, &vars).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.25]);

        let h0 = initial_state(&mut tape, 3);
        let out = gru_cell(&mut tape, h0, s, &vars).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_weights_repeated_halving() {
        let (store, p) = zero_store(2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store);
        let h0 = tape.constant(Tensor::from_rows(&[vec![1.0, -3.0]]).unwrap());
        let seq = tape.constant(Tensor::filled(&[5, 1], 0.4));
        let out = gru_forward(&mut tape, seq, &vars, h0).unwrap();
        let k = 0.5f64.powi(5);
        assert_eq!(tape.value(out).data(), &[k, -3.0 * k]);
    }

    #[test]
    fn single_step_equals_cell() {
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store);
        let h0 = initial_state(&mut tape, 4);
        let seq = tape.constant(Tensor::from_rows(&[vec![0.37]]).unwrap());
        let a = gru_forward(&mut tape, seq, &vars, h0).unwrap();
        let b = gru_cell(&mut tape, h0, seq, &vars).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn empty_or_wide_sequence_rejected() {
        let (store, p) = zero_store(2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store);
        let h0 = initial_state(&mut tape, 2);
        let wide = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(gru_forward(&mut tape, wide, &vars, h0).is_err());
    }

    #[test]
    fn gates_and_state_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, 6, &mut rng);
        // Scale weights up to stress saturation.
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 4.0);
        }
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store);
        let h0 = tape.constant(Tensor::from_rows(&[vec![0.3, -0.8, 0.1, 0.0, 0.5, -0.2]]).unwrap());
        let seq = tape.constant(Tensor::new(vec![8, 1], (0..8).map(|i| (i as f64).cos()).collect()).unwrap());
        let out = gru_forward(&mut tape, seq, &vars, h0).unwrap();
        assert!(tape.value(out).max_abs() <= 1.0);
        assert!(sigmoid(-50.0f64) > 0.0);
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::register(&mut store, 3, &mut rng);
        let params: Vec<Tensor<f64>> = p.ids().iter().map(|&i| store.get(i).clone()).collect();
        let seq = Tensor::new(vec![8, 1], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let err = grad_check(&params, 1e-5, |tape, v| {
            let vars = GruVars {
                w_z: v[0],
                w_r: v[1],
                w_h: v[2],
                b_z: v[3],
                b_r: v[4],
                b_h: v[5],
            };
            let s = tape.constant(seq.clone());
            let h0 = initial_state(tape, 3);
            let h = gru_forward(tape, s, &vars, h0)?;
            let sq = tape.mul(h, h)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
