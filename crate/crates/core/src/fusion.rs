//! Task-guided aggregation of refined combination tokens into the
//! patient-level representation `[z_task || LN(sum_c alpha_c s_c)]`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `2d x d`
    pub w1: ParamId,
    /// `d x 1`
    pub w2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub epsilon: f64,
}

/// Unnormalised score `tanh([z_task || s_c] W1) W2` (`1 x 1`).
pub fn score_combination<T: Scalar>(tape: &mut Tape<'_, T>, z_task: Var, s_c: Var, p: &FusionParams) -> Result<Var> {
    if tape.shape(z_task) != tape.shape(s_c) || tape.shape(z_task).0 != 1 {
        return Err(Error::Shape("fusion expects matching 1 x d rows".into()));
    }
    let cat = tape.concat_cols(&[z_task, s_c])?;
    let w1 = tape.param(p.w1);
    let w2 = tape.param(p.w2);
    let h = tape.matmul(cat, w1)?;
    let h = tape.tanh(h);
    tape.matmul(h, w2)
}

#[derive(Debug, Clone)]
pub struct FusedOutput {
    /// Patient representation, `1 x 2d`.
    pub s_p: Var,
    /// Fusion weights over the given combinations, `1 x n`.
    pub alphas: Var,
}

/// Fuse the refined tokens of the combinations present in a sample.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, z_task: Var, refined: &[Var], p: &FusionParams) -> Result<FusedOutput> {
    if refined.is_empty() {
        return Err(Error::Empty("combination set for fusion"));
    }
    if !(p.epsilon > 0.0) {
        return Err(Error::OutOfRange(format!("fusion temperature {}", p.epsilon)));
    }
    let scores = refined
        .iter()
        .map(|&s| score_combination(tape, z_task, s, p))
        .collect::<Result<Vec<_>>>()?;
    let scores = tape.concat_cols(&scores)?;
    let alphas = tape.softmax(scores, T::lit(p.epsilon));
    let stacked = tape.concat_rows(refined)?;
    let pooled = tape.matmul(alphas, stacked)?;
    let g = tape.param(p.ln_gain);
    let b = tape.param(p.ln_bias);
    let normed = tape.layer_norm(pooled, g, b)?;
    let s_p = tape.concat_cols(&[z_task, normed])?;
    Ok(FusedOutput { s_p, alphas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::{array, Array2};

    fn params(store: &mut ParamStore<f64>, d: usize, epsilon: f64) -> FusionParams {
        FusionParams {
            w1: store.add("w1", Array2::zeros((2 * d, d))).unwrap(),
            w2: store.add("w2", Array2::zeros((d, 1))).unwrap(),
            ln_gain: store.add("g", Array2::ones((1, d))).unwrap(),
            ln_bias: store.add("b", Array2::zeros((1, d))).unwrap(),
            epsilon,
        }
    }

    #[test]
    fn zero_w2_scores_zero() {
        let mut s = ParamStore::new();
        let p = params(&mut s, 2, 1.0);
        *s.get_mut(p.w1) = Array2::ones((4, 2));
        let mut t = Tape::new(&s);
        let z = t.constant(array![[0.3, -0.7]]);
        let c = t.constant(array![[1.0, 2.0]]);
        let sc = score_combination(&mut t, z, c, &p).unwrap();
        assert_eq!(t.scalar(sc), 0.0);
    }

    #[test]
    fn hand_score() {
        let mut s = ParamStore::new();
        let p = params(&mut s, 1, 1.0);
        *s.get_mut(p.w1) = array![[0.5], [-1.0]];
        *s.get_mut(p.w2) = array![[2.0]];
        let mut t = Tape::new(&s);
        let z = t.constant(array![[1.0]]);
        let c = t.constant(array![[0.25]]);
        let sc = score_combination(&mut t, z, c, &p).unwrap();
        assert!((t.scalar(sc) - 2.0 * (0.5f64 - 0.25).tanh()).abs() < 1e-15);
    }

    #[test]
    fn single_combination_gets_all_weight() {
        let mut s = ParamStore::new();
        let p = params(&mut s, 3, 1.0);
        let mut t = Tape::new(&s);
        let z = t.constant(array![[1.0, 2.0, 3.0]]);
        let c = t.constant(array![[0.0, 1.0, 5.0]]);
        let out = fuse(&mut t, z, &[c], &p).unwrap();
        assert_eq!(t.value(out.alphas), &array![[1.0]]);
        let sp = t.value(out.s_p);
        assert_eq!(sp.dim(), (1, 6));
        assert_eq!(&sp.row(0).to_vec()[..3], &[1.0, 2.0, 3.0]);
        let fused: f64 = sp.row(0).iter().skip(3).sum();
        assert!(fused.abs() < 1e-9);
        assert!(fuse(&mut t, z, &[], &p).is_err());
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let mut s = ParamStore::new();
        let p = params(&mut s, 2, 0.5);
        let mut t = Tape::new(&s);
        let z = t.constant(array![[1.0, 2.0]]);
        let cs: Vec<Var> = (0..4).map(|i| t.constant(array![[i as f64, 1.0]])).collect();
        let out = fuse(&mut t, z, &cs, &p).unwrap();
        assert!(t.value(out.alphas).iter().all(|a| (a - 0.25).abs() < 1e-12));
    }
}
