//! Task/modality-aware mixture of experts.
//!
//! The router scores experts from both the combination token and the task
//! token, keeps the top `k` logits and softmaxes over them. Only selected
//! experts are evaluated. Selection is treated as a constant during
//! backpropagation; gradients reach the router through the softmax over the
//! kept logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Scalar};
use crate::seqlayout::MASK_NEG;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoEParams {
    pub experts: Vec<ExpertParams>,
    /// `d x N^e`, applied to the combination token.
    pub router_w1: ParamId,
    /// `d x N^e`, applied to the task token.
    pub router_w2: ParamId,
    pub k: usize,
}

/// Experts picked for one token and their gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub expert_ids: Vec<usize>,
    pub gate_weights: Vec<f64>,
}

/// `z_c W1 + z_task W2`.
pub fn router_logits<T: Scalar>(tape: &mut Tape<'_, T>, z_c: Var, z_task: Var, p: &MoEParams) -> Result<Var> {
    let w1 = tape.param(p.router_w1);
    let w2 = tape.param(p.router_w2);
    let a = tape.matmul(z_c, w1)?;
    let b = tape.matmul(z_task, w2)?;
    tape.add(a, b)
}

/// Indices of the `k` largest entries, largest first; equal values are
/// ordered by lower index.
pub fn topk_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::OutOfRange(format!("k={k} for {} experts", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Keep the top-`k` entries, replace the rest with the masking constant.
pub fn topk_mask<T: Scalar>(v: &[T], k: usize) -> Result<Vec<T>> {
    let keep = topk_indices(v, k)?;
    let neg = T::lit(MASK_NEG);
    Ok((0..v.len())
        .map(|i| if keep.contains(&i) { v[i] } else { neg })
        .collect())
}

/// Softmax of the top-`k` masked logits.
pub fn gate<T: Scalar>(logits: &[T], k: usize) -> Result<GateRecord> {
    let ids = topk_indices(logits, k)?;
    let max = logits[ids[0]].to_f64_lossy();
    let exps: Vec<f64> = ids.iter().map(|&i| (logits[i].to_f64_lossy() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(GateRecord {
        expert_ids: ids,
        gate_weights: exps.iter().map(|e| e / sum).collect(),
    })
}

/// `E(z) = GELU(z W1 + b1) W2 + b2`.
pub fn expert_forward<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, e: &ExpertParams) -> Result<Var> {
    let w1 = tape.param(e.w1);
    let b1 = tape.param(e.b1);
    let w2 = tape.param(e.w2);
    let b2 = tape.param(e.b2);
    let h = tape.linear(z, w1, b1)?;
    let h = tape.gelu(h);
    tape.linear(h, w2, b2)
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// Refined token `s^c` (`1 x d`).
    pub s: Var,
    /// Gate weights of the selected experts (`1 x k`).
    pub gates: Var,
    pub selected: Vec<usize>,
}

/// Route one combination token. `noise`, when given, is added to the router
/// logits before selection and gating.
pub fn moe_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z_c: Var,
    z_task: Var,
    p: &MoEParams,
    noise: Option<&[T]>,
) -> Result<MoeOutput> {
    let mut logits = router_logits(tape, z_c, z_task, p)?;
    if let Some(n) = noise {
        if n.len() != p.experts.len() {
            return Err(Error::Shape("router noise width".into()));
        }
        let nv = tape.constant(ndarray::Array2::from_shape_vec((1, n.len()), n.to_vec()).expect("row"));
        logits = tape.add(logits, nv)?;
    }
    let row: Vec<T> = tape.value(logits).iter().copied().collect();
    let selected = topk_indices(&row, p.k)?;
    let gates = tape.select_softmax(logits, &selected)?;
    let outs = selected
        .iter()
        .map(|&e| expert_forward(tape, z_c, &p.experts[e]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&outs)?;
    let s = tape.matmul(gates, stacked)?;
    Ok(MoeOutput { s, gates, selected })
}

/// Per-expert total gate mass over a set of routed tokens.
pub fn importance(records: &[GateRecord], n_experts: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_experts];
    for r in records {
        for (&e, &g) in r.expert_ids.iter().zip(&r.gate_weights) {
            out[e] += g;
        }
    }
    out
}

/// Squared coefficient of variation of per-expert mass and its gradient with
/// respect to each expert's mass.
pub fn cv_squared_with_grad(mass: &[f64]) -> Result<(f64, Vec<f64>)> {
    if mass.is_empty() {
        return Err(Error::Empty("expert mass"));
    }
    let n = mass.len() as f64;
    let mean = mass.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::Empty("routed tokens"));
    }
    let var = mass.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    let value = var / (mean * mean);
    let grad = mass
        .iter()
        .map(|m| 2.0 * (m - mean) / n / (mean * mean) - 2.0 * var / (mean * mean * mean) / n)
        .collect();
    Ok((value, grad))
}

/// Importance loss over a `tokens x N^e` gate matrix: `weight * CV^2` of the
/// column sums.
pub fn balance_loss(gates: &[Vec<f64>], weight: f64) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::Empty("gate matrix"));
    }
    let n_e = gates[0].len();
    let mut mass = vec![0.0; n_e];
    for row in gates {
        if row.len() != n_e {
            return Err(Error::Shape("ragged gate matrix".into()));
        }
        for (m, g) in mass.iter_mut().zip(row) {
            *m += g;
        }
    }
    Ok(weight * cv_squared_with_grad(&mass)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let neg = MASK_NEG;
        assert_eq!(topk_mask(&[3.0, 1.0, 2.0], 2).unwrap(), vec![3.0, neg, 2.0]);
        assert_eq!(topk_mask(&[3.0, 1.0, 2.0], 3).unwrap(), vec![3.0, 1.0, 2.0]);
        assert_eq!(topk_mask(&[1.0, 1.0, 0.0], 1).unwrap(), vec![1.0, neg, neg]);
        assert!(topk_mask(&[1.0], 0).is_err());
        assert!(topk_mask(&[1.0], 2).is_err());
    }

    #[test]
    fn gate_examples() {
        let g = gate(&[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(g.expert_ids, vec![0, 2]);
        let e = (1.0f64).exp();
        assert!((g.gate_weights[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.gate_weights[0] - 0.7311).abs() < 1e-4);
        assert!((g.gate_weights[1] - 0.2689).abs() < 1e-4);
        let g = gate(&[0.3, 2.0, -1.0], 1).unwrap();
        assert_eq!((g.expert_ids, g.gate_weights), (vec![1], vec![1.0]));
        let g = gate(&[0.5; 4], 4).unwrap();
        assert!(g.gate_weights.iter().all(|w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_loss(&[vec![0.5, 0.5], vec![0.5, 0.5]], 1.0).unwrap(), 0.0);
        assert!((balance_loss(&[vec![1.0, 0.0], vec![1.0, 0.0]], 1.0).unwrap() - 1.0).abs() < 1e-12);
        let a = balance_loss(&[vec![0.2, 0.8], vec![0.6, 0.4]], 0.01).unwrap();
        let b = balance_loss(&[vec![2.0, 8.0], vec![6.0, 4.0]], 0.01).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(balance_loss(&[], 1.0).is_err());
    }

    #[test]
    fn cv_gradient_matches_differences() {
        let m = [0.7, 2.1, 0.2, 1.0];
        let (_, g) = cv_squared_with_grad(&m).unwrap();
        for i in 0..m.len() {
            let h = 1e-6;
            let mut p = m;
            p[i] += h;
            let mut q = m;
            q[i] -= h;
            let num = (cv_squared_with_grad(&p).unwrap().0 - cv_squared_with_grad(&q).unwrap().0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-7);
        }
    }
}
