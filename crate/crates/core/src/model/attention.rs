//! Scaled dot-product attention, multi-head attention, gate-sum fusion and
//! sinusoidal positions. All functions record onto a [`Graph`].

use crate::error::{Result, SmdtError};
use crate::numerics::{Graph, Tensor, Var};

/// `softmax(Q Kᵀ / √d_k + M) V`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Var) -> Result<Var> {
    let (qs, ks, vs, ms) = (
        g.value(q).shape().to_vec(),
        g.value(k).shape().to_vec(),
        g.value(v).shape().to_vec(),
        g.value(mask).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(SmdtError::shape("attention", format!("Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    if qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(SmdtError::shape("attention", format!("Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    if ms != [qs[0], ks[0]] {
        return Err(SmdtError::shape(
            "attention",
            format!("mask {ms:?} for {} queries and {} keys", qs[0], ks[0]),
        ));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let scores = g.add(scores, mask)?;
    let p = g.softmax(scores);
    g.matmul(p, v)
}

/// Projection matrices of one multi-head attention block, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Per-head outputs `[queries, d_k]`, head `i` using `masks[i]`.
pub fn attention_heads(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    masks: &[Var],
    w: &MhaWeights,
    num_heads: usize,
) -> Result<Vec<Var>> {
    if masks.len() != num_heads {
        return Err(SmdtError::shape(
            "multi_head_attention",
            format!("{} masks for {num_heads} heads", masks.len()),
        ));
    }
    let d = g.value(w.wq).cols();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(SmdtError::shape(
            "multi_head_attention",
            format!("width {d} not divisible into {num_heads} heads"),
        ));
    }
    let dk = d / num_heads;
    let q = g.matmul(x_q, w.wq)?;
    let k = g.matmul(x_kv, w.wk)?;
    let v = g.matmul(x_kv, w.wv)?;
    let mut heads = Vec::with_capacity(num_heads);
    for (i, &mask) in masks.iter().enumerate() {
        let (lo, hi) = (i * dk, (i + 1) * dk);
        let qh = g.slice(q, lo, hi)?;
        let kh = g.slice(k, lo, hi)?;
        let vh = g.slice(v, lo, hi)?;
        heads.push(attention(g, qh, kh, vh, mask)?);
    }
    Ok(heads)
}

/// `Concat(head_1, …, head_h) W^O`.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    masks: &[Var],
    w: &MhaWeights,
    num_heads: usize,
) -> Result<Var> {
    let heads = attention_heads(g, x_q, x_kv, masks, w, num_heads)?;
    let joined = g.concat(&heads)?;
    g.matmul(joined, w.wo)
}

/// Per-dimension gate `g = sigmoid([local; global] W_g + b_g)` and the fused
/// `g ⊙ local + (1 − g) ⊙ global`. With `force_local` the gate is the constant 1.
/// Returns `(fused, gate)`.
pub fn gate_sum(
    g: &mut Graph,
    local: Var,
    global: Var,
    w_g: Var,
    b_g: Var,
    force_local: bool,
) -> Result<(Var, Var)> {
    let gate = if force_local {
        let shape = g.value(local).shape().to_vec();
        g.constant(Tensor::filled(shape, 1.0))
    } else {
        let both = g.concat(&[local, global])?;
        let pre = g.matmul(both, w_g)?;
        let pre = g.add_row(pre, b_g)?;
        g.sigmoid(pre)
    };
    let diff = g.sub(local, global)?;
    let weighted = g.mul(gate, diff)?;
    let fused = g.add(global, weighted)?;
    Ok((fused, gate))
}

/// Fixed sinusoidal encodings, one row per position.
pub fn sinusoidal_positions(positions: &[usize], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("position table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::eval();
        let q = g.constant(t(&[&[0.3, -1.0]]));
        let k = g.constant(t(&[&[2.0, 0.5]]));
        let v = g.constant(t(&[&[7.0, -3.0, 1.5]]));
        let m = g.constant(Tensor::zeros(vec![1, 1]));
        let out = attention(&mut g, q, k, v, m).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -3.0, 1.5]);
    }

    #[test]
    fn equal_logits_average_values() {
        let mut g = Graph::eval();
        let q = g.constant(t(&[&[1.0, 1.0]]));
        let k = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = g.constant(t(&[&[2.0, 4.0], &[6.0, 0.0]]));
        let m = g.constant(Tensor::zeros(vec![1, 2]));
        let out = attention(&mut g, q, k, v, m).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 4.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn masked_key_is_ignored() {
        let mut g = Graph::eval();
        let q = g.constant(t(&[&[1.0, -2.0]]));
        let k = g.constant(t(&[&[0.5, 0.5], &[9.0, -9.0]]));
        let v = g.constant(t(&[&[1.0, 2.0], &[100.0, 200.0]]));
        let m = g.constant(t(&[&[0.0, -1e9]]));
        let out = attention(&mut g, q, k, v, m).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 1.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::eval();
        let q = g.constant(Tensor::zeros(vec![2, 3]));
        let k = g.constant(Tensor::zeros(vec![2, 4]));
        let v = g.constant(Tensor::zeros(vec![2, 4]));
        let m = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(attention(&mut g, q, k, v, m).is_err());
        let k = g.constant(Tensor::zeros(vec![2, 3]));
        let bad_mask = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(attention(&mut g, q, k, v, bad_mask).is_err());
    }

    #[test]
    fn mask_count_must_match_heads() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        let id = g.constant(Tensor::identity(4));
        let w = MhaWeights { wq: id, wk: id, wv: id, wo: id };
        let m = g.constant(Tensor::zeros(vec![1, 1]));
        assert!(multi_head_attention(&mut g, x, x, &[m], &w, 2).is_err());
    }

    #[test]
    fn identity_projections_single_position() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[&[1.0, -2.0, 0.5, 3.0]]));
        let id = g.constant(Tensor::identity(4));
        let wo = g.constant(t(&[
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.5, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, -1.0],
        ]));
        let w = MhaWeights { wq: id, wk: id, wv: id, wo };
        let m = g.constant(Tensor::zeros(vec![1, 1]));
        let out = multi_head_attention(&mut g, x, x, &[m, m], &w, 2).unwrap();
        let expect = g.matmul(x, wo).unwrap();
        assert_eq!(g.value(out).data(), g.value(expect).data());
    }

    #[test]
    fn zero_gate_weights_average_streams() {
        let mut g = Graph::eval();
        let local = g.constant(t(&[&[1.0, 3.0], &[-2.0, 0.0]]));
        let global = g.constant(t(&[&[5.0, -1.0], &[4.0, 2.0]]));
        let w = g.constant(Tensor::zeros(vec![4, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let (fused, gate) = gate_sum(&mut g, local, global, w, b, false).unwrap();
        assert!(g.value(gate).data().iter().all(|&x| x == 0.5));
        assert_eq!(g.value(fused).data(), &[3.0, 1.0, 1.0, 1.0]);
        let (forced, _) = gate_sum(&mut g, local, global, w, b, true).unwrap();
        assert_eq!(g.value(forced).data(), g.value(local).data());
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let pe = sinusoidal_positions(&[0, 3], 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 3f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - (3.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
