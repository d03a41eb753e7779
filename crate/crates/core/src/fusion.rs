//! Cross-attention fusion of the two modality streams at the bottleneck.
//!
//! Tokens are spatial positions and embeddings are channels. Each direction
//! takes its attention weights from one modality and its values from the
//! other:
//!
//! * T1w output: `softmax(Q_FA·K_FAᵀ/√d)·V_T1w`
//! * FA output:  `softmax(Q_T1·K_T1ᵀ/√d)·V_FA`
//!
//! The two outputs are reshaped back to `C×H×W` and stacked along channels.

use crate::error::{Error, Result};
use crate::tensor::{glorot_bound, Graph, ParamStore, Scalar, Tensor, Var};

/// Bias-free Q/K/V projections for one modality; each `D×D`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjection {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Projection weights for a modality stored as `{prefix}.q`, `.k`, `.v`.
pub(crate) fn add_projection<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    seed: u64,
) -> Result<()> {
    for m in ["q", "k", "v"] {
        store.insert_uniform(&format!("{prefix}.{m}"), &[dim, dim], glorot_bound(dim, dim), seed)?;
    }
    Ok(())
}

/// `C×H×W` → `N×C` with token `n` the channel vector at row-major position `n`.
pub fn tokenize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("tokenize", format!("C×H×W input required, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Inverse of [`tokenize`].
pub fn detokenize<T: Scalar>(g: &mut Graph<T>, tokens: Var, height: usize, width: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != height * width {
        return Err(Error::invalid(
            "detokenize",
            format!("{s:?} tokens do not cover a {height}×{width} grid"),
        ));
    }
    let channels_first = g.transpose(tokens)?;
    g.reshape(channels_first, &[s[1], height, width])
}

/// Single-head scaled dot-product attention; returns the output and the
/// row-stochastic attention matrix.
pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sq != sk || sk != sv {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: sq,
            rhs: if sk != sv { sv } else { sk },
        });
    }
    let d = sq[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.mul_scalar(scores, 1.0 / d.sqrt())?;
    let attention = g.softmax(scaled, 1)?;
    let out = g.matmul(attention, v)?;
    Ok((out, attention))
}

/// Handles produced by [`cross_fuse`].
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    /// `2C×H×W`: T1w-valued output stacked over FA-valued output.
    pub y: Var,
    pub attention_t1w: Var,
    pub attention_fa: Var,
}

pub fn cross_fuse<T: Scalar>(
    g: &mut Graph<T>,
    t1w: Var,
    fa: Var,
    proj_t1: &AttentionProjection,
    proj_fa: &AttentionProjection,
) -> Result<FusedVars> {
    let s = g.shape(t1w).to_vec();
    if s != g.shape(fa) {
        return Err(Error::ShapeMismatch {
            op: "cross_fuse",
            lhs: s,
            rhs: g.shape(fa).to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let tok_t1 = tokenize(g, t1w)?;
    let tok_fa = tokenize(g, fa)?;
    let q_t1 = g.matmul(tok_t1, proj_t1.w_q)?;
    let k_t1 = g.matmul(tok_t1, proj_t1.w_k)?;
    let v_t1 = g.matmul(tok_t1, proj_t1.w_v)?;
    let q_fa = g.matmul(tok_fa, proj_fa.w_q)?;
    let k_fa = g.matmul(tok_fa, proj_fa.w_k)?;
    let v_fa = g.matmul(tok_fa, proj_fa.w_v)?;
    let (out_t1w, attention_t1w) = cross_attention(g, q_fa, k_fa, v_t1)?;
    let (out_fa, attention_fa) = cross_attention(g, q_t1, k_t1, v_fa)?;
    let map_t1w = detokenize(g, out_t1w, h, w)?;
    let map_fa = detokenize(g, out_fa, h, w)?;
    let y = g.concat(&[map_t1w, map_fa], 0)?;
    Ok(FusedVars {
        y,
        attention_t1w,
        attention_fa,
    })
}

/// Concrete projection weights, for use outside a model graph.
#[derive(Clone, Debug)]
pub struct ProjectionWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> AttentionProjection {
        let mut add = |t: &Tensor<T>| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        AttentionProjection {
            w_q: add(&self.w_q),
            w_k: add(&self.w_k),
            w_v: add(&self.w_v),
        }
    }
}

/// Evaluates [`cross_fuse`] on plain tensors and returns the fused `2C×H×W` map.
pub fn fuse_tensors<T: Scalar>(
    t1w: &Tensor<T>,
    fa: &Tensor<T>,
    proj_t1: &ProjectionWeights<T>,
    proj_fa: &ProjectionWeights<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p1 = proj_t1.register(&mut g, false);
    let p2 = proj_fa.register(&mut g, false);
    let a = g.constant(t1w.clone());
    let b = g.constant(fa.clone());
    let fused = cross_fuse(&mut g, a, b, &p1, &p2)?;
    Ok(g.value(fused.y).clone())
}
