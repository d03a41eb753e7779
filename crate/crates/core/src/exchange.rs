//! Modality exchange between the T1w and FA feature streams.
//!
//! The fixed exchange derives per-element coefficients from the closed-form
//! SimAM neuron energy of the overlaid features and has no parameters. The
//! adaptive exchange learns channel attention (ECA) followed by spatial
//! attention. Fixed exchange produces the T1w branch, adaptive exchange the
//! FA branch, and both read the same pre-exchange pair.

use crate::error::{Error, Result};
use crate::layers::ConvBlock;
use crate::tensor::{glorot_bound, Graph, ParamStore, PoolMode, Scalar, Tensor, Var};

/// Energy regularizer λ.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Spatial-attention kernel size.
pub const SPATIAL_KERNEL: usize = 7;

/// Adaptive ECA kernel size for `channels`: `|log2(C)/γ + b/γ|` with γ = 2,
/// b = 1, rounded up to odd, at least 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

/// Paired same-shape feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T> {
    pub t1w: Tensor<T>,
    pub fa: Tensor<T>,
}

/// Minimal SimAM energies plus the per-channel statistics they were built from.
#[derive(Clone, Debug)]
pub struct EnergyField<T> {
    pub energy: Tensor<T>,
    pub lambda: f64,
    /// μ̂ per channel, `C×1×1`.
    pub mean: Tensor<T>,
    /// Biased σ̂² per channel, `C×1×1`.
    pub variance: Tensor<T>,
    /// Positions per channel, `M = H·W`.
    pub count: usize,
}

/// Complementary exchange weights.
#[derive(Clone, Debug)]
pub struct CoefficientMap<T> {
    pub f_t1w: Tensor<T>,
    pub f_fa: Tensor<T>,
}

/// Graph handles for an [`EnergyField`].
#[derive(Clone, Copy, Debug)]
pub struct EnergyVars {
    pub energy: Var,
    pub mean: Var,
    pub variance: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CoefficientVars {
    pub f_t1w: Var,
    pub f_fa: Var,
}

/// Intermediates of the adaptive coefficients: channel weights and the pooled map.
#[derive(Clone, Copy, Debug)]
pub struct AemState {
    /// `C×1×1` channel attention weights.
    pub x_c: Var,
    /// `2×H×W` channel-mean and channel-max of the recalibrated input.
    pub x_f: Var,
}

/// Learnable adaptive-exchange weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AemParams<T> {
    /// `1×1×k`, no bias.
    pub eca_kernel: Tensor<T>,
    /// `1×2×s×s`.
    pub spatial_kernel: Tensor<T>,
    /// `[1]`.
    pub spatial_bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AemVars {
    pub eca_kernel: Var,
    pub spatial_kernel: Var,
    pub spatial_bias: Var,
}

impl<T: Scalar> AemParams<T> {
    pub fn validate(&self) -> Result<()> {
        let e = self.eca_kernel.shape();
        let s = self.spatial_kernel.shape();
        if e.len() != 3 || e[2] % 2 == 0 || s.len() != 4 || s[0] != 1 || s[1] != 2 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::invalid(
                "aem params",
                format!("need odd 1×1×k and 1×2×s×s kernels, got {e:?} and {s:?}"),
            ));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Result<AemVars> {
        self.validate()?;
        let mut add = |t: &Tensor<T>| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        Ok(AemVars {
            eca_kernel: add(&self.eca_kernel),
            spatial_kernel: add(&self.spatial_kernel),
            spatial_bias: add(&self.spatial_bias),
        })
    }

    /// Reads `{prefix}.eca`, `{prefix}.spatial.w`, `{prefix}.spatial.b`.
    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Option<Self> {
        Some(AemParams {
            eca_kernel: store.get(&format!("{prefix}.eca"))?.clone(),
            spatial_kernel: store.get(&format!("{prefix}.spatial.w"))?.clone(),
            spatial_bias: store.get(&format!("{prefix}.spatial.b"))?.clone(),
        })
    }

    /// `σ(conv1d(GAP(x)))` as a `C×1×1` tensor.
    pub fn eca_weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false)?;
        let x = g.constant(x.clone());
        let w = eca_weights(&mut g, x, &vars)?;
        Ok(g.value(w).clone())
    }

    pub fn coefficients(&self, x: &Tensor<T>) -> Result<(CoefficientMap<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false)?;
        let x = g.constant(x.clone());
        let (c, state) = aem_coefficients(&mut g, x, &vars)?;
        Ok((read_coefficients(&g, c), g.value(state.x_f).clone()))
    }
}

/// Inserts freshly initialized adaptive-exchange weights for `channels` under `prefix`.
pub(crate) fn add_aem_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    seed: u64,
) -> Result<()> {
    let k = eca_kernel_size(channels);
    store.insert_uniform(&format!("{prefix}.eca"), &[1, 1, k], glorot_bound(k, k), seed)?;
    let s = SPATIAL_KERNEL;
    store.insert_uniform(
        &format!("{prefix}.spatial.w"),
        &[1, 2, s, s],
        glorot_bound(2 * s * s, s * s),
        seed,
    )?;
    store.insert(format!("{prefix}.spatial.b"), Tensor::zeros(vec![1]))?;
    Ok(())
}

fn read_coefficients<T: Scalar>(g: &Graph<T>, c: CoefficientVars) -> CoefficientMap<T> {
    CoefficientMap {
        f_t1w: g.value(c.f_t1w).clone(),
        f_fa: g.value(c.f_fa).clone(),
    }
}

fn check_pair(g: &Graph<impl Scalar>, t1w: Var, fa: Var) -> Result<()> {
    if g.shape(t1w) != g.shape(fa) {
        return Err(Error::ShapeMismatch {
            op: "feature pair",
            lhs: g.shape(t1w).to_vec(),
            rhs: g.shape(fa).to_vec(),
        });
    }
    Ok(())
}

/// `X_input = X_T1w + X_FA`.
pub fn overlay<T: Scalar>(g: &mut Graph<T>, t1w: Var, fa: Var) -> Result<Var> {
    check_pair(g, t1w, fa)?;
    g.add(t1w, fa)
}

/// Closed-form minimal energy
/// `e* = 4(σ̂² + λ) / ((x − μ̂)² + 2σ̂² + 2λ)` with per-channel mean and
/// biased variance over all `H·W` positions.
pub fn simam_energy<T: Scalar>(g: &mut Graph<T>, x: Var, lambda: f64) -> Result<EnergyVars> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("simam_energy", format!("lambda must be positive, got {lambda}")));
    }
    let s = g.shape(x);
    if s.len() != 3 || s[1] * s[2] < 2 {
        return Err(Error::invalid("simam_energy", format!("need C×H×W with H·W ≥ 2, got {s:?}")));
    }
    let mean = g.pool(x, PoolMode::Gap)?;
    let dev = g.sub(x, mean)?;
    let dev_sq = g.square(dev)?;
    let variance = g.pool(dev_sq, PoolMode::Gap)?;
    let var_lambda = g.add_scalar(variance, lambda)?;
    let numerator = g.mul_scalar(var_lambda, 4.0)?;
    let two_var = g.mul_scalar(variance, 2.0)?;
    let offset = g.add_scalar(two_var, 2.0 * lambda)?;
    let denominator = g.add(dev_sq, offset)?;
    let energy = g.div(numerator, denominator)?;
    Ok(EnergyVars { energy, mean, variance })
}

/// `F_T1w = sigmoid(1/e*)`, `F_FA = 1 − F_T1w`.
pub fn fem_coefficients<T: Scalar>(g: &mut Graph<T>, energy: &EnergyVars) -> Result<CoefficientVars> {
    if g.value(energy.energy).data().iter().any(|&e| e <= T::zero()) {
        return Err(Error::invalid("fem_coefficients", "energies must be positive"));
    }
    let importance = g.recip(energy.energy)?;
    let f_t1w = g.sigmoid(importance)?;
    let f_fa = g.rsub_scalar(1.0, f_t1w)?;
    Ok(CoefficientVars { f_t1w, f_fa })
}

/// `F_keep ⊙ keep + (1 − F_keep) ⊙ other`, written as
/// `other + F_keep ⊙ (keep − other)` so equal inputs pass through unchanged.
fn soft_exchange<T: Scalar>(g: &mut Graph<T>, keep: Var, other: Var, f_keep: Var) -> Result<Var> {
    let diff = g.sub(keep, other)?;
    let moved = g.mul(f_keep, diff)?;
    g.add(other, moved)
}

/// Fixed exchange output for the T1w branch.
pub fn fem_exchange<T: Scalar>(g: &mut Graph<T>, t1w: Var, fa: Var, lambda: f64) -> Result<Var> {
    let x = overlay(g, t1w, fa)?;
    let energy = simam_energy(g, x, lambda)?;
    let coeff = fem_coefficients(g, &energy)?;
    soft_exchange(g, t1w, fa, coeff.f_t1w)
}

/// Channel attention `σ(conv1d(GAP(x)))`, shape `C×1×1`.
pub fn eca_weights<T: Scalar>(g: &mut Graph<T>, x: Var, params: &AemVars) -> Result<Var> {
    let c = g.shape(x)[0];
    let k = g.shape(params.eca_kernel)[2];
    let pooled = g.pool(x, PoolMode::Gap)?;
    let row = g.reshape(pooled, &[1, c])?;
    let conv = g.conv1d(row, params.eca_kernel, (k - 1) / 2)?;
    let w = g.sigmoid(conv)?;
    g.reshape(w, &[c, 1, 1])
}

/// Adaptive coefficients: `F_FA` is `1×H×W` and broadcasts over channels.
pub fn aem_coefficients<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &AemVars,
) -> Result<(CoefficientVars, AemState)> {
    let x_c = eca_weights(g, x, params)?;
    let recalibrated = g.mul(x_c, x)?;
    let avg = g.pool(recalibrated, PoolMode::ChannelAvg)?;
    let max = g.pool(recalibrated, PoolMode::ChannelMax)?;
    let x_f = g.concat(&[avg, max], 0)?;
    let s = g.shape(params.spatial_kernel)[2];
    let logits = g.conv2d(x_f, params.spatial_kernel, Some(params.spatial_bias), 1, (s - 1) / 2)?;
    let f_fa = g.sigmoid(logits)?;
    let f_t1w = g.rsub_scalar(1.0, f_fa)?;
    Ok((CoefficientVars { f_t1w, f_fa }, AemState { x_c, x_f }))
}

/// Adaptive exchange output for the FA branch.
pub fn aem_exchange<T: Scalar>(g: &mut Graph<T>, t1w: Var, fa: Var, params: &AemVars) -> Result<Var> {
    let x = overlay(g, t1w, fa)?;
    let (coeff, _) = aem_coefficients(g, x, params)?;
    soft_exchange(g, fa, t1w, coeff.f_fa)
}

/// One encoder stage: both exchanges read the incoming pair, then each
/// branch runs its own conv block.
pub fn exchange_stage<T: Scalar>(
    g: &mut Graph<T>,
    t1w: Var,
    fa: Var,
    lambda: f64,
    aem: &AemVars,
    conv_t1w: &ConvBlock,
    conv_fa: &ConvBlock,
) -> Result<(Var, Var)> {
    let x_t1 = fem_exchange(g, t1w, fa, lambda)?;
    let x_fa = aem_exchange(g, t1w, fa, aem)?;
    Ok((conv_t1w.forward(g, x_t1)?, conv_fa.forward(g, x_fa)?))
}

impl<T: Scalar> FeaturePair<T> {
    pub fn new(t1w: Tensor<T>, fa: Tensor<T>) -> Result<Self> {
        if t1w.shape() != fa.shape() {
            return Err(Error::ShapeMismatch {
                op: "feature pair",
                lhs: t1w.shape().to_vec(),
                rhs: fa.shape().to_vec(),
            });
        }
        Ok(FeaturePair { t1w, fa })
    }

    fn bind(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.constant(self.t1w.clone()), g.constant(self.fa.clone()))
    }

    pub fn overlay(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (a, b) = self.bind(&mut g);
        let x = overlay(&mut g, a, b)?;
        Ok(g.value(x).clone())
    }

    pub fn fem_exchange(&self, lambda: f64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (a, b) = self.bind(&mut g);
        let y = fem_exchange(&mut g, a, b, lambda)?;
        Ok(g.value(y).clone())
    }

    pub fn aem_exchange(&self, params: &AemParams<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = params.register(&mut g, false)?;
        let (a, b) = self.bind(&mut g);
        let y = aem_exchange(&mut g, a, b, &vars)?;
        Ok(g.value(y).clone())
    }

    /// Fixed-exchange coefficients of this pair's overlay.
    pub fn fem_coefficients(&self, lambda: f64) -> Result<CoefficientMap<T>> {
        let energy = EnergyField::compute(&self.overlay()?, lambda)?;
        CoefficientMap::from_energy(&energy)
    }
}

impl<T: Scalar> EnergyField<T> {
    pub fn compute(x: &Tensor<T>, lambda: f64) -> Result<Self> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = simam_energy(&mut g, xv, lambda)?;
        Ok(EnergyField {
            energy: g.value(e.energy).clone(),
            lambda,
            mean: g.value(e.mean).clone(),
            variance: g.value(e.variance).clone(),
            count: x.shape()[1] * x.shape()[2],
        })
    }
}

impl<T: Scalar> CoefficientMap<T> {
    pub fn from_energy(energy: &EnergyField<T>) -> Result<Self> {
        let mut g = Graph::new();
        let vars = EnergyVars {
            energy: g.constant(energy.energy.clone()),
            mean: g.constant(energy.mean.clone()),
            variance: g.constant(energy.variance.clone()),
        };
        let c = fem_coefficients(&mut g, &vars)?;
        Ok(read_coefficients(&g, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eca_kernel_rule() {
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(16), 3);
        assert_eq!(eca_kernel_size(128), 5);
        assert_eq!(eca_kernel_size(4), 3);
        assert_eq!(eca_kernel_size(1024), 5);
    }

    #[test]
    fn fem_gradient_reaches_both_modalities() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(vec![2, 3, 3], |i| i as f64 * 0.1));
        let b = g.leaf(Tensor::from_fn(vec![2, 3, 3], |i| (i as f64).sqrt()));
        let y = fem_exchange(&mut g, a, b, DEFAULT_LAMBDA).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(g.grad(b).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
