//! The two-branch segmentation network and its no-exchange baseline.
//!
//! Per axial slice: a 3×3 stem per modality, `levels` encoder stages (exchange
//! then one conv block per branch, 2×2 max-pool between stages), a fusion
//! bottleneck, and a U-shaped decoder whose skips concatenate both branches.
//!
//! The baseline drops the exchanges and replaces cross-attention by a plain
//! concat; its parameters are a strict subset of the full model's, under the
//! same names, so both variants initialize shared layers identically.

use serde::{Deserialize, Serialize};

use crate::data::{Case, Volume, Voxels};
use crate::error::{Error, Result};
use crate::exchange::{self, add_aem_params, AemVars, DEFAULT_LAMBDA};
use crate::fusion::{add_projection, cross_fuse, AttentionProjection};
use crate::layers::{add_conv, Bound, Conv};
use crate::tensor::{FlushDenormals, Graph, ParamStore, PoolMode, Scalar, Tensor, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Menet,
    Baseline,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Menet => "menet",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub height: usize,
    pub width: usize,
    pub lambda: f64,
    pub variant: Variant,
}

impl Default for MeNetConfig {
    fn default() -> Self {
        MeNetConfig {
            levels: 4,
            base_channels: 16,
            convs_per_block: 2,
            height: 64,
            width: 64,
            lambda: DEFAULT_LAMBDA,
            variant: Variant::Menet,
        }
    }
}

impl MeNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.base_channels == 0 || self.convs_per_block == 0 {
            return bad("base_channels and convs_per_block must be positive".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "extents {}×{} must be positive multiples of {div} for {} levels",
                self.height, self.width, self.levels
            ));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        Ok(())
    }

    /// Stage widths `base·2^l`.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_channels << l).collect()
    }

    /// Channels entering the exchange at stage `l`.
    fn stage_input(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels
        } else {
            self.base_channels << (l - 1)
        }
    }
}

const BRANCHES: [&str; 2] = ["t1w", "fa"];

#[derive(Clone, Debug, PartialEq)]
pub struct MeNetParams<T = f32> {
    pub config: MeNetConfig,
    pub store: ParamStore<T>,
}

/// Builds the parameter inventory for `config`; each tensor is seeded from `(seed, name)`.
pub fn init<T: Scalar>(config: &MeNetConfig, seed: u64) -> Result<MeNetParams<T>> {
    config.validate()?;
    let mut s = ParamStore::new();
    let widths = config.widths();
    let full = config.variant == Variant::Menet;
    for b in BRANCHES {
        add_conv(&mut s, &format!("stem.{b}"), 1, widths[0], 3, seed)?;
    }
    for (l, &w) in widths.iter().enumerate() {
        let c_in = config.stage_input(l);
        if full {
            add_aem_params(&mut s, &format!("enc{l}.aem"), c_in, seed)?;
        }
        for b in BRANCHES {
            for i in 0..config.convs_per_block {
                let from = if i == 0 { c_in } else { w };
                add_conv(&mut s, &format!("enc{l}.{b}.conv{i}"), from, w, 3, seed)?;
            }
        }
    }
    let deep = widths[config.levels - 1];
    if full {
        for b in BRANCHES {
            add_projection(&mut s, &format!("fusion.{b}"), deep, seed)?;
        }
    }
    add_conv(&mut s, "fusion.mix", 2 * deep, deep, 1, seed)?;
    for l in (0..config.levels - 1).rev() {
        let w = widths[l];
        add_conv(&mut s, &format!("dec{l}.up"), widths[l + 1], w, 3, seed)?;
        for i in 0..config.convs_per_block {
            let from = if i == 0 { 3 * w } else { w };
            add_conv(&mut s, &format!("dec{l}.conv{i}"), from, w, 3, seed)?;
        }
    }
    add_conv(&mut s, "head", widths[0], 1, 1, seed)?;
    Ok(MeNetParams {
        config: config.clone(),
        store: s,
    })
}

/// Logits and probabilities for one slice, each `1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits<T = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

impl<T: Scalar> MeNetParams<T> {
    pub fn numel(&self) -> usize {
        self.store.numel()
    }

    pub fn cast<U: Scalar>(&self) -> MeNetParams<U> {
        MeNetParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    fn check_inputs(&self, t1w: &[usize], fa: &[usize]) -> Result<()> {
        let want = [1, self.config.height, self.config.width];
        for s in [t1w, fa] {
            if s != want {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: s.to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, variant: Variant, t1w: &Tensor<T>, fa: &Tensor<T>) -> Result<SegLogits<T>> {
        self.check_inputs(t1w.shape(), fa.shape())?;
        let mut g = Graph::new();
        let vars = self.store.register(&mut g, false);
        let (a, b) = (g.constant(t1w.clone()), g.constant(fa.clone()));
        let logits = build_logits(&mut g, self, &vars, a, b, variant)?;
        let probs = g.sigmoid(logits)?;
        Ok(SegLogits {
            logits: g.value(logits).clone(),
            probabilities: g.value(probs).clone(),
        })
    }

    /// Forward pass of the variant the parameters were built for.
    pub fn forward(&self, t1w: &Tensor<T>, fa: &Tensor<T>) -> Result<SegLogits<T>> {
        self.run(self.config.variant, t1w, fa)
    }

    /// Baseline topology; runs on either variant's parameters.
    pub fn forward_baseline(&self, t1w: &Tensor<T>, fa: &Tensor<T>) -> Result<SegLogits<T>> {
        self.run(Variant::Baseline, t1w, fa)
    }
}

/// Wires the network into `g` with parameter variables `vars` (in store order)
/// and returns the `1×H×W` logits.
pub fn build_logits<T: Scalar>(
    g: &mut Graph<T>,
    params: &MeNetParams<T>,
    vars: &[Var],
    t1w: Var,
    fa: Var,
    variant: Variant,
) -> Result<Var> {
    let cfg = &params.config;
    if vars.len() != params.store.len() {
        return Err(Error::invalid("build_logits", "one variable per parameter required"));
    }
    params.check_inputs(g.shape(t1w), g.shape(fa))?;
    let has = |name: &str| params.store.position(name).is_some();
    if variant == Variant::Menet && !(has("enc0.aem.eca") && has("fusion.t1w.q")) {
        return Err(Error::Config("baseline parameters cannot run the menet variant".into()));
    }
    let p = Bound {
        store: &params.store,
        vars,
    };
    let depth = cfg.convs_per_block;

    let mut x_t1 = p.conv("stem.t1w").forward_relu(g, t1w)?;
    let mut x_fa = p.conv("stem.fa").forward_relu(g, fa)?;
    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let block_t1 = p.block(&format!("enc{l}.t1w"), depth);
        let block_fa = p.block(&format!("enc{l}.fa"), depth);
        (x_t1, x_fa) = match variant {
            Variant::Menet => {
                let aem = AemVars {
                    eca_kernel: p.var(&format!("enc{l}.aem.eca")),
                    spatial_kernel: p.var(&format!("enc{l}.aem.spatial.w")),
                    spatial_bias: p.var(&format!("enc{l}.aem.spatial.b")),
                };
                exchange::exchange_stage(g, x_t1, x_fa, cfg.lambda, &aem, &block_t1, &block_fa)?
            }
            Variant::Baseline => (block_t1.forward(g, x_t1)?, block_fa.forward(g, x_fa)?),
        };
        if l + 1 < cfg.levels {
            skips.push(g.concat(&[x_t1, x_fa], 0)?);
            x_t1 = g.pool(x_t1, PoolMode::SpatialMax2x2)?;
            x_fa = g.pool(x_fa, PoolMode::SpatialMax2x2)?;
        }
    }

    let fused = match variant {
        Variant::Menet => {
            let proj = |b: &str| AttentionProjection {
                w_q: p.var(&format!("fusion.{b}.q")),
                w_k: p.var(&format!("fusion.{b}.k")),
                w_v: p.var(&format!("fusion.{b}.v")),
            };
            cross_fuse(g, x_t1, x_fa, &proj("t1w"), &proj("fa"))?.y
        }
        Variant::Baseline => g.concat(&[x_t1, x_fa], 0)?,
    };
    let mut x = p.conv("fusion.mix").forward_relu(g, fused)?;

    for l in (0..cfg.levels - 1).rev() {
        let up = g.upsample2(x)?;
        let up = p.conv(&format!("dec{l}.up")).forward_relu(g, up)?;
        let cat = g.concat(&[up, skips[l]], 0)?;
        x = p.block(&format!("dec{l}"), depth).forward(g, cat)?;
    }
    let head: Conv = p.conv("head");
    head.forward(g, x)
}

/// Strict threshold: a probability equal to `threshold` is background.
pub fn threshold_mask<T: Scalar>(probabilities: &Tensor<T>, threshold: f64) -> Vec<u8> {
    probabilities
        .data()
        .iter()
        .map(|&p| (p.as_f64() > threshold) as u8)
        .collect()
}

/// Segments every axial slice of `case` and restacks the binary masks.
pub fn predict_volume<T: Scalar>(params: &MeNetParams<T>, case: &Case, threshold: f64) -> Result<Volume> {
    case.validate()?;
    let _ftz = FlushDenormals::enable();
    let [nx, ny, nz] = case.extents();
    if nx != params.config.width || ny != params.config.height {
        return Err(Error::Config(format!(
            "case {} has {nx}×{ny} slices, model expects {}×{}",
            case.id, params.config.width, params.config.height
        )));
    }
    let slice = |v: &Volume, z: usize| -> Tensor<T> {
        Tensor::new([1, ny, nx], v.slice_z(z).into_iter().map(|f| T::from_f64_lossy(f as f64)).collect())
            .expect("slice size")
    };
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        let out = params.forward(&slice(&case.t1w, z), &slice(&case.fa, z))?;
        mask.extend(threshold_mask(&out.probabilities, threshold));
    }
    Volume::new(case.extents(), case.spacing(), Voxels::Binary(mask))
}

/// Name accepted by `grad_check`-style front ends for the whole-network check.
pub const LOSS_CHECK_OPS: &[&str] = &["menet_loss", "baseline_loss"];

/// Finite-difference check of the full loss w.r.t. every parameter and both
/// inputs, on a `levels = 2`, base-2, 8×8 network in f64.
///
/// The evaluation point is chosen so every gradient is resolvable by central
/// differences: weights are scaled by √2 (variance-preserving under ReLU),
/// attention query/key weights by a further 3 so attention is not uniform,
/// biases are small and positive, and the head is rescaled so logits have
/// zero mean and unit spread.
pub fn loss_gradient_check(variant: Variant, seed: u64) -> Result<f64> {
    use rand::Rng;

    use crate::objectives::total_loss;
    use crate::rng::{derive_seed, rng};
    use crate::tensor::gradcheck::check_graph_fn;

    let cfg = MeNetConfig {
        levels: 2,
        base_channels: 2,
        height: 8,
        width: 8,
        variant,
        ..MeNetConfig::default()
    };
    let params: MeNetParams<f64> = init::<f64>(&cfg, seed)?;
    let mut r = rng(derive_seed(seed, 0x6c6f7373));
    let mut inputs: Vec<Tensor<f64>> = Vec::with_capacity(params.store.len() + 2);
    for (name, t) in params.store.iter() {
        inputs.push(if name.ends_with(".b") {
            Tensor::from_fn(t.shape().to_vec(), |_| r.random_range(0.0..0.1))
        } else if name.ends_with(".q") || name.ends_with(".k") {
            t.map(|v| v * 3.0 * std::f64::consts::SQRT_2)
        } else {
            t.map(|v| v * std::f64::consts::SQRT_2)
        });
    }
    let n = inputs.len();
    let slice = |r: &mut rand_chacha::ChaCha8Rng| Tensor::from_fn(vec![1, 8, 8], |_| r.random_range(0.0..1.0));
    inputs.push(slice(&mut r));
    inputs.push(slice(&mut r));
    let label = Tensor::from_fn(vec![1, 8, 8], |_| (r.random_range(0.0..1.0) < 0.3) as u8 as f64);

    let logits = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build_logits(&mut g, &params, &vars[..n], vars[n], vars[n + 1], variant)?;
        g.value(out).clone()
    };
    let d = logits.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let spread = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    if !(spread > 0.0) {
        return Err(Error::NonFinite("constant logits in gradient check".into()));
    }
    let (hw, hb) = (
        params.store.position("head.w").expect("head weight"),
        params.store.position("head.b").expect("head bias"),
    );
    inputs[hw] = inputs[hw].map(|v| v / spread);
    let b = inputs[hb].data()[0];
    inputs[hb].data_mut()[0] = (b - mean) / spread;

    check_graph_fn(&inputs, seed, |g, v| {
        let y = g.constant(label.clone());
        let logits = build_logits(g, &params, &v[..n], v[n], v[n + 1], variant)?;
        let p = g.sigmoid(logits)?;
        Ok(total_loss(g, p, y)?.total)
    })
}
