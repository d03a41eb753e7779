//! Training, evaluation and the menet-vs-baseline ablation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{extract_slices, Case, SliceFilter, SliceSample, SplitSpec, SPLIT_FILE};
use crate::error::{Error, Result};
use crate::metrics::{report, MetricReport};
use crate::model::{build_logits, init, predict_volume, MeNetConfig, MeNetParams, Variant, DEFAULT_THRESHOLD};
use crate::objectives::total_loss;
use crate::rng::{derive_seed, rng};
use crate::tensor::{FlushDenormals, Graph, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.mnck";
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: MeNetConfig,
    /// Fraction of label-free slices kept for training.
    pub empty_fraction: f64,
    /// Desk-scale cap: slices drawn per training case each epoch.
    pub max_slices_per_case: Option<usize>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 40,
            learning_rate: 0.00015,
            weight_decay: 0.00001,
            seed: 0,
            model: MeNetConfig::default(),
            empty_fraction: 0.1,
            max_slices_per_case: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// 30 epochs, batch 8, 64×64 slices.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(Error::Config("empty_fraction must lie in [0, 1]".into()));
        }
        if self.max_slices_per_case == Some(0) {
            return Err(Error::Config("max_slices_per_case must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &MeNetParams<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.store.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut MeNetParams<f32>, grads: &[Tensor<f32>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer", "one gradient per parameter required"));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let decay = (lr * weight_decay) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *p -= decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Parameters plus optimizer state; one update per batch.
pub struct Trainer {
    pub params: MeNetParams<f32>,
    pub optimizer: OptimizerState,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Trainer {
    pub fn new(params: MeNetParams<f32>, learning_rate: f64, weight_decay: f64) -> Self {
        let optimizer = OptimizerState::new(&params);
        Trainer {
            params,
            optimizer,
            learning_rate,
            weight_decay,
        }
    }

    /// Loss and parameter gradients for one slice.
    pub fn slice_gradients(&self, s: &SliceSample) -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let vars = self.params.store.register(&mut g, true);
        let t1w = g.constant(s.t1w.clone());
        let fa = g.constant(s.fa.clone());
        let label = g.constant(s.label.clone());
        let logits = build_logits(&mut g, &self.params, &vars, t1w, fa, self.params.config.variant)?;
        let p = g.sigmoid(logits)?;
        let loss = total_loss(&mut g, p, label)?.total;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss on slice {}:{}", s.case, s.z)));
        }
        g.backward(loss)?;
        Ok((value, self.params.store.gradients(&g, &vars)))
    }

    /// One optimizer step on the batch mean; returns the mean loss.
    pub fn step(&mut self, batch: &[&SliceSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("step", "empty batch"));
        }
        let _ftz = FlushDenormals::enable();
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut loss = 0.0;
        for s in batch {
            let (l, grads) = self.slice_gradients(s)?;
            loss += l;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f32;
        let mut grads = sum.expect("non-empty batch");
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        self.optimizer
            .update(&mut self.params, &grads, self.learning_rate, self.weight_decay)?;
        Ok(loss / batch.len() as f64)
    }
}

/// Pixel-pooled DSC of thresholded predictions over a set of slices.
pub fn slice_dsc(params: &MeNetParams<f32>, slices: &[&SliceSample], threshold: f64) -> Result<f64> {
    let _ftz = FlushDenormals::enable();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for s in slices {
        let out = params.forward(&s.t1w, &s.fa)?;
        for (&p, &y) in out.probabilities.data().iter().zip(s.label.data()) {
            let (p, y) = (p as f64 > threshold, y == 1.0);
            tp += (p && y) as u64;
            fp += (p && !y) as u64;
            fn_ += (!p && y) as u64;
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { (2 * tp) as f64 / denom as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub report: MetricReport,
}

/// Mean and population std over the cases where a metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let undefined = values.len() - defined.len();
        if defined.is_empty() {
            return MetricSummary {
                mean: None,
                std: None,
                defined: 0,
                undefined,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MetricSummary {
            mean: Some(mean),
            std: Some(var.sqrt()),
            defined: defined.len(),
            undefined,
        }
    }

    pub fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) if self.undefined == 0 => format!("{m:.4} ± {s:.4}"),
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4} ({} undefined)", self.undefined),
            _ => "undefined".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub cases: Vec<CaseReport>,
    pub dsc: MetricSummary,
    pub ravd: MetricSummary,
    pub hd: MetricSummary,
    pub assd: MetricSummary,
}

impl EvalReport {
    pub fn from_cases(split: &str, cases: Vec<CaseReport>) -> Self {
        let col = |f: fn(&MetricReport) -> Option<f64>| {
            MetricSummary::from_values(&cases.iter().map(|c| f(&c.report)).collect::<Vec<_>>())
        };
        EvalReport {
            split: split.to_string(),
            dsc: col(|r| Some(r.dsc)),
            ravd: col(|r| r.ravd),
            hd: col(|r| r.hd),
            assd: col(|r| r.assd),
            cases,
        }
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<12} {:>10} {:>10} {:>10} {:>10}\n", "case", "dsc", "ravd%", "hd_mm", "assd_mm");
        for c in &self.cases {
            let r = &c.report;
            out += &format!(
                "{:<12} {:>10} {:>10} {:>10} {:>10}\n",
                c.case,
                cell(Some(r.dsc)),
                cell(r.ravd),
                cell(r.hd),
                cell(r.assd)
            );
        }
        out += &format!(
            "mean ± std: dsc {} | ravd {} | hd {} | assd {}\n",
            self.dsc.cell(),
            self.ravd.cell(),
            self.hd.cell(),
            self.assd.cell()
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: EvalReport,
}

pub fn load_split(data: &Path) -> Result<SplitSpec> {
    let path = data.join(SPLIT_FILE);
    if !path.is_file() {
        return Err(Error::Data(format!("no split file at {}", path.display())));
    }
    SplitSpec::load(path)
}

fn load_cases(data: &Path, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter().map(|id| Case::load(data.join(id))).collect()
}

fn check_extents(config: &MeNetConfig, case: &Case) -> Result<()> {
    let [x, y, _] = case.extents();
    if x != config.width || y != config.height {
        return Err(Error::Config(format!(
            "case {} has {x}×{y} slices, model expects {}×{}",
            case.id, config.width, config.height
        )));
    }
    Ok(())
}

/// Per-case metrics of `params` (or of the ground truth itself when `oracle`) on `cases`.
pub fn evaluate_cases(params: Option<&MeNetParams<f32>>, cases: &[Case], split: &str, threshold: f64) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = match params {
            Some(p) => {
                check_extents(&p.config, case)?;
                predict_volume(p, case, threshold)?
            }
            None => case.label.clone(),
        };
        reports.push(CaseReport {
            case: case.id.clone(),
            report: report(&pred, &case.label)?,
        });
    }
    Ok(EvalReport::from_cases(split, reports))
}

/// Loads the named split of `data` and evaluates; `params = None` is oracle mode.
pub fn evaluate(params: Option<&MeNetParams<f32>>, data: &Path, split: &str, threshold: f64) -> Result<EvalReport> {
    let spec = load_split(data)?;
    let cases = load_cases(data, spec.part(split)?)?;
    evaluate_cases(params, &cases, split, threshold)
}

fn mean_dsc(report: &EvalReport) -> Option<f64> {
    report.dsc.mean
}

/// Trains on the split's training cases, keeps the best-validation-DSC
/// epoch, evaluates it on the test cases and writes the checkpoint and run
/// record under `out` when given.
pub fn train(config: &TrainConfig, data: &Path, out: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let spec = load_split(data)?;
    let mut train_slices: Vec<Vec<SliceSample>> = Vec::new();
    for (i, id) in spec.train.iter().enumerate() {
        let case = Case::load(data.join(id))?;
        check_extents(&config.model, &case)?;
        let filter = SliceFilter {
            empty_fraction: config.empty_fraction,
            seed: derive_seed(config.seed, i as u64),
        };
        train_slices.push(extract_slices(&case, Some(filter)));
    }
    let val = load_cases(data, &spec.val)?;
    let test = load_cases(data, &spec.test)?;

    let per_epoch: usize = train_slices
        .iter()
        .map(|s| config.max_slices_per_case.map_or(s.len(), |m| m.min(s.len())))
        .sum();
    if config.batch_size > per_epoch {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {per_epoch} training slices per epoch",
            config.batch_size
        )));
    }

    let params = init::<f32>(&config.model, config.seed)?;
    let mut trainer = Trainer::new(params, config.learning_rate, config.weight_decay);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MeNetParams<f32>)> = None;

    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(derive_seed(config.seed, 0x0e90c4), epoch as u64);
        let mut order: Vec<&SliceSample> = Vec::with_capacity(per_epoch);
        for (ci, slices) in train_slices.iter().enumerate() {
            match config.max_slices_per_case {
                Some(m) if m < slices.len() => {
                    let mut idx: Vec<usize> = (0..slices.len()).collect();
                    idx.shuffle(&mut rng(derive_seed(epoch_seed, ci as u64)));
                    order.extend(idx[..m].iter().map(|&i| &slices[i]));
                }
                _ => order.extend(slices.iter()),
            }
        }
        order.shuffle(&mut rng(epoch_seed));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            loss_sum += trainer.step(batch)? * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;

        let val_dsc = if val.is_empty() {
            None
        } else {
            mean_dsc(&evaluate_cases(Some(&trainer.params), &val, "val", config.threshold)?)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_dsc,
        });
        let score = val_dsc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) || val.is_empty() {
            best = Some((score, epoch, trainer.params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let test = evaluate_cases(Some(&best_params), &test, "test", config.threshold)?;
    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        epochs,
        best_epoch,
        test,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        checkpoint::save(&best_params, out.join(CHECKPOINT_FILE))?;
        write_json(&record, &out.join(RUN_FILE))?;
    }
    Ok(record)
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per (model, seed): mean test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub seed: u64,
    pub dsc: Option<f64>,
    pub ravd: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
}

impl AblationRow {
    fn from_record(variant: Variant, record: &RunRecord) -> Self {
        AblationRow {
            model: variant.name().to_string(),
            seed: record.seed,
            dsc: record.test.dsc.mean,
            ravd: record.test.ravd.mean,
            hd: record.test.hd.mean,
            assd: record.test.assd.mean,
        }
    }

    fn metrics(&self) -> [Option<f64>; 4] {
        [self.dsc, self.ravd, self.hd, self.assd]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Per-model means over seeds, menet first.
    pub summary: Vec<AblationRow>,
    /// menet minus baseline for each metric.
    pub delta: [Option<f64>; 4],
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v}"));
        let mut out = String::from("model,seed,dsc,ravd,hd,assd\n");
        for r in &self.rows {
            let m = r.metrics();
            out += &format!(
                "{},{},{},{},{},{}\n",
                r.model,
                r.seed,
                cell(m[0]),
                cell(m[1]),
                cell(m[2]),
                cell(m[3])
            );
        }
        out
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<10} {:>10} {:>10} {:>10} {:>10}\n", "model", "dsc", "ravd%", "hd_mm", "assd_mm");
        for r in self.summary.iter() {
            let m = r.metrics();
            out += &format!(
                "{:<10} {:>10} {:>10} {:>10} {:>10}\n",
                r.model,
                cell(m[0]),
                cell(m[1]),
                cell(m[2]),
                cell(m[3])
            );
        }
        let d = self.delta;
        out += &format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10}\n",
            "delta",
            cell(d[0]),
            cell(d[1]),
            cell(d[2]),
            cell(d[3])
        );
        out
    }
}

/// Trains each variant in `variants` for each seed with otherwise identical config.
pub fn ablate(config: &TrainConfig, data: &Path, seeds: &[u64], variants: &[Variant], out: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            let dir = out.map(|o| o.join(format!("{}_seed{seed}", variant.name())));
            let record = train(&cfg, data, dir.as_deref())?;
            rows.push(AblationRow::from_record(variant, &record));
        }
    }
    let mut order: Vec<Variant> = vec![Variant::Menet, Variant::Baseline];
    order.retain(|v| variants.contains(v));
    let summary: Vec<AblationRow> = order
        .iter()
        .map(|v| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.model == v.name()).collect();
            let mean = |k: usize| MetricSummary::from_values(&mine.iter().map(|r| r.metrics()[k]).collect::<Vec<_>>()).mean;
            AblationRow {
                model: v.name().to_string(),
                seed: config.seed,
                dsc: mean(0),
                ravd: mean(1),
                hd: mean(2),
                assd: mean(3),
            }
        })
        .collect();
    let delta = match summary.as_slice() {
        [a, b] => {
            let (a, b) = (a.metrics(), b.metrics());
            [0, 1, 2, 3].map(|k| Some(a[k]? - b[k]?))
        }
        _ => [None; 4],
    };
    let report = AblationReport { rows, summary, delta };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&report, &out.join("ablation.json"))?;
        fs::write(out.join("ablation.csv"), report.csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(report)
}
