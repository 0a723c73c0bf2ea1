//! Loss stack, optimisation loop and temporal-only evaluation.

use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ForwardTrace;
use crate::data::{batch, M4Collection, SeriesDataset, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, Metric, MetricReport, MASE_EPS};
use crate::model::{CalfModel, ProjectionStack};
use crate::tensor::{Adam, AdamConfig, LossKind, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Layer decay: layer `l` of `L` is weighted `γ^(L−l)`.
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            lambda1: 1.0,
            lambda2: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config(format!(
                "loss weights out of range: gamma={} lambda1={} lambda2={}",
                self.gamma, self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }

    /// Weights for layers `1..=L`, deepest last and equal to 1.
    pub fn layer_weights(&self, layers: usize) -> Vec<f64> {
        (1..=layers).map(|l| self.gamma.powi((layers - l) as i32)).collect()
    }
}

/// Similarity used by each loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub sup: LossKind,
    pub feature: LossKind,
    pub output: LossKind,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self::uniform(LossKind::SmoothL1)
    }
}

impl SimSpec {
    pub fn uniform(kind: LossKind) -> Self {
        Self {
            sup: kind,
            feature: kind,
            output: kind,
        }
    }

    /// L1 for ETT, SMAPE/MASE/SmoothL1 for M4, SmoothL1 elsewhere.
    pub fn for_dataset(name: &str) -> Self {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("ett") {
            Self::uniform(LossKind::L1)
        } else if lower.starts_with("m4") {
            Self {
                sup: LossKind::Smape,
                feature: LossKind::SmoothL1,
                output: LossKind::Mase,
            }
        } else {
            Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.feature.is_elementwise() {
            return Err(Error::config(format!(
                "feature similarity must be elementwise, got {}",
                self.feature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub enable_feature: bool,
    pub enable_output: bool,
    /// Detach the textual branch before the alignment losses.
    pub stop_gradient_textual: bool,
    pub adam: AdamConfig,
    /// Hard cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    /// Seasonality for MASE-based terms.
    pub season: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            seed: 2024,
            patience: 3,
            enable_feature: true,
            enable_output: true,
            stop_gradient_textual: false,
            adam: AdamConfig::default(),
            max_steps: None,
            season: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        self.adam.validate()
    }
}

fn similarity<T: Scalar>(tape: &mut Tape<T>, kind: LossKind, a: Var, b: Var, scales: Option<&[T]>) -> Result<Var> {
    match kind {
        LossKind::Mase => {
            let s = scales.ok_or_else(|| Error::usage("MASE similarity needs in-sample scales"))?;
            tape.mase_loss(a, b, s)
        }
        other => tape.loss(other, a, b),
    }
}

/// `Σ_l γ^(L−l) · sim(φ_text_l(F_text^l), φ_time_l(F_time^l))`.
pub fn feature_reg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    text: &ForwardTrace,
    time: &ForwardTrace,
    proj: &ProjectionStack<T>,
    weights: &LossWeights,
    kind: LossKind,
) -> Result<Var> {
    let layers = text.features.len();
    if time.features.len() != layers || proj.layers() != layers || layers == 0 {
        return Err(Error::usage(format!(
            "layer counts differ: textual {layers}, temporal {}, projections {}",
            time.features.len(),
            proj.layers()
        )));
    }
    if !kind.is_elementwise() {
        return Err(Error::usage(format!("{kind} is not an elementwise similarity")));
    }
    let mut total: Option<Var> = None;
    for (l, w) in weights.layer_weights(layers).into_iter().enumerate() {
        let a = proj.text[l].forward(tape, text.features[l])?;
        let b = proj.time[l].forward(tape, time.features[l])?;
        let s = tape.loss(kind, a, b)?;
        let s = tape.scale(s, w);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `sim(Y_text, Y_time)`; MASE divides by the given per-row scales.
pub fn output_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_text: Var,
    y_time: Var,
    kind: LossKind,
    scales: Option<&[T]>,
) -> Result<Var> {
    similarity(tape, kind, y_text, y_time, scales)
}

/// `sup + λ1·feature + λ2·output`; absent terms contribute nothing.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    sup: Var,
    feature: Option<Var>,
    output: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = sup;
    if let Some(f) = feature {
        let f = tape.scale(f, weights.lambda1);
        total = tape.add(total, f)?;
    }
    if let Some(o) = output {
        let o = tape.scale(o, weights.lambda2);
        total = tape.add(total, o)?;
    }
    Ok(total)
}

/// Per-(sample, channel) seasonal-naive scale of `[B, T, C]` windows.
pub fn seasonal_scales<T: Scalar>(inputs: &Tensor<T>, season: usize) -> Result<Vec<T>> {
    let s = inputs.shape();
    if s.len() != 3 || s[1] <= season || season == 0 {
        return Err(Error::shape("seasonal_scales", s, &[season]));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    let x = inputs.data();
    let mut out = Vec::with_capacity(b * c);
    let mut clamped = 0;
    for i in 0..b {
        for ch in 0..c {
            let at = |k: usize| x[i * t * c + k * c + ch].as_f64();
            let mut v = (season..t).map(|k| (at(k) - at(k - season)).abs()).sum::<f64>() / (t - season) as f64;
            if v < MASE_EPS {
                v = MASE_EPS;
                clamped += 1;
            }
            out.push(T::lit(v));
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} MASE scales below {MASE_EPS} were clamped");
    }
    Ok(out)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub sup: f64,
    pub feature: f64,
    pub output: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossValues,
    pub grad_norm: f64,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "step={} sup={:.6} feature={:.6} output={:.6} total={:.6} grad_norm={:.6}",
            self.step, l.sup, l.feature, l.output, l.total, self.grad_norm
        )
    }
}

/// Loss assembly and optimiser state for one model.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub sim: SimSpec,
    optimizer: Adam<T>,
}

struct Assembled {
    loss: Var,
    values: LossValues,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, weights: LossWeights, sim: SimSpec) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        sim.validate()?;
        Ok(Self {
            optimizer: Adam::new(config.adam),
            config,
            weights,
            sim,
        })
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps()
    }

    fn assemble(&self, tape: &mut Tape<T>, model: &CalfModel<T>, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<Assembled> {
        let temporal = model.forward_temporal(tape, inputs)?;
        let truth = tape.constant(targets.transpose_last2()?);
        let needs_scales = [self.sim.sup, self.sim.output].contains(&LossKind::Mase);
        let scales = if needs_scales {
            Some(seasonal_scales(inputs, self.config.season)?)
        } else {
            None
        };
        let sup = similarity(tape, self.sim.sup, temporal.forecast, truth, scales.as_deref())?;

        let mut feature = None;
        let mut output = None;
        if self.config.enable_feature || self.config.enable_output {
            let mut textual = model.forward_textual(tape, &temporal)?;
            if self.config.stop_gradient_textual {
                for f in &mut textual.trace.features {
                    *f = tape.detach(*f);
                }
                textual.forecast = tape.detach(textual.forecast);
            }
            if self.config.enable_feature {
                feature = Some(feature_reg_loss(
                    tape,
                    &textual.trace,
                    &temporal.trace,
                    &model.projections,
                    &self.weights,
                    self.sim.feature,
                )?);
            }
            if self.config.enable_output {
                output = Some(output_consistency_loss(
                    tape,
                    textual.forecast,
                    temporal.forecast,
                    self.sim.output,
                    scales.as_deref(),
                )?);
            }
        }
        let loss = total_loss(tape, sup, feature, output, &self.weights)?;
        let v = |x: Option<Var>, tape: &Tape<T>| x.map_or(0.0, |x| tape.value(x).data()[0].as_f64());
        let values = LossValues {
            sup: v(Some(sup), tape),
            feature: v(feature, tape),
            output: v(output, tape),
            total: v(Some(loss), tape),
        };
        if !values.total.is_finite() {
            let culprit = tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::Numeric(format!("non-finite loss; first non-finite tensor: {culprit}")));
        }
        Ok(Assembled { loss, values })
    }

    /// Loss components without touching gradients.
    pub fn losses(&self, model: &CalfModel<T>, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValues> {
        let mut tape = Tape::new();
        Ok(self.assemble(&mut tape, model, inputs, targets)?.values)
    }

    /// Loss components and the gradient of the total loss for every
    /// trainable tensor, by name.
    pub fn gradients(
        &self,
        model: &mut CalfModel<T>,
        inputs: &Tensor<T>,
        targets: &Tensor<T>,
    ) -> Result<(LossValues, IndexMap<String, Vec<T>>)> {
        let mut tape = Tape::new();
        for (_, p) in model.trainable_parameters_mut() {
            tape.watch(p);
        }
        let result = self
            .assemble(&mut tape, model, inputs, targets)
            .and_then(|a| Ok((a.values, tape.backward(a.loss)?)));
        let mut out = IndexMap::new();
        match result {
            Ok((values, grads)) => {
                for (name, p) in model.trainable_parameters_mut() {
                    let g = grads.of(p).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.len()]);
                    p.set_node(None);
                    out.insert(name, g);
                }
                Ok((values, out))
            }
            Err(e) => {
                for (_, p) in model.trainable_parameters_mut() {
                    p.set_node(None);
                }
                Err(e)
            }
        }
    }

    /// Forward through both branches, backward, one Adam update.
    pub fn train_step(&mut self, model: &mut CalfModel<T>, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<StepReport> {
        let (losses, grads) = self.gradients(model, inputs, targets)?;
        let grad_norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let mut params = model.trainable_parameters_mut();
        for ((_, p), g) in params.iter_mut().zip(grads.into_values()) {
            p.set_grad(g)?;
        }
        self.optimizer.step(params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)))?;
        let report = StepReport {
            step: self.optimizer.steps(),
            losses,
            grad_norm,
        };
        log::info!("{report}");
        Ok(report)
    }
}

/// Indexable collection of training windows.
pub trait Samples<T> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[B, T, C]` inputs and `[B, H, C]` targets for the given indices.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Stride-1 windows over a multivariate view.
pub struct SeriesWindows<'a> {
    pub view: &'a SeriesDataset,
    pub spec: WindowSpec,
}

impl<T: Scalar> Samples<T> for SeriesWindows<'_> {
    fn len(&self) -> usize {
        self.spec.count(self.view.len())
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        batch(self.view, &self.spec, indices)
    }
}

/// Univariate windows drawn from the in-sample part of M4 series.
pub struct M4Windows {
    pub spec: WindowSpec,
    series: Vec<Vec<f64>>,
    index: Vec<(usize, usize)>,
}

impl M4Windows {
    /// Keeps at most `per_series` windows from the end of each history.
    pub fn new(collection: &M4Collection, per_series: usize) -> Self {
        let spec = collection.window_spec();
        let mut series = Vec::new();
        let mut index = Vec::new();
        for (i, s) in collection.series.iter().enumerate() {
            let count = spec.count(s.train.len());
            let first = count.saturating_sub(per_series);
            index.extend((first..count).map(|start| (i, start)));
            series.push(s.train.clone());
        }
        Self { spec, series, index }
    }
}

impl<T: Scalar> Samples<T> for M4Windows {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (t, h) = (self.spec.input_len, self.spec.horizon);
        let mut x = Vec::with_capacity(indices.len() * t);
        let mut y = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            let (s, start) = self.index[i];
            let v = &self.series[s][start..start + t + h];
            x.extend(v[..t].iter().map(|&v| T::lit(v)));
            y.extend(v[t..].iter().map(|&v| T::lit(v)));
        }
        Ok((Tensor::new(&[indices.len(), t, 1], x)?, Tensor::new(&[indices.len(), h, 1], y)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub epochs: usize,
    pub train_windows: usize,
    /// Validation MSE after each epoch.
    pub val_mse: Vec<f64>,
    pub best_val_mse: Option<f64>,
    pub reports: Vec<StepReport>,
}

/// Shuffled mini-batch training with early stopping on validation MSE.
/// The best parameters seen on validation are restored at the end.
pub fn fit<T: Scalar>(
    model: &mut CalfModel<T>,
    trainer: &mut Trainer<T>,
    train: &dyn Samples<T>,
    val: Option<&dyn Samples<T>>,
) -> Result<FitSummary> {
    let n = train.len();
    if n == 0 {
        return Err(Error::usage("no training windows"));
    }
    log::info!("training windows: {n}");
    let cfg = trainer.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut summary = FitSummary {
        steps: 0,
        epochs: 0,
        train_windows: n,
        val_mse: Vec::new(),
        best_val_mse: None,
        reports: Vec::new(),
    };
    let mut best: Option<Vec<Tensor<T>>> = None;
    let mut stale = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| summary.steps as usize >= m) {
                break 'epochs;
            }
            let (x, y) = train.batch(chunk)?;
            let report = trainer.train_step(model, &x, &y)?;
            summary.steps = report.step;
            summary.reports.push(report);
        }
        summary.epochs = epoch + 1;
        if let Some(v) = val {
            let mse = samples_mse(model, v, cfg.batch_size)?;
            log::info!("epoch={} val_mse={mse:.6}", epoch + 1);
            summary.val_mse.push(mse);
            if summary.best_val_mse.is_none_or(|b| mse < b) {
                summary.best_val_mse = Some(mse);
                best = Some(model.trainable_parameters().into_iter().map(|(_, t)| t.clone()).collect());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("early stop after epoch {}", epoch + 1);
                    break;
                }
            }
        }
    }
    if summary.epochs == 0 {
        summary.epochs = 1;
    }
    if let (Some(snapshot), Some(last)) = (best, summary.val_mse.last()) {
        if summary.best_val_mse != Some(*last) {
            for ((_, p), s) in model.trainable_parameters_mut().into_iter().zip(snapshot) {
                *p = s;
            }
        }
    }
    Ok(summary)
}

fn samples_mse<T: Scalar>(model: &CalfModel<T>, samples: &dyn Samples<T>, batch_size: usize) -> Result<f64> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::usage("empty evaluation split"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = samples.batch(chunk)?;
        let pred = model.forecast(&x)?;
        for (p, t) in pred.data().iter().zip(y.data()) {
            let d = p.as_f64() - t.as_f64();
            sum += d * d;
        }
        count += y.len();
    }
    Ok(sum / count as f64)
}

/// Forecasts every window of `view` with the temporal branch only and
/// reports MSE/MAE at the model's horizon.
pub fn evaluate<T: Scalar>(model: &CalfModel<T>, view: &SeriesDataset, input_len: usize, batch_size: usize) -> Result<MetricReport> {
    let spec = WindowSpec {
        input_len,
        horizon: model.config.horizon,
    };
    let samples = SeriesWindows { view, spec };
    let n = <SeriesWindows as Samples<T>>::len(&samples);
    if n == 0 {
        return Err(Error::usage(format!(
            "evaluation split of {} rows has no {}-row window",
            view.len(),
            spec.span()
        )));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y): (Tensor<T>, Tensor<T>) = samples.batch(chunk)?;
        pred.extend(model.forecast(&x)?.to_f64_vec());
        truth.extend(y.to_f64_vec());
    }
    let h = spec.horizon;
    let mut report = MetricReport::new();
    report.push(Metric::Mse, h, metrics::mse(&pred, &truth)?);
    report.push(Metric::Mae, h, metrics::mae(&pred, &truth)?);
    report.set_count(h, n);
    Ok(report)
}

/// MSE of repeating each window's last observed value over the horizon.
pub fn naive_repeat_last_mse(view: &SeriesDataset, spec: &WindowSpec) -> Result<f64> {
    let c = view.num_channels();
    let x = view.values.data();
    let (mut sum, mut count) = (0.0, 0usize);
    for start in 0..spec.count(view.len()) {
        let last = start + spec.input_len - 1;
        for k in 0..spec.horizon {
            for ch in 0..c {
                let d = x[(last + 1 + k) * c + ch] - x[last * c + ch];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::usage("no windows for the naive baseline"));
    }
    Ok(sum / count as f64)
}

/// SMAPE, MASE and OWA on an M4 subset: each series is forecast from the
/// last `2H` in-sample points.
pub fn evaluate_m4<T: Scalar>(
    model: &CalfModel<T>,
    collection: &M4Collection,
    references: Option<(f64, f64)>,
) -> Result<MetricReport> {
    let (t, h, m) = (collection.input_len(), collection.horizon(), collection.frequency.seasonality());
    if model.config.horizon != h || model.config.input_len != t {
        return Err(Error::config(format!(
            "model expects T={} H={}, {} needs T={t} H={h}",
            model.config.input_len, model.config.horizon, collection.frequency
        )));
    }
    if collection.series.is_empty() {
        return Err(Error::usage(format!("{} has no usable series", collection.frequency)));
    }
    let (mut smape_sum, mut mase_sum) = (0.0, 0.0);
    for chunk in collection.series.chunks(64) {
        let mut x = Vec::with_capacity(chunk.len() * t);
        for s in chunk {
            x.extend(s.train[s.train.len() - t..].iter().map(|&v| T::lit(v)));
        }
        let pred = model.forecast(&Tensor::new(&[chunk.len(), t, 1], x)?)?.to_f64_vec();
        for (s, p) in chunk.iter().zip(pred.chunks(h)) {
            smape_sum += metrics::smape(p, &s.test)?;
            mase_sum += metrics::mase(p, &s.test, &s.train, m)?;
        }
    }
    let n = collection.series.len() as f64;
    let (smape, mase) = (smape_sum / n, mase_sum / n);
    let (rs, rm) = match references {
        Some(r) => r,
        None => metrics::seasonal_naive_reference(collection.series.iter().map(|s| (&s.train[..], &s.test[..])), m)?,
    };
    let mut report = MetricReport::new();
    report.push(Metric::Smape, h, smape);
    report.push(Metric::Mase, h, mase);
    report.push(Metric::Owa, h, metrics::owa(smape, mase, rs, rm)?);
    report.set_count(h, collection.series.len());
    Ok(report)
}
