//! Masked loss, Adam, the training loop with early stopping, evaluation and
//! the noise-robustness sweep.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_noise, shuffled, CityDataset, SampleSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{high_frequency_filter, MetricReport, Period};
use crate::model::{model_forward, CityInput, Model, RiskMap, Switches};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CROSSRISK_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub switches: Switches,
    /// Standard deviation of Gaussian noise added to training inputs.
    pub noise_level: f64,
    pub t_in: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 200,
            patience: 10,
            batch_size: 8,
            seed: 0,
            switches: Switches::default(),
            noise_level: 0.0,
            t_in: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Train(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.t_in == 0 {
            return Err(Error::Train("patience, batch size and window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Train("betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Train(format!("noise level {} is negative", self.noise_level)));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per registered parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn optimizer_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Train(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = &grads[k];
        let p = store.get(id);
        if g.shape() != p.shape() {
            return Err(Error::Train(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                store.name(id),
                p.shape()
            )));
        }
        let m: Vec<f64> = state.m[k]
            .data()
            .iter()
            .zip(g.data())
            .map(|(m, g)| cfg.beta1 * m + (1.0 - cfg.beta1) * g)
            .collect();
        let v: Vec<f64> = state.v[k]
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, g)| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)
            .collect();
        let updated: Vec<f64> = p
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(p, (m, v))| p - cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
            .collect();
        let shape = p.shape().to_vec();
        store.set(id, Tensor::new(shape.clone(), updated)?)?;
        state.m[k] = Tensor::new(shape.clone(), m)?;
        state.v[k] = Tensor::new(shape, v)?;
    }
    Ok(())
}

fn valid_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::Train("mask has no valid cell".into())),
        n => Ok(n),
    }
}

fn mask_tensor(mask: &[bool], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

/// Mean squared error over valid cells, recorded on `tape`. Truth values at
/// invalid cells never enter the graph.
pub fn masked_mse_on(tape: &mut Tape, pred: Var, truth: &Tensor, mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if truth.shape() != shape.as_slice() || mask.len() != truth.numel() {
        return Err(Error::ShapeMismatch {
            op: "masked_loss",
            lhs: shape,
            rhs: truth.shape().to_vec(),
        });
    }
    let count = valid_count(mask)?;
    let clean: Vec<f64> = truth.data().iter().zip(mask).map(|(&t, &m)| if m { t } else { 0.0 }).collect();
    let t = tape.constant(Tensor::new(shape.clone(), clean)?);
    let m = tape.constant(mask_tensor(mask, &shape)?);
    let diff = tape.sub(pred, t)?;
    let diff = tape.mul(diff, m)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Equal-weight mean over cities of the per-city masked MSE.
pub fn masked_loss(pred: &[RiskMap], truth: &[Tensor]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Train(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.values.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_loss",
                lhs: p.values.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let count = valid_count(&p.mask)?;
        let sum: f64 = p
            .values
            .data()
            .iter()
            .zip(t.data())
            .zip(&p.mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).powi(2))
            .sum();
        total += sum / count as f64;
    }
    Ok(total / pred.len() as f64)
}

/// Aligned datasets with their joint windows.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub datasets: &'a [CityDataset],
    pub samples: &'a SampleSet,
}

/// Model inputs of one window for every city, optionally perturbed.
pub struct Sample {
    pub geo: Vec<Tensor>,
    pub sem: Vec<Tensor>,
    pub truth: Vec<Tensor>,
}

/// Per-(level, sample, city, modality) noise seed.
fn noise_seed(seed: u64, sample: usize, city: usize, modality: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((sample as u64) << 20)
        .wrapping_add((city as u64) << 4)
        .wrapping_add(modality)
}

impl TrainData<'_> {
    pub fn sample(&self, i: usize, noise: f64, seed: u64) -> Result<Sample> {
        let t_in = self.samples.t_in;
        let target = self.samples.target_index(i);
        let mut s = Sample {
            geo: Vec::with_capacity(self.datasets.len()),
            sem: Vec::with_capacity(self.datasets.len()),
            truth: Vec::with_capacity(self.datasets.len()),
        };
        for (c, ds) in self.datasets.iter().enumerate() {
            s.geo.push(inject_noise(&ds.geo_window(i, t_in)?, noise, noise_seed(seed, i, c, 0))?);
            s.sem.push(inject_noise(&ds.sem_window(i, t_in)?, noise, noise_seed(seed, i, c, 1))?);
            s.truth.push(ds.target(target)?);
        }
        Ok(s)
    }

    fn inputs<'s>(&'s self, s: &'s Sample) -> Vec<CityInput<'s>> {
        self.datasets
            .iter()
            .enumerate()
            .map(|(c, ds)| CityInput {
                name: &ds.name,
                x_geo: &s.geo[c],
                x_sem: &s.sem[c],
                supports: &ds.supports,
                map: &ds.map,
                mask: &ds.mask,
            })
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Train("no datasets".into()));
        }
        let min_steps = self.datasets.iter().map(CityDataset::steps).min().unwrap_or(0);
        if self.samples.count + self.samples.t_in + self.samples.t_out - 1 > min_steps {
            return Err(Error::Train("sample set is longer than the shortest dataset".into()));
        }
        Ok(())
    }
}

/// Loss and parameter gradients (in registry order) for one sample.
pub fn sample_gradients(model: &Model, data: &TrainData, s: &Sample, switches: Switches) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let p = model.layout.map(&mut |id| vars[id.0]);
    let inputs = data.inputs(s);
    let preds = model_forward(&mut tape, &inputs, &p, switches)?;
    let mut losses = Vec::with_capacity(preds.len());
    for ((&pred, truth), ds) in preds.iter().zip(&s.truth).zip(data.datasets) {
        losses.push(masked_mse_on(&mut tape, pred, truth, &ds.mask)?);
    }
    let stacked = tape.concat(&losses, 0)?;
    let loss = tape.mean(stacked);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
        .collect();
    Ok((value, out))
}

/// Forward pass for one sample, returning masked risk maps per city.
pub fn predict_sample(model: &Model, data: &TrainData, s: &Sample, switches: Switches) -> Result<Vec<RiskMap>> {
    model.predict(&data.inputs(s), switches)
}

/// Mean loss over `indices` without perturbation.
pub fn evaluate_loss(model: &Model, data: &TrainData, indices: &[usize], switches: Switches) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Train("no samples to evaluate".into()));
    }
    let losses: Vec<f64> = with_pool(|| {
        indices
            .par_iter()
            .map(|&i| {
                let s = data.sample(i, 0.0, 0)?;
                masked_loss(&predict_sample(model, data, &s, switches)?, &s.truth)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] when it is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Train(format!("{}: {e}", path.display())))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::Train(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Number of epochs that updated parameters.
    pub fn trained_epochs(&self) -> usize {
        self.epochs.iter().filter(|r| r.epoch > 0).count()
    }
}

/// Hooks into [`train_with`].
pub struct TrainHooks<'a> {
    /// Validation loss of the current parameters.
    pub validate: Box<dyn FnMut(&Model) -> Result<f64> + 'a>,
    /// Called after every epoch record; returning `false` stops training.
    pub observe: Box<dyn FnMut(&EpochRecord) -> bool + 'a>,
    /// Called with the parameters whenever validation improves.
    pub on_best: Box<dyn FnMut(&Model, &EpochRecord) -> Result<()> + 'a>,
}

/// Trains on the train split with validation on the val split, keeping the
/// best-validation parameters in `model`. When `checkpoint` is given, the
/// best parameters are written there on every improvement.
pub fn train(model: &mut Model, data: &TrainData, cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<History> {
    let val: Vec<usize> = data.samples.indices(Split::Val).collect();
    if val.is_empty() {
        return Err(Error::Train("validation split is empty".into()));
    }
    let switches = cfg.switches;
    let cfg_json = serde_json::to_value(cfg).expect("config serializes");
    let hooks = TrainHooks {
        validate: Box::new(|m: &Model| evaluate_loss(m, data, &val, switches)),
        observe: Box::new(|_| true),
        on_best: Box::new(|m: &Model, r: &EpochRecord| match checkpoint {
            Some(dir) => m.save(dir, serde_json::json!({ "train": cfg_json, "epoch": r.epoch, "val_loss": r.val_loss })),
            None => Ok(()),
        }),
    };
    train_with(model, data, cfg, hooks)
}

pub fn train_with(model: &mut Model, data: &TrainData, cfg: &TrainConfig, mut hooks: TrainHooks) -> Result<History> {
    cfg.validate()?;
    data.check()?;
    let train_idx: Vec<usize> = data.samples.indices(Split::Train).collect();
    if train_idx.is_empty() {
        return Err(Error::Train("training split is empty".into()));
    }
    let started = Instant::now();
    let mut history = History::default();
    let initial = EpochRecord {
        epoch: 0,
        train_loss: evaluate_loss(model, data, &train_idx, cfg.switches)?,
        val_loss: (hooks.validate)(model)?,
        improved: false,
        seconds: started.elapsed().as_secs_f64(),
    };
    if !initial.train_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let keep_going = (hooks.observe)(&initial);
    history.epochs.push(initial);
    if !keep_going {
        return Ok(history);
    }

    let mut adam = AdamState::new(&model.store);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let order = shuffled(train_idx.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = with_pool(|| {
                batch
                    .par_iter()
                    .map(|&k| {
                        let i = train_idx[k];
                        let noise_key = cfg.seed ^ (epoch as u64).rotate_left(32);
                        let s = data.sample(i, cfg.noise_level, noise_key)?;
                        sample_gradients(model, data, &s, cfg.switches)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let scale = 1.0 / results.len() as f64;
            let mut acc: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.numel()]).collect();
            for (loss, grads) in &results {
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += scale * y;
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads: Vec<Tensor> = acc
                .into_iter()
                .zip(&results[0].1)
                .map(|(a, g)| Tensor::new(g.shape().to_vec(), a))
                .collect::<Result<_>>()?;
            optimizer_step(&mut model.store, &grads, &mut adam, cfg)?;
        }
        let val_loss = (hooks.validate)(model)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            improved,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if improved {
            since_best = 0;
            best = Some((val_loss, model.store.clone()));
            history.best_epoch = Some(epoch);
            history.best_val = Some(val_loss);
            (hooks.on_best)(model, &record)?;
        } else {
            since_best += 1;
        }
        let keep_going = (hooks.observe)(&record);
        history.epochs.push(record);
        if !keep_going {
            break;
        }
        if since_best >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(history)
}

/// Stacked predictions and truths of one city over a set of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct CityPredictions {
    pub city: String,
    /// Window index of every stacked step.
    pub windows: Vec<usize>,
    /// `steps x cells`, zero on invalid cells.
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Predicts `indices` for every city, with inputs perturbed at `noise`.
pub fn predict_windows(
    model: &Model,
    data: &TrainData,
    indices: &[usize],
    switches: Switches,
    noise: f64,
    seed: u64,
) -> Result<Vec<CityPredictions>> {
    let per_sample: Vec<(Vec<RiskMap>, Vec<Tensor>)> = with_pool(|| {
        indices
            .par_iter()
            .map(|&i| {
                let s = data.sample(i, noise, seed)?;
                Ok((predict_sample(model, data, &s, switches)?, s.truth))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(data
        .datasets
        .iter()
        .enumerate()
        .map(|(c, ds)| {
            let mut out = CityPredictions {
                city: ds.name.clone(),
                windows: indices.to_vec(),
                pred: Vec::with_capacity(indices.len() * ds.cells()),
                truth: Vec::with_capacity(indices.len() * ds.cells()),
                mask: ds.mask.clone(),
            };
            for (maps, truths) in &per_sample {
                out.pred.extend_from_slice(maps[c].values.data());
                out.truth.extend_from_slice(truths[c].data());
            }
            out
        })
        .collect())
}

impl CityPredictions {
    /// Keeps only the rows whose window is in `keep`.
    pub fn restrict(&self, keep: &[usize]) -> CityPredictions {
        let cells = self.mask.len();
        let mut out = CityPredictions {
            city: self.city.clone(),
            windows: Vec::new(),
            pred: Vec::new(),
            truth: Vec::new(),
            mask: self.mask.clone(),
        };
        for (row, &w) in self.windows.iter().enumerate() {
            if keep.contains(&w) {
                out.windows.push(w);
                out.pred.extend_from_slice(&self.pred[row * cells..(row + 1) * cells]);
                out.truth.extend_from_slice(&self.truth[row * cells..(row + 1) * cells]);
            }
        }
        out
    }
}

/// Metrics on the test split for every city.
pub fn evaluate(
    model: &Model,
    data: &TrainData,
    period: Period,
    switches: Switches,
    noise: f64,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let test: Vec<usize> = data.samples.indices(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Train("test split is empty".into()));
    }
    let preds = predict_windows(model, data, &test, switches, noise, seed)?;
    preds
        .iter()
        .zip(data.datasets)
        .map(|(p, ds)| {
            let p = match period {
                Period::AllDay => p.clone(),
                Period::HighFreq => p.restrict(&high_frequency_filter(ds, data.samples)?),
            };
            if p.windows.is_empty() {
                return Err(Error::Metrics(format!("{}: no test step in the {} period", ds.name, period.name())));
            }
            MetricReport::compute(&p.city, period, noise, &p.pred, &p.truth, &p.mask)
        })
        .collect()
}

/// Test metrics at each noise level, inputs perturbed and targets clean.
pub fn robustness_sweep(
    model: &Model,
    data: &TrainData,
    levels: &[f64],
    period: Period,
    switches: Switches,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for &level in levels {
        out.extend(evaluate(model, data, period, switches, level, seed)?);
    }
    Ok(out)
}

/// Median wall time in seconds of `f` over `reps` runs after `warmups`.
pub fn median_time(warmups: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Forward latency of one window and gradient time of one batch.
pub fn measure_timings(model: &Model, data: &TrainData, cfg: &TrainConfig, reps: usize) -> Result<(f64, f64)> {
    let s = data.sample(0, 0.0, 0)?;
    let t_forward = median_time(3, reps, || predict_sample(model, data, &s, cfg.switches).map(|_| ()))?;
    let batch: Vec<Sample> = (0..cfg.batch_size.min(data.samples.count))
        .map(|i| data.sample(i, 0.0, 0))
        .collect::<Result<_>>()?;
    let t_batch = median_time(3, reps, || {
        for s in &batch {
            sample_gradients(model, data, s, cfg.switches)?;
        }
        Ok(())
    })?;
    Ok((t_forward, t_batch))
}
