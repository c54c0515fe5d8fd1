//! Adam optimization, the warmup/decay learning-rate schedule, the
//! training and evaluation loops, and finite-difference gradient checking.
//!
//! Training is deterministic in (configs, seed): sample order, dropout, and
//! initialization all come from tagged substreams of one base generator,
//! and per-sample gradients are folded in sample order regardless of how
//! many workers computed them.

use crate::data::{self, generate_task, pad_batch, Dataset, GeneratedTask, QuestionKind, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::io::{checkpoint, report};
use crate::model::{argmax, forward_sample, one_hot, ModelConfig, ModelParams};
use crate::rng::{streams, Rng};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

/// How "decayed by 1/5 every 2 epochs" is read: Compound multiplies by the
/// factor each period (the default reading); Once applies it a single time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    Compound,
    Once,
}

impl DecayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecayMode::Compound => "compound",
            DecayMode::Once => "once",
        }
    }

    pub fn parse(s: &str) -> Result<DecayMode> {
        match s {
            "compound" => Ok(DecayMode::Compound),
            "once" => Ok(DecayMode::Once),
            other => Err(Error::Config(format!(
                "unknown decay mode {other:?}, expected compound or once"
            ))),
        }
    }
}

/// Warmup-then-decay learning-rate rule plus the batch size it was tuned
/// with. Defaults reproduce the published protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup_step: f64,
    pub decay_after: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub mode: DecayMode,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Schedule {
        Schedule {
            base: 1e-4,
            warmup_step: 2.5e-5,
            decay_after: 10,
            decay_factor: 0.2,
            decay_period: 2,
            mode: DecayMode::Compound,
            batch_size: 64,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.warmup_step > 0.0) {
            return Err(Error::Config("schedule rates must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay factor must lie in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if self.decay_period == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "decay period and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rate for 1-based epoch t: linear warmup capped at the base rate, then
/// periodic decay once past the threshold.
pub fn lr_at_epoch(t: usize, sched: &Schedule) -> Result<f64> {
    sched.validate()?;
    if t < 1 {
        return Err(Error::Config("epochs are 1-based".into()));
    }
    if t <= sched.decay_after {
        Ok((sched.warmup_step * t as f64).min(sched.base))
    } else {
        let periods = (t - sched.decay_after).div_ceil(sched.decay_period);
        match sched.mode {
            DecayMode::Compound => Ok(sched.base * sched.decay_factor.powi(periods as i32)),
            DecayMode::Once => Ok(sched.base * sched.decay_factor),
        }
    }
}

/// Adam accumulator: per-parameter moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> OptimState {
        OptimState {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update over every parameter. Parameters without
/// a gradient entry see a zero gradient (their moments decay).
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Gradients,
    state: &mut OptimState,
    rate: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: g.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (name, value) in params.iter_mut() {
        let n = value.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let zero = Tensor::zeros(value.shape());
        let g = grads.get(name).unwrap_or(&zero).data();
        let mut updated = value.data().to_vec();
        for k in 0..n {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            updated[k] -= rate * m_hat / (v_hat.sqrt() + state.eps);
        }
        *value = Tensor::from_vec(value.shape(), updated)?;
    }
    Ok(())
}

/// Exact-match accuracy tallies for one question kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KindStats {
    pub kind: QuestionKind,
    pub samples: usize,
    pub correct: usize,
}

impl KindStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }
}

/// Evaluation outcome: overall and per-kind exact-match accuracy plus mean
/// loss, dropout disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub samples: usize,
    pub correct: usize,
    pub mean_loss: f64,
    pub per_kind: Vec<KindStats>,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }

    pub fn kind_accuracy(&self, kind: QuestionKind) -> Option<f64> {
        self.per_kind
            .iter()
            .find(|k| k.kind == kind)
            .map(KindStats::accuracy)
    }
}

/// Forward one padded batch, returning per-sample (loss, prediction).
/// Samples are independent, so they may run on any number of workers; the
/// collected order is the batch order.
fn forward_batch(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    batch: &data::Batch,
    dropout_rng: Option<(&Rng, u64, u64)>,
) -> Result<Vec<(f64, usize, Gradients)>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let scene = batch.scene(i)?;
            let (rng, training) = match dropout_rng {
                Some((base, epoch, step)) => (
                    base.derive(&[streams::DROPOUT, epoch, step, i as u64]),
                    true,
                ),
                None => (Rng::from_seed(0), false),
            };
            let out = forward_sample(
                &mut tape,
                &bound,
                cfg,
                &scene,
                &batch.tokens[i],
                &rng,
                training,
                false,
            )?;
            let loss_var = tape.bce_loss(out.logits, &batch.target(i)?)?;
            let loss = tape.value(loss_var).item();
            let pred = argmax(tape.value(out.logits));
            let grads = if training {
                tape.backward(loss_var)?
            } else {
                Gradients::from_named(BTreeMap::new())
            };
            Ok((loss, pred, grads))
        })
        .collect()
}

/// Exact-match evaluation over padded batches with dropout off.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<EvalStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let mut stats = EvalStats {
        samples: 0,
        correct: 0,
        mean_loss: 0.0,
        per_kind: Vec::new(),
    };
    let mut loss_sum = 0.0;
    for chunk in dataset.samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let results = forward_batch(cfg, params, &batch, None)?;
        for (i, (loss, pred, _)) in results.iter().enumerate() {
            loss_sum += loss;
            stats.samples += 1;
            let hit = *pred == batch.answers[i];
            if hit {
                stats.correct += 1;
            }
            let kind = batch.kinds[i];
            match stats.per_kind.iter_mut().find(|k| k.kind == kind) {
                Some(k) => {
                    k.samples += 1;
                    k.correct += hit as usize;
                }
                None => stats.per_kind.push(KindStats {
                    kind,
                    samples: 1,
                    correct: hit as usize,
                }),
            }
        }
    }
    stats.per_kind.sort_by_key(|k| k.kind);
    stats.mean_loss = loss_sum / stats.samples as f64;
    Ok(stats)
}

/// One epoch row of the run report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Everything a finished (or zero-epoch) run reports. Timing fields are
/// wall-clock and excluded from determinism comparisons; all other fields
/// are bit-deterministic in (config, seed).
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_echo: Vec<(String, String)>,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_train: EvalStats,
    pub final_val: Option<EvalStats>,
    pub total_seconds: f64,
}

/// Inputs of one training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub task: TaskSpec,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// (key, value) pairs echoed into the report, normally the parsed run
    /// config.
    pub config_echo: Vec<(String, String)>,
}

impl TrainSetup {
    pub fn new(model: ModelConfig, schedule: Schedule, task: TaskSpec, epochs: usize, seed: u64) -> TrainSetup {
        TrainSetup {
            model,
            schedule,
            task,
            epochs,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            config_echo: Vec::new(),
        }
    }
}

/// Artifact plumbing for a run; with no output directory the run is purely
/// in-memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub epoch_checkpoints: bool,
    /// Metadata string embedded in every checkpoint, normally the canonical
    /// run-config text so a checkpoint is self-describing.
    pub checkpoint_meta: String,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub params: ModelParams<Tensor>,
    pub task: GeneratedTask,
}

/// Full training run: generate data, optimize, evaluate, emit artifacts.
pub fn train(setup: &TrainSetup, opts: &TrainOptions) -> Result<TrainOutcome> {
    setup.model.validate()?;
    setup.schedule.validate()?;
    setup.task.validate()?;
    if setup.model.answers != data::answer_count() {
        return Err(Error::Config(format!(
            "model has {} answer slots but the task vocabulary has {}",
            setup.model.answers,
            data::answer_count()
        )));
    }
    if setup.model.vocab != data::vocab_size() {
        return Err(Error::Config(format!(
            "model has {} token slots but the task vocabulary has {}",
            setup.model.vocab,
            data::vocab_size()
        )));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let started = Instant::now();
    let base = Rng::from_seed(setup.seed);
    let task = generate_task(&setup.task, &base)?;
    let init = ModelParams::init(&setup.model, &base);
    let mut params_map: BTreeMap<String, Tensor> = init.named().into_iter().collect();
    let mut current = init;
    let mut optim = OptimState::new(setup.adam_beta1, setup.adam_beta2, setup.adam_eps);

    let save_checkpoint = |name: &str, map: &BTreeMap<String, Tensor>| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            checkpoint::save(&dir.join(name), &opts.checkpoint_meta, map)?;
        }
        Ok(())
    };

    let mut records: Vec<EpochRecord> = Vec::with_capacity(setup.epochs);
    for epoch in 1..=setup.epochs {
        let epoch_started = Instant::now();
        let lr = lr_at_epoch(epoch, &setup.schedule)?;
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        base.derive(&[streams::EPOCH_SHUFFLE, epoch as u64])
            .shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(setup.schedule.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &task.train.samples[i]).collect();
            let batch = pad_batch(&refs)?;
            let results = forward_batch(
                &setup.model,
                &current,
                &batch,
                Some((&base, epoch as u64, step as u64)),
            )?;

            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (i, (loss, pred, grads)) in results.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                loss_sum += loss;
                correct += (*pred == batch.answers[i]) as usize;
                for (name, g) in grads.iter() {
                    let slot = acc
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    for (s, v) in slot.iter_mut().zip(g.data()) {
                        *s += v;
                    }
                }
            }
            let scale = 1.0 / results.len() as f64;
            let mean = Gradients::from_named(
                acc.into_iter()
                    .map(|(name, mut sum)| {
                        for v in &mut sum {
                            *v *= scale;
                        }
                        let shape = params_map[&name].shape().to_vec();
                        Ok((name, Tensor::from_vec(&shape, sum)?))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?,
            );
            adam_step(&mut params_map, &mean, &mut optim, lr)?;
            current = ModelParams::from_named(&setup.model, &params_map)?;
        }

        let (val_loss, val_accuracy) = if task.val.is_empty() {
            (None, None)
        } else {
            let stats = evaluate(&setup.model, &current, &task.val, setup.schedule.batch_size)?;
            (Some(stats.mean_loss), Some(stats.accuracy()))
        };
        if opts.epoch_checkpoints {
            save_checkpoint(&format!("epoch_{epoch:03}.mckp"), &params_map)?;
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / task.train.len() as f64,
            train_accuracy: correct as f64 / task.train.len() as f64,
            val_loss,
            val_accuracy,
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
    }

    let final_train = evaluate(&setup.model, &current, &task.train, setup.schedule.batch_size)?;
    let final_val = if task.val.is_empty() {
        None
    } else {
        Some(evaluate(&setup.model, &current, &task.val, setup.schedule.batch_size)?)
    };

    let run_report = RunReport {
        config_echo: setup.config_echo.clone(),
        seed: setup.seed,
        train_samples: task.train.len(),
        val_samples: task.val.len(),
        epochs: records,
        final_train,
        final_val,
        total_seconds: started.elapsed().as_secs_f64(),
    };

    save_checkpoint("model.mckp", &params_map)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join("report.txt"), report::render(&run_report))?;
        std::fs::write(
            dir.join("train_manifest.txt"),
            data::manifest_string(&setup.task, setup.seed, "train", &task.train),
        )?;
        if !task.val.is_empty() {
            std::fs::write(
                dir.join("val_manifest.txt"),
                data::manifest_string(&setup.task, setup.seed, "val", &task.val),
            )?;
        }
    }

    Ok(TrainOutcome {
        report: run_report,
        params: current,
        task,
    })
}

/// Finite-difference outcome for one named parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub worst_block: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub step: f64,
    pub tol: f64,
}

/// Relative error with a floor so near-zero gradient pairs compare on
/// absolute terms.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compare analytic gradients against central finite differences of an
/// arbitrary scalar loss, per parameter block.
pub fn check_gradients(
    loss_fn: &mut dyn FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
    params: &BTreeMap<String, Tensor>,
    analytic: &Gradients,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut blocks = Vec::new();
    let mut worst = ("".to_string(), 0.0f64);
    for (name, value) in params {
        let grads = analytic
            .get(name)
            .ok_or_else(|| Error::Config(format!("no analytic gradient for {name}")))?;
        let mut max_rel = 0.0f64;
        for k in 0..value.numel() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut bumped = value.data().to_vec();
                bumped[k] += delta;
                let mut map = params.clone();
                map.insert(name.clone(), Tensor::from_vec(value.shape(), bumped)?);
                loss_fn(&map)
            };
            let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
            max_rel = max_rel.max(rel_err(grads.data()[k], numeric));
        }
        if max_rel > worst.1 {
            worst = (name.clone(), max_rel);
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            pass: max_rel < tol,
        });
    }
    Ok(GradCheckReport {
        pass: blocks.iter().all(|b| b.pass),
        worst_block: worst.0,
        max_rel_err: worst.1,
        blocks,
        step,
        tol,
    })
}

/// Full-model gradient check on a fixed random input, dropout active with a
/// frozen mask stream. Restricted to small configs.
pub fn grad_check(cfg: &ModelConfig, step: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.d > 16 || cfg.layers > 2 {
        return Err(Error::Config(format!(
            "gradient checking is limited to d <= 16 and layers <= 2, got d={} layers={}",
            cfg.d, cfg.layers
        )));
    }
    let base = Rng::from_seed(seed);
    let params: BTreeMap<String, Tensor> = ModelParams::init(cfg, &base)
        .named()
        .into_iter()
        .collect();

    let mut input_rng = base.derive(&[streams::GRAD_CHECK, 1]);
    let m = 4;
    let scene = crate::feature::FeatureSet::new(
        Tensor::from_vec(
            &[m, cfg.d_x],
            (0..m * cfg.d_x)
                .map(|_| input_rng.normal(0.0, 1.0))
                .collect(),
        )?,
        vec![true, true, true, false],
    )?;
    let mut ids: Vec<usize> = (0..3).map(|_| input_rng.below(cfg.vocab)).collect();
    ids.push(0);
    let tokens = crate::model::TokenSeq {
        ids,
        mask: vec![true, true, true, false],
    };
    let target = one_hot(1, cfg.answers)?;
    let dropout_rng = base.derive(&[streams::GRAD_CHECK, 2]);

    let mut loss_fn = |map: &BTreeMap<String, Tensor>| -> Result<f64> {
        let p = ModelParams::from_named(cfg, map)?;
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = forward_sample(&mut tape, &bound, cfg, &scene, &tokens, &dropout_rng, true, false)?;
        let loss = tape.bce_loss(out.logits, &target)?;
        Ok(tape.value(loss).item())
    };

    let analytic = {
        let p = ModelParams::from_named(cfg, &params)?;
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = forward_sample(&mut tape, &bound, cfg, &scene, &tokens, &dropout_rng, true, false)?;
        let loss = tape.bce_loss(out.logits, &target)?;
        tape.backward(loss)?
    };

    check_gradients(&mut loss_fn, &params, &analytic, step, tol)
}
