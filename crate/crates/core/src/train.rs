//! Closed-loop training of weights and per-sequence initial states with
//! full-batch Adam, plus a finite-difference gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::bptt::{backward, rollout_loss, LossBreakdown, LossWeights, StepTarget};
use crate::checkpoint::save_checkpoint;
use crate::config::NetworkConfig;
use crate::error::{shape_err, Error, Result};
use crate::gesture::{GestureSpec, Lead, SequencePair};
use crate::network::{init_params, rollout_closed_loop, HiddenState, Parameters, Rollout, Weights};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = lengths.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_params(params: &Parameters) -> Self {
        Self::for_lengths(params.tensors().iter().map(|(_, t)| t.len()))
    }

    /// One bias-corrected update of every tensor.
    pub fn update(&mut self, values: Vec<&mut [f64]>, grads: Vec<&[f64]>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((x, g), m), v) in values
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in x.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

pub fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let x: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
    state.update(x, g, cfg);
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            adam: AdamConfig::new(learning_rate),
            seed,
            loss_weights: LossWeights::default(),
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        let LossWeights { visual, proprio } = self.loss_weights;
        if !(visual >= 0.0 && proprio >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_sequence(cfg: &NetworkConfig, seq: &SequencePair, index: usize) -> Result<()> {
    if seq.frames.is_empty() || seq.codes.len() != seq.frames.len() {
        return shape_err(format!(
            "sequence {index} needs matching non-empty frames and codes"
        ));
    }
    if seq.frames.iter().any(|f| f.len() != cfg.image_len())
        || seq.codes.iter().any(|c| c.len() != cfg.proprio_len())
    {
        return shape_err(format!(
            "sequence {index} does not match the {}x{} image and {} code units",
            cfg.image_height,
            cfg.image_width,
            cfg.proprio_len()
        ));
    }
    Ok(())
}

/// One-step look-ahead targets: step `k` predicts observation `k + 1`.
pub fn sequence_targets(seq: &SequencePair) -> Vec<StepTarget<'_>> {
    seq.frames[1..]
        .iter()
        .zip(&seq.codes[1..])
        .map(|(f, c)| StepTarget { frame: f, code: c })
        .collect()
}

/// Closed-loop rollout of sequence `index` from its learned initial state,
/// fed the sequence's first observation, together with its error sums.
pub fn sequence_loss(
    params: &Parameters,
    index: usize,
    seq: &SequencePair,
) -> Result<(LossBreakdown, Rollout)> {
    check_sequence(&params.config, seq, index)?;
    let init = params.initial_state(index)?;
    let rollout = rollout_closed_loop(
        params,
        &init,
        (&seq.frames[0], &seq.codes[0]),
        seq.len() - 1,
    )?;
    Ok((rollout_loss(&rollout, &sequence_targets(seq)), rollout))
}

/// Loss of an epoch, overall and per sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLoss {
    pub total: LossBreakdown,
    pub per_sequence: Vec<LossBreakdown>,
}

/// Exact gradients of the weighted loss summed over `sequences`, where
/// sequence `i` starts from `params.initial[i]`.
pub fn bptt_gradients(
    params: &Parameters,
    sequences: &[SequencePair],
    lw: LossWeights,
) -> Result<(Parameters, EpochLoss)> {
    if sequences.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    if sequences.len() != params.initial.len() {
        return Err(Error::Config(format!(
            "{} sequences but {} initial states",
            sequences.len(),
            params.initial.len()
        )));
    }
    let per: Vec<(LossBreakdown, Weights, HiddenState)> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let (loss, rollout) = sequence_loss(params, i, seq)?;
            let mut gw = params.weights.zeros_like();
            let g0 = backward(params, &rollout, &sequence_targets(seq), lw, Some(&mut gw));
            for (name, t) in gw.tensors() {
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        tensor: name.to_string(),
                        sequence: i,
                    });
                }
            }
            if g0.u.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: format!("u0[{i}]"),
                    sequence: i,
                });
            }
            Ok((loss, gw, g0))
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let mut loss = EpochLoss::default();
    for (i, (l, gw, g0)) in per.into_iter().enumerate() {
        for ((_, acc), (_, g)) in grads.weights.tensors_mut().into_iter().zip(gw.tensors()) {
            crate::tensor::add_assign(acc, g);
        }
        grads.initial[i] = g0;
        loss.total.add(&l);
        loss.per_sequence.push(l);
    }
    Ok((grads, loss))
}

/// Loss only, without gradients.
pub fn dataset_loss(params: &Parameters, sequences: &[SequencePair]) -> Result<EpochLoss> {
    let per: Vec<LossBreakdown> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, s)| sequence_loss(params, i, s).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    per.iter().for_each(|l| total.add(l));
    Ok(EpochLoss {
        total,
        per_sequence: per,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Weighted objective.
    pub total: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub records: Vec<EpochRecord>,
}

/// Trains for `cfg.epochs` full-batch updates, recording the loss before
/// the first update and after each one (`epochs + 1` records). `observer`
/// sees every record with the parameters it was measured on.
pub fn train_with(
    sequences: &[SequencePair],
    cfg: &TrainConfig,
    net: &NetworkConfig,
    observer: &mut dyn FnMut(&EpochRecord, &Parameters) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    for (i, s) in sequences.iter().enumerate() {
        check_sequence(net, s, i)?;
    }
    let mut params = init_params(net, sequences.len(), cfg.seed)?;
    let mut adam = AdamState::for_params(&params);
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let start = Instant::now();
    for epoch in 0..=cfg.epochs {
        let last = epoch == cfg.epochs;
        let step = if last {
            dataset_loss(&params, sequences).map(|l| (None, l))
        } else {
            bptt_gradients(&params, sequences, cfg.loss_weights).map(|(g, l)| (Some(g), l))
        };
        let (grads, loss) = match step {
            Ok(x) => x,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
            Err(e) => return Err(e),
        };
        let total = loss.total.total(cfg.loss_weights);
        if !total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let record = EpochRecord {
            epoch,
            loss: loss.total,
            total,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record, &params)?;
        records.push(record);
        if let Some(g) = grads {
            adam_step(&mut params, &g, &mut adam, &cfg.adam);
        }
    }
    Ok(TrainOutcome { params, records })
}

pub fn train(
    sequences: &[SequencePair],
    cfg: &TrainConfig,
    net: &NetworkConfig,
) -> Result<TrainOutcome> {
    train_with(sequences, cfg, net, &mut |_, _| Ok(()))
}

pub const LOSS_CSV_HEADER: &str = "epoch,E,E_V,E_P,wall_seconds";

pub fn loss_csv_row(r: &EpochRecord, wall_clock: bool) -> String {
    let wall = if wall_clock { r.wall_seconds } else { 0.0 };
    format!(
        "{},{:.9e},{:.9e},{:.9e},{:.3}",
        r.epoch, r.total, r.loss.visual, r.loss.proprio, wall
    )
}

/// Files written by [`train_to_dir`].
pub struct TrainFiles {
    pub loss_csv: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains and writes `loss.csv`, periodic `checkpoint_<epoch>.ckpt` files
/// and `final.ckpt`. On divergence `final.ckpt` holds the last parameters
/// with a finite loss and the error is returned.
pub fn train_to_dir(
    sequences: &[SequencePair],
    cfg: &TrainConfig,
    net: &NetworkConfig,
    dir: &Path,
    wall_clock: bool,
) -> Result<(TrainOutcome, TrainFiles)> {
    fs::create_dir_all(dir)?;
    let files = TrainFiles {
        loss_csv: dir.join("loss.csv"),
        final_checkpoint: dir.join("final.ckpt"),
    };
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut last_good: Option<(Parameters, usize)> = None;
    let result = train_with(sequences, cfg, net, &mut |r, p| {
        writeln!(csv, "{}", loss_csv_row(r, wall_clock)).expect("string write");
        if cfg.checkpoint_interval > 0 && r.epoch % cfg.checkpoint_interval == 0 {
            save_checkpoint(
                &dir.join(format!("checkpoint_{:06}.ckpt", r.epoch)),
                p,
                r.epoch,
            )?;
        }
        last_good = Some((p.clone(), r.epoch));
        Ok(())
    });
    fs::write(&files.loss_csv, &csv)?;
    match result {
        Ok(outcome) => {
            save_checkpoint(&files.final_checkpoint, &outcome.params, cfg.epochs)?;
            Ok((outcome, files))
        }
        Err(e) => {
            if let Some((p, epoch)) = last_good {
                save_checkpoint(&files.final_checkpoint, &p, epoch)?;
            }
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub sequences: usize,
    pub steps: usize,
    /// Flip the sign of this analytic tensor before comparing.
    pub mutate: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-3,
            sequences: 2,
            steps: 5,
            mutate: None,
        }
    }
}

/// Relative errors below this magnitude are measured against it instead:
/// central differences of a loss of order 1e2 carry roundoff near 1e-8.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn random_simplex(rng: &mut impl Rng, groups: usize, units: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(groups * units);
    for _ in 0..groups {
        let raw: Vec<f64> = (0..units).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

/// Random parameters (non-zero biases and initial states included) and
/// random target sequences for a gradient check.
pub fn grad_check_problem(
    cfg: &NetworkConfig,
    seed: u64,
    sequences: usize,
    steps: usize,
) -> Result<(Parameters, Vec<SequencePair>)> {
    let mut params = init_params(cfg, sequences, seed)?;
    let mut rng = stream_rng(seed, Stream::GradCheck);
    for (name, t) in params.tensors_mut() {
        if name.starts_with("b_") {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        } else if name.starts_with("u0") {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    let data = (0..sequences)
        .map(|id| SequencePair {
            id,
            spec: GestureSpec::new(Lead::Both, 0.0, 0.0, steps),
            frames: (0..steps)
                .map(|_| {
                    (0..cfg.image_len())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect()
                })
                .collect(),
            joints: vec![[0.0, 0.0]; steps],
            codes: (0..steps)
                .map(|_| random_simplex(&mut rng, cfg.joint_groups, cfg.units_per_group))
                .collect(),
        })
        .collect();
    Ok((params, data))
}

fn weighted_loss(params: &Parameters, data: &[SequencePair], lw: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        total += sequence_loss(params, i, s)?.0.total(lw);
    }
    Ok(total)
}

/// Compares analytic gradients of every learnable with central differences.
pub fn grad_check(
    cfg: &NetworkConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (params, data) = grad_check_problem(cfg, seed, opts.sequences, opts.steps)?;
    grad_check_on(&params, &data, opts)
}

pub fn grad_check_on(
    params: &Parameters,
    data: &[SequencePair],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let lw = LossWeights::default();
    let (mut grads, _) = bptt_gradients(params, data, lw)?;
    if let Some(name) = &opts.mutate {
        let mut found = false;
        for (n, t) in grads.tensors_mut() {
            if &n == name {
                t.iter_mut().for_each(|v| *v = -*v);
                found = true;
            }
        }
        if !found {
            return Err(Error::Config(format!("no tensor named {name}")));
        }
    }
    let eps = opts.epsilon;
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.to_vec())
        .collect();
    for (ti, name) in names.iter().enumerate() {
        let mut rel_max: f64 = 0.0;
        let mut abs_max: f64 = 0.0;
        for idx in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti].1[idx];
            probe.tensors_mut()[ti].1[idx] = orig + eps;
            let up = weighted_loss(&probe, data, lw)?;
            probe.tensors_mut()[ti].1[idx] = orig - eps;
            let down = weighted_loss(&probe, data, lw)?;
            probe.tensors_mut()[ti].1[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][idx];
            rel_max = rel_max.max(relative_error(a, numeric));
            abs_max = abs_max.max((a - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            count: analytic[ti].len(),
            max_rel_error: rel_max,
            max_abs_error: abs_max,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tolerance,
        max_rel_error,
        tolerance: opts.tolerance,
        tensors,
    })
}
