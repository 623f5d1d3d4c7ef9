//! Online intention inference by error regression. A window over the most
//! recent observations is re-generated closed-loop from its start state;
//! only that start state is adjusted to reduce the prediction error, the
//! weights stay frozen.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::bptt::{backward, rollout_loss, LossBreakdown, LossWeights, StepTarget};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::gesture::ObservationStream;
use crate::network::{
    forward_step, rollout_closed_loop, Entrain, HiddenState, LayerState, Parameters,
};
use crate::tensor::kl_value;
use crate::train::{AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Proprio,
    Both,
}

impl Modality {
    pub fn loss_weights(self) -> LossWeights {
        match self {
            Modality::Visual => LossWeights {
                visual: 1.0,
                proprio: 0.0,
            },
            Modality::Proprio => LossWeights {
                visual: 0.0,
                proprio: 1.0,
            },
            Modality::Both => LossWeights::default(),
        }
    }

    pub fn entrain(self) -> Entrain {
        match self {
            Modality::Visual => Entrain::Vision,
            Modality::Proprio => Entrain::Proprioception,
            Modality::Both => Entrain::Both,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Proprio => "proprio",
            Modality::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" | "vision" => Ok(Modality::Visual),
            "proprio" | "proprioception" | "proprioceptive" => Ok(Modality::Proprio),
            "both" => Ok(Modality::Both),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErsConfig {
    pub window: usize,
    /// Update rounds per stream step; 0 runs plain sensory entrainment.
    pub iterations: usize,
    pub adam: AdamConfig,
    pub modality: Modality,
}

impl ErsConfig {
    /// Window 30, 50 rounds per step, learning rate 0.1.
    pub fn new(modality: Modality) -> Self {
        ErsConfig {
            window: 30,
            iterations: 50,
            adam: AdamConfig::new(0.1),
            modality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must cover at least one step".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frame: Vec<f64>,
    pub code: Vec<f64>,
}

type Prediction = (Vec<f64>, Vec<f64>);

/// Sliding-window state carried between stream steps.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    pub window: usize,
    /// Stream step of the window start.
    pub start_step: usize,
    /// Internal states before the window's first step.
    pub start_state: HiddenState,
    /// Input consumed by the window's first step.
    pub start_input: Option<Prediction>,
    /// Observations from the window start up to the newest step.
    pub observations: VecDeque<Observation>,
    next_step: usize,
    adam: AdamState,
    /// Entrainment only: the previous step's state and prediction, and the
    /// states and predictions of the steps inside the window.
    entrain_state: LayerState,
    entrain_history: VecDeque<(HiddenState, Prediction)>,
}

impl WindowBuffer {
    pub fn new(window: usize, init: HiddenState) -> Self {
        let lengths: Vec<usize> = init.u.iter().map(Vec::len).collect();
        WindowBuffer {
            window,
            start_step: 0,
            entrain_state: LayerState::from_hidden(&init),
            start_state: init,
            start_input: None,
            observations: VecDeque::new(),
            next_step: 0,
            adam: AdamState::for_lengths(lengths),
            entrain_history: VecDeque::new(),
        }
    }

    /// Steps regenerated inside the window: `min(W, t)`.
    pub fn len(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Diagnostics of one stream step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub window_start: usize,
    pub window_len: usize,
    /// Weighted window loss before the first update round.
    pub loss_round0: f64,
    /// Weighted window loss after the last update round.
    pub loss_final: f64,
    /// Unweighted error sums of the final window.
    pub visual: f64,
    pub proprio: f64,
    /// Largest change of any window-start state over this step's rounds.
    pub state_change: f64,
}

impl TraceRow {
    pub fn improved(&self) -> bool {
        self.loss_final <= self.loss_round0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErsStep {
    /// Prediction of the next observation.
    pub prediction: Prediction,
    pub row: TraceRow,
    /// Window-start state after the last update round.
    pub start_state: HiddenState,
}

fn targets(obs: &VecDeque<Observation>) -> Vec<StepTarget<'_>> {
    obs.iter()
        .skip(1)
        .map(|o| StepTarget {
            frame: &o.frame,
            code: &o.code,
        })
        .collect()
}

fn prediction_loss(preds: &[&Prediction], obs: &[&Observation]) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for (p, o) in preds.iter().zip(obs) {
        out.visual +=
            p.0.iter()
                .zip(&o.frame)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        out.proprio += kl_value(&o.code, &p.1);
    }
    out
}

fn max_change(a: &HiddenState, b: &HiddenState) -> f64 {
    a.u.iter()
        .flatten()
        .zip(b.u.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Consumes observation `t` and returns the prediction of observation
/// `t + 1`. With `iterations > 0` the window start state is optimized
/// before the final closed-loop regeneration; with 0 the modality given
/// by `cfg` is entrained step by step.
pub fn ers_step(
    params: &Parameters,
    buf: &mut WindowBuffer,
    obs: Observation,
    cfg: &ErsConfig,
) -> Result<ErsStep> {
    cfg.validate()?;
    if obs.frame.len() != params.config.image_len() || obs.code.len() != params.config.proprio_len()
    {
        return Err(Error::Shape(format!(
            "observation {} does not match the network",
            buf.next_step
        )));
    }
    let t = buf.next_step;
    if t == 0 {
        buf.start_input = Some((obs.frame.clone(), obs.code.clone()));
    }
    buf.observations.push_back(obs);
    let step = if cfg.iterations == 0 {
        entrain_step(params, buf, cfg, t)?
    } else {
        regress_step(params, buf, cfg, t)?
    };
    buf.next_step += 1;
    Ok(step)
}

fn regress_step(
    params: &Parameters,
    buf: &mut WindowBuffer,
    cfg: &ErsConfig,
    t: usize,
) -> Result<ErsStep> {
    let lw = cfg.modality.loss_weights();
    let len = buf.len();
    let before = buf.start_state.clone();
    let start_input = buf.start_input.clone().expect("set at the first step");
    let first = (start_input.0.as_slice(), start_input.1.as_slice());
    let mut loss_round0 = 0.0;
    if len > 0 {
        let tg = targets(&buf.observations);
        for round in 0..cfg.iterations {
            let init = LayerState::from_hidden(&buf.start_state);
            let rollout = rollout_closed_loop(params, &init, first, len)
                .map_err(|_| Error::WindowLoss { step: t })?;
            let loss = rollout_loss(&rollout, &tg).total(lw);
            if !loss.is_finite() {
                return Err(Error::WindowLoss { step: t });
            }
            if round == 0 {
                loss_round0 = loss;
            }
            let g = backward(params, &rollout, &tg, lw, None);
            if g.u.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::WindowLoss { step: t });
            }
            let values: Vec<&mut [f64]> = buf
                .start_state
                .u
                .iter_mut()
                .map(|u| u.as_mut_slice())
                .collect();
            let grads: Vec<&[f64]> = g.u.iter().map(|u| u.as_slice()).collect();
            buf.adam.update(values, grads, &cfg.adam);
        }
    }
    let init = LayerState::from_hidden(&buf.start_state);
    let rollout = rollout_closed_loop(params, &init, first, len + 1)
        .map_err(|_| Error::WindowLoss { step: t })?;
    let tg = targets(&buf.observations);
    let final_loss = rollout_loss(&rollout, &tg);
    let loss_final = final_loss.total(lw);
    if !loss_final.is_finite() {
        return Err(Error::WindowLoss { step: t });
    }
    if len == 0 {
        loss_round0 = loss_final;
    }
    let last = rollout.steps.last().expect("at least one step");
    let row = TraceRow {
        t,
        window_start: buf.start_step,
        window_len: len,
        loss_round0,
        loss_final,
        visual: final_loss.visual,
        proprio: final_loss.proprio,
        state_change: max_change(&before, &buf.start_state),
    };
    let prediction = (last.v_out.clone(), last.p_out.clone());
    let start_state = buf.start_state.clone();

    if len == buf.window {
        let first_step = &rollout.steps[0];
        buf.start_state = first_step.state.hidden();
        buf.start_input = Some((first_step.v_out.clone(), first_step.p_out.clone()));
        buf.observations.pop_front();
        buf.start_step += 1;
        buf.adam = AdamState::for_lengths(buf.start_state.u.iter().map(Vec::len));
    }
    Ok(ErsStep {
        prediction,
        row,
        start_state,
    })
}

fn entrain_step(
    params: &Parameters,
    buf: &mut WindowBuffer,
    cfg: &ErsConfig,
    t: usize,
) -> Result<ErsStep> {
    let lw = cfg.modality.loss_weights();
    let entrain = cfg.modality.entrain();
    let obs = buf.observations.back().expect("just pushed");
    let fed_back = buf
        .entrain_history
        .back()
        .map(|(_, p)| p)
        .or(buf.start_input.as_ref())
        .expect("set");
    let v_in = if entrain.vision() {
        &obs.frame
    } else {
        &fed_back.0
    };
    let p_in = if entrain.proprioception() {
        &obs.code
    } else {
        &fed_back.1
    };
    let out = forward_step(params, &buf.entrain_state, v_in, p_in, t)
        .map_err(|_| Error::WindowLoss { step: t })?;
    let before = buf.entrain_state.hidden();
    buf.entrain_state = out.state;
    buf.entrain_history
        .push_back((before, (out.v_out.clone(), out.p_out.clone())));

    let len = buf.len();
    let preds: Vec<&Prediction> = buf
        .entrain_history
        .iter()
        .take(len)
        .map(|(_, p)| p)
        .collect();
    let obs_t: Vec<&Observation> = buf.observations.iter().skip(1).collect();
    let loss = prediction_loss(&preds, &obs_t);
    let total = loss.total(lw);
    if !total.is_finite() {
        return Err(Error::WindowLoss { step: t });
    }
    buf.start_state = buf.entrain_history.front().expect("non-empty").0.clone();
    let start_state = buf.start_state.clone();
    let row = TraceRow {
        t,
        window_start: buf.start_step,
        window_len: len,
        loss_round0: total,
        loss_final: total,
        visual: loss.visual,
        proprio: loss.proprio,
        state_change: 0.0,
    };
    if len == buf.window {
        buf.observations.pop_front();
        buf.entrain_history.pop_front();
        buf.start_step += 1;
    }
    Ok(ErsStep {
        prediction: (out.v_out, out.p_out),
        row,
        start_state,
    })
}

/// Everything recorded over a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ErsRun {
    /// Prediction of observation `t + 1` made at step `t`.
    pub predictions: Vec<Prediction>,
    pub trace: Vec<TraceRow>,
    /// Window-start states after the last update round of each step.
    pub inferred: Vec<HiddenState>,
}

impl ErsRun {
    /// Steps whose final window loss exceeds their round-0 loss.
    pub fn violations(&self) -> usize {
        self.trace.iter().filter(|r| !r.improved()).count()
    }
}

pub fn stream_observations(stream: &ObservationStream) -> Vec<Observation> {
    stream
        .frames
        .iter()
        .zip(&stream.codes)
        .map(|(f, c)| Observation {
            frame: f.clone(),
            code: c.clone(),
        })
        .collect()
}

/// Runs error regression over the whole stream, starting from neutral
/// (zero) internal states unless `init` is given.
pub fn run_ers(
    params: &Parameters,
    observations: &[Observation],
    cfg: &ErsConfig,
    init: Option<HiddenState>,
) -> Result<ErsRun> {
    cfg.validate()?;
    let init = init.unwrap_or_else(|| HiddenState::zeros(&params.config));
    init.check_shapes(&params.config)?;
    let mut buf = WindowBuffer::new(cfg.window, init);
    let mut run = ErsRun {
        predictions: Vec::with_capacity(observations.len()),
        trace: Vec::with_capacity(observations.len()),
        inferred: Vec::with_capacity(observations.len()),
    };
    for obs in observations {
        let step = ers_step(params, &mut buf, obs.clone(), cfg)?;
        run.predictions.push(step.prediction);
        run.trace.push(step.row);
        run.inferred.push(step.start_state);
    }
    Ok(run)
}

pub const TRACE_CSV_HEADER: &str =
    "t,window_len,loss_round0,loss_final,E_V,E_P,state_offset,state_change";

/// Trace rows; `state_offset` is the byte offset of the row's state in the
/// sidecar written by [`inferred_sidecar`].
pub fn trace_csv(run: &ErsRun) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    let width = run.inferred.first().map_or(0, HiddenState::len);
    for r in &run.trace {
        writeln!(
            out,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.3e}",
            r.t,
            r.window_len,
            r.loss_round0,
            r.loss_final,
            r.visual,
            r.proprio,
            r.t * width * 4,
            r.state_change
        )
        .expect("string write");
    }
    out
}

/// Window-start states of every step as consecutive little-endian f32 rows.
pub fn inferred_sidecar(run: &ErsRun) -> Vec<u8> {
    let mut out = Vec::new();
    for s in &run.inferred {
        for v in s.u.iter().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses [`inferred_sidecar`] output.
pub fn read_inferred_sidecar(cfg: &NetworkConfig, bytes: &[u8]) -> Result<Vec<HiddenState>> {
    let width = HiddenState::zeros(cfg).len();
    f32_rows(bytes, width)?
        .iter()
        .map(|r| HiddenState::from_flat(cfg, r))
        .collect()
}

/// Predicted frame then code of every step as little-endian f32 rows.
pub fn predictions_sidecar(run: &ErsRun) -> Vec<u8> {
    let mut out = Vec::new();
    for (f, c) in &run.predictions {
        for v in f.iter().chain(c) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses [`predictions_sidecar`] output.
pub fn read_predictions_sidecar(cfg: &NetworkConfig, bytes: &[u8]) -> Result<Vec<Prediction>> {
    let n = cfg.image_len();
    Ok(f32_rows(bytes, n + cfg.proprio_len())?
        .into_iter()
        .map(|mut r| {
            let code = r.split_off(n);
            (r, code)
        })
        .collect())
}

fn f32_rows(bytes: &[u8], width: usize) -> Result<Vec<Vec<f64>>> {
    if width == 0 || bytes.len() % (4 * width) != 0 {
        return Err(Error::Format(format!(
            "sidecar of {} bytes is not a whole number of {width}-value rows",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4 * width)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::encode_checkpoint;
    use crate::config::NetworkConfig;
    use crate::network::{generate_closed_loop, generate_open_loop, ExternalInput};
    use crate::train::grad_check_problem;

    fn problem(steps: usize) -> (Parameters, Vec<Observation>) {
        let (p, data) = grad_check_problem(&NetworkConfig::tiny(), 8, 1, steps).unwrap();
        let obs = data[0]
            .frames
            .iter()
            .zip(&data[0].codes)
            .map(|(f, c)| Observation {
                frame: f.clone(),
                code: c.clone(),
            })
            .collect();
        (p, obs)
    }

    fn small(modality: Modality, iterations: usize) -> ErsConfig {
        ErsConfig {
            window: 4,
            iterations,
            ..ErsConfig::new(modality)
        }
    }

    #[test]
    fn default_window_iterations_and_rate() {
        let c = ErsConfig::new(Modality::Visual);
        assert_eq!(
            (c.window, c.iterations, c.adam.learning_rate),
            (30, 50, 0.1)
        );
    }

    #[test]
    fn zero_iterations_is_entrainment() {
        let (p, obs) = problem(9);
        let ext: Vec<ExternalInput> = obs
            .iter()
            .map(|o| ExternalInput {
                frame: Some(o.frame.clone()),
                code: Some(o.code.clone()),
            })
            .collect();
        for m in [Modality::Visual, Modality::Proprio, Modality::Both] {
            let run = run_ers(&p, &obs, &small(m, 0), None).unwrap();
            let init = LayerState::neutral(&p.config);
            let r = generate_open_loop(&p, &init, (&obs[0].frame, &obs[0].code), &ext, m.entrain())
                .unwrap();
            assert_eq!(run.predictions, r.outputs(), "{m:?}");
            // window bookkeeping: the recorded start state is the state before the window
            assert_eq!(
                run.inferred[6],
                r.prev_state(run.trace[6].window_start).hidden()
            );
        }
    }

    #[test]
    fn window_grows_then_slides() {
        let (p, obs) = problem(8);
        let run = run_ers(&p, &obs, &small(Modality::Both, 2), None).unwrap();
        let lens: Vec<usize> = run.trace.iter().map(|r| r.window_len).collect();
        assert_eq!(lens, vec![0, 1, 2, 3, 4, 4, 4, 4]);
        let starts: Vec<usize> = run.trace.iter().map(|r| r.window_start).collect();
        assert_eq!(starts, vec![0, 0, 0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn weights_stay_frozen() {
        let (p, obs) = problem(7);
        let before = encode_checkpoint(&p, 0);
        run_ers(&p, &obs, &small(Modality::Visual, 3), None).unwrap();
        assert_eq!(encode_checkpoint(&p, 0), before);
    }

    #[test]
    fn regression_reduces_window_error() {
        let (p, obs) = problem(10);
        let run = run_ers(&p, &obs, &small(Modality::Both, 20), None).unwrap();
        let improved = run
            .trace
            .iter()
            .filter(|r| r.window_len > 0 && r.loss_final < r.loss_round0)
            .count();
        assert!(improved >= 8, "{improved}");
    }

    #[test]
    fn own_output_is_a_fixpoint() {
        let (p, _) = problem(2);
        let init = p.initial[0].clone();
        let c = &p.config;
        let home = (
            vec![0.0; c.image_len()],
            vec![1.0 / c.units_per_group as f64; c.proprio_len()],
        );
        let r = generate_closed_loop(&p, &LayerState::from_hidden(&init), (&home.0, &home.1), 12)
            .unwrap();
        let mut obs = vec![Observation {
            frame: home.0.clone(),
            code: home.1.clone(),
        }];
        obs.extend(r.steps.iter().map(|s| Observation {
            frame: s.v_out.clone(),
            code: s.p_out.clone(),
        }));
        let run = run_ers(
            &p,
            &obs,
            &ErsConfig {
                window: 5,
                ..ErsConfig::new(Modality::Both)
            },
            Some(init),
        )
        .unwrap();
        for row in &run.trace {
            assert!(row.state_change < 1e-6, "{row:?}");
            assert!(row.loss_final < 1e-12);
        }
    }

    #[test]
    fn trace_outputs() {
        let (p, obs) = problem(5);
        let run = run_ers(&p, &obs, &small(Modality::Proprio, 1), None).unwrap();
        let csv = trace_csv(&run);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        let width = HiddenState::zeros(&p.config).len();
        assert_eq!(inferred_sidecar(&run).len(), 5 * width * 4);
        assert_eq!(
            csv.lines().nth(3).unwrap().split(',').nth(6).unwrap(),
            (2 * width * 4).to_string()
        );
        let back = read_inferred_sidecar(&p.config, &inferred_sidecar(&run)).unwrap();
        assert_eq!(
            back[4]
                .flatten()
                .iter()
                .map(|v| *v as f32)
                .collect::<Vec<_>>(),
            run.inferred[4]
                .flatten()
                .iter()
                .map(|v| *v as f32)
                .collect::<Vec<_>>()
        );
        let preds = read_predictions_sidecar(&p.config, &predictions_sidecar(&run)).unwrap();
        assert_eq!(preds.len(), 5);
        assert_eq!(preds[2].1[3], run.predictions[2].1[3] as f32 as f64);
        assert!(read_inferred_sidecar(&p.config, &[0; 6]).is_err());
    }
}
