//! Parameters, per-step state and the forward dynamics of the two pathways.
//!
//! Every hidden layer is a leaky integrator
//!
//! ```text
//! u[t] = (1 - 1/tau) u[t-1] + (1/tau) (drive[t] + b),   v[t] = 1.7159 tanh(2/3 u[t])
//! ```
//!
//! The drives are, per layer:
//!
//! ```text
//! V_F  conv(V_in[t]) + convT(V_M[t-1]) + rec(V_F[t-1])
//! V_M  conv(V_F[t-1]) + convT(V_S[t-1]) + rec(V_M[t-1])
//! V_S  conv(V_M[t-1]) + rec(V_S[t-1]) + convT(P_S[t-1])        lateral, previous step
//! V_O  convT(V_F[t]), tanh, tau = 1
//! P_F  W P_in[t] + W P_M[t-1] + W P_F[t-1]
//! P_M  W P_F[t-1] + W P_S[t-1] + W P_M[t-1]
//! P_S  W P_M[t-1] + W P_S[t-1] + conv(V_S[t])                   lateral, current step
//! P_O  W P_F[t], grouped softmax, tau = 1
//! ```

use rand::Rng;

use crate::config::{ConvSpec, NetworkConfig};
use crate::error::{shape_err, Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{
    add_map_bias, affine_acc, conv_same_acc, conv_transposed_acc, conv_valid_acc, out_tanh,
    scaled_tanh, softmax_groups_into, DenseWeights, Kernel4, Shape3,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    VF,
    VM,
    VS,
    PF,
    PM,
    PS,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::VF,
        Layer::VM,
        Layer::VS,
        Layer::PF,
        Layer::PM,
        Layer::PS,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            Layer::VF => "vf",
            Layer::VM => "vm",
            Layer::VS => "vs",
            Layer::PF => "pf",
            Layer::PM => "pm",
            Layer::PS => "ps",
        }
    }

    pub fn tau(self, cfg: &NetworkConfig) -> f64 {
        match self {
            Layer::VF => cfg.vf.tau,
            Layer::VM => cfg.vm.tau,
            Layer::VS => cfg.vs.tau,
            Layer::PF => cfg.pf.tau,
            Layer::PM => cfg.pm.tau,
            Layer::PS => cfg.ps.tau,
        }
    }

    pub fn len(self, cfg: &NetworkConfig) -> usize {
        match self {
            Layer::VF => cfg.vf.shape().len(),
            Layer::VM => cfg.vm.shape().len(),
            Layer::VS => cfg.vs.shape().len(),
            Layer::PF => cfg.pf.neurons,
            Layer::PM => cfg.pm.neurons,
            Layer::PS => cfg.ps.neurons,
        }
    }
}

use Layer::{PF, PM, PS, VF, VM, VS};

/// Internal states `u` of the six hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub u: [Vec<f64>; 6],
}

impl HiddenState {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        HiddenState {
            u: Layer::ALL.map(|l| vec![0.0; l.len(cfg)]),
        }
    }

    pub fn layer(&self, layer: Layer) -> &[f64] {
        &self.u[layer.index()]
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut Vec<f64> {
        &mut self.u[layer.index()]
    }

    pub fn len(&self) -> usize {
        self.u.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All layers concatenated in [`Layer::ALL`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.u.concat()
    }

    pub fn from_flat(cfg: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        let mut state = Self::zeros(cfg);
        if flat.len() != state.len() {
            return shape_err(format!(
                "hidden state needs {} values, got {}",
                state.len(),
                flat.len()
            ));
        }
        let mut at = 0;
        for u in state.u.iter_mut() {
            let n = u.len();
            u.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(state)
    }

    pub(crate) fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        for l in Layer::ALL {
            if self.u[l.index()].len() != l.len(cfg) {
                return shape_err(format!(
                    "{} state has {} units, config needs {}",
                    l.name(),
                    self.u[l.index()].len(),
                    l.len(cfg)
                ));
            }
        }
        Ok(())
    }
}

/// Internal states and activations of every hidden layer at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub u: [Vec<f64>; 6],
    pub act: [Vec<f64>; 6],
}

impl LayerState {
    /// Activations derived from the internal states.
    pub fn from_hidden(h: &HiddenState) -> Self {
        LayerState {
            act: h
                .u
                .clone()
                .map(|u| u.into_iter().map(scaled_tanh).collect()),
            u: h.u.clone(),
        }
    }

    pub fn neutral(cfg: &NetworkConfig) -> Self {
        Self::from_hidden(&HiddenState::zeros(cfg))
    }

    pub fn hidden(&self) -> HiddenState {
        HiddenState { u: self.u.clone() }
    }

    pub fn u(&self, layer: Layer) -> &[f64] {
        &self.u[layer.index()]
    }

    pub fn act(&self, layer: Layer) -> &[f64] {
        &self.act[layer.index()]
    }
}

/// Kernels, weights and biases. Field names read `source_target`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub vi_vf: Kernel4,
    pub vm_vf: Kernel4,
    pub vf_vf: Kernel4,
    pub vf_vm: Kernel4,
    pub vs_vm: Kernel4,
    pub vm_vm: Kernel4,
    pub vm_vs: Kernel4,
    pub vs_vs: Kernel4,
    pub ps_vs: Kernel4,
    pub vf_vo: Kernel4,
    pub b_vf: Vec<f64>,
    pub b_vm: Vec<f64>,
    pub b_vs: Vec<f64>,
    pub b_vo: Vec<f64>,
    pub pi_pf: DenseWeights,
    pub pm_pf: DenseWeights,
    pub pf_pf: DenseWeights,
    pub pf_pm: DenseWeights,
    pub ps_pm: DenseWeights,
    pub pm_pm: DenseWeights,
    pub pm_ps: DenseWeights,
    pub ps_ps: DenseWeights,
    pub vs_ps: Kernel4,
    pub pf_po: DenseWeights,
    pub b_pf: Vec<f64>,
    pub b_pm: Vec<f64>,
    pub b_ps: Vec<f64>,
    pub b_po: Vec<f64>,
}

fn kernel(out_maps: usize, in_maps: usize, spec: ConvSpec) -> Kernel4 {
    Kernel4::zeros(
        out_maps,
        in_maps,
        spec.kh,
        spec.kw,
        spec.stride_y,
        spec.stride_x,
    )
}

impl Weights {
    pub fn zeros(c: &NetworkConfig) -> Self {
        let (f, m, s) = (c.vf.maps, c.vm.maps, c.vs.maps);
        let (pf, pm, ps, p) = (c.pf.neurons, c.pm.neurons, c.ps.neurons, c.proprio_len());
        let lateral = c.vs.lateral.expect("validated config has a lateral kernel");
        Weights {
            vi_vf: kernel(f, 1, c.vf.bottom_up),
            vm_vf: kernel(m, f, c.vf.top_down.expect("validated")),
            vf_vf: kernel(f, f, c.vf.recurrent),
            vf_vm: kernel(m, f, c.vm.bottom_up),
            vs_vm: kernel(s, m, c.vm.top_down.expect("validated")),
            vm_vm: kernel(m, m, c.vm.recurrent),
            vm_vs: kernel(s, m, c.vs.bottom_up),
            vs_vs: kernel(s, s, c.vs.recurrent),
            ps_vs: kernel(ps, s, lateral),
            vf_vo: kernel(f, 1, c.output_kernel),
            b_vf: vec![0.0; f],
            b_vm: vec![0.0; m],
            b_vs: vec![0.0; s],
            b_vo: vec![0.0; 1],
            pi_pf: DenseWeights::zeros(pf, p),
            pm_pf: DenseWeights::zeros(pf, pm),
            pf_pf: DenseWeights::zeros(pf, pf),
            pf_pm: DenseWeights::zeros(pm, pf),
            ps_pm: DenseWeights::zeros(pm, ps),
            pm_pm: DenseWeights::zeros(pm, pm),
            pm_ps: DenseWeights::zeros(ps, pm),
            ps_ps: DenseWeights::zeros(ps, ps),
            vs_ps: kernel(ps, s, lateral),
            pf_po: DenseWeights::zeros(p, pf),
            b_pf: vec![0.0; pf],
            b_pm: vec![0.0; pm],
            b_ps: vec![0.0; ps],
            b_po: vec![0.0; p],
        }
    }

    /// Every tensor with its name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("vi_vf", &self.vi_vf.data),
            ("vm_vf", &self.vm_vf.data),
            ("vf_vf", &self.vf_vf.data),
            ("vf_vm", &self.vf_vm.data),
            ("vs_vm", &self.vs_vm.data),
            ("vm_vm", &self.vm_vm.data),
            ("vm_vs", &self.vm_vs.data),
            ("vs_vs", &self.vs_vs.data),
            ("ps_vs", &self.ps_vs.data),
            ("vf_vo", &self.vf_vo.data),
            ("b_vf", &self.b_vf),
            ("b_vm", &self.b_vm),
            ("b_vs", &self.b_vs),
            ("b_vo", &self.b_vo),
            ("pi_pf", &self.pi_pf.data),
            ("pm_pf", &self.pm_pf.data),
            ("pf_pf", &self.pf_pf.data),
            ("pf_pm", &self.pf_pm.data),
            ("ps_pm", &self.ps_pm.data),
            ("pm_pm", &self.pm_pm.data),
            ("pm_ps", &self.pm_ps.data),
            ("ps_ps", &self.ps_ps.data),
            ("vs_ps", &self.vs_ps.data),
            ("pf_po", &self.pf_po.data),
            ("b_pf", &self.b_pf),
            ("b_pm", &self.b_pm),
            ("b_ps", &self.b_ps),
            ("b_po", &self.b_po),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("vi_vf", &mut self.vi_vf.data),
            ("vm_vf", &mut self.vm_vf.data),
            ("vf_vf", &mut self.vf_vf.data),
            ("vf_vm", &mut self.vf_vm.data),
            ("vs_vm", &mut self.vs_vm.data),
            ("vm_vm", &mut self.vm_vm.data),
            ("vm_vs", &mut self.vm_vs.data),
            ("vs_vs", &mut self.vs_vs.data),
            ("ps_vs", &mut self.ps_vs.data),
            ("vf_vo", &mut self.vf_vo.data),
            ("b_vf", &mut self.b_vf),
            ("b_vm", &mut self.b_vm),
            ("b_vs", &mut self.b_vs),
            ("b_vo", &mut self.b_vo),
            ("pi_pf", &mut self.pi_pf.data),
            ("pm_pf", &mut self.pm_pf.data),
            ("pf_pf", &mut self.pf_pf.data),
            ("pf_pm", &mut self.pf_pm.data),
            ("ps_pm", &mut self.ps_pm.data),
            ("pm_pm", &mut self.pm_pm.data),
            ("pm_ps", &mut self.pm_ps.data),
            ("ps_ps", &mut self.ps_ps.data),
            ("vs_ps", &mut self.vs_ps.data),
            ("pf_po", &mut self.pf_po.data),
            ("b_pf", &mut self.b_pf),
            ("b_pm", &mut self.b_pm),
            ("b_ps", &mut self.b_ps),
            ("b_po", &mut self.b_po),
        ]
    }

    /// Tensor shapes in [`Weights::tensors`] order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let k = |k: &Kernel4| vec![k.out_maps, k.in_maps, k.kh, k.kw];
        let d = |w: &DenseWeights| vec![w.rows, w.cols];
        let b = |b: &Vec<f64>| vec![b.len()];
        vec![
            k(&self.vi_vf),
            k(&self.vm_vf),
            k(&self.vf_vf),
            k(&self.vf_vm),
            k(&self.vs_vm),
            k(&self.vm_vm),
            k(&self.vm_vs),
            k(&self.vs_vs),
            k(&self.ps_vs),
            k(&self.vf_vo),
            b(&self.b_vf),
            b(&self.b_vm),
            b(&self.b_vs),
            b(&self.b_vo),
            d(&self.pi_pf),
            d(&self.pm_pf),
            d(&self.pf_pf),
            d(&self.pf_pm),
            d(&self.ps_pm),
            d(&self.pm_pm),
            d(&self.pm_ps),
            d(&self.ps_ps),
            k(&self.vs_ps),
            d(&self.pf_po),
            b(&self.b_pf),
            b(&self.b_pm),
            b(&self.b_ps),
            b(&self.b_po),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        for (_, t) in w.tensors_mut() {
            t.fill(0.0);
        }
        w
    }
}

/// Everything that training optimizes: weights plus one bundle of initial
/// internal states per training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: NetworkConfig,
    pub weights: Weights,
    pub initial: Vec<HiddenState>,
}

impl Parameters {
    pub fn zeros(config: &NetworkConfig, sequences: usize) -> Self {
        Parameters {
            weights: Weights::zeros(config),
            initial: vec![HiddenState::zeros(config); sequences],
            config: config.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.initial.len())
    }

    pub fn initial_state_name(sequence: usize, layer: Layer) -> String {
        format!("u0[{sequence}].{}", layer.name())
    }

    /// Weights followed by each sequence's initial states.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .weights
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (s, h) in self.initial.iter().enumerate() {
            for l in Layer::ALL {
                out.push((Self::initial_state_name(s, l), h.layer(l)));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .weights
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (s, h) in self.initial.iter_mut().enumerate() {
            for (l, u) in Layer::ALL.into_iter().zip(h.u.iter_mut()) {
                out.push((Self::initial_state_name(s, l), u.as_mut_slice()));
            }
        }
        out
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.weights.shapes();
        for _ in &self.initial {
            for l in Layer::ALL {
                shapes.push(vec![l.len(&self.config)]);
            }
        }
        shapes
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn initial_state(&self, sequence: usize) -> Result<LayerState> {
        self.initial
            .get(sequence)
            .map(LayerState::from_hidden)
            .ok_or_else(|| Error::Config(format!("no initial state for sequence {sequence}")))
    }
}

fn fill_uniform(rng: &mut impl Rng, data: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in data {
        *v = rng.random_range(-bound..bound);
    }
}

fn conv_fan_in(k: &Kernel4) -> usize {
    k.in_maps * k.kh * k.kw
}

/// Number of taps reaching one output element of the transposed convolution.
fn transposed_fan_in(k: &Kernel4) -> usize {
    k.out_maps * k.kh.div_ceil(k.stride_y) * k.kw.div_ceil(k.stride_x)
}

/// Fresh parameters: uniform kernels and weights in `+-1/sqrt(fan_in)`,
/// zero biases and zero initial states.
pub fn init_params(config: &NetworkConfig, sequences: usize, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut p = Parameters::zeros(config, sequences);
    let mut rng = stream_rng(seed, Stream::Params);
    let w = &mut p.weights;
    for k in [
        &mut w.vi_vf,
        &mut w.vf_vf,
        &mut w.vf_vm,
        &mut w.vm_vm,
        &mut w.vm_vs,
        &mut w.vs_vs,
        &mut w.vs_ps,
    ] {
        let fan = conv_fan_in(k);
        fill_uniform(&mut rng, &mut k.data, fan);
    }
    for k in [&mut w.vm_vf, &mut w.vs_vm, &mut w.ps_vs, &mut w.vf_vo] {
        let fan = transposed_fan_in(k);
        fill_uniform(&mut rng, &mut k.data, fan);
    }
    for d in [
        &mut w.pi_pf,
        &mut w.pm_pf,
        &mut w.pf_pf,
        &mut w.pf_pm,
        &mut w.ps_pm,
        &mut w.pm_pm,
        &mut w.pm_ps,
        &mut w.ps_ps,
        &mut w.pf_po,
    ] {
        let fan = d.cols;
        fill_uniform(&mut rng, &mut d.data, fan);
    }
    Ok(p)
}

/// Output of one network step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: LayerState,
    pub v_out: Vec<f64>,
    pub p_out: Vec<f64>,
}

fn leak(prev: &[f64], drive: Vec<f64>, tau: f64) -> Vec<f64> {
    let keep = 1.0 - 1.0 / tau;
    drive
        .into_iter()
        .zip(prev)
        .map(|(d, &u)| keep * u + d / tau)
        .collect()
}

fn check_finite(values: &[f64], layer: &'static str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, step })
    }
}

fn activate(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&x| scaled_tanh(x)).collect()
}

/// Advances the network by one step. `step` only labels faults.
pub fn forward_step(
    params: &Parameters,
    prev: &LayerState,
    v_in: &[f64],
    p_in: &[f64],
    step: usize,
) -> Result<StepOutput> {
    let c = &params.config;
    let w = &params.weights;
    if v_in.len() != c.image_len() || p_in.len() != c.proprio_len() {
        return shape_err(format!(
            "step input is {}+{} values, network expects {}+{}",
            v_in.len(),
            p_in.len(),
            c.image_len(),
            c.proprio_len()
        ));
    }
    let (sf, sm, ss) = (c.vf.shape(), c.vm.shape(), c.vs.shape());
    let ps_shape = Shape3::new(c.ps.neurons, 1, 1);

    let mut d = vec![0.0; sf.len()];
    conv_valid_acc(v_in, c.image_shape(), &w.vi_vf, &mut d, sf);
    conv_transposed_acc(prev.act(VM), sm, &w.vm_vf, &mut d, sf);
    conv_same_acc(prev.act(VF), sf, &w.vf_vf, &mut d);
    add_map_bias(&mut d, sf, &w.b_vf);
    let u_vf = leak(prev.u(VF), d, c.vf.tau);
    check_finite(&u_vf, "vf", step)?;

    let mut d = vec![0.0; sm.len()];
    conv_valid_acc(prev.act(VF), sf, &w.vf_vm, &mut d, sm);
    conv_transposed_acc(prev.act(VS), ss, &w.vs_vm, &mut d, sm);
    conv_same_acc(prev.act(VM), sm, &w.vm_vm, &mut d);
    add_map_bias(&mut d, sm, &w.b_vm);
    let u_vm = leak(prev.u(VM), d, c.vm.tau);
    check_finite(&u_vm, "vm", step)?;

    let mut d = vec![0.0; ss.len()];
    conv_valid_acc(prev.act(VM), sm, &w.vm_vs, &mut d, ss);
    conv_same_acc(prev.act(VS), ss, &w.vs_vs, &mut d);
    conv_transposed_acc(prev.act(PS), ps_shape, &w.ps_vs, &mut d, ss);
    add_map_bias(&mut d, ss, &w.b_vs);
    let u_vs = leak(prev.u(VS), d, c.vs.tau);
    check_finite(&u_vs, "vs", step)?;

    let v_vf = activate(&u_vf);
    let v_vs = activate(&u_vs);

    let mut v_out = vec![0.0; c.image_len()];
    conv_transposed_acc(&v_vf, sf, &w.vf_vo, &mut v_out, c.image_shape());
    for v in v_out.iter_mut() {
        *v = out_tanh(*v + w.b_vo[0]);
    }
    check_finite(&v_out, "vo", step)?;

    let mut d = w.b_pf.clone();
    affine_acc(&w.pi_pf, p_in, &mut d);
    affine_acc(&w.pm_pf, prev.act(PM), &mut d);
    affine_acc(&w.pf_pf, prev.act(PF), &mut d);
    let u_pf = leak(prev.u(PF), d, c.pf.tau);
    check_finite(&u_pf, "pf", step)?;

    let mut d = w.b_pm.clone();
    affine_acc(&w.pf_pm, prev.act(PF), &mut d);
    affine_acc(&w.ps_pm, prev.act(PS), &mut d);
    affine_acc(&w.pm_pm, prev.act(PM), &mut d);
    let u_pm = leak(prev.u(PM), d, c.pm.tau);
    check_finite(&u_pm, "pm", step)?;

    let mut d = w.b_ps.clone();
    affine_acc(&w.pm_ps, prev.act(PM), &mut d);
    affine_acc(&w.ps_ps, prev.act(PS), &mut d);
    conv_valid_acc(&v_vs, ss, &w.vs_ps, &mut d, ps_shape);
    let u_ps = leak(prev.u(PS), d, c.ps.tau);
    check_finite(&u_ps, "ps", step)?;

    let y_pf = activate(&u_pf);
    let mut logits = w.b_po.clone();
    affine_acc(&w.pf_po, &y_pf, &mut logits);
    check_finite(&logits, "po", step)?;
    let mut p_out = vec![0.0; logits.len()];
    softmax_groups_into(&logits, c.units_per_group, &mut p_out);

    let state = LayerState {
        act: [
            v_vf,
            activate(&u_vm),
            v_vs,
            y_pf,
            activate(&u_pm),
            activate(&u_ps),
        ],
        u: [u_vf, u_vm, u_vs, u_pf, u_pm, u_ps],
    };
    Ok(StepOutput {
        state,
        v_out,
        p_out,
    })
}

/// One recorded step of a rollout, with the inputs it consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub v_in: Vec<f64>,
    pub p_in: Vec<f64>,
    pub state: LayerState,
    pub v_out: Vec<f64>,
    pub p_out: Vec<f64>,
}

/// A sequence of steps starting from `init`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub init: LayerState,
    pub steps: Vec<StepRecord>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State before step `k`.
    pub fn prev_state(&self, k: usize) -> &LayerState {
        if k == 0 {
            &self.init
        } else {
            &self.steps[k - 1].state
        }
    }

    pub fn outputs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.steps
            .iter()
            .map(|s| (s.v_out.clone(), s.p_out.clone()))
            .collect()
    }

    pub fn final_state(&self) -> &LayerState {
        self.prev_state(self.steps.len())
    }
}

/// Which modalities an open-loop run takes from outside.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Entrain {
    Vision,
    Proprioception,
    Both,
}

impl Entrain {
    pub fn vision(self) -> bool {
        matches!(self, Entrain::Vision | Entrain::Both)
    }

    pub fn proprioception(self) -> bool {
        matches!(self, Entrain::Proprioception | Entrain::Both)
    }
}

/// External observation for one step; either modality may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalInput {
    pub frame: Option<Vec<f64>>,
    pub code: Option<Vec<f64>>,
}

/// Closed-loop generation: step 0 consumes `first`, every later step
/// consumes the previous step's own prediction.
pub fn generate_closed_loop(
    params: &Parameters,
    init: &LayerState,
    first: (&[f64], &[f64]),
    steps: usize,
) -> Result<Rollout> {
    if steps == 0 {
        return Err(Error::Config(
            "closed-loop generation needs at least one step".into(),
        ));
    }
    rollout_closed_loop(params, init, first, steps)
}

pub(crate) fn rollout_closed_loop(
    params: &Parameters,
    init: &LayerState,
    first: (&[f64], &[f64]),
    steps: usize,
) -> Result<Rollout> {
    let mut records: Vec<StepRecord> = Vec::with_capacity(steps);
    for k in 0..steps {
        let (prev, v_in, p_in) = match records.last() {
            None => (init, first.0.to_vec(), first.1.to_vec()),
            Some(r) => (&r.state, r.v_out.clone(), r.p_out.clone()),
        };
        let out = forward_step(params, prev, &v_in, &p_in, k)?;
        records.push(StepRecord {
            v_in,
            p_in,
            state: out.state,
            v_out: out.v_out,
            p_out: out.p_out,
        });
    }
    Ok(Rollout {
        init: init.clone(),
        steps: records,
    })
}

/// Open-loop generation (sensory entrainment). The entrained modality is
/// read from `external` at every step; the other one is fed back from the
/// previous prediction, starting from `first` at step 0.
pub fn generate_open_loop(
    params: &Parameters,
    init: &LayerState,
    first: (&[f64], &[f64]),
    external: &[ExternalInput],
    entrain: Entrain,
) -> Result<Rollout> {
    let mut records: Vec<StepRecord> = Vec::with_capacity(external.len());
    for (k, ext) in external.iter().enumerate() {
        let v_in = if entrain.vision() {
            ext.frame.clone().ok_or(Error::MissingInput {
                modality: "vision",
                step: k,
            })?
        } else {
            records
                .last()
                .map_or_else(|| first.0.to_vec(), |r| r.v_out.clone())
        };
        let p_in = if entrain.proprioception() {
            ext.code.clone().ok_or(Error::MissingInput {
                modality: "proprioception",
                step: k,
            })?
        } else {
            records
                .last()
                .map_or_else(|| first.1.to_vec(), |r| r.p_out.clone())
        };
        let prev = records.last().map_or(init, |r| &r.state);
        let out = forward_step(params, prev, &v_in, &p_in, k)?;
        records.push(StepRecord {
            v_in,
            p_in,
            state: out.state,
            v_out: out.v_out,
            p_out: out.p_out,
        });
    }
    Ok(Rollout {
        init: init.clone(),
        steps: records,
    })
}
