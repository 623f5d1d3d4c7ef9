//! Prediction loss of a closed-loop rollout and its exact gradient by
//! backpropagation through time.

use crate::network::{HiddenState, Layer, Parameters, Rollout, Weights};
use crate::tensor::{
    affine_transpose_acc, bias_grad_acc, conv_same_backward_acc, conv_transposed_acc,
    conv_valid_acc, kernel_grad_acc, kl_logit_grad_acc, kl_loss, out_tanh_deriv_from_output,
    outer_acc, scaled_tanh_deriv_from_output, softmax_backward_acc, Shape3,
};

/// Modality weights applied to the summed visual and proprioceptive errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub visual: f64,
    pub proprio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            visual: 1.0,
            proprio: 1.0,
        }
    }
}

/// Prediction target of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepTarget<'a> {
    pub frame: &'a [f64],
    pub code: &'a [f64],
}

/// Unweighted error sums over a rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Summed squared pixel error.
    pub visual: f64,
    /// Summed KL divergence of the joint codes.
    pub proprio: f64,
    /// Predicted probabilities floored while computing the KL term.
    pub clamped: usize,
}

impl LossBreakdown {
    pub fn total(&self, w: LossWeights) -> f64 {
        w.visual * self.visual + w.proprio * self.proprio
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.visual += other.visual;
        self.proprio += other.proprio;
        self.clamped += other.clamped;
    }
}

/// Errors of step `k` predictions against `targets[k]`.
pub fn rollout_loss(rollout: &Rollout, targets: &[StepTarget]) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for (rec, t) in rollout.steps.iter().zip(targets) {
        out.visual += rec
            .v_out
            .iter()
            .zip(t.frame)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        let kl = kl_loss(t.code, &rec.p_out).expect("target and prediction lengths agree");
        out.proprio += kl.value;
        out.clamped += kl.clamped;
    }
    out
}

fn zeros6(params: &Parameters) -> [Vec<f64>; 6] {
    Layer::ALL.map(|l| vec![0.0; l.len(&params.config)])
}

/// Gradient of the weighted rollout loss with respect to the initial
/// internal states, and, when `grads` is given, accumulated into the weight
/// gradients. The rollout must be closed-loop: every step after the first
/// consumed the previous step's prediction.
pub fn backward(
    params: &Parameters,
    rollout: &Rollout,
    targets: &[StepTarget],
    lw: LossWeights,
    mut grads: Option<&mut Weights>,
) -> HiddenState {
    use Layer::{PF, PM, PS, VF, VM, VS};
    let c = &params.config;
    let w = &params.weights;
    let (sf, sm, ss) = (c.vf.shape(), c.vm.shape(), c.vs.shape());
    let ps_shape = Shape3::new(c.ps.neurons, 1, 1);
    let image = c.image_shape();
    let group = c.units_per_group;
    let steps = rollout.steps.len().min(targets.len());

    // Gradients flowing into step k from step k + 1.
    let mut carry_u = zeros6(params);
    let mut carry_act = zeros6(params);
    let mut carry_vin = vec![0.0; c.image_len()];
    let mut carry_pin = vec![0.0; c.proprio_len()];

    for k in (0..steps).rev() {
        let rec = &rollout.steps[k];
        let prev = rollout.prev_state(k);
        let tgt = &targets[k];
        let mut next_u = zeros6(params);
        let mut next_act = zeros6(params);
        let mut next_vin = vec![0.0; c.image_len()];
        let mut next_pin = vec![0.0; c.proprio_len()];
        let mut g_act = std::mem::replace(&mut carry_act, zeros6(params));

        // proprioceptive output
        let mut g_po = vec![0.0; c.proprio_len()];
        kl_logit_grad_acc(tgt.code, &rec.p_out, group, lw.proprio, &mut g_po);
        softmax_backward_acc(&rec.p_out, &carry_pin, group, &mut g_po);
        affine_transpose_acc(&w.pf_po, &g_po, &mut g_act[PF.index()]);
        if let Some(g) = grads.as_deref_mut() {
            outer_acc(&g_po, rec.state.act(PF), &mut g.pf_po.data);
            crate::tensor::add_assign(&mut g.b_po, &g_po);
        }

        // visual output
        let g_vo: Vec<f64> = rec
            .v_out
            .iter()
            .zip(tgt.frame)
            .zip(&carry_vin)
            .map(|((&v, &t), &cv)| (2.0 * lw.visual * (v - t) + cv) * out_tanh_deriv_from_output(v))
            .collect();
        conv_valid_acc(&g_vo, image, &w.vf_vo, &mut g_act[VF.index()], sf);
        if let Some(g) = grads.as_deref_mut() {
            kernel_grad_acc(
                &g_vo,
                image,
                rec.state.act(VF),
                sf,
                &w.vf_vo,
                &mut g.vf_vo.data,
            );
            g.b_vo[0] += g_vo.iter().sum::<f64>();
        }

        // Returns dL/d(drive) and pushes the leak term on to the previous step.
        let drive_grad = |layer: Layer, g_act: &[f64], next_u: &mut [Vec<f64>; 6]| -> Vec<f64> {
            let i = layer.index();
            let tau = layer.tau(c);
            let keep = 1.0 - 1.0 / tau;
            let mut g_d = Vec::with_capacity(g_act.len());
            for ((&ga, &v), (&cu, nu)) in g_act
                .iter()
                .zip(rec.state.act(layer))
                .zip(carry_u[i].iter().zip(next_u[i].iter_mut()))
            {
                let gu = cu + ga * scaled_tanh_deriv_from_output(v);
                *nu += keep * gu;
                g_d.push(gu / tau);
            }
            g_d
        };

        // P_S
        let g_d = drive_grad(PS, &g_act[PS.index()], &mut next_u);
        affine_transpose_acc(&w.pm_ps, &g_d, &mut next_act[PM.index()]);
        affine_transpose_acc(&w.ps_ps, &g_d, &mut next_act[PS.index()]);
        conv_transposed_acc(&g_d, ps_shape, &w.vs_ps, &mut g_act[VS.index()], ss);
        if let Some(g) = grads.as_deref_mut() {
            outer_acc(&g_d, prev.act(PM), &mut g.pm_ps.data);
            outer_acc(&g_d, prev.act(PS), &mut g.ps_ps.data);
            kernel_grad_acc(
                rec.state.act(VS),
                ss,
                &g_d,
                ps_shape,
                &w.vs_ps,
                &mut g.vs_ps.data,
            );
            crate::tensor::add_assign(&mut g.b_ps, &g_d);
        }

        // P_M
        let g_d = drive_grad(PM, &g_act[PM.index()], &mut next_u);
        affine_transpose_acc(&w.pf_pm, &g_d, &mut next_act[PF.index()]);
        affine_transpose_acc(&w.ps_pm, &g_d, &mut next_act[PS.index()]);
        affine_transpose_acc(&w.pm_pm, &g_d, &mut next_act[PM.index()]);
        if let Some(g) = grads.as_deref_mut() {
            outer_acc(&g_d, prev.act(PF), &mut g.pf_pm.data);
            outer_acc(&g_d, prev.act(PS), &mut g.ps_pm.data);
            outer_acc(&g_d, prev.act(PM), &mut g.pm_pm.data);
            crate::tensor::add_assign(&mut g.b_pm, &g_d);
        }

        // P_F
        let g_d = drive_grad(PF, &g_act[PF.index()], &mut next_u);
        if k > 0 {
            affine_transpose_acc(&w.pi_pf, &g_d, &mut next_pin);
        }
        affine_transpose_acc(&w.pm_pf, &g_d, &mut next_act[PM.index()]);
        affine_transpose_acc(&w.pf_pf, &g_d, &mut next_act[PF.index()]);
        if let Some(g) = grads.as_deref_mut() {
            outer_acc(&g_d, &rec.p_in, &mut g.pi_pf.data);
            outer_acc(&g_d, prev.act(PM), &mut g.pm_pf.data);
            outer_acc(&g_d, prev.act(PF), &mut g.pf_pf.data);
            crate::tensor::add_assign(&mut g.b_pf, &g_d);
        }

        // V_S
        let g_d = drive_grad(VS, &g_act[VS.index()], &mut next_u);
        conv_transposed_acc(&g_d, ss, &w.vm_vs, &mut next_act[VM.index()], sm);
        conv_valid_acc(&g_d, ss, &w.ps_vs, &mut next_act[PS.index()], ps_shape);
        if let Some(g) = grads.as_deref_mut() {
            kernel_grad_acc(prev.act(VM), sm, &g_d, ss, &w.vm_vs, &mut g.vm_vs.data);
            kernel_grad_acc(
                &g_d,
                ss,
                prev.act(PS),
                ps_shape,
                &w.ps_vs,
                &mut g.ps_vs.data,
            );
            conv_same_backward_acc(
                prev.act(VS),
                ss,
                &w.vs_vs,
                &g_d,
                &mut next_act[VS.index()],
                Some(&mut g.vs_vs.data),
            );
            bias_grad_acc(&g_d, ss, &mut g.b_vs);
        } else {
            conv_same_backward_acc(
                prev.act(VS),
                ss,
                &w.vs_vs,
                &g_d,
                &mut next_act[VS.index()],
                None,
            );
        }

        // V_M
        let g_d = drive_grad(VM, &g_act[VM.index()], &mut next_u);
        conv_transposed_acc(&g_d, sm, &w.vf_vm, &mut next_act[VF.index()], sf);
        conv_valid_acc(&g_d, sm, &w.vs_vm, &mut next_act[VS.index()], ss);
        if let Some(g) = grads.as_deref_mut() {
            kernel_grad_acc(prev.act(VF), sf, &g_d, sm, &w.vf_vm, &mut g.vf_vm.data);
            kernel_grad_acc(&g_d, sm, prev.act(VS), ss, &w.vs_vm, &mut g.vs_vm.data);
            conv_same_backward_acc(
                prev.act(VM),
                sm,
                &w.vm_vm,
                &g_d,
                &mut next_act[VM.index()],
                Some(&mut g.vm_vm.data),
            );
            bias_grad_acc(&g_d, sm, &mut g.b_vm);
        } else {
            conv_same_backward_acc(
                prev.act(VM),
                sm,
                &w.vm_vm,
                &g_d,
                &mut next_act[VM.index()],
                None,
            );
        }

        // V_F
        let g_d = drive_grad(VF, &g_act[VF.index()], &mut next_u);
        if k > 0 {
            conv_transposed_acc(&g_d, sf, &w.vi_vf, &mut next_vin, image);
        }
        conv_valid_acc(&g_d, sf, &w.vm_vf, &mut next_act[VM.index()], sm);
        if let Some(g) = grads.as_deref_mut() {
            kernel_grad_acc(&rec.v_in, image, &g_d, sf, &w.vi_vf, &mut g.vi_vf.data);
            kernel_grad_acc(&g_d, sf, prev.act(VM), sm, &w.vm_vf, &mut g.vm_vf.data);
            conv_same_backward_acc(
                prev.act(VF),
                sf,
                &w.vf_vf,
                &g_d,
                &mut next_act[VF.index()],
                Some(&mut g.vf_vf.data),
            );
            bias_grad_acc(&g_d, sf, &mut g.b_vf);
        } else {
            conv_same_backward_acc(
                prev.act(VF),
                sf,
                &w.vf_vf,
                &g_d,
                &mut next_act[VF.index()],
                None,
            );
        }

        carry_u = next_u;
        carry_act = next_act;
        carry_vin = next_vin;
        carry_pin = next_pin;
    }

    let init = &rollout.init;
    let mut g0 = HiddenState::zeros(c);
    for l in Layer::ALL {
        let i = l.index();
        for (((g, &cu), &ca), &v) in g0.u[i]
            .iter_mut()
            .zip(&carry_u[i])
            .zip(&carry_act[i])
            .zip(init.act(l))
        {
            *g = cu + ca * scaled_tanh_deriv_from_output(v);
        }
    }
    g0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::network::{generate_closed_loop, init_params, LayerState};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    struct Case {
        params: Parameters,
        init: HiddenState,
        first: (Vec<f64>, Vec<f64>),
        frames: Vec<Vec<f64>>,
        codes: Vec<Vec<f64>>,
    }

    fn case(steps: usize) -> Case {
        let c = NetworkConfig::tiny();
        let mut params = init_params(&c, 1, 21).unwrap();
        let mut rng = stream_rng(99, Stream::GradCheck);
        for (name, t) in params.weights.tensors_mut() {
            if name.starts_with("b_") {
                t.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let mut init = HiddenState::zeros(&c);
        init.u
            .iter_mut()
            .flatten()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let frame = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..c.image_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        };
        let code = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..c.proprio_len())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            raw.chunks(c.units_per_group)
                .flat_map(|g| {
                    let s: f64 = g.iter().sum();
                    g.iter().map(move |v| v / s)
                })
                .collect()
        };
        let first = (frame(&mut rng), code(&mut rng));
        let frames = (0..steps).map(|_| frame(&mut rng)).collect();
        let codes = (0..steps).map(|_| code(&mut rng)).collect();
        Case {
            params,
            init,
            first,
            frames,
            codes,
        }
    }

    fn loss(case: &Case, params: &Parameters, init: &HiddenState, lw: LossWeights) -> f64 {
        let r = generate_closed_loop(
            params,
            &LayerState::from_hidden(init),
            (&case.first.0, &case.first.1),
            case.frames.len(),
        )
        .unwrap();
        rollout_loss(&r, &targets(case)).total(lw)
    }

    fn targets(case: &Case) -> Vec<StepTarget<'_>> {
        case.frames
            .iter()
            .zip(&case.codes)
            .map(|(f, c)| StepTarget { frame: f, code: c })
            .collect()
    }

    // central differences of a loss of order 1e2 carry roundoff near 1e-8
    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn gradients_match_central_differences() {
        let case = case(4);
        let lw = LossWeights {
            visual: 1.0,
            proprio: 0.7,
        };
        let r = generate_closed_loop(
            &case.params,
            &LayerState::from_hidden(&case.init),
            (&case.first.0, &case.first.1),
            4,
        )
        .unwrap();
        let mut gw = case.params.weights.zeros_like();
        let g0 = backward(&case.params, &r, &targets(&case), lw, Some(&mut gw));
        let eps = 1e-5;
        let names: Vec<&str> = case
            .params
            .weights
            .tensors()
            .iter()
            .map(|(n, _)| *n)
            .collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = gw.tensors()[ti].1.to_vec();
            for idx in (0..analytic.len()).step_by(analytic.len().div_ceil(6)) {
                let mut p = case.params.clone();
                p.weights.tensors_mut()[ti].1[idx] += eps;
                let up = loss(&case, &p, &case.init, lw);
                p.weights.tensors_mut()[ti].1[idx] -= 2.0 * eps;
                let down = loss(&case, &p, &case.init, lw);
                let num = (up - down) / (2.0 * eps);
                assert!(
                    rel(num, analytic[idx]) < 1e-5,
                    "{name}[{idx}]: {num} vs {}",
                    analytic[idx]
                );
            }
        }
        let flat = g0.flatten();
        for idx in 0..flat.len() {
            let mut s = case.init.flatten();
            s[idx] += eps;
            let up = loss(
                &case,
                &case.params,
                &HiddenState::from_flat(&case.params.config, &s).unwrap(),
                lw,
            );
            s[idx] -= 2.0 * eps;
            let down = loss(
                &case,
                &case.params,
                &HiddenState::from_flat(&case.params.config, &s).unwrap(),
                lw,
            );
            let num = (up - down) / (2.0 * eps);
            assert!(
                rel(num, flat[idx]) < 1e-5,
                "u0[{idx}]: {num} vs {}",
                flat[idx]
            );
        }
    }

    #[test]
    fn state_gradient_does_not_depend_on_weight_grads() {
        let case = case(3);
        let r = generate_closed_loop(
            &case.params,
            &LayerState::from_hidden(&case.init),
            (&case.first.0, &case.first.1),
            3,
        )
        .unwrap();
        let lw = LossWeights::default();
        let mut gw = case.params.weights.zeros_like();
        let a = backward(&case.params, &r, &targets(&case), lw, Some(&mut gw));
        let b = backward(&case.params, &r, &targets(&case), lw, None);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_silence_modality() {
        let case = case(3);
        let r = generate_closed_loop(
            &case.params,
            &LayerState::from_hidden(&case.init),
            (&case.first.0, &case.first.1),
            3,
        )
        .unwrap();
        let g = backward(
            &case.params,
            &r,
            &targets(&case),
            LossWeights {
                visual: 0.0,
                proprio: 0.0,
            },
            None,
        );
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        let l = rollout_loss(&r, &targets(&case));
        assert!(l.visual > 0.0 && l.proprio > 0.0);
        assert_eq!(
            l.total(LossWeights {
                visual: 2.0,
                proprio: 0.0
            }),
            2.0 * l.visual
        );
    }
}
