//! Central finite-difference verification of analytic gradients.
//!
//! Re-evaluates a deterministic loss closure at perturbed parameter values
//! and compares against tape gradients. Used by the verification suite; the
//! closure must be a pure function of the store (all randomness pre-sampled).

use std::collections::BTreeMap;

use rand::Rng;

use crate::nn::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked_elements: usize,
    pub checked_tensors: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

/// Compare analytic gradients against central differences.
///
/// For each tensor in `analytic`, checks the element with the largest
/// gradient magnitude plus `extra_per_tensor` deterministically sampled
/// positions. Relative error uses a small absolute floor so near-zero
/// gradients do not explode the ratio.
pub fn finite_diff_check(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
    extra_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked_elements: 0,
        checked_tensors: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
    };
    let mut scratch = params.clone();
    for (name, grad) in analytic {
        report.checked_tensors += 1;
        let n = grad.numel();
        let mut picks = vec![argmax_abs(grad)];
        let mut r = rng::stream(seed, "gradcheck", &[rng::fnv1a(name.as_bytes())]);
        for _ in 0..extra_per_tensor {
            picks.push(r.gen_range(0..n));
        }
        picks.sort_unstable();
        picks.dedup();
        for idx in picks {
            let x0 = params.get(name).data()[idx];
            let h = 6e-6 * (1.0 + x0.abs());
            scratch.get_mut(name).data_mut()[idx] = x0 + h;
            let fp = loss_fn(&scratch);
            scratch.get_mut(name).data_mut()[idx] = x0 - h;
            let fm = loss_fn(&scratch);
            scratch.get_mut(name).data_mut()[idx] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            report.checked_elements += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
    }
    report
}

fn argmax_abs(t: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = -1.0;
    for (i, &v) in t.data().iter().enumerate() {
        if v.abs() > best_v {
            best_v = v.abs();
            best = i;
        }
    }
    best
}
