use super::Params;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients against central differences for every
/// parameter. `grad` must leave ∂loss/∂θ in the module's gradient buffers.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from dividing roundoff by roundoff.
pub fn gradcheck<M: Params>(
    model: &mut M,
    loss: impl Fn(&M) -> f64,
    grad: impl Fn(&mut M),
    h: f64,
    floor: f64,
) -> GradCheck {
    model.zero_grad();
    grad(model);
    let analytic = model.flat_grads();
    let base = model.flat_values();
    let mut theta = base.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: base.len(),
    };
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        model.set_flat_values(&theta);
        let lp = loss(model);
        theta[i] = base[i] - h;
        model.set_flat_values(&theta);
        let lm = loss(model);
        theta[i] = base[i];
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    model.set_flat_values(&base);
    report
}
