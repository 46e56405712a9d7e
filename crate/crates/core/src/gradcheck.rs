//! Central finite-difference checks of the model's analytic gradients.
//!
//! The scalar under test is `⟨R, sr⟩ + balance_coeff · balance` for a fixed
//! random projection `R`. Parameters whose perturbation flips any routing
//! decision are skipped, since the loss is not differentiable there.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;

use crate::backbone::FeatureBlock;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::model::SrModel;
use crate::moe::RoutingDecision;
use crate::params::Parameters;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    /// Per parameter category: (checked, max relative error).
    pub by_category: BTreeMap<String, (usize, f64)>,
    pub eps: f64,
    pub min_margin: f64,
}

/// Coarse parameter grouping used in reports.
pub fn category(name: &str) -> &'static str {
    if name.starts_with("head.group_router") {
        "group_router"
    } else if name.starts_with("head.expert_router") {
        "expert_router"
    } else if name.starts_with("head.pe") {
        "pe"
    } else if name.starts_with("head.experts") {
        "experts"
    } else if name.starts_with("mfa") {
        "mfa"
    } else {
        "backbone"
    }
}

fn same_routing(a: &RoutingDecision, b: &RoutingDecision) -> bool {
    a.pixels.iter().zip(&b.pixels).all(|(p, q)| {
        p.group == q.group
            && p.branches.len() == q.branches.len()
            && p.branches.iter().zip(&q.branches).all(|(x, y)| x.selected == y.selected)
    })
}

fn objective(sr: &Array3<f64>, projection: &Array3<f64>, balance: f64, coeff: f64) -> f64 {
    (sr * projection).sum() + coeff * balance
}

/// Relative error with an absolute floor for gradients that are zero on both sides.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic and numeric gradients for up to `per_tensor` entries of
/// every parameter tensor whose name passes `filter`.
pub fn check_model<B: FeatureBlock>(
    model: &SrModel<B>,
    lr: &ImagePlane,
    balance_coeff: f64,
    eps: f64,
    seed: u64,
    filter: impl Fn(&str) -> bool,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let (out, cache) = model.forward_cached(lr)?;
    let mut rng = crate::rng::stream(&[seed, 0x9c]);
    let projection = Array3::from_shape_simple_fn(out.sr.dim(), || rng.random_range(-1.0..1.0));
    let grad = model.backward(&cache, &projection, balance_coeff)?;
    let margin = out.decision.min_logit_margin();

    let names: Vec<(String, usize)> = model
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.value.len()))
        .collect();
    let grads: Vec<Vec<f64>> = grad
        .named_tensors()
        .into_iter()
        .map(|t| t.value.iter().copied().collect())
        .collect();

    let mut report = GradCheckReport {
        eps,
        min_margin: margin,
        ..Default::default()
    };
    let eval = |m: &SrModel<B>| -> Result<(f64, RoutingDecision)> {
        let o = m.forward(lr)?;
        Ok((objective(&o.sr, &projection, o.balance, balance_coeff), o.decision))
    };
    for (ti, (name, len)) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let stride = (len / per_tensor.max(1)).max(1);
        for e in (0..*len).step_by(stride).take(per_tensor) {
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                if let Some(v) = m.tensors_mut()[ti].iter_mut().nth(e) {
                    *v += delta;
                }
                m
            };
            let (lp, dp) = eval(&perturbed(eps))?;
            let (lm, dm) = eval(&perturbed(-eps))?;
            if !same_routing(&dp, &out.decision) || !same_routing(&dm, &out.decision) {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[ti][e];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            let entry = report.by_category.entry(category(name).to_string()).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 = entry.1.max(rel);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{name}[{e}]: analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    Ok(report)
}
