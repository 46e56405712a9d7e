use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};

use super::routing::{flatten, PixelRoute, RoutingDecision};
use super::HmoeHead;
use crate::config::{Execution, PeKind};
use crate::error::{Error, Result};
use crate::nn;

/// Pixels handled by one expert, with their combined gate weights.
#[derive(Clone, Debug, Default)]
struct Assignment {
    pixels: Vec<usize>,
    weights: Vec<f64>,
    /// `(branch index, position in the branch's selection)` per entry.
    slots: Vec<(usize, usize)>,
}

enum ExpertOutput {
    /// `3s² × HW`, every pixel.
    Dense(Array2<f64>),
    /// `3s² × n`, columns follow the assignment's pixel list.
    Gathered(Array2<f64>),
    Unused,
}

pub struct HeadCache {
    agg: Array3<f64>,
    cols: BTreeMap<usize, Array2<f64>>,
    assignments: Vec<Vec<Assignment>>,
    outputs: Vec<Vec<ExpertOutput>>,
    feat_dim: (usize, usize, usize),
}

pub struct CombineOutput {
    /// `3 × sH × sW`, unclamped.
    pub sr: Array3<f64>,
    pub decision: RoutingDecision,
    /// Load-balance penalty (before its coefficient).
    pub balance: f64,
}

/// Gate weight of each selected expert in a branch: `p_group · p_j`, with
/// `p_j` optionally renormalized over the selection.
fn branch_weights(route: &PixelRoute, branch: usize, renormalize: bool) -> Vec<f64> {
    let b = &route.branches[branch];
    let pg = route.group_probs[b.group];
    let norm = if renormalize {
        b.selected.iter().map(|&j| b.probs[j]).sum::<f64>()
    } else {
        1.0
    };
    b.selected.iter().map(|&j| pg * b.probs[j] / norm).collect()
}

impl HmoeHead {
    fn assignments(&self, decision: &RoutingDecision) -> Vec<Vec<Assignment>> {
        let mut out: Vec<Vec<Assignment>> = self
            .cfg
            .groups
            .iter()
            .map(|g| vec![Assignment::default(); g.experts])
            .collect();
        for (k, route) in decision.pixels.iter().enumerate() {
            for (bi, b) in route.branches.iter().enumerate() {
                let weights = branch_weights(route, bi, self.cfg.renormalize_topk);
                for (si, (&j, w)) in b.selected.iter().zip(weights).enumerate() {
                    let a = &mut out[b.group][j];
                    a.pixels.push(k);
                    a.weights.push(w);
                    a.slots.push((bi, si));
                }
            }
        }
        out
    }

    fn unfold(&self, x_feat: &Array3<f64>) -> BTreeMap<usize, Array2<f64>> {
        self.cfg
            .groups
            .iter()
            .map(|g| g.kernel)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|k| (k, nn::im2col(x_feat, k)))
            .collect()
    }

    /// Full forward through routing and expert combination using the
    /// configured execution strategy.
    pub fn dispatch_combine(&self, x_feat: &Array3<f64>, x_agg: &Array3<f64>) -> Result<CombineOutput> {
        Ok(self.forward_cached(x_feat, x_agg, self.cfg.execution)?.0)
    }

    /// Reference path: every expert at every pixel, masked by the gates.
    pub fn combine_dense(&self, x_feat: &Array3<f64>, x_agg: &Array3<f64>) -> Result<CombineOutput> {
        Ok(self.forward_cached(x_feat, x_agg, Execution::Dense)?.0)
    }

    /// Sparse path: each expert only sees the pixel columns routed to it.
    pub fn combine_dispatch(&self, x_feat: &Array3<f64>, x_agg: &Array3<f64>) -> Result<CombineOutput> {
        Ok(self.forward_cached(x_feat, x_agg, Execution::Dispatch)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        x_feat: &Array3<f64>,
        x_agg: &Array3<f64>,
        execution: Execution,
    ) -> Result<(CombineOutput, HeadCache)> {
        let (c, h, w) = x_feat.dim();
        if c != self.channels {
            return Err(Error::shape(format!(
                "expert input has {c} channels, head expects {}",
                self.channels
            )));
        }
        if x_agg.dim() != x_feat.dim() {
            return Err(Error::shape(format!(
                "router input {:?} is not aligned with expert input {:?}",
                x_agg.dim(),
                x_feat.dim()
            )));
        }
        let decision = self.route(x_agg)?;
        let assignments = self.assignments(&decision);
        let cols = self.unfold(x_feat);
        let s = self.scale();
        let mut pre = Array2::<f64>::zeros((3 * s * s, h * w));
        let mut outputs = Vec::with_capacity(self.experts.len());
        for (gi, group) in self.experts.iter().enumerate() {
            let gcols = &cols[&self.cfg.groups[gi].kernel];
            let mut group_out = Vec::with_capacity(group.len());
            for (conv, a) in group.iter().zip(&assignments[gi]) {
                match execution {
                    Execution::Dense => {
                        let y = conv.forward_cols(gcols);
                        let mut mask = vec![0.0; h * w];
                        for (&k, &wt) in a.pixels.iter().zip(&a.weights) {
                            mask[k] += wt;
                        }
                        let mask = ndarray::Array1::from(mask);
                        pre += &(&y * &mask.view().insert_axis(Axis(0)));
                        group_out.push(ExpertOutput::Dense(y));
                    }
                    Execution::Dispatch => {
                        if a.pixels.is_empty() {
                            group_out.push(ExpertOutput::Unused);
                            continue;
                        }
                        let y = conv.forward_cols(&nn::gather_columns(gcols, &a.pixels));
                        for (idx, (&k, &wt)) in a.pixels.iter().zip(&a.weights).enumerate() {
                            let mut dst = pre.column_mut(k);
                            dst.scaled_add(wt, &y.column(idx));
                        }
                        group_out.push(ExpertOutput::Gathered(y));
                    }
                }
            }
            outputs.push(group_out);
        }
        let pre = pre.into_shape_with_order((3 * s * s, h, w)).unwrap();
        let sr = nn::pixel_shuffle(&pre, s)?;
        let balance = balance_penalty(&decision).0;
        Ok((
            CombineOutput { sr, decision, balance },
            HeadCache {
                agg: x_agg.clone(),
                cols,
                assignments,
                outputs,
                feat_dim: (c, h, w),
            },
        ))
    }

    /// Backpropagates `d_sr` (and the balance penalty scaled by
    /// `balance_coeff`) into `grad`; returns gradients w.r.t. `x_feat` and `x_agg`.
    pub(crate) fn backward(
        &self,
        out: &CombineOutput,
        cache: &HeadCache,
        d_sr: &Array3<f64>,
        balance_coeff: f64,
        grad: &mut HmoeHead,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let (c, h, w) = cache.feat_dim;
        let hw = h * w;
        let s = self.scale();
        let d_pre = nn::pixel_unshuffle(d_sr, s)?;
        let d_pre = d_pre.into_shape_with_order((3 * s * s, hw)).unwrap();
        let decision = &out.decision;

        // Gradient w.r.t. each gate weight, indexed [pixel][branch][selection].
        let mut d_gate: Vec<Vec<Vec<f64>>> = decision
            .pixels
            .iter()
            .map(|p| p.branches.iter().map(|b| vec![0.0; b.selected.len()]).collect())
            .collect();

        let mut d_cols: BTreeMap<usize, Array2<f64>> = cache
            .cols
            .iter()
            .map(|(&k, m)| (k, Array2::zeros(m.dim())))
            .collect();

        for (gi, group) in self.experts.iter().enumerate() {
            let kernel = self.cfg.groups[gi].kernel;
            let gcols = &cache.cols[&kernel];
            for (ei, conv) in group.iter().enumerate() {
                let a = &cache.assignments[gi][ei];
                if a.pixels.is_empty() {
                    continue;
                }
                let g = &mut grad.experts[gi][ei];
                match &cache.outputs[gi][ei] {
                    ExpertOutput::Dense(y) => {
                        let mut dy = Array2::<f64>::zeros(y.dim());
                        for ((&k, &wt), &(bi, si)) in a.pixels.iter().zip(&a.weights).zip(&a.slots) {
                            let dcol = d_pre.column(k);
                            d_gate[k][bi][si] += dcol.dot(&y.column(k));
                            dy.column_mut(k).scaled_add(wt, &dcol);
                        }
                        let dc = conv.backward_cols(gcols, &dy, g);
                        *d_cols.get_mut(&kernel).unwrap() += &dc;
                    }
                    ExpertOutput::Gathered(y) => {
                        let mut dy = Array2::<f64>::zeros(y.dim());
                        for (idx, ((&k, &wt), &(bi, si))) in
                            a.pixels.iter().zip(&a.weights).zip(&a.slots).enumerate()
                        {
                            let dcol = d_pre.column(k);
                            d_gate[k][bi][si] += dcol.dot(&y.column(idx));
                            dy.column_mut(idx).scaled_add(wt, &dcol);
                        }
                        let sel = nn::gather_columns(gcols, &a.pixels);
                        let dc = conv.backward_cols(&sel, &dy, g);
                        let dst = d_cols.get_mut(&kernel).unwrap();
                        for (idx, &k) in a.pixels.iter().enumerate() {
                            let mut col = dst.column_mut(k);
                            col += &dc.column(idx);
                        }
                    }
                    ExpertOutput::Unused => {}
                }
            }
        }

        // Gate weights → router probabilities → router logits.
        let (_, d_group_bal, d_expert_bal) = balance_penalty(decision);
        let n = self.num_groups();
        let mut dz_group = Array2::<f64>::zeros((n, hw));
        let mut dz_expert: Vec<Array2<f64>> = self
            .cfg
            .groups
            .iter()
            .map(|g| Array2::zeros((g.experts, hw)))
            .collect();
        for (k, route) in decision.pixels.iter().enumerate() {
            let mut dpg = vec![0.0; n];
            for (i, v) in dpg.iter_mut().enumerate() {
                *v = balance_coeff * d_group_bal[i * hw + k];
            }
            for (bi, b) in route.branches.iter().enumerate() {
                let pg = route.group_probs[b.group];
                let sel_sum: f64 = b.selected.iter().map(|&j| b.probs[j]).sum();
                let norm = if self.cfg.renormalize_topk { sel_sum } else { 1.0 };
                let mut dp = vec![0.0; b.probs.len()];
                let mut dq_dot_q = 0.0;
                for (si, &j) in b.selected.iter().enumerate() {
                    let q = b.probs[j] / norm;
                    let dw = d_gate[k][bi][si];
                    dpg[b.group] += dw * q;
                    let dq = dw * pg;
                    dp[j] += dq / norm;
                    dq_dot_q += dq * q;
                }
                if self.cfg.renormalize_topk {
                    for &j in &b.selected {
                        dp[j] -= dq_dot_q / norm;
                    }
                }
                if b.group == route.group && balance_coeff != 0.0 {
                    for (j, v) in dp.iter_mut().enumerate() {
                        *v += balance_coeff * d_expert_bal[k][j];
                    }
                }
                let dz = nn::softmax_backward(&b.probs, &dp);
                dz_expert[b.group].column_mut(k).assign(&ndarray::Array1::from(dz));
            }
            let dz = nn::softmax_backward(&route.group_probs, &dpg);
            dz_group.column_mut(k).assign(&ndarray::Array1::from(dz));
        }

        let agg_flat = flatten(&cache.agg);
        grad.group_router += &dz_group.dot(&agg_flat.t());
        let mut d_agg = self.group_router.t().dot(&dz_group);
        for (i, (wr, dz)) in self.expert_routers.iter().zip(&dz_expert).enumerate() {
            let u = &agg_flat + &self.pe.row(i).insert_axis(Axis(1));
            grad.expert_routers[i] += &dz.dot(&u.t());
            let du = wr.t().dot(dz);
            if self.cfg.pe_kind == PeKind::Learned {
                let mut row = grad.pe.row_mut(i);
                row += &du.sum_axis(Axis(1));
            }
            d_agg += &du;
        }

        let mut d_feat = Array3::<f64>::zeros((c, h, w));
        for (&k, dc) in &d_cols {
            d_feat += &nn::col2im(dc, c, h, w, k);
        }
        Ok((d_feat, d_agg.into_shape_with_order((c, h, w)).unwrap()))
    }
}

/// Switch-style load-balance penalty over the hard routing:
/// `N Σ_i f_i P_i` for groups plus the mean over used groups of
/// `M_i Σ_j f_ij P_ij` for experts. Both terms equal 1 under perfect balance.
///
/// Returns the value, its gradient w.r.t. group probabilities (`N × HW`,
/// row-major) and w.r.t. the hard branch's expert probabilities per pixel.
#[allow(clippy::type_complexity)]
pub(super) fn balance_penalty(decision: &RoutingDecision) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let hw = decision.pixels.len();
    let n = decision.experts_per_group.len();
    let mut counts = vec![0.0; n];
    let mut mean_p = vec![0.0; n];
    let mut expert_counts: Vec<Vec<f64>> = decision.experts_per_group.iter().map(|&m| vec![0.0; m]).collect();
    let mut expert_mean: Vec<Vec<f64>> = expert_counts.clone();
    for p in &decision.pixels {
        counts[p.group] += 1.0;
        for (i, &q) in p.group_probs.iter().enumerate() {
            mean_p[i] += q / hw as f64;
        }
        let b = p.hard_branch();
        for &j in &b.selected {
            expert_counts[p.group][j] += 1.0;
        }
        for (j, &q) in b.probs.iter().enumerate() {
            expert_mean[p.group][j] += q;
        }
    }
    let f: Vec<f64> = counts.iter().map(|c| c / hw as f64).collect();
    let group_term: f64 = n as f64 * f.iter().zip(&mean_p).map(|(a, b)| a * b).sum::<f64>();
    let used: Vec<usize> = (0..n).filter(|&i| counts[i] > 0.0).collect();
    let k = decision.top_k as f64;
    let mut expert_term = 0.0;
    for &i in &used {
        let m = decision.experts_per_group[i] as f64;
        let ng = counts[i];
        expert_term += m
            * expert_counts[i]
                .iter()
                .zip(&expert_mean[i])
                .map(|(c, p)| (c / (ng * k)) * (p / ng))
                .sum::<f64>();
    }
    let active = used.len().max(1) as f64;
    expert_term /= active;

    let mut d_group = vec![0.0; n * hw];
    for i in 0..n {
        for kk in 0..hw {
            d_group[i * hw + kk] = n as f64 * f[i] / hw as f64;
        }
    }
    let d_expert = decision
        .pixels
        .iter()
        .map(|p| {
            let i = p.group;
            let m = decision.experts_per_group[i] as f64;
            let ng = counts[i];
            expert_counts[i]
                .iter()
                .map(|c| m * (c / (ng * k)) / ng / active)
                .collect()
        })
        .collect();
    (group_term + expert_term, d_group, d_expert)
}
