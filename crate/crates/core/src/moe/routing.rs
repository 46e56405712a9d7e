use ndarray::{Array2, Array3, Axis};

use super::HmoeHead;
use crate::error::{Error, Result};
use crate::nn;

/// Output of the group router over an `H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRouting {
    /// `N × (H·W)` softmax probabilities.
    pub probs: Array2<f64>,
    /// Hard group per pixel (argmax, lowest index on ties).
    pub index: Vec<usize>,
}

/// Expert routing inside one group at one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub group: usize,
    /// Softmax over the group's `M_i` experts.
    pub probs: Vec<f64>,
    /// Top-K expert indices, most probable first.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelRoute {
    /// Hard group index.
    pub group: usize,
    pub group_probs: Vec<f64>,
    /// Active groups. With hard routing this is just the selected group.
    pub branches: Vec<Branch>,
}

impl PixelRoute {
    /// The branch of the hard-selected group.
    pub fn hard_branch(&self) -> &Branch {
        self.branches
            .iter()
            .find(|b| b.group == self.group)
            .expect("hard group always has a branch")
    }

    pub fn group_prob(&self) -> f64 {
        self.group_probs[self.group]
    }
}

/// Per-pixel routing over an LR map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub height: usize,
    pub width: usize,
    pub top_k: usize,
    /// Global id of each group's first expert.
    pub group_offsets: Vec<usize>,
    pub experts_per_group: Vec<usize>,
    pub pixels: Vec<PixelRoute>,
}

impl RoutingDecision {
    pub fn total_experts(&self) -> usize {
        self.experts_per_group.iter().sum()
    }

    /// Global id of the most probable selected expert at every pixel.
    pub fn top1_ids(&self) -> Vec<usize> {
        self.pixels
            .iter()
            .map(|p| self.group_offsets[p.group] + p.hard_branch().selected[0])
            .collect()
    }

    /// Pixel count per global expert id over the hard group's selections.
    /// Sums to `pixels × K`.
    pub fn usage_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.total_experts()];
        for p in &self.pixels {
            for &j in &p.hard_branch().selected {
                hist[self.group_offsets[p.group] + j] += 1;
            }
        }
        hist
    }

    /// Smallest gap between a selected logit and the best unselected one, over
    /// both routers. Perturbations that move logits by less than this cannot
    /// change any decision.
    pub fn min_logit_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let log_gap = |probs: &[f64], chosen: &[usize]| -> f64 {
            let worst_chosen = chosen.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
            let best_other = probs
                .iter()
                .enumerate()
                .filter(|(i, _)| !chosen.contains(i))
                .map(|(_, &p)| p)
                .fold(0.0_f64, f64::max);
            if best_other == 0.0 {
                f64::INFINITY
            } else {
                // Softmax logit differences equal log probability ratios.
                (worst_chosen / best_other).ln()
            }
        };
        for p in &self.pixels {
            margin = margin.min(log_gap(&p.group_probs, &[p.group]));
            for b in &p.branches {
                margin = margin.min(log_gap(&b.probs, &b.selected));
            }
        }
        margin
    }

    /// Checks that every pixel has normalized probabilities and consistent selections.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.pixels.len() != self.height * self.width {
            return Err(Error::shape("routing decision pixel count does not match its size"));
        }
        for (k, p) in self.pixels.iter().enumerate() {
            let sum: f64 = p.group_probs.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NonFinite(format!("group probabilities at pixel {k} sum to {sum}")));
            }
            if p.group != nn::argmax(&p.group_probs) || !p.group_probs.iter().all(|&q| q > 0.0) {
                return Err(Error::config(format!("group decision at pixel {k} is not the argmax")));
            }
            for b in &p.branches {
                let sum: f64 = b.probs.iter().sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::NonFinite(format!("expert probabilities at pixel {k} sum to {sum}")));
                }
                if b.probs.len() != self.experts_per_group[b.group]
                    || b.selected != nn::top_k(&b.probs, self.top_k)
                {
                    return Err(Error::config(format!("expert selection at pixel {k} is not the top-K")));
                }
            }
        }
        Ok(())
    }
}

pub(super) fn flatten(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w)).unwrap().into_owned()
}

impl HmoeHead {
    fn check_agg(&self, x_agg: &Array3<f64>) -> Result<()> {
        if x_agg.dim().0 != self.channels {
            return Err(Error::shape(format!(
                "router input has {} channels, head expects {}",
                x_agg.dim().0,
                self.channels
            )));
        }
        Ok(())
    }

    /// Softmax over `W · x^agg_k` per pixel, plus the hard group index.
    pub fn route_groups(&self, x_agg: &Array3<f64>) -> Result<GroupRouting> {
        self.check_agg(x_agg)?;
        let logits = self.group_router.dot(&flatten(x_agg));
        nn::ensure_finite(&logits.view().into_dyn(), || "in group router logits".into())?;
        let mut probs = Array2::<f64>::zeros(logits.dim());
        let mut index = Vec::with_capacity(logits.ncols());
        for (k, col) in logits.axis_iter(Axis(1)).enumerate() {
            let p = nn::softmax(&col.to_vec());
            index.push(nn::argmax(&p));
            probs.column_mut(k).assign(&ndarray::Array1::from(p));
        }
        Ok(GroupRouting { probs, index })
    }

    /// Expert logits `W^i · (x^agg_k + PE_i)` for every pixel, one matrix per group.
    pub(super) fn expert_logits(&self, agg_flat: &Array2<f64>) -> Vec<Array2<f64>> {
        self.expert_routers
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let u = agg_flat + &self.pe.row(i).insert_axis(Axis(1));
                w.dot(&u)
            })
            .collect()
    }

    /// Routes each pixel to the top-K experts of its group(s).
    pub fn route_experts(&self, x_agg: &Array3<f64>, groups: &GroupRouting) -> Result<RoutingDecision> {
        self.check_agg(x_agg)?;
        let (_, h, w) = x_agg.dim();
        if groups.index.len() != h * w {
            return Err(Error::shape("group index map does not match the router input"));
        }
        let logits = self.expert_logits(&flatten(x_agg));
        for l in &logits {
            nn::ensure_finite(&l.view().into_dyn(), || "in expert router logits".into())?;
        }
        let branch = |group: usize, k: usize| {
            let probs = nn::softmax(&logits[group].column(k).to_vec());
            let selected = nn::top_k(&probs, self.cfg.top_k);
            Branch { group, probs, selected }
        };
        let pixels = (0..h * w)
            .map(|k| {
                let group = groups.index[k];
                let branches = if self.cfg.soft_group {
                    (0..self.num_groups()).map(|g| branch(g, k)).collect()
                } else {
                    vec![branch(group, k)]
                };
                PixelRoute {
                    group,
                    group_probs: groups.probs.column(k).to_vec(),
                    branches,
                }
            })
            .collect();
        Ok(RoutingDecision {
            height: h,
            width: w,
            top_k: self.cfg.top_k,
            group_offsets: self.cfg.group_offsets(),
            experts_per_group: self.cfg.groups.iter().map(|g| g.experts).collect(),
            pixels,
        })
    }

    pub fn route(&self, x_agg: &Array3<f64>) -> Result<RoutingDecision> {
        let groups = self.route_groups(x_agg)?;
        self.route_experts(x_agg, &groups)
    }
}
