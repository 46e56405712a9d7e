//! Dual-routing heterogeneous mixture-of-experts upsampling head.
//!
//! Experts are organized in groups. All experts of a group are a conv with
//! the group's kernel size followed by a pixel shuffle; groups differ in
//! kernel size. Each LR pixel is sent to the most probable group (first
//! router, driven by `X^agg`), then to the top-K experts of that group
//! (second router, driven by `X^agg` plus the group's positional encoding).
//! The pixel's `s×s` output block is
//! `Σ_{j∈G} p_group · p_expert_j · E_ij(x_feat)`.

mod combine;
mod routing;
pub mod routing_map;

use ndarray::{Array2, Array3, ArrayViewMutD};
use rand::Rng;

pub use self::combine::{CombineOutput, HeadCache};
pub use self::routing::{Branch, GroupRouting, PixelRoute, RoutingDecision};
pub use self::routing_map::{export_routing_map, RoutingMapExport, RoutingMetadata};

use crate::config::{MoeConfig, PeKind};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};
use crate::params::{join, NamedTensor, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct HmoeHead {
    pub cfg: MoeConfig,
    pub channels: usize,
    /// `N × C`, bias-free.
    pub group_router: Array2<f64>,
    /// One `M_i × C` bias-free map per group.
    pub expert_routers: Vec<Array2<f64>>,
    /// `N × C` group encodings added to `x^agg` before the expert router.
    pub pe: Array2<f64>,
    /// `experts[i][j]` is `E_ij`: conv `C → 3·s²` with group `i`'s kernel.
    pub experts: Vec<Vec<Conv2d>>,
}

/// Fixed sinusoidal encoding of group indices.
pub fn sinusoidal_encoding(groups: usize, channels: usize) -> Array2<f64> {
    Array2::from_shape_fn((groups, channels), |(i, c)| {
        let freq = 1.0 / 10_000_f64.powf((c / 2 * 2) as f64 / channels as f64);
        let angle = i as f64 * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl HmoeHead {
    pub fn new(channels: usize, cfg: &MoeConfig, rng: &mut impl Rng) -> Result<Self> {
        validate(channels, cfg)?;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut linear = |rows: usize| {
            Array2::from_shape_simple_fn((rows, channels), || rng.random_range(-bound..bound))
        };
        let group_router = linear(cfg.groups.len());
        let expert_routers = cfg.groups.iter().map(|g| linear(g.experts)).collect();
        let pe = match cfg.pe_kind {
            PeKind::Learned => {
                Array2::from_shape_simple_fn((cfg.groups.len(), channels), || rng.random_range(-0.5..0.5))
            }
            PeKind::Sinusoidal => sinusoidal_encoding(cfg.groups.len(), channels),
        };
        let out = 3 * cfg.scale * cfg.scale;
        let experts = cfg
            .groups
            .iter()
            .map(|g| {
                (0..g.experts)
                    .map(|_| Conv2d::new(channels, out, g.kernel, true, rng))
                    .collect()
            })
            .collect();
        Ok(HmoeHead {
            cfg: cfg.clone(),
            channels,
            group_router,
            expert_routers,
            pe,
            experts,
        })
    }

    pub fn scale(&self) -> usize {
        self.cfg.scale
    }

    pub fn num_groups(&self) -> usize {
        self.cfg.groups.len()
    }

    pub fn total_experts(&self) -> usize {
        self.cfg.total_experts()
    }

    /// `E_ij(x_feat)`: conv then pixel shuffle, `C×H×W → 3×sH×sW`.
    pub fn expert_forward(&self, group: usize, expert: usize, x_feat: &Array3<f64>) -> Result<Array3<f64>> {
        let conv = self
            .experts
            .get(group)
            .and_then(|g| g.get(expert))
            .ok_or_else(|| Error::config(format!("no expert ({group}, {expert})")))?;
        nn::pixel_shuffle(&conv.forward(x_feat)?, self.scale())
    }
}

fn validate(channels: usize, cfg: &MoeConfig) -> Result<()> {
    if channels == 0 {
        return Err(Error::config("head needs at least one channel"));
    }
    crate::image::check_scale(cfg.scale)?;
    if cfg.groups.is_empty() {
        return Err(Error::config("head needs at least one expert group"));
    }
    for g in &cfg.groups {
        if g.kernel % 2 == 0 || g.experts == 0 {
            return Err(Error::config(format!(
                "group kernel must be odd and experts ≥ 1, got kernel {} experts {}",
                g.kernel, g.experts
            )));
        }
    }
    let min_m = cfg.groups.iter().map(|g| g.experts).min().unwrap_or(0);
    if cfg.top_k == 0 || cfg.top_k > min_m {
        return Err(Error::config(format!(
            "top_k {} must be between 1 and the smallest group size {min_m}",
            cfg.top_k
        )));
    }
    Ok(())
}

impl Parameters for HmoeHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "group_router"),
            value: self.group_router.view().into_dyn(),
        });
        for (i, w) in self.expert_routers.iter().enumerate() {
            out.push(NamedTensor {
                name: join(prefix, &format!("expert_router.{i}")),
                value: w.view().into_dyn(),
            });
        }
        if self.cfg.pe_kind == PeKind::Learned {
            out.push(NamedTensor {
                name: join(prefix, "pe"),
                value: self.pe.view().into_dyn(),
            });
        }
        for (i, group) in self.experts.iter().enumerate() {
            for (j, e) in group.iter().enumerate() {
                e.collect(&join(prefix, &format!("experts.{i}.{j}")), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.group_router.view_mut().into_dyn());
        for w in &mut self.expert_routers {
            out.push(w.view_mut().into_dyn());
        }
        if self.cfg.pe_kind == PeKind::Learned {
            out.push(self.pe.view_mut().into_dyn());
        }
        for group in &mut self.experts {
            for e in group {
                e.collect_mut(out);
            }
        }
    }
}
