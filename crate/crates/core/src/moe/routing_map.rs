//! Per-pixel expert selection maps.
//!
//! The id image stores the global expert id `offset(i) + j` of each LR pixel.
//! The colour image maps ids through a fixed 20-entry palette (cycled when a
//! model has more experts).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RoutingDecision;
use crate::error::{Error, Result};

/// Fixed palette, indexed by global expert id modulo its length.
pub const PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [174, 199, 232],
    [255, 127, 14],
    [255, 187, 120],
    [44, 160, 44],
    [152, 223, 138],
    [214, 39, 40],
    [255, 152, 150],
    [148, 103, 189],
    [197, 176, 213],
    [140, 86, 75],
    [196, 156, 148],
    [227, 119, 194],
    [247, 182, 210],
    [127, 127, 127],
    [199, 199, 199],
    [188, 189, 34],
    [219, 219, 141],
    [23, 190, 207],
    [158, 218, 229],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingMetadata {
    pub height: usize,
    pub width: usize,
    pub group_offsets: Vec<usize>,
    pub experts_per_group: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub top_k: usize,
    pub total_experts: usize,
    /// Pixels per global expert id.
    pub usage: Vec<u64>,
    pub note: Option<String>,
    pub palette: String,
}

#[derive(Clone, Debug)]
pub struct RoutingMapExport {
    /// Row-major global expert ids.
    pub ids: Vec<usize>,
    pub color: image::RgbImage,
    pub metadata: RoutingMetadata,
}

pub fn export_routing_map(decision: &RoutingDecision, kernel_sizes: &[usize]) -> RoutingMapExport {
    let ids = decision.top1_ids();
    let (h, w) = (decision.height, decision.width);
    let color = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(PALETTE[ids[y as usize * w + x as usize] % PALETTE.len()])
    });
    let note = (decision.top_k > 1).then(|| {
        format!(
            "top_k = {}; the map shows the most probable of the selected experts",
            decision.top_k
        )
    });
    let usage = {
        let mut u = vec![0u64; decision.total_experts()];
        for &id in &ids {
            u[id] += 1;
        }
        u
    };
    RoutingMapExport {
        ids,
        color,
        metadata: RoutingMetadata {
            height: h,
            width: w,
            group_offsets: decision.group_offsets.clone(),
            experts_per_group: decision.experts_per_group.clone(),
            kernel_sizes: kernel_sizes.to_vec(),
            top_k: decision.top_k,
            total_experts: decision.total_experts(),
            usage,
            note,
            palette: "tab20, indexed by global expert id modulo 20".into(),
        },
    }
}

impl RoutingMapExport {
    /// Writes `expert_ids.png` (8-bit, or 16-bit past 256 experts),
    /// `expert_map.png` and `routing.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.metadata.height as u32, self.metadata.width as u32);
        let ids_path = dir.join("expert_ids.png");
        let save = |res: image::ImageResult<()>, path: &Path| {
            res.map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
        };
        if self.metadata.total_experts <= 256 {
            let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([self.ids[(y * w + x) as usize] as u8]));
            save(img.save(&ids_path), &ids_path)?;
        } else {
            let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
                image::Luma([self.ids[(y * w + x) as usize] as u16])
            });
            save(img.save(&ids_path), &ids_path)?;
        }
        let color_path = dir.join("expert_map.png");
        save(self.color.save(&color_path), &color_path)?;
        let meta_path = dir.join("routing.json");
        let text = serde_json::to_string_pretty(&self.metadata)?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }
}
