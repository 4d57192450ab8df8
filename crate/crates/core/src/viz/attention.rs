//! Cls-row self-attention heatmaps as binary PGM.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{encode_pgm, Image};
use crate::error::{Error, IoContext, Result};

use super::VizModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadReduce {
    #[default]
    Mean,
    PerHead,
}

/// Maps scores affinely onto `[0, 255]`; a constant grid becomes all 128.
pub fn normalize_heatmap(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Cls-token attention over patch tokens at `layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub grid: (usize, usize),
    /// Full cls row per head (cls column first), each summing to 1.
    pub rows: Vec<Vec<f64>>,
}

impl AttentionMaps {
    /// Patch part of a head's row, row-major over the grid.
    pub fn head(&self, h: usize) -> &[f64] {
        &self.rows[h][1..]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.grid.0 * self.grid.1;
        let mut out = vec![0.0; n];
        for r in &self.rows {
            for (o, v) in out.iter_mut().zip(&r[1..]) {
                *o += v / self.rows.len() as f64;
            }
        }
        out
    }
}

impl VizModel {
    pub fn cls_attention(&self, img: &Image, layer: usize) -> Result<AttentionMaps> {
        let cfg = self.net.vit.config();
        if layer >= cfg.depth {
            return Err(Error::Config(format!("attention layer {layer} out of range for depth {}", cfg.depth)));
        }
        let img = self.prepare(img);
        let seq = self.net.vit.patch_embed(&self.params, &img, None)?;
        let enc = self.net.vit.encode_tokens(&self.params, &seq, true)?;
        let a = &enc.attention[layer];
        let (heads, t) = (a.shape()[0], a.shape()[1]);
        let rows = (0..heads).map(|h| a.data()[h * t * t..h * t * t + t].iter().map(|&v| f64::from(v)).collect()).collect();
        Ok(AttentionMaps { grid: seq.grid, rows })
    }

    /// Writes `{stem}_layer{L}_mean.pgm` or one `{stem}_layer{L}_head{h}.pgm` per head.
    pub fn export_attention_pgm(&self, img: &Image, layer: usize, reduce: HeadReduce, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let maps = self.cls_attention(img, layer)?;
        let (gh, gw) = maps.grid;
        let grids: Vec<(String, Vec<f64>)> = match reduce {
            HeadReduce::Mean => vec![("mean".into(), maps.mean())],
            HeadReduce::PerHead => (0..maps.rows.len()).map(|h| (format!("head{h}"), maps.head(h).to_vec())).collect(),
        };
        std::fs::create_dir_all(out_dir).at(out_dir)?;
        let mut paths = Vec::new();
        for (tag, values) in grids {
            let path = out_dir.join(format!("{stem}_layer{layer}_{tag}.pgm"));
            std::fs::write(&path, encode_pgm(gh, gw, &normalize_heatmap(&values))).at(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_spans_full_range() {
        assert_eq!(normalize_heatmap(&[0.1, 0.3, 0.2]), vec![0, 255, 128]);
        assert_eq!(normalize_heatmap(&[0.25; 4]), vec![128; 4]);
    }
}
