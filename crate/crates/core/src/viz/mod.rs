//! Qualitative exports from a pre-trained teacher.
//!
//! CSV schemas:
//! - clusters: `image,patch_row,patch_col,cluster`
//! - correspondence: `a_row,a_col,b_row,b_col,similarity`

mod attention;
mod correspondence;
mod kmeans;

pub use attention::{normalize_heatmap, AttentionMaps, HeadReduce};
pub use correspondence::{mutual_nearest_pairs, render_correspondence_csv, Correspondence, PatchPair, CORRESPONDENCE_CSV_HEADER};
pub use kmeans::{kmeans, KMeansResult, KMEANS_MAX_ITER, KMEANS_TOL};

use personvit_tensor::{Graph, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::finetune::prepare_image;
use crate::model::{Network, NetworkConfig};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    /// Defaults to the last layer when unset.
    pub layer: Option<usize>,
    pub head_reduce: HeadReduce,
    pub clusters: usize,
    pub top_n: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { layer: None, head_reduce: HeadReduce::Mean, clusters: 4, top_n: 20 }
    }
}

impl VizConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.top_n == 0 {
            return Err(Error::Config("viz.clusters and viz.top_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// The teacher network of a pre-training checkpoint.
pub struct VizModel {
    pub net: Network,
    pub params: ParamSet<f32>,
}

impl VizModel {
    pub fn new(net: Network, params: ParamSet<f32>) -> Self {
        Self { net, params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &NetworkConfig) -> Result<Self> {
        let (net, mut params) = Network::init(cfg, &mut stream(0, &[]))?;
        ckpt.load_params("teacher.", &mut params)?;
        Ok(Self { net, params })
    }

    fn prepare(&self, img: &Image) -> Image {
        prepare_image(img, self.net.vit.config().img_size)
    }

    /// `y_patches` (`[n, K]`) of one image and its patch grid.
    pub fn patch_projections(&self, img: &Image) -> Result<((usize, usize), Tensor<f32>)> {
        let img = self.prepare(img);
        let seq = self.net.vit.patch_embed(&self.params, &img, None)?;
        let enc = self.net.vit.encode_tokens(&self.params, &seq, false)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(enc.z_patches);
        let y = self.net.head_patch.forward(&mut g, &p, z)?;
        Ok((seq.grid, g.value(y).clone()))
    }

    /// k-means over `y_patches` pooled across `images`.
    pub fn cluster_patch_tokens(&self, images: &[(String, Image)], k: usize, seed: u64) -> Result<ClusterAssignment> {
        let mut points = Vec::new();
        let mut owners = Vec::new();
        for (name, img) in images {
            let (grid, y) = self.patch_projections(img)?;
            for i in 0..y.shape()[0] {
                points.push(y.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
                owners.push((name.clone(), i / grid.1, i % grid.1));
            }
        }
        if points.is_empty() {
            return Err(Error::Config("clustering needs at least one image".into()));
        }
        let result = kmeans(&points, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
        let rows = owners
            .into_iter()
            .zip(&result.assignments)
            .map(|((image, patch_row, patch_col), &cluster)| ClusterRow { image, patch_row, patch_col, cluster })
            .collect();
        Ok(ClusterAssignment { rows, result })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    pub image: String,
    pub patch_row: usize,
    pub patch_col: usize,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub rows: Vec<ClusterRow>,
    pub result: KMeansResult,
}

pub const CLUSTER_CSV_HEADER: &str = "image,patch_row,patch_col,cluster";

impl ClusterAssignment {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CLUSTER_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.image, r.patch_row, r.patch_col, r.cluster));
        }
        out
    }
}
