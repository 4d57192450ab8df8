//! Vision Transformer encoder: patch tokenization with optional mask
//! substitution, positional-embedding interpolation and pre-norm blocks.

use personvit_tensor::{Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bilinear_taps, Image, MaskPattern};
use crate::error::{Error, Result};
use crate::layers::{materialize, resolve, Init, Linear, Norm, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Global view size `[height, width]`; positional embeddings are learned
    /// on this grid and interpolated for other sizes.
    pub img_size: [usize; 2],
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl VitConfig {
    pub fn micro() -> Self {
        Self { patch_size: 8, dim: 64, depth: 4, heads: 4, mlp_ratio: 4.0, img_size: [64, 32], ln_eps: 1e-6, init_std: 0.02 }
    }

    pub fn small16() -> Self {
        Self { patch_size: 16, dim: 384, depth: 12, heads: 6, img_size: [256, 128], ..Self::micro() }
    }

    pub fn base16() -> Self {
        Self { patch_size: 16, dim: 768, depth: 12, heads: 12, img_size: [256, 128], ..Self::micro() }
    }

    /// Named presets: `vit-micro`, `vit-s16`, `vit-b16`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vit-micro" | "micro" => Ok(Self::micro()),
            "vit-s16" | "vit-s/16" | "small" => Ok(Self::small16()),
            "vit-b16" | "vit-b/16" | "base" => Ok(Self::base16()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (expected vit-micro, vit-s16 or vit-b16)"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Token grid for an `h`×`w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("patch size {p} does not divide input size {h}x{w}")));
        }
        Ok((h / p, w / p))
    }

    pub fn global_grid(&self) -> Result<(usize, usize)> {
        self.grid(self.img_size[0], self.img_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::Config("model dim, depth and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("embed dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("ln_eps and init_std must be positive".into()));
        }
        self.global_grid().map(|_| ())
    }
}

/// Per-channel input normalization applied when images are cut into patches.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A batch of images cut into flattened `p`×`p`×3 patches, all on one grid.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub batch: usize,
    pub grid: (usize, usize),
    /// `[batch, n, p*p*3]`, patches in row-major grid order.
    pub patches: Vec<T>,
    /// `[batch * n]`; `true` marks a position replaced by the mask token.
    pub mask: Option<Vec<bool>>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn from_images(cfg: &VitConfig, images: &[&Image], masks: Option<&[&MaskPattern]>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let grid = cfg.grid(h, w)?;
        let p = cfg.patch_size;
        let n = grid.0 * grid.1;
        let mut patches = Vec::with_capacity(images.len() * n * p * p * 3);
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Contract(format!(
                    "batch mixes sizes {h}x{w} and {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            for gy in 0..grid.0 {
                for gx in 0..grid.1 {
                    for py in 0..p {
                        let row = gy * p + py;
                        let start = (row * w + gx * p) * 3;
                        let px = &img.data()[start..start + p * 3];
                        patches.extend(px.iter().enumerate().map(|(i, &v)| T::c((f64::from(v) - PIXEL_MEAN[i % 3]) / PIXEL_STD[i % 3])));
                    }
                }
            }
        }
        let mask = match masks {
            None => None,
            Some(ms) => {
                if ms.len() != images.len() {
                    return Err(Error::Contract(format!("{} masks for {} images", ms.len(), images.len())));
                }
                let mut bits = Vec::with_capacity(images.len() * n);
                for m in ms {
                    if m.grid() != grid {
                        return Err(Error::Contract(format!("mask grid {:?} does not match token grid {grid:?}", m.grid())));
                    }
                    bits.extend_from_slice(m.bits());
                }
                Some(bits)
            }
        };
        Ok(Self { batch: images.len(), grid, patches, mask })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Row-major `[dst_h*dst_w, src_h*src_w]` bilinear resampling matrix
/// (half-pixel centers, clamped borders).
pub fn bilinear_matrix(src: (usize, usize), dst: (usize, usize)) -> Vec<f64> {
    let ys = bilinear_taps(src.0, dst.0);
    let xs = bilinear_taps(src.1, dst.1);
    let sn = src.0 * src.1;
    let mut m = vec![0.0; dst.0 * dst.1 * sn];
    for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, wx)) in xs.iter().enumerate() {
            let row = &mut m[(i * dst.1 + j) * sn..(i * dst.1 + j + 1) * sn];
            let (wy, wx) = (f64::from(wy), f64::from(wx));
            row[y0 * src.1 + x0] += (1.0 - wy) * (1.0 - wx);
            row[y0 * src.1 + x1] += (1.0 - wy) * wx;
            row[y1 * src.1 + x0] += wy * (1.0 - wx);
            row[y1 * src.1 + x1] += wy * wx;
        }
    }
    m
}

/// Bilinearly resamples a `[gh, gw, d]` grid to `[th, tw, d]`; the identity
/// when the sizes agree.
pub fn interpolate_pos_grid<T: Scalar>(pos: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let s = pos.shape();
    if s.len() != 3 || target.0 == 0 || target.1 == 0 {
        return Err(Error::Contract(format!("cannot interpolate grid {s:?} to {target:?}")));
    }
    if (s[0], s[1]) == target {
        return Ok(pos.clone());
    }
    let d = s[2];
    let m = bilinear_matrix((s[0], s[1]), target);
    let sn = s[0] * s[1];
    let mut out = vec![T::zero(); target.0 * target.1 * d];
    for (r, orow) in out.chunks_exact_mut(d).enumerate() {
        for (k, &w) in m[r * sn..(r + 1) * sn].iter().enumerate() {
            if w != 0.0 {
                let w = T::c(w);
                for (o, &v) in orow.iter_mut().zip(pos.row(k)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[target.0, target.1, d], out))
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Encoder layout over a [`ParamSet`] (parameters are named `{prefix}.*`).
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
    patch: Linear,
    cls: ParamId,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct VitForward {
    /// `[B, n+1, d]` after the final norm.
    pub tokens: Var,
    /// `[B, d]`
    pub cls: Var,
    /// `[B, n, d]`
    pub patches: Var,
    /// Per block `[B, heads, n+1, n+1]`, when captured.
    pub attention: Vec<Var>,
}

/// Embedded tokens of a single image: row 0 is the cls token.
#[derive(Clone, Debug)]
pub struct TokenSequence<T> {
    /// `[n+1, d]`
    pub tokens: Tensor<T>,
    pub grid: (usize, usize),
    pub mask: Option<MaskPattern>,
}

#[derive(Clone, Debug)]
pub struct EncodedFeatures<T> {
    pub z_cls: Vec<T>,
    /// `[n, d]`
    pub z_patches: Tensor<T>,
    /// Per block `[heads, n+1, n+1]`, when captured.
    pub attention: Vec<Tensor<T>>,
}

impl Vit {
    fn specs(cfg: &VitConfig, prefix: &str) -> Result<Vec<ParamSpec>> {
        cfg.validate()?;
        let (d, p, std) = (cfg.dim, cfg.patch_size, cfg.init_std);
        let (gh, gw) = cfg.global_grid()?;
        let mut s = Vec::new();
        s.extend(Linear::specs(&format!("{prefix}.patch_embed"), p * p * 3, d, std));
        s.push(ParamSpec::new(format!("{prefix}.cls_token"), &[d], Init::TruncNormal(std), false));
        s.push(ParamSpec::new(format!("{prefix}.mask_token"), &[d], Init::TruncNormal(std), false));
        s.push(ParamSpec::new(format!("{prefix}.pos_embed"), &[1 + gh * gw, d], Init::TruncNormal(std), false));
        for i in 0..cfg.depth {
            let b = format!("{prefix}.blocks.{i}");
            s.extend(Norm::specs(&format!("{b}.norm1"), d));
            s.extend(Linear::specs(&format!("{b}.attn.qkv"), d, 3 * d, std));
            s.extend(Linear::specs(&format!("{b}.attn.proj"), d, d, std));
            s.extend(Norm::specs(&format!("{b}.norm2"), d));
            s.extend(Linear::specs(&format!("{b}.mlp.fc1"), d, cfg.mlp_hidden(), std));
            s.extend(Linear::specs(&format!("{b}.mlp.fc2"), cfg.mlp_hidden(), d, std));
        }
        s.extend(Norm::specs(&format!("{prefix}.norm"), d));
        Ok(s)
    }

    fn from_ids(cfg: &VitConfig, ids: Vec<ParamId>) -> Self {
        let mut it = ids.into_iter();
        let patch = Linear::take(&mut it);
        let cls = it.next().unwrap();
        let mask_token = it.next().unwrap();
        let pos = it.next().unwrap();
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                norm1: Norm::take(&mut it),
                qkv: Linear::take(&mut it),
                proj: Linear::take(&mut it),
                norm2: Norm::take(&mut it),
                fc1: Linear::take(&mut it),
                fc2: Linear::take(&mut it),
            })
            .collect();
        let norm = Norm::take(&mut it);
        Self { cfg: cfg.clone(), patch, cls, mask_token, pos, blocks, norm }
    }

    /// Registers freshly initialized encoder parameters.
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &VitConfig, prefix: &str, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        let specs = Self::specs(cfg, prefix)?;
        Ok(Self::from_ids(cfg, materialize(&specs, params, rng)))
    }

    /// Binds to parameters that already exist (e.g. loaded from a checkpoint).
    pub fn attach<T: Scalar>(cfg: &VitConfig, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        let specs = Self::specs(cfg, prefix)?;
        Ok(Self::from_ids(cfg, resolve(&specs, params)?))
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos
    }

    /// Projected patch tokens `[B, n, d]` with mask substitution applied.
    fn project_patches<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, batch: &PatchBatch<T>) -> Var {
        let n = batch.tokens();
        let d = self.cfg.dim;
        let pp = self.cfg.patch_size * self.cfg.patch_size * 3;
        let x = g.constant(Tensor::from_vec(&[batch.batch, n, pp], batch.patches.clone()));
        let x = self.patch.forward(g, p, x);
        match &batch.mask {
            Some(bits) if bits.iter().any(|&b| b) => {
                let expand = |on: bool| -> Vec<T> {
                    bits.iter()
                        .flat_map(|&b| std::iter::repeat(if b == on { T::one() } else { T::zero() }).take(d))
                        .collect()
                };
                let keep = g.constant(Tensor::from_vec(&[batch.batch, n, d], expand(false)));
                let put = g.constant(Tensor::from_vec(&[batch.batch, n, d], expand(true)));
                let kept = g.mul(x, keep);
                let tok = g.mul(put, p[self.mask_token]);
                g.add(kept, tok)
            }
            _ => x,
        }
    }

    fn prepend_cls<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, batch: usize) -> Var {
        let ones = g.constant(Tensor::ones(&[batch, 1, self.cfg.dim]));
        let cls = g.mul(ones, p[self.cls]);
        g.concat(&[cls, x], 1)
    }

    /// Positional embeddings `[n+1, d]` for `grid`, interpolated from the
    /// learned global grid when needed.
    pub fn pos_embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, grid: (usize, usize)) -> Result<Var> {
        let global = self.cfg.global_grid()?;
        let pos = p[self.pos];
        if grid == global {
            return Ok(pos);
        }
        let gn = global.0 * global.1;
        let m: Vec<T> = bilinear_matrix(global, grid).into_iter().map(T::c).collect();
        let m = g.constant(Tensor::from_vec(&[grid.0 * grid.1, gn], m));
        let cls = g.narrow(pos, 0, 0, 1);
        let patches = g.narrow(pos, 0, 1, gn);
        let resampled = g.matmul(m, patches);
        Ok(g.concat(&[cls, resampled], 0))
    }

    /// Token embeddings `[B, n+1, d]` including positional embeddings.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, batch: &PatchBatch<T>) -> Result<Var> {
        let x = self.project_patches(g, p, batch);
        let x = self.prepend_cls(g, p, x, batch.batch);
        let pos = self.pos_embed(g, p, batch.grid)?;
        Ok(g.add(x, pos))
    }

    /// Runs the transformer blocks and the final norm on `[B, n+1, d]` tokens.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, capture_attention: bool) -> Result<VitForward> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.dim || shape[1] < 2 {
            return Err(Error::Contract(format!("encoder expects [B, n+1, {}] tokens, got {shape:?}", self.cfg.dim)));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let eps = self.cfg.ln_eps;
        let mut x = tokens;
        let mut attention = Vec::new();
        for blk in &self.blocks {
            let y = blk.norm1.forward(g, p, x, eps);
            let qkv = blk.qkv.forward(g, p, y);
            let qkv = g.reshape(qkv, &[b, t, 3, h, dh]);
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
            let part = |g: &mut Graph<T>, i: usize| {
                let v = g.narrow(qkv, 0, i, 1);
                g.reshape(v, &[b, h, t, dh])
            };
            let q = part(g, 0);
            let k = part(g, 1);
            let v = part(g, 2);
            let q = g.scale(q, T::c(1.0 / (dh as f64).sqrt()));
            let scores = g.matmul_nt(q, k);
            let attn = g.softmax(scores);
            if capture_attention {
                attention.push(attn);
            }
            let ctx = g.matmul(attn, v);
            let ctx = g.permute(ctx, &[0, 2, 1, 3]);
            let ctx = g.reshape(ctx, &[b, t, d]);
            let out = blk.proj.forward(g, p, ctx);
            x = g.add(x, out);

            let y = blk.norm2.forward(g, p, x, eps);
            let y = blk.fc1.forward(g, p, y);
            let y = g.gelu(y);
            let y = blk.fc2.forward(g, p, y);
            x = g.add(x, y);
        }
        let tokens = self.norm.forward(g, p, x, eps);
        let cls = g.narrow(tokens, 1, 0, 1);
        let cls = g.reshape(cls, &[b, d]);
        let patches = g.narrow(tokens, 1, 1, t - 1);
        Ok(VitForward { tokens, cls, patches, attention })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, batch: &PatchBatch<T>, capture_attention: bool) -> Result<VitForward> {
        let tokens = self.embed(g, p, batch)?;
        self.encode(g, p, tokens, capture_attention)
    }

    /// Tokenizes one image (cls first, positional embeddings added).
    pub fn patch_embed<T: Scalar>(&self, params: &ParamSet<T>, img: &Image, mask: Option<&MaskPattern>) -> Result<TokenSequence<T>> {
        let masks = mask.map(|m| [m]);
        let batch = PatchBatch::from_images(&self.cfg, &[img], masks.as_ref().map(|m| &m[..]))?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let tokens = self.embed(&mut g, &p, &batch)?;
        let n = batch.tokens();
        let tokens = g.value(tokens).clone().reshape(&[n + 1, self.cfg.dim])?;
        Ok(TokenSequence { tokens, grid: batch.grid, mask: mask.cloned() })
    }

    /// Like [`Vit::patch_embed`] but before positional embeddings are added.
    pub fn patch_embed_without_position<T: Scalar>(&self, params: &ParamSet<T>, img: &Image, mask: Option<&MaskPattern>) -> Result<Tensor<T>> {
        let masks = mask.map(|m| [m]);
        let batch = PatchBatch::from_images(&self.cfg, &[img], masks.as_ref().map(|m| &m[..]))?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = self.project_patches(&mut g, &p, &batch);
        let x = self.prepend_cls(&mut g, &p, x, 1);
        Ok(g.value(x).clone().reshape(&[batch.tokens() + 1, self.cfg.dim])?)
    }

    /// Encodes an already tokenized single image.
    pub fn encode_tokens<T: Scalar>(&self, params: &ParamSet<T>, seq: &TokenSequence<T>, capture_attention: bool) -> Result<EncodedFeatures<T>> {
        let s = seq.tokens.shape();
        if s.len() != 2 || s[1] != self.cfg.dim {
            return Err(Error::Contract(format!("token dim mismatch: got {s:?}, model dim {}", self.cfg.dim)));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let t = g.constant(seq.tokens.clone().reshape(&[1, s[0], s[1]])?);
        let out = self.encode(&mut g, &p, t, capture_attention)?;
        let n = s[0] - 1;
        Ok(EncodedFeatures {
            z_cls: g.value(out.cls).data().to_vec(),
            z_patches: g.value(out.patches).clone().reshape(&[n, self.cfg.dim])?,
            attention: out
                .attention
                .iter()
                .map(|&a| {
                    let sh = g.shape(a)[1..].to_vec();
                    g.value(a).clone().reshape(&sh)
                })
                .collect::<personvit_tensor::Result<_>>()?,
        })
    }

    /// Batched inference: returns `(cls [B, d], patches [B, n, d])`.
    pub fn extract<T: Scalar>(&self, params: &ParamSet<T>, images: &[&Image]) -> Result<(Tensor<T>, Tensor<T>)> {
        let batch = PatchBatch::from_images(&self.cfg, images, None)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, &batch, false)?;
        Ok((g.value(out.cls).clone(), g.value(out.patches).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny() -> VitConfig {
        VitConfig { patch_size: 4, dim: 8, depth: 2, heads: 2, img_size: [8, 8], ..VitConfig::micro() }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn presets() {
        let s = VitConfig::preset("vit-s16").unwrap();
        assert_eq!((s.dim, s.depth, s.heads, s.patch_size), (384, 12, 6, 16));
        let b = VitConfig::preset("ViT-B/16").unwrap();
        assert_eq!((b.dim, b.depth, b.heads), (768, 12, 12));
        let m = VitConfig::preset("vit-micro").unwrap();
        assert_eq!((m.patch_size, m.dim, m.depth, m.heads), (8, 64, 4, 4));
        assert!(VitConfig::preset("vit-h14").is_err());
        assert_eq!(s.grid(256, 128).unwrap(), (16, 8));
        assert!(matches!(s.grid(250, 128), Err(Error::Config(_))));
        let bad = VitConfig { heads: 5, ..VitConfig::micro() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = VitConfig { patch_size: 2, img_size: [2, 4], ..tiny() };
        let mut img = Image::filled(2, 4, [0.0; 3]);
        img.set(0, 2, 0, 1.0); // first pixel of the second patch
        img.set(1, 1, 2, 0.5); // last pixel row of the first patch
        let b = PatchBatch::<f64>::from_images(&cfg, &[&img], None).unwrap();
        let norm = |v: f64, c: usize| (v - PIXEL_MEAN[c]) / PIXEL_STD[c];
        assert_eq!(b.grid, (1, 2));
        assert_eq!(b.patches.len(), 24);
        assert_eq!(b.patches[12], norm(1.0, 0));
        assert_eq!(b.patches[3 * 3 + 2], norm(0.5, 2));
        assert_eq!(b.patches[1], norm(0.0, 1));
    }

    #[test]
    fn bilinear_matrix_rows_are_convex() {
        let m = bilinear_matrix((4, 2), (3, 5));
        for row in m.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn interpolation_identity_and_constant() {
        let mut rng = stream(3, &[]);
        let data: Vec<f64> = (0..4 * 2 * 3).map(|_| rng.gen()).collect();
        let t = Tensor::from_vec(&[4, 2, 3], data);
        assert_eq!(interpolate_pos_grid(&t, (4, 2)).unwrap(), t);
        let c = Tensor::full(&[4, 2, 3], 0.7f64);
        let up = interpolate_pos_grid(&c, (7, 5)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let cfg = tiny();
        let mut params = ParamSet::<f64>::new();
        let vit = Vit::init(&cfg, "backbone", &mut params, &mut stream(0, &[])).unwrap();
        let img = random_image(8, 8, 1);
        let seq = vit.patch_embed(&params, &img, None).unwrap();
        assert_eq!(seq.tokens.shape(), [5, 8]);
        let enc = vit.encode_tokens(&params, &seq, true).unwrap();
        assert_eq!(enc.z_cls.len(), 8);
        assert_eq!(enc.z_patches.shape(), [4, 8]);
        assert_eq!(enc.attention.len(), 2);
        for a in &enc.attention {
            assert_eq!(a.shape(), [2, 5, 5]);
            for row in a.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        // other grid sizes use interpolated positions
        let small = random_image(4, 8, 2);
        let seq = vit.patch_embed(&params, &small, None).unwrap();
        assert_eq!(seq.tokens.shape(), [3, 8]);
    }

    #[test]
    fn attach_finds_the_same_parameters() {
        let cfg = tiny();
        let mut params = ParamSet::<f32>::new();
        let a = Vit::init(&cfg, "backbone", &mut params, &mut stream(0, &[])).unwrap();
        let b = Vit::attach(&cfg, "backbone", &params).unwrap();
        assert_eq!(a.pos, b.pos);
        assert!(Vit::attach(&VitConfig { depth: 3, ..cfg }, "backbone", &params).is_err());
    }

    #[test]
    fn mask_grid_mismatch_is_a_contract_violation() {
        let cfg = tiny();
        let mut params = ParamSet::<f64>::new();
        let vit = Vit::init(&cfg, "backbone", &mut params, &mut stream(0, &[])).unwrap();
        let img = random_image(8, 8, 1);
        let m = MaskPattern::empty(3, 2);
        assert!(matches!(vit.patch_embed(&params, &img, Some(&m)), Err(Error::Contract(_))));
        let odd = random_image(6, 8, 1);
        assert!(matches!(vit.patch_embed(&params, &odd, None), Err(Error::Config(_))));
    }
}
