//! Seeded synthetic pedestrian dataset.
//!
//! Every identity owns a persistent appearance (clothing colors, torso
//! pattern, body proportions, optional bag). Each image renders that
//! identity on a noisy background with pose jitter, a per-camera color cast
//! and an optional occluder. Identities are split into disjoint
//! pretrain / train / test groups; test identities are further divided into
//! query and gallery images.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{encode_ppm, Image};
use super::manifest::{write_manifest, ManifestEntry, Split};
use crate::error::{Error, IoContext, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub pretrain_identities: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub occlusion_prob: f64,
    /// Magnitude of the per-camera gain / offset color cast.
    pub camera_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pretrain_identities: 200,
            train_identities: 50,
            test_identities: 50,
            images_per_identity: 10,
            cameras: 3,
            image_size: [64, 32],
            occlusion_prob: 0.2,
            camera_shift: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn identities(&self) -> usize {
        self.pretrain_identities + self.train_identities + self.test_identities
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities() == 0 || self.images_per_identity == 0 || self.cameras == 0 {
            return Err(Error::Config("identity, image and camera counts must be positive".into()));
        }
        if self.image_size[0] < 8 || self.image_size[1] < 4 {
            return Err(Error::Config(format!("image size {:?} is too small (min 8x4)", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!("occlusion_prob {} must lie in [0, 1]", self.occlusion_prob)));
        }
        if !(0.0..=1.0).contains(&self.camera_shift) {
            return Err(Error::Config(format!("camera_shift {} must lie in [0, 1]", self.camera_shift)));
        }
        Ok(())
    }
}

const BACKGROUND_GRAY: f32 = 0.45;
const BACKGROUND_NOISE: f32 = 0.2;

const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.35, 0.85],
    [0.15, 0.65, 0.25],
    [0.92, 0.85, 0.20],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.12],
    [0.50, 0.50, 0.52],
    [0.55, 0.30, 0.12],
    [0.60, 0.20, 0.65],
    [0.95, 0.55, 0.15],
    [0.20, 0.75, 0.80],
    [0.95, 0.60, 0.70],
];

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Plain,
    Stripes { color: [f32; 3], period: usize },
    Split { color: [f32; 3] },
    Logo { color: [f32; 3] },
}

#[derive(Clone, Debug)]
struct Identity {
    skin: [f32; 3],
    hair: [f32; 3],
    top: [f32; 3],
    pattern: Pattern,
    bottom: [f32; 3],
    shorts: bool,
    shoes: [f32; 3],
    bag: Option<([f32; 3], bool)>,
    torso_frac: f32,
    width_frac: f32,
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn palette_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let c = PALETTE[rng.gen_range(0..PALETTE.len())];
    jitter_color(rng, c, 0.06)
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.gen_range(0.35..0.9f32);
        let skin = [tone, tone * 0.78, tone * 0.62];
        let hair_base = [[0.08, 0.06, 0.05], [0.35, 0.22, 0.10], [0.75, 0.65, 0.35]][rng.gen_range(0..3)];
        let hair = jitter_color(rng, hair_base, 0.05);
        let top = palette_color(rng);
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Plain,
            1 => Pattern::Stripes { color: palette_color(rng), period: rng.gen_range(2..=4) },
            2 => Pattern::Split { color: palette_color(rng) },
            _ => Pattern::Logo { color: palette_color(rng) },
        };
        let bag = if rng.gen_bool(0.4) { Some((palette_color(rng), rng.gen_bool(0.5))) } else { None };
        Self {
            skin,
            hair,
            top,
            pattern,
            bottom: palette_color(rng),
            shorts: rng.gen_bool(0.25),
            shoes: palette_color(rng),
            bag,
            torso_frac: rng.gen_range(0.30..0.40),
            width_frac: rng.gen_range(0.45..0.68),
        }
    }
}

struct Camera {
    gain: [f32; 3],
    offset: [f32; 3],
}

fn cameras(cfg: &SynthConfig) -> Vec<Camera> {
    let s = cfg.camera_shift as f32;
    (0..cfg.cameras)
        .map(|c| {
            let mut rng = stream(cfg.seed, &[0xca, c as u64]);
            let mut draw = |scale: f32| -> [f32; 3] {
                if scale > 0.0 {
                    [0; 3].map(|_| rng.gen_range(-scale..=scale))
                } else {
                    [0.0; 3]
                }
            };
            let g = draw(s);
            let o = draw(s * 0.5);
            Camera { gain: g.map(|v| 1.0 + v), offset: o }
        })
        .collect()
}

fn fill_rect(img: &mut Image, top: i64, left: i64, h: i64, w: i64, color: [f32; 3]) {
    let (ih, iw) = (img.height() as i64, img.width() as i64);
    for r in top.max(0)..(top + h).min(ih) {
        for c in left.max(0)..(left + w).min(iw) {
            for (k, &v) in color.iter().enumerate() {
                img.set(r as usize, c as usize, k, v);
            }
        }
    }
}

fn render(id: &Identity, cam: &Camera, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let [h, w] = cfg.image_size;
    let (hf, wf) = (h as f32, w as f32);

    // per-pixel noise around a mid gray
    let mut img = Image::filled(h, w, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                img.set(r, c, k, BACKGROUND_GRAY + rng.gen_range(-BACKGROUND_NOISE..BACKGROUND_NOISE));
            }
        }
    }

    let scale = rng.gen_range(0.9..1.03f32);
    let fig_h = hf * 0.94 * scale;
    let cx = wf / 2.0 + rng.gen_range(-2.0..2.0f32);
    let y0 = (hf - fig_h) / 2.0 + rng.gen_range(-2.0..2.0f32);
    let body_w = (wf * id.width_frac * scale).max(3.0);
    let head_h = fig_h * 0.15;
    let head_w = body_w * 0.55;
    let torso_h = fig_h * id.torso_frac;
    let shoe_h = (fig_h * 0.05).max(1.0);
    let leg_h = fig_h - head_h - torso_h - shoe_h;
    let stride = rng.gen_range(-1.5..1.5f32);

    let r = |v: f32| v.round() as i64;
    // head with hair cap
    fill_rect(&mut img, r(y0), r(cx - head_w / 2.0), r(head_h), r(head_w), id.skin);
    fill_rect(&mut img, r(y0), r(cx - head_w / 2.0), r(head_h * 0.35), r(head_w), id.hair);
    // torso + pattern
    let t_top = y0 + head_h;
    let t_left = cx - body_w / 2.0;
    fill_rect(&mut img, r(t_top), r(t_left), r(torso_h), r(body_w), id.top);
    match id.pattern {
        Pattern::Plain => {}
        Pattern::Stripes { color, period } => {
            let mut row = r(t_top);
            while row < r(t_top + torso_h) {
                fill_rect(&mut img, row, r(t_left), 1, r(body_w), color);
                row += period as i64 + 1;
            }
        }
        Pattern::Split { color } => {
            fill_rect(&mut img, r(t_top), r(cx), r(torso_h), r(body_w / 2.0), color);
        }
        Pattern::Logo { color } => {
            let s = body_w * 0.35;
            fill_rect(&mut img, r(t_top + torso_h * 0.3), r(cx - s / 2.0), r(s), r(s), color);
        }
    }
    // legs
    let l_top = t_top + torso_h;
    let leg_w = body_w * 0.4;
    let gap = body_w * 0.2;
    let legs = [cx - gap / 2.0 - leg_w + stride, cx + gap / 2.0 - stride];
    for &lx in &legs {
        fill_rect(&mut img, r(l_top), r(lx), r(leg_h), r(leg_w), id.bottom);
        if id.shorts {
            fill_rect(&mut img, r(l_top + leg_h * 0.45), r(lx), r(leg_h * 0.55), r(leg_w), id.skin);
        }
        fill_rect(&mut img, r(l_top + leg_h), r(lx), r(shoe_h), r(leg_w), id.shoes);
    }
    // bag on one side (which side depends on the walking direction)
    if let Some((color, right)) = id.bag {
        let facing_right = rng.gen_bool(0.5);
        let bw = body_w * 0.35;
        let bx = if right == facing_right { t_left + body_w - bw * 0.4 } else { t_left - bw * 0.6 };
        fill_rect(&mut img, r(t_top + torso_h * 0.35), r(bx), r(torso_h * 0.6), r(bw), color);
    }
    // occluder
    if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
        let oh = hf * rng.gen_range(0.2..0.4f32);
        let ow = wf * rng.gen_range(0.4..1.0f32);
        let color = [0; 3].map(|_| rng.gen_range(0.0..1.0f32));
        let left = rng.gen_range(0.0..=(wf - ow).max(0.0));
        fill_rect(&mut img, r(hf - oh), r(left), r(oh), r(ow), color);
    }
    // camera color cast and sensor noise
    for px in img.data_mut().chunks_exact_mut(3) {
        for k in 0..3 {
            px[k] = (px[k] * cam.gain[k] + cam.offset[k] + rng.gen_range(-0.03..0.03f32)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Renders one image of `person_id` as seen by `camera` (no file IO).
pub fn render_identity_image(cfg: &SynthConfig, person_id: u64, camera: usize, index: usize) -> Image {
    let id = Identity::sample(&mut stream(cfg.seed, &[0x1d, person_id]));
    let cams = cameras(cfg);
    let mut rng = stream(cfg.seed, &[0x1a, person_id, index as u64]);
    render(&id, &cams[camera % cams.len()], cfg, &mut rng)
}

/// Writes `images/*.ppm` and `manifest.csv` under `out_dir`.
pub fn generate_synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).at(&img_dir)?;
    let cams = cameras(cfg);
    let mut entries = Vec::with_capacity(cfg.identities() * cfg.images_per_identity);
    for pid in 0..cfg.identities() as u64 {
        let group = if (pid as usize) < cfg.pretrain_identities {
            Split::Pretrain
        } else if (pid as usize) < cfg.pretrain_identities + cfg.train_identities {
            Split::Train
        } else {
            Split::Gallery
        };
        let id = Identity::sample(&mut stream(cfg.seed, &[0x1d, pid]));
        let mut queried = vec![false; cfg.cameras];
        for j in 0..cfg.images_per_identity {
            let cam = (j + pid as usize) % cfg.cameras;
            let mut rng = stream(cfg.seed, &[0x1a, pid, j as u64]);
            let img = render(&id, &cams[cam], cfg, &mut rng);
            // one query per camera, as long as the identity keeps gallery images
            let split = if group == Split::Gallery && !queried[cam] && j + 1 < cfg.images_per_identity {
                queried[cam] = true;
                Split::Query
            } else {
                group
            };
            let rel = format!("images/{pid:04}_c{cam}_{j:03}.ppm");
            let path = out_dir.join(&rel);
            std::fs::write(&path, encode_ppm(&img)).at(&path)?;
            entries.push(ManifestEntry { path: rel, person_id: pid, camera_id: cam as u64, split });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SynthConfig {
        SynthConfig {
            pretrain_identities: 6,
            train_identities: 2,
            test_identities: 2,
            images_per_identity: 4,
            cameras: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_files_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_synth_dataset(&small(), dir.path()).unwrap();
        assert_eq!(entries.len(), 40);
        let files = std::fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(files, 40);
        let manifest = crate::data::load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest, entries);
    }

    #[test]
    fn splits_have_disjoint_identities() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_synth_dataset(&small(), dir.path()).unwrap();
        let ids = |f: &dyn Fn(Split) -> bool| -> BTreeSet<u64> {
            entries.iter().filter(|e| f(e.split)).map(|e| e.person_id).collect()
        };
        let pre = ids(&|s| s == Split::Pretrain);
        let train = ids(&|s| s == Split::Train);
        let test = ids(&|s| matches!(s, Split::Query | Split::Gallery));
        assert!(pre.is_disjoint(&test));
        assert!(pre.is_disjoint(&train));
        assert!(train.is_disjoint(&test));
        assert_eq!((pre.len(), train.len(), test.len()), (6, 2, 2));
        assert!(entries.iter().any(|e| e.split == Split::Query));
    }

    #[test]
    fn render_matches_written_file() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_synth_dataset(&cfg, dir.path()).unwrap();
        let e = &entries[5];
        let bytes = std::fs::read(dir.path().join(&e.path)).unwrap();
        let img = render_identity_image(&cfg, e.person_id, e.camera_id as usize, 1);
        assert_eq!(bytes, encode_ppm(&img));
    }
}
