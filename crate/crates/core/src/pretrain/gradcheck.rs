//! Finite-difference check of the full student objective.

use personvit_tensor::{grad_check, Bound, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use rand::Rng;

use crate::data::{Image, MaskPattern};
use crate::error::Result;
use crate::head::HeadConfig;
use crate::model::{Network, NetworkConfig, BACKBONE};
use crate::rng::stream;
use crate::vit::{PatchBatch, VitConfig};

use super::trainer::{student_loss, teacher_forward, teacher_targets, LossWeights, StudentBatch};

#[derive(Clone, Debug)]
pub struct CombinedCheck {
    pub model: VitConfig,
    pub head: HeadConfig,
    pub batch: usize,
    pub local_views: usize,
    pub local_size: [usize; 2],
    pub weights: LossWeights,
    pub teacher_temp: f64,
    pub seed: u64,
    /// Step and sampling for backbone parameters.
    pub options: GradCheckOptions,
    /// Step for the projection heads.
    pub head_eps: f64,
}

impl Default for CombinedCheck {
    /// ViT-Micro backbone on 16×16 globals (2×2 grid) and 8×8 locals.
    fn default() -> Self {
        Self {
            model: VitConfig { img_size: [16, 16], ..VitConfig::micro() },
            head: HeadConfig { hidden_dim: 32, bottleneck_dim: 16, out_dim: 8 },
            batch: 2,
            local_views: 2,
            local_size: [8, 8],
            weights: LossWeights { lambda_dino: 1.0, lambda_mim: 1.0, student_temp: 0.1 },
            teacher_temp: 0.04,
            seed: 0,
            options: GradCheckOptions { eps: 2e-5, max_elements_per_param: Some(4) },
            head_eps: 5e-7,
        }
    }
}

fn random_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).expect("values in [0, 1)")
}

/// Compares tape gradients of `lambda_dino * L_dino + lambda_mim * L_mim`
/// w.r.t. every student parameter against central differences in f64.
///
/// The last `per_param` entry is the largest absolute key-bias gradient,
/// which must vanish; it also bounds `max_rel_error`.
pub fn combined_loss_gradcheck(c: &CombinedCheck) -> Result<GradCheckReport> {
    let mut rng = stream(c.seed, &[0x6763]);
    let net_cfg = NetworkConfig { vit: c.model.clone(), head: c.head.clone() };
    let (net, student) = Network::init::<f64, _>(&net_cfg, &mut rng)?;
    let (_, teacher) = Network::init::<f64, _>(&net_cfg, &mut rng)?;
    let [h, w] = c.model.img_size;
    let (gh, gw) = c.model.grid(h, w)?;
    let globals: Vec<Image> = (0..2 * c.batch).map(|_| random_image(h, w, &mut rng)).collect();
    let locals: Vec<Image> = (0..c.local_views * c.batch).map(|_| random_image(c.local_size[0], c.local_size[1], &mut rng)).collect();
    let masks: Vec<MaskPattern> = (0..2 * c.batch)
        .map(|i| MaskPattern::new(gh, gw, (0..gh * gw).map(|j| (i + j) % 2 == 0).collect()))
        .collect::<Result<_>>()?;
    let grefs: Vec<&Image> = globals.iter().collect();
    let mrefs: Vec<&MaskPattern> = masks.iter().collect();
    let lrefs: Vec<&Image> = locals.iter().collect();
    let teacher_batch = PatchBatch::<f64>::from_images(&c.model, &grefs, None)?;
    let batch = StudentBatch {
        batch: c.batch,
        globals: PatchBatch::from_images(&c.model, &grefs, Some(&mrefs))?,
        locals: if c.local_views > 0 { Some(PatchBatch::from_images(&c.model, &lrefs, None)?) } else { None },
        local_views: c.local_views,
    };
    let (cls, patches) = teacher_forward(&net, &teacher, &teacher_batch, true)?;
    let k = c.head.out_dim;
    let center: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let targets = teacher_targets(&cls, patches.as_ref(), &center, &center, c.teacher_temp)?;

    // Validate once outside the closure so failures surface as errors.
    {
        let mut g = Graph::new();
        let p = student.bind(&mut g, true);
        student_loss(&net, &mut g, &p, &batch, &targets, c.weights)?;
    }
    // Key biases shift every attention score of a query equally, so softmax
    // cancels them and their gradient is exactly zero; central differences
    // there only measure roundoff. They are held fixed and checked apart.
    let d = c.model.dim;
    let mut values = Vec::new();
    let mut in_head = Vec::new();
    let mut layout = Vec::new();
    let prefix = format!("{BACKBONE}.");
    for p in student.iter() {
        let head = !p.name.starts_with(&prefix);
        if p.name.ends_with("attn.qkv.bias") {
            let v = p.value.data();
            values.push(Tensor::from_vec(&[d], v[..d].to_vec()));
            values.push(Tensor::from_vec(&[d], v[2 * d..].to_vec()));
            in_head.extend([head, head]);
            layout.push(Some(Tensor::from_vec(&[d], v[d..2 * d].to_vec())));
        } else {
            values.push(p.value.clone());
            in_head.push(head);
            layout.push(None);
        }
    }
    let rebuild = |g: &mut Graph<f64>, vars: &[Var]| -> Bound {
        let mut it = vars.iter().copied();
        let bound = layout
            .iter()
            .map(|key| match key {
                Some(k) => {
                    let q = it.next().expect("layout matches values");
                    let k = g.constant(k.clone());
                    let v = it.next().expect("layout matches values");
                    g.concat(&[q, k, v], 0)
                }
                None => it.next().expect("layout matches values"),
            })
            .collect();
        Bound::from_vars(bound)
    };
    // The sharp head softmaxes need a small step against truncation; the
    // backbone gradients are small enough that such a step resolves them only
    // to a few ulps of the loss. Each group gets its own step, the other group
    // is held constant.
    let mut per_param = vec![0.0; values.len()];
    let mut checked = 0;
    for (group, eps) in [(false, c.options.eps), (true, c.head_eps)] {
        let idx: Vec<usize> = (0..values.len()).filter(|&i| in_head[i] == group).collect();
        let f = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
            let mut all: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
            for (&i, &v) in idx.iter().zip(vars) {
                all[i] = v;
            }
            let p = rebuild(g, &all);
            student_loss(&net, g, &p, &batch, &targets, c.weights).expect("validated above").total
        };
        let sub: Vec<Tensor<f64>> = idx.iter().map(|&i| values[i].clone()).collect();
        let r = grad_check(f, &sub, GradCheckOptions { eps, ..c.options })?;
        for (&i, e) in idx.iter().zip(r.per_param) {
            per_param[i] = e;
        }
        checked += r.checked;
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    let mut report = GradCheckReport { per_param, max_rel_error, checked };

    let mut g = Graph::new();
    let p = student.bind(&mut g, true);
    let loss = student_loss(&net, &mut g, &p, &batch, &targets, c.weights)?.total;
    let grads = g.backward(loss);
    let mut key_bias_grad = 0.0f64;
    for (i, param) in student.iter().enumerate() {
        if param.name.ends_with("attn.qkv.bias") {
            if let Some(gb) = grads.get(p.vars()[i]) {
                key_bias_grad = gb[d..2 * d].iter().fold(key_bias_grad, |m, v| m.max(v.abs()));
            }
        }
    }
    report.per_param.push(key_bias_grad);
    report.max_rel_error = report.max_rel_error.max(key_bias_grad);
    Ok(report)
}
