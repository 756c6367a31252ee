//! Stage 1 (segmenter on labeled tumors) and Stage 2 (generator trained
//! against the frozen segmenter and a real-vs-synthetic classifier).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{split_components, Connectivity};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{bce_logit_grad, bce_with_logit, compute_seg_loss, seg_loss_logit_grad};
use crate::models::{ClsModel, FieldGenerator, GenModel, SegModel, Segmenter};
use crate::nn::tensor::sigmoid;
use crate::nn::{AdamW, CosineSchedule, EncDec, Grads, Module, PatchClassifier, Tensor};
use crate::pipeline::{
    derive_seed, synth_case_stream, train_segmentation, DatasetPool, DivergenceGuard, SegTrainConfig, SegTrainLog,
    SynthEvent, SynthStreamConfig,
};
use crate::quality::{proportion, validate_threshold, FailPolicy, QualityVerdict, DEFAULT_THRESHOLD};
use crate::synthesis::{apply_synthesis, synthesis_backward, GeneratorOutput, SynthesisConfig};
use crate::tumor_mask::{sample_tumor_mask, MaskSamplerConfig, SizeSpec};
use crate::volume::{crop_patch_with, Case, CropPolicy, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub lambda_cls: f64,
    pub lr_synthesis: f64,
    /// Learning rate of the real-vs-synthetic classifier.
    pub lr_classifier: f64,
    pub lr_segmentation: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Stage-2 patch size.
    pub patch: [usize; 3],
    /// Stage-1 training crop size.
    pub seg_patch: [usize; 3],
    /// Classifier input crop around the tumor centroid.
    pub cls_patch: [usize; 3],
    pub gen_width: usize,
    /// Scale of the generator's initial output layer.
    pub gen_out_scale: f32,
    pub seg_width: usize,
    pub cls_width: usize,
    pub tumor_crop_fraction: f64,
    pub threshold_t: f64,
    pub mask: SizeSpec,
    pub mask_sampler: MaskSamplerConfig,
    pub synthesis: SynthesisConfig,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            lambda_cls: 0.1,
            lr_synthesis: 1e-4,
            lr_classifier: 1e-4,
            lr_segmentation: 3e-4,
            weight_decay: 1e-5,
            batch: 4,
            epochs: 100,
            steps_per_epoch: 10,
            seed: 0,
            patch: [48; 3],
            seg_patch: [32; 3],
            cls_patch: [16; 3],
            gen_width: 4,
            gen_out_scale: 0.1,
            seg_width: 8,
            cls_width: 8,
            tumor_crop_fraction: 0.5,
            threshold_t: DEFAULT_THRESHOLD,
            mask: SizeSpec::default(),
            mask_sampler: MaskSamplerConfig::default(),
            synthesis: SynthesisConfig::default(),
            divergence_factor: 2.0,
            divergence_patience: 5,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda_cls >= 0.0) {
            return bad(format!("lambda_cls must be >= 0, got {}", self.lambda_cls));
        }
        if !(self.lr_synthesis > 0.0 && self.lr_classifier > 0.0 && self.lr_segmentation > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("batch, epochs and steps_per_epoch must be >= 1".into());
        }
        for (name, p) in [("patch", self.patch), ("seg_patch", self.seg_patch), ("cls_patch", self.cls_patch)] {
            if p.iter().any(|&d| d == 0 || d % EncDec::DIVISOR != 0) {
                return bad(format!("{name} {p:?} must be positive multiples of {}", EncDec::DIVISOR));
            }
        }
        if self.gen_width == 0 || self.seg_width == 0 || self.cls_width == 0 {
            return bad("network widths must be >= 1".into());
        }
        validate_threshold(self.threshold_t)?;
        self.mask.validate()?;
        self.synthesis.filter.validate()
    }

    /// Supervised settings used by Stage 1.
    pub fn stage1_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            mix: [1, 0],
            lr: self.lr_segmentation,
            weight_decay: self.weight_decay,
            batch: self.batch,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            patch: self.seg_patch,
            width: self.seg_width,
            seed: self.seed,
            tumor_crop_fraction: self.tumor_crop_fraction,
            threshold_t: self.threshold_t,
            mask: self.mask,
            mask_sampler: self.mask_sampler,
            synthesis: self.synthesis,
            divergence_factor: self.divergence_factor,
            divergence_patience: self.divergence_patience,
            ..SegTrainConfig::default()
        }
    }

    pub fn stream_config(&self) -> SynthStreamConfig {
        SynthStreamConfig {
            threshold_t: self.threshold_t,
            fail_policy: FailPolicy::Healthy,
            mask: self.mask,
            mask_sampler: self.mask_sampler,
            synthesis: self.synthesis,
        }
    }

    /// `input_norm` is normally the segmenter's, see [`EncDec::input_norm`].
    pub fn new_generator(&self, input_norm: [f32; 2]) -> GenModel {
        EncDec::new(self.gen_width, derive_seed(self.seed, 10), self.gen_out_scale, 0.0)
            .with_input_norm(input_norm[0], input_norm[1])
    }

    pub fn new_classifier(&self, input_norm: [f32; 2]) -> ClsModel {
        PatchClassifier::new(self.cls_width, derive_seed(self.seed, 11)).with_input_norm(input_norm[0], input_norm[1])
    }
}

/// Trains the segmentation discriminator on labeled cases with Dice-CE.
pub fn train_stage1(labeled: &[Case], cfg: &AdvConfig) -> Result<(SegModel, SegTrainLog)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs at least one labeled case".into()));
    }
    if !labeled.iter().any(Case::has_tumor) {
        return Err(Error::NoTumorVoxels);
    }
    let pool = DatasetPool::new(labeled.to_vec(), Vec::new())?;
    train_segmentation(&pool, None, &cfg.stage1_config())
}

/// Losses of one generator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_seg: f64,
    /// BCE of C on synthetic patches against the "real" label.
    pub l_cls: f64,
    /// `l_seg + lambda_cls * l_cls`.
    pub l_adv: f64,
}

impl LossBundle {
    pub fn new(l_seg: f64, l_cls: f64, lambda_cls: f64) -> Self {
        LossBundle {
            l_seg,
            l_cls,
            l_adv: l_seg + lambda_cls * l_cls,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_seg.is_finite() && self.l_cls.is_finite() && self.l_adv.is_finite()
    }
}

/// Mean BCE of C on `real` (target 1) and `synthetic` (target 0) patches.
/// `None` when either side is empty, in which case the C step is skipped.
pub fn classifier_loss(c: &ClsModel, real: &[Tensor], synthetic: &[Tensor]) -> Option<f64> {
    if real.is_empty() || synthetic.is_empty() {
        return None;
    }
    let r: f64 = real.iter().map(|x| bce_with_logit(c.forward(x).0, 1.0)).sum();
    let s: f64 = synthetic.iter().map(|x| bce_with_logit(c.forward(x).0, 0.0)).sum();
    Some((r + s) / (real.len() + synthetic.len()) as f64)
}

/// Generator-side losses for a batch of synthetic cases and their masks.
pub fn compute_adv_losses(
    synthetic: &[(Volume, Grid<u8>)],
    s: &dyn Segmenter,
    c: &ClsModel,
    cfg: &AdvConfig,
) -> Result<LossBundle> {
    if synthetic.is_empty() {
        return Err(Error::InvalidArgument("no synthetic cases".into()));
    }
    let (mut seg, mut cls) = (0.0, 0.0);
    for (x_hat, mask) in synthetic {
        seg += compute_seg_loss(&s.probs(&x_hat.data), mask)?;
        let patch = classifier_patch(&x_hat.data, mask, cfg.cls_patch)?;
        cls += bce_with_logit(c.forward(&Tensor::from_grid(&patch.0)).0, 1.0);
    }
    let n = synthetic.len() as f64;
    Ok(LossBundle::new(seg / n, cls / n, cfg.lambda_cls))
}

/// Crop of `size` centered on the mask centroid, with its origin.
pub fn classifier_patch(image: &Grid<f32>, mask: &Grid<u8>, size: [usize; 3]) -> Result<(Grid<f32>, [isize; 3])> {
    let c = mask
        .centroid()
        .ok_or_else(|| Error::EmptyMask("classifier patch needs a non-empty mask".into()))?;
    let origin = [0, 1, 2].map(|a| c[a].round() as isize - (size[a] / 2) as isize);
    Ok((image.crop(origin, size, 0.0), origin))
}

fn scatter_add(dst: &mut Grid<f32>, patch: &Grid<f32>, origin: [isize; 3]) {
    let [pd, ph, pw] = patch.shape();
    for z in 0..pd {
        for y in 0..ph {
            for x in 0..pw {
                let q = [origin[0] + z as isize, origin[1] + y as isize, origin[2] + x as isize];
                let shape = dst.shape();
                if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a]) {
                    let i = dst.index(q.map(|v| v as usize));
                    dst.as_mut_slice()[i] += patch.get([z, y, x]);
                }
            }
        }
    }
}

/// Per-sample result of a generator forward/backward pass.
pub struct GenSample {
    pub x_hat: Volume,
    pub mask: Grid<u8>,
    pub l_seg: f64,
    pub l_cls: f64,
    pub proportion: f64,
    /// Classifier input cut from `x_hat`.
    pub cls_input: Tensor,
}

/// Forward and backward pass of the generator objective for one case.
/// Generator gradients are accumulated into `grads` (scaled by `weight`);
/// S and C are only read.
pub fn generator_sample_step(
    g: &GenModel,
    s: &SegModel,
    c: &ClsModel,
    x: &Volume,
    mask: &Grid<u8>,
    cfg: &AdvConfig,
    weight: f32,
    grads: Option<&mut Grads>,
) -> Result<GenSample> {
    let (raw, gcache) = g.forward(&Tensor::from_grid(&x.data));
    let gout = GeneratorOutput::new(raw.to_grid());
    let fwd = apply_synthesis(x, mask, &gout, &cfg.synthesis)?;
    let (logits, scache) = s.forward(&Tensor::from_grid(&fwd.image.data));
    let probs = logits.to_grid().map(sigmoid);
    let l_seg = compute_seg_loss(&probs, mask)?;
    let p = proportion(&probs, mask)?;
    let mut g_logits = seg_loss_logit_grad(&probs, mask)?;
    g_logits.as_mut_slice().iter_mut().for_each(|v| *v *= weight);
    let gy = Tensor::from_grid(&g_logits);
    let mut g_xhat = s.backward(&scache, &gy, None, true).unwrap().to_grid();

    let (patch, origin) = classifier_patch(&fwd.image.data, mask, cfg.cls_patch)?;
    let cls_input = Tensor::from_grid(&patch);
    let (logit, ccache) = c.forward(&cls_input);
    let l_cls = bce_with_logit(logit, 1.0);
    if cfg.lambda_cls > 0.0 {
        let gl = weight * cfg.lambda_cls as f32 * bce_logit_grad(logit, 1.0);
        let gp = c.backward(&ccache, gl, None, true).unwrap().to_grid();
        scatter_add(&mut g_xhat, &gp, origin);
    }
    if let Some(grads) = grads {
        let g_raw = synthesis_backward(x, mask, &gout, &fwd, &g_xhat)?;
        g.backward(&gcache, &Tensor::from_grid(&g_raw), Some(grads), false);
    }
    Ok(GenSample {
        x_hat: fwd.image,
        mask: mask.clone(),
        l_seg,
        l_cls,
        proportion: p,
        cls_input,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Step {
    pub step: usize,
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_adv: f64,
    /// Classifier loss of the discriminator step; absent when skipped.
    pub l_cls_disc: Option<f64>,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_cls_disc: Option<f64>,
    pub pass_rate: f64,
    pub lr: f64,
    pub c_steps_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage2Log {
    pub steps: Vec<Stage2Step>,
    pub epochs: Vec<Stage2Epoch>,
    pub seg_hash_before: String,
    pub seg_hash_after: String,
    pub skipped: Vec<(String, String)>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Real-tumor classifier inputs available in the labeled pool.
fn real_patch_sites(labeled: &[Case]) -> Vec<(usize, Grid<u8>)> {
    let mut sites = Vec::new();
    for (i, c) in labeled.iter().enumerate() {
        if let Some(t) = &c.tumor {
            for inst in split_components(&t.data, Connectivity::Full26) {
                sites.push((i, inst));
            }
        }
    }
    sites
}

const MAX_DRAWS: usize = 100;

/// Draws an unlabeled crop and a tumor mask inside its organ.
fn draw_stage2_case(
    unlabeled: &[Case],
    cfg: &AdvConfig,
    rng: &mut ChaCha8Rng,
    log: &mut Stage2Log,
) -> Result<(Volume, Grid<u8>)> {
    for _ in 0..MAX_DRAWS {
        let case = &unlabeled[rng.random_range(0..unlabeled.len())];
        let mask_seed: u64 = rng.random();
        if case.organ.data.count_nonzero() == 0 {
            log.skipped.push((case.id().to_string(), "empty organ label".into()));
            continue;
        }
        let (crop, _) = crop_patch_with(case, cfg.patch, CropPolicy::OrganCentered, rng)?;
        match sample_tumor_mask(&crop.organ, &cfg.mask, mask_seed, &cfg.mask_sampler) {
            Ok(m) => return Ok((crop.image, m.data)),
            Err(e @ Error::OrganTooSmall { .. }) => log.skipped.push((case.id().to_string(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument(format!(
        "no usable unlabeled case in {MAX_DRAWS} draws"
    )))
}

/// Alternating generator / classifier training with S frozen.
pub fn train_stage2(
    mut g: GenModel,
    s: &SegModel,
    mut c: ClsModel,
    labeled: &[Case],
    unlabeled: &[Case],
    cfg: &AdvConfig,
) -> Result<(GenModel, ClsModel, Stage2Log)> {
    cfg.validate()?;
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs non-empty labeled and unlabeled pools".into()));
    }
    let mut log = Stage2Log {
        seg_hash_before: s.param_hash(),
        ..Default::default()
    };
    let sites = real_patch_sites(labeled);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12));
    let mut g_opt = AdamW::new(&g, cfg.weight_decay);
    let mut c_opt = AdamW::new(&c, cfg.weight_decay);
    let sched = CosineSchedule {
        base: cfg.lr_synthesis,
        total: cfg.epochs * cfg.steps_per_epoch,
    };
    let c_sched = CosineSchedule {
        base: cfg.lr_classifier,
        ..sched
    };
    let mut g_grads = Grads::zeros_like(&g);
    let mut c_grads = Grads::zeros_like(&c);
    let mut guard = DivergenceGuard::new(cfg.divergence_factor, cfg.divergence_patience);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let first_step = log.steps.len();
        let mut skipped_c = 0;
        for _ in 0..cfg.steps_per_epoch {
            let lr = sched.lr(step);
            // Generator step.
            g_grads.zero();
            let w = 1.0 / cfg.batch as f32;
            let mut synth = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let (x, mask) = draw_stage2_case(unlabeled, cfg, &mut rng, &mut log)?;
                synth.push(generator_sample_step(&g, s, &c, &x, &mask, cfg, w, Some(&mut g_grads))?);
            }
            let n = synth.len() as f64;
            let bundle = LossBundle::new(
                synth.iter().map(|x| x.l_seg).sum::<f64>() / n,
                synth.iter().map(|x| x.l_cls).sum::<f64>() / n,
                cfg.lambda_cls,
            );
            if !bundle.is_finite() || !g_grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite generator loss at step {step}")));
            }
            g_opt.step(&mut g, &g_grads, lr);

            // Classifier step on real tumors vs. this step's synthetic patches.
            let real: Vec<Tensor> = if sites.is_empty() {
                Vec::new()
            } else {
                (0..cfg.batch)
                    .map(|_| {
                        let (ci, inst) = &sites[rng.random_range(0..sites.len())];
                        classifier_patch(&labeled[*ci].image.data, inst, cfg.cls_patch)
                            .map(|(p, _)| Tensor::from_grid(&p))
                    })
                    .collect::<Result<_>>()?
            };
            let fake: Vec<Tensor> = synth.iter().map(|x| x.cls_input.clone()).collect();
            let l_cls_disc = if real.is_empty() || cfg.lambda_cls == 0.0 {
                skipped_c += 1;
                None
            } else {
                c_grads.zero();
                let m = (real.len() + fake.len()) as f32;
                let mut total = 0.0;
                for (x, target) in real.iter().map(|x| (x, 1.0)).chain(fake.iter().map(|x| (x, 0.0))) {
                    let (logit, cache) = c.forward(x);
                    total += bce_with_logit(logit, target);
                    c.backward(&cache, bce_logit_grad(logit, target) / m, Some(&mut c_grads), false);
                }
                c_opt.step(&mut c, &c_grads, c_sched.lr(step));
                Some(total / m as f64)
            };
            let passed = synth.iter().filter(|x| x.proportion >= cfg.threshold_t).count();
            log.steps.push(Stage2Step {
                step,
                l_seg: bundle.l_seg,
                l_cls: bundle.l_cls,
                l_adv: bundle.l_adv,
                l_cls_disc,
                pass_rate: passed as f64 / n,
            });
            step += 1;
        }
        let steps = &log.steps[first_step..];
        let k = steps.len() as f64;
        let mean = |f: fn(&Stage2Step) -> f64| steps.iter().map(f).sum::<f64>() / k;
        let disc: Vec<f64> = steps.iter().filter_map(|s| s.l_cls_disc).collect();
        let rec = Stage2Epoch {
            epoch,
            l_seg: mean(|s| s.l_seg),
            l_cls: mean(|s| s.l_cls),
            l_adv: mean(|s| s.l_adv),
            l_cls_disc: (!disc.is_empty()).then(|| disc.iter().sum::<f64>() / disc.len() as f64),
            pass_rate: mean(|s| s.pass_rate),
            lr: sched.lr(step),
            c_steps_skipped: skipped_c,
        };
        let l_seg = rec.l_seg;
        log.epochs.push(rec);
        guard.check("l_seg", epoch, l_seg)?;
    }
    log.seg_hash_after = s.param_hash();
    Ok((g, c, log))
}

/// Gate verdicts of `n` synthetic cases drawn from held-out unlabeled cases.
pub fn evaluate_generator(
    gen: Arc<dyn FieldGenerator>,
    seg: Arc<dyn Segmenter>,
    cases: &[Case],
    n: usize,
    cfg: &SynthStreamConfig,
    seed: u64,
) -> Result<Vec<QualityVerdict>> {
    let stream = synth_case_stream(Arc::new(cases.to_vec()), gen, seg, *cfg, seed)?;
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    for ev in stream {
        match ev? {
            SynthEvent::Sample(s) => out.push(s.verdict),
            SynthEvent::Dropped(v) => out.push(v),
            SynthEvent::Skipped { .. } => {
                misses += 1;
                if misses > 10 * n.max(10) {
                    return Err(Error::InvalidArgument("held-out cases yield no usable masks".into()));
                }
            }
        }
        if out.len() == n {
            break;
        }
    }
    Ok(out)
}

pub fn mean_proportion(verdicts: &[QualityVerdict]) -> f64 {
    verdicts.iter().map(|v| v.proportion_p).sum::<f64>() / verdicts.len().max(1) as f64
}
