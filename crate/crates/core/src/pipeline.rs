//! Online synthesis stream, segmentation training and inference.

use std::collections::HashSet;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::dice_ce;
use crate::models::{sliding_window, FieldGenerator, SegModel, Segmenter, WindowParams};
use crate::nn::{AdamW, CosineSchedule, EncDec, Grads, Tensor};
use crate::quality::{gate, validate_threshold, FailPolicy, QualityVerdict, DEFAULT_THRESHOLD};
use crate::synthesis::{synthesize, GeneratorOutput, SynthesisConfig};
use crate::tumor_mask::{sample_tumor_mask, MaskSamplerConfig, SizeSpec};
use crate::volume::{crop_patch_with, Case, CropPolicy, LabelMap, Volume};

/// Labeled cases (with tumor labels) and unlabeled cases (organ labels only).
#[derive(Debug, Clone, Default)]
pub struct DatasetPool {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<Case>,
}

impl DatasetPool {
    pub fn new(labeled: Vec<Case>, unlabeled: Vec<Case>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in labeled.iter().chain(&unlabeled) {
            if !seen.insert(c.id().to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "case id {} appears more than once across the pools",
                    c.id()
                )));
            }
        }
        if let Some(c) = labeled.iter().find(|c| c.tumor.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "labeled case {} has no tumor label",
                c.id()
            )));
        }
        Ok(DatasetPool { labeled, unlabeled })
    }
}

/// Derives an independent 64-bit seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.random()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStreamConfig {
    pub threshold_t: f64,
    pub fail_policy: FailPolicy,
    pub mask: SizeSpec,
    pub mask_sampler: MaskSamplerConfig,
    pub synthesis: SynthesisConfig,
}

impl Default for SynthStreamConfig {
    fn default() -> Self {
        SynthStreamConfig {
            threshold_t: DEFAULT_THRESHOLD,
            fail_policy: FailPolicy::Healthy,
            mask: SizeSpec::default(),
            mask_sampler: MaskSamplerConfig::default(),
            synthesis: SynthesisConfig::default(),
        }
    }
}

/// A gated synthetic (or, on failure, original) training case.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Volume,
    pub organ: LabelMap,
    /// The gating mask when passed, empty when failed.
    pub label: LabelMap,
    pub verdict: QualityVerdict,
}

#[derive(Debug, Clone)]
pub enum SynthEvent {
    Sample(SynthSample),
    /// Failed under [`FailPolicy::Drop`].
    Dropped(QualityVerdict),
    Skipped { case: String, reason: String },
}

/// Endless in-memory stream of synthesized cases drawn from `pool`.
/// Nothing is ever written to disk.
pub struct SynthCaseStream {
    pool: Arc<Vec<Case>>,
    gen: Arc<dyn FieldGenerator>,
    seg: Arc<dyn Segmenter>,
    cfg: SynthStreamConfig,
    rng: ChaCha8Rng,
}

pub fn synth_case_stream(
    pool: Arc<Vec<Case>>,
    gen: Arc<dyn FieldGenerator>,
    seg: Arc<dyn Segmenter>,
    cfg: SynthStreamConfig,
    seed: u64,
) -> Result<SynthCaseStream> {
    validate_threshold(cfg.threshold_t)?;
    cfg.mask.validate()?;
    cfg.synthesis.filter.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("unlabeled pool is empty".into()));
    }
    Ok(SynthCaseStream {
        pool,
        gen,
        seg,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl SynthCaseStream {
    fn draw(&mut self) -> Result<SynthEvent> {
        let idx = self.rng.random_range(0..self.pool.len());
        let mask_seed: u64 = self.rng.random();
        let case = &self.pool[idx];
        let skip = |reason: String| SynthEvent::Skipped {
            case: case.id().to_string(),
            reason,
        };
        if case.organ.data.count_nonzero() == 0 {
            return Ok(skip("empty organ label".into()));
        }
        let mask = match sample_tumor_mask(&case.organ, &self.cfg.mask, mask_seed, &self.cfg.mask_sampler) {
            Ok(m) => m.data,
            Err(e @ Error::OrganTooSmall { .. }) => return Ok(skip(e.to_string())),
            Err(e) => return Err(e),
        };
        let x = &case.image;
        let gout = GeneratorOutput::new(self.gen.raw_field(&x.data));
        let x_hat = synthesize(x, &mask, &gout, &self.cfg.synthesis)?;
        let probs = self.seg.probs(&x_hat.data);
        let out = gate(x, &x_hat, &mask, &probs, self.cfg.threshold_t)?;
        if !out.verdict.passed && self.cfg.fail_policy == FailPolicy::Drop {
            return Ok(SynthEvent::Dropped(out.verdict));
        }
        Ok(SynthEvent::Sample(SynthSample {
            image: out.image,
            organ: case.organ.clone(),
            label: out.label,
            verdict: out.verdict,
        }))
    }
}

impl Iterator for SynthCaseStream {
    type Item = Result<SynthEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.draw())
    }
}

/// Runs `iter` on a producer thread feeding a bounded queue of `capacity`.
/// Item order is unchanged, so seeded streams stay reproducible.
pub fn prefetch<I>(iter: I, capacity: usize) -> Prefetch<I::Item>
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = sync_channel(capacity.max(1));
    let handle = thread::spawn(move || {
        for item in iter {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    Prefetch {
        rx: Some(rx),
        handle: Some(handle),
    }
}

pub struct Prefetch<T> {
    rx: Option<Receiver<T>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl<T> Iterator for Prefetch<T> {
    type Item = T;
    fn next(&mut self) -> Option<T> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        // Closing the receiver makes the producer's next send fail.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    /// Labeled : synthetic samples per batch.
    pub mix: [u32; 2],
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub patch: [usize; 3],
    pub width: usize,
    pub seed: u64,
    /// Share of labeled crops centered on a tumor voxel (rest organ-centered).
    pub tumor_crop_fraction: f64,
    pub threshold_t: f64,
    pub fail_policy: FailPolicy,
    pub mask: SizeSpec,
    pub mask_sampler: MaskSamplerConfig,
    pub synthesis: SynthesisConfig,
    /// Queue depth of the synthesis producer thread; 0 runs it inline.
    pub prefetch: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            mix: [1, 1],
            lr: 3e-4,
            weight_decay: 1e-5,
            batch: 4,
            epochs: 100,
            steps_per_epoch: 10,
            patch: [32; 3],
            width: 8,
            seed: 0,
            tumor_crop_fraction: 0.5,
            threshold_t: DEFAULT_THRESHOLD,
            fail_policy: FailPolicy::Healthy,
            mask: SizeSpec::default(),
            mask_sampler: MaskSamplerConfig::default(),
            synthesis: SynthesisConfig::default(),
            prefetch: 2,
            divergence_factor: 2.0,
            divergence_patience: 5,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.mix == [0, 0] {
            return bad("mix ratio must not be 0:0".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad(format!("lr must be > 0 and weight_decay >= 0, got {} / {}", self.lr, self.weight_decay));
        }
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == 0 || self.width == 0 {
            return bad("batch, epochs, steps_per_epoch and width must be >= 1".into());
        }
        if self.patch.iter().any(|&p| p == 0 || p % EncDec::DIVISOR != 0) {
            return bad(format!("patch {:?} must be positive multiples of {}", self.patch, EncDec::DIVISOR));
        }
        if !(0.0..=1.0).contains(&self.tumor_crop_fraction) {
            return bad("tumor_crop_fraction must be in [0, 1]".into());
        }
        validate_threshold(self.threshold_t)?;
        self.mask.validate()
    }

    pub fn stream_config(&self) -> SynthStreamConfig {
        SynthStreamConfig {
            threshold_t: self.threshold_t,
            fail_policy: self.fail_policy,
            mask: self.mask,
            mask_sampler: self.mask_sampler,
            synthesis: self.synthesis,
        }
    }

    /// `(labeled, synthetic)` samples per batch.
    pub fn split(&self, synthetic_available: bool) -> (usize, usize) {
        let [a, b] = self.mix;
        if !synthetic_available || b == 0 {
            return (self.batch, 0);
        }
        if a == 0 {
            return (0, self.batch);
        }
        let syn = ((self.batch as f64 * b as f64 / (a + b) as f64).round() as usize).clamp(1, self.batch - 1);
        (self.batch - syn, syn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub synthetic_samples: usize,
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegTrainLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<SegEpochRecord>,
    pub verdicts: Vec<QualityVerdict>,
    pub skipped: Vec<(String, String)>,
}

pub struct Synthesis {
    pub gen: Arc<dyn FieldGenerator>,
    pub seg: Arc<dyn Segmenter>,
}

/// Tracks epoch losses against the first epoch.
#[derive(Debug, Clone)]
pub(crate) struct DivergenceGuard {
    factor: f64,
    patience: usize,
    first: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    pub(crate) fn new(factor: f64, patience: usize) -> Self {
        DivergenceGuard {
            factor,
            patience,
            first: None,
            run: 0,
        }
    }

    pub(crate) fn check(&mut self, what: &str, epoch: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Diverged(format!("{what} is {value} at epoch {epoch}")));
        }
        let first = *self.first.get_or_insert(value);
        if value > self.factor * first {
            self.run += 1;
            if self.run >= self.patience {
                return Err(Error::Diverged(format!(
                    "{what} {value:.4} exceeded {}x its initial {first:.4} for {} consecutive epochs (epoch {epoch})",
                    self.factor, self.run
                )));
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

/// Mean and standard deviation of intensities inside the organ masks,
/// used as the fixed input standardization of the networks.
pub fn foreground_stats(cases: &[Case]) -> [f32; 2] {
    let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
    for c in cases {
        for (&v, &m) in c.image.data.as_slice().iter().zip(c.organ.data.as_slice()) {
            if m != 0 {
                n += 1;
                s += v as f64;
                s2 += v as f64 * v as f64;
            }
        }
    }
    if n < 2 {
        return [0.0, 1.0];
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt();
    [mean as f32, if std > 1e-6 { std as f32 } else { 1.0 }]
}

/// Small output init keeps initial logits near the bias.
const SEG_OUT_SCALE: f32 = 0.05;

fn new_seg_model(cfg: &SegTrainConfig, input_norm: [f32; 2]) -> SegModel {
    // Negative output bias: tumors are rare, start near "background".
    EncDec::new(cfg.width, derive_seed(cfg.seed, 0), SEG_OUT_SCALE, -2.0).with_input_norm(input_norm[0], input_norm[1])
}

/// Dice-CE over a whole batch: soft Dice on the pooled voxels (so crops
/// without tumor do not dominate) plus mean voxel BCE. Accumulates the
/// batch-mean gradient into `grads`.
fn seg_batch_step(model: &SegModel, batch: &[(Grid<f32>, Grid<u8>)], grads: &mut Grads) -> f64 {
    let runs: Vec<_> = batch.iter().map(|(x, _)| model.forward(&Tensor::from_grid(x))).collect();
    let logits: Vec<f32> = runs.iter().flat_map(|(y, _)| y.data.iter().copied()).collect();
    let target: Vec<u8> = batch.iter().flat_map(|(_, t)| t.as_slice().iter().copied()).collect();
    let (loss, g) = dice_ce(&logits, &target);
    let mut off = 0;
    for (y, cache) in &runs {
        let n = y.data.len();
        let gy = Tensor {
            channels: 1,
            shape: y.shape,
            data: g[off..off + n].to_vec(),
        };
        model.backward(cache, &gy, Some(grads), false);
        off += n;
    }
    loss
}

fn tumor_or_empty(c: &Case) -> Grid<u8> {
    match &c.tumor {
        Some(t) => t.data.clone(),
        None => Grid::filled(c.image.shape(), 0),
    }
}

/// Trains a segmentation model on labeled crops, mixed with online
/// synthetic cases when `synthesis` is given and the unlabeled pool is
/// non-empty. With mix `[1, 0]` or no synthesis this is plain supervised
/// training and bit-identical for a given seed.
pub fn train_segmentation(
    pool: &DatasetPool,
    synthesis: Option<&Synthesis>,
    cfg: &SegTrainConfig,
) -> Result<(SegModel, SegTrainLog)> {
    cfg.validate()?;
    let use_synth = synthesis.is_some() && !pool.unlabeled.is_empty() && cfg.mix[1] > 0;
    let (n_lab, n_syn) = cfg.split(use_synth);
    if n_lab > 0 && pool.labeled.is_empty() {
        return Err(Error::InvalidArgument("labeled pool is empty".into()));
    }
    if n_lab > 0 && !pool.labeled.iter().any(Case::has_tumor) {
        return Err(Error::NoTumorVoxels);
    }

    let stats_from = if pool.labeled.is_empty() { &pool.unlabeled } else { &pool.labeled };
    let mut model = new_seg_model(cfg, foreground_stats(stats_from));
    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let total = cfg.epochs * cfg.steps_per_epoch;
    let sched = CosineSchedule { base: cfg.lr, total };
    let mut rng_lab = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut rng_syn = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));

    let mut stream: Option<Box<dyn Iterator<Item = Result<SynthEvent>>>> = match (use_synth, synthesis) {
        (true, Some(s)) => {
            let st = synth_case_stream(
                Arc::new(pool.unlabeled.clone()),
                s.gen.clone(),
                s.seg.clone(),
                cfg.stream_config(),
                derive_seed(cfg.seed, 3),
            )?;
            Some(if cfg.prefetch > 0 {
                Box::new(prefetch(st, cfg.prefetch))
            } else {
                Box::new(st)
            })
        }
        _ => None,
    };

    let mut log = SegTrainLog::default();
    let mut guard = DivergenceGuard::new(cfg.divergence_factor, cfg.divergence_patience);
    let mut grads = Grads::zeros_like(&model);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_syn = 0usize;
        let verdicts_before = log.verdicts.len();
        for _ in 0..cfg.steps_per_epoch {
            grads.zero();
            let mut batch = Vec::with_capacity(n_lab + n_syn);
            for _ in 0..n_lab {
                let case = &pool.labeled[rng_lab.random_range(0..pool.labeled.len())];
                let policy = if rng_lab.random_bool(cfg.tumor_crop_fraction) {
                    CropPolicy::TumorCentered
                } else {
                    CropPolicy::OrganCentered
                };
                let (crop, _) = crop_patch_with(case, cfg.patch, policy, &mut rng_lab)?;
                let t = tumor_or_empty(&crop);
                batch.push((crop.image.data, t));
            }
            if let Some(st) = stream.as_mut() {
                for _ in 0..n_syn {
                    let sample = next_sample(st.as_mut(), &mut log)?;
                    let case = Case {
                        image: sample.image,
                        organ: sample.organ,
                        tumor: Some(sample.label),
                    };
                    let (crop, _) = crop_patch_with(&case, cfg.patch, CropPolicy::TumorCentered, &mut rng_syn)?;
                    let t = tumor_or_empty(&crop);
                    batch.push((crop.image.data, t));
                    epoch_syn += 1;
                }
            }
            let loss = seg_batch_step(&model, &batch, &mut grads);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at step {step}")));
            }
            opt.step(&mut model, &grads, sched.lr(step));
            log.step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / cfg.steps_per_epoch as f64;
        let epoch_verdicts = &log.verdicts[verdicts_before..];
        log.epochs.push(SegEpochRecord {
            epoch,
            loss: mean,
            lr: sched.lr(step),
            synthetic_samples: epoch_syn,
            pass_rate: crate::quality::pass_rate(epoch_verdicts),
        });
        guard.check("segmentation loss", epoch, mean)?;
    }
    Ok((model, log))
}

const MAX_CONSECUTIVE_MISSES: usize = 1000;

fn next_sample(st: &mut dyn Iterator<Item = Result<SynthEvent>>, log: &mut SegTrainLog) -> Result<SynthSample> {
    for _ in 0..MAX_CONSECUTIVE_MISSES {
        match st.next() {
            Some(Ok(SynthEvent::Sample(s))) => {
                log.verdicts.push(s.verdict.clone());
                return Ok(s);
            }
            Some(Ok(SynthEvent::Dropped(v))) => log.verdicts.push(v),
            Some(Ok(SynthEvent::Skipped { case, reason })) => log.skipped.push((case, reason)),
            Some(Err(e)) => return Err(e),
            None => break,
        }
    }
    Err(Error::InvalidArgument(format!(
        "synthesis stream produced no usable case in {MAX_CONSECUTIVE_MISSES} draws"
    )))
}

/// Sliding-window tumor probabilities and the 0.5-binarized label map.
pub fn infer(model: &dyn Segmenter, volume: &Volume, params: &WindowParams) -> Result<(LabelMap, Volume)> {
    let probs = sliding_window(&volume.data, params, |p| model.probs(p))?;
    let labels = probs.map(|p| u8::from(p >= crate::quality::BIN_THRESHOLD));
    Ok((
        LabelMap::binary(volume.id.clone(), labels, volume.spacing)?,
        Volume::new(volume.id.clone(), probs, volume.spacing)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::volume::HuWindow;

    pub(crate) fn phantom_case(id: &str, seed: u64, labeled: bool, tumors: (usize, usize)) -> Case {
        let cfg = PhantomConfig {
            shape: [32; 3],
            spacing_mm: [2.0; 3],
            organ_radius_mm: (20.0, 26.0),
            tumor_count: tumors,
            seed,
            ..PhantomConfig::default()
        };
        generate_phantom(id, &cfg).unwrap().to_case(HuWindow::ABDOMEN, labeled).unwrap()
    }

    /// Segments anything darker than a fixed level.
    struct DarkOracle(f32);
    impl Segmenter for DarkOracle {
        fn probs(&self, x: &Grid<f32>) -> Grid<f32> {
            x.map(|v| if v < self.0 { 1.0 } else { 0.0 })
        }
    }
    struct ConstField(f32);
    impl FieldGenerator for ConstField {
        fn raw_field(&self, x: &Grid<f32>) -> Grid<f32> {
            Grid::filled(x.shape(), self.0)
        }
    }

    fn stream(field: f32, seed: u64) -> SynthCaseStream {
        let pool: Vec<Case> = (0..3).map(|i| phantom_case(&format!("u{i}"), 100 + i, false, (0, 0))).collect();
        let cfg = SynthStreamConfig {
            mask: SizeSpec::new(6.0, 14.0).unwrap(),
            ..Default::default()
        };
        synth_case_stream(Arc::new(pool), Arc::new(ConstField(field)), Arc::new(DarkOracle(0.2)), cfg, seed).unwrap()
    }

    fn samples(s: SynthCaseStream, n: usize) -> Vec<SynthSample> {
        s.take(n)
            .map(|e| match e.unwrap() {
                SynthEvent::Sample(s) => s,
                other => panic!("unexpected {other:?}"),
            })
            .collect()
    }

    #[test]
    fn oracle_generator_always_passes() {
        // tanh(20) ~ 1 removes the blurred intensity; the oracle sees it as tumor.
        for s in samples(stream(20.0, 1), 6) {
            assert!(s.verdict.passed);
            assert_eq!(s.verdict.proportion_p, 1.0);
            assert!(s.label.data.count_nonzero() > 0);
        }
    }

    #[test]
    fn zero_field_always_fails_with_empty_label() {
        for s in samples(stream(0.0, 2), 4) {
            assert!(!s.verdict.passed);
            assert_eq!(s.label.data.count_nonzero(), 0);
        }
    }

    #[test]
    fn stream_is_reproducible() {
        let a = samples(stream(20.0, 5), 4);
        let b = samples(stream(20.0, 5), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.verdict, y.verdict);
            assert_eq!(x.label, y.label);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn prefetch_preserves_order() {
        let direct: Vec<_> = samples(stream(20.0, 9), 5).into_iter().map(|s| s.label).collect();
        let fetched: Vec<_> = prefetch(stream(20.0, 9), 2)
            .take(5)
            .map(|e| match e.unwrap() {
                SynthEvent::Sample(s) => s.label,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(direct, fetched);
    }

    #[test]
    fn empty_organ_is_skipped() {
        let mut c = phantom_case("e", 1, false, (0, 0));
        c.organ = LabelMap::empty_like(&c.image);
        let mut s = synth_case_stream(
            Arc::new(vec![c]),
            Arc::new(ConstField(1.0)),
            Arc::new(DarkOracle(0.2)),
            SynthStreamConfig::default(),
            0,
        )
        .unwrap();
        assert!(matches!(s.next(), Some(Ok(SynthEvent::Skipped { .. }))));
    }

    #[test]
    fn drop_policy_emits_dropped() {
        let pool = vec![phantom_case("u", 3, false, (0, 0))];
        let cfg = SynthStreamConfig {
            fail_policy: FailPolicy::Drop,
            mask: SizeSpec::new(6.0, 14.0).unwrap(),
            ..Default::default()
        };
        let mut s = synth_case_stream(Arc::new(pool), Arc::new(ConstField(0.0)), Arc::new(DarkOracle(0.2)), cfg, 0).unwrap();
        assert!(matches!(s.next(), Some(Ok(SynthEvent::Dropped(v))) if !v.passed));
    }

    #[test]
    fn pool_rejects_duplicate_ids() {
        let a = phantom_case("a", 1, true, (1, 1));
        let b = phantom_case("a", 2, false, (0, 0));
        assert!(DatasetPool::new(vec![a], vec![b]).is_err());
    }

    fn tiny_cfg() -> SegTrainConfig {
        SegTrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            batch: 2,
            patch: [16; 3],
            width: 2,
            seed: 4,
            prefetch: 0,
            mask: SizeSpec::new(6.0, 14.0).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn mix_without_synthetic_equals_baseline() {
        let labeled: Vec<Case> = (0..2).map(|i| phantom_case(&format!("l{i}"), i, true, (1, 2))).collect();
        let unlabeled = vec![phantom_case("u0", 50, false, (0, 0))];
        let pool = DatasetPool::new(labeled.clone(), unlabeled).unwrap();
        let synth = Synthesis {
            gen: Arc::new(ConstField(1.0)),
            seg: Arc::new(DarkOracle(0.2)),
        };
        let cfg = SegTrainConfig { mix: [1, 0], ..tiny_cfg() };
        let (m1, l1) = train_segmentation(&pool, Some(&synth), &cfg).unwrap();
        let baseline_pool = DatasetPool::new(labeled, vec![]).unwrap();
        let (m2, l2) = train_segmentation(&baseline_pool, None, &tiny_cfg()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1.step_losses, l2.step_losses);
        assert!(l1.step_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn mixed_training_records_verdicts() {
        let labeled = vec![phantom_case("l0", 0, true, (1, 2))];
        let unlabeled = vec![phantom_case("u0", 50, false, (0, 0))];
        let pool = DatasetPool::new(labeled, unlabeled).unwrap();
        let synth = Synthesis {
            gen: Arc::new(ConstField(20.0)),
            seg: Arc::new(DarkOracle(0.2)),
        };
        let cfg = SegTrainConfig { prefetch: 1, ..tiny_cfg() };
        let (_, log) = train_segmentation(&pool, Some(&synth), &cfg).unwrap();
        assert_eq!(log.verdicts.len(), 4);
        assert!(log.epochs.iter().all(|e| e.synthetic_samples == 2 && e.pass_rate == Some(1.0)));
    }

    #[test]
    fn training_requires_tumor_voxels() {
        let healthy = phantom_case("l0", 0, true, (0, 0));
        let pool = DatasetPool::new(vec![healthy], vec![]).unwrap();
        assert!(matches!(train_segmentation(&pool, None, &tiny_cfg()), Err(Error::NoTumorVoxels)));
    }

    #[test]
    fn divergence_guard_trips_after_patience() {
        let mut g = DivergenceGuard::new(2.0, 3);
        g.check("l", 0, 1.0).unwrap();
        g.check("l", 1, 2.5).unwrap();
        g.check("l", 2, 2.5).unwrap();
        g.check("l", 3, 1.0).unwrap();
        g.check("l", 4, 2.5).unwrap();
        g.check("l", 5, 2.5).unwrap();
        assert!(matches!(g.check("l", 6, 2.5), Err(Error::Diverged(_))));
        assert!(DivergenceGuard::new(2.0, 3).check("l", 0, f64::NAN).is_err());
    }

    #[test]
    fn zero_output_network_predicts_nothing() {
        struct Zero;
        impl Segmenter for Zero {
            fn probs(&self, x: &Grid<f32>) -> Grid<f32> {
                Grid::filled(x.shape(), 0.0)
            }
        }
        let c = phantom_case("z", 1, true, (1, 1));
        let (labels, probs) = infer(&Zero, &c.image, &WindowParams { window: [16; 3], overlap: 0.5 }).unwrap();
        assert_eq!(labels.data.count_nonzero(), 0);
        assert!(probs.data.as_slice().iter().all(|&p| p == 0.0));
    }
}
