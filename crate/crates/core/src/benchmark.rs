//! Phantom benchmark: labeled / unlabeled / held-out sets and the
//! baseline-versus-augmented comparison.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adversarial::{evaluate_generator, mean_proportion, train_stage1, train_stage2, AdvConfig, Stage2Log};
use crate::error::Result;
use crate::metrics::{evaluate, MetricsReport};
use crate::models::{SegModel, WindowParams};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::pipeline::{derive_seed, infer, train_segmentation, DatasetPool, SegTrainConfig, SegTrainLog, Synthesis};
use crate::volume::{Case, HuWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub phantom: PhantomConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub window: HuWindow,
    pub adv: AdvConfig,
    pub seg: SegTrainConfig,
    pub infer: WindowParams,
}

/// Desk-scale schedule: 30 epochs of 10 steps, a faster segmentation
/// rate than the full-scale default, and a faster classifier.
pub const DESK_EPOCHS: usize = 30;
pub const DESK_SEG_LR: f64 = 3e-3;
pub const DESK_CLS_LR: f64 = 3e-3;

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            phantom: PhantomConfig::default(),
            n_labeled: 20,
            n_unlabeled: 200,
            n_test: 30,
            window: HuWindow::ABDOMEN,
            adv: AdvConfig {
                epochs: DESK_EPOCHS,
                lr_segmentation: DESK_SEG_LR,
                lr_classifier: DESK_CLS_LR,
                ..AdvConfig::default()
            },
            // Four labeled plus four synthetic crops per step, so the
            // augmented run sees as many labeled crops as the baseline.
            seg: SegTrainConfig {
                epochs: DESK_EPOCHS,
                lr: DESK_SEG_LR,
                batch: 8,
                ..SegTrainConfig::default()
            },
            infer: WindowParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
    /// Tumor-free cases disjoint from the unlabeled training pool.
    HeldOut,
}

impl Split {
    fn tag(self) -> (&'static str, u64) {
        match self {
            Split::Labeled => ("lab", 1),
            Split::Unlabeled => ("unl", 2),
            Split::Test => ("test", 3),
            Split::HeldOut => ("held", 4),
        }
    }
}

/// Phantom `i` of a split. Unlabeled phantoms are generated tumor-free.
pub fn phantom_case(cfg: &BenchmarkConfig, split: Split, i: usize, seed: u64) -> Result<Case> {
    let (tag, stream) = split.tag();
    let mut pc = cfg.phantom.clone();
    pc.seed = derive_seed(derive_seed(seed, stream), i as u64);
    if matches!(split, Split::Unlabeled | Split::HeldOut) {
        pc.tumor_count = (0, 0);
    }
    let p = generate_phantom(&format!("{tag}-{i:04}"), &pc)?;
    p.to_case(cfg.window, !matches!(split, Split::Unlabeled | Split::HeldOut))
}

pub fn phantom_split(cfg: &BenchmarkConfig, split: Split, n: usize, seed: u64) -> Result<Vec<Case>> {
    (0..n).map(|i| phantom_case(cfg, split, i, seed)).collect()
}

pub fn evaluate_model(model: &SegModel, test: &[Case], params: &WindowParams) -> Result<MetricsReport> {
    let preds: Vec<_> = test
        .iter()
        .map(|c| infer(model, &c.image, params).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = test.iter().map(|c| c.tumor.clone().expect("test cases are labeled")).collect();
    let pairs: Vec<_> = preds.iter().zip(&gts).collect();
    evaluate(&pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndToEndResult {
    pub seed: u64,
    pub baseline: MetricsReport,
    pub freetumor: MetricsReport,
    pub stage2_final_pass_rate: f64,
    pub baseline_log: SegTrainLog,
    pub freetumor_log: SegTrainLog,
    pub stage2_log: Stage2Log,
}

/// Baseline = Stage-1 segmenter on the labeled set; augmented = the same
/// trainer fed gated online synthesis from the unlabeled set.
pub fn run_end_to_end(cfg: &BenchmarkConfig, seed: u64) -> Result<EndToEndResult> {
    let labeled = phantom_split(cfg, Split::Labeled, cfg.n_labeled, seed)?;
    let unlabeled = phantom_split(cfg, Split::Unlabeled, cfg.n_unlabeled, seed)?;
    let test = phantom_split(cfg, Split::Test, cfg.n_test, seed)?;
    let adv = AdvConfig { seed, ..cfg.adv };
    let (s, baseline_log) = train_stage1(&labeled, &adv)?;
    let (g, _, stage2_log) = train_stage2(adv.new_generator(s.input_norm), &s, adv.new_classifier(s.input_norm), &labeled, &unlabeled, &adv)?;
    let baseline = evaluate_model(&s, &test, &cfg.infer)?;
    let pool = DatasetPool::new(labeled, unlabeled)?;
    let synth = Synthesis {
        gen: Arc::new(g),
        seg: Arc::new(s),
    };
    let seg_cfg = SegTrainConfig { seed, ..cfg.seg };
    let (model, freetumor_log) = train_segmentation(&pool, Some(&synth), &seg_cfg)?;
    let freetumor = evaluate_model(&model, &test, &cfg.infer)?;
    Ok(EndToEndResult {
        seed,
        baseline,
        freetumor,
        stage2_final_pass_rate: stage2_log.epochs.last().map_or(0.0, |e| e.pass_rate),
        baseline_log,
        freetumor_log,
        stage2_log,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Efficacy {
    pub seed: u64,
    pub trained_mean_p: f64,
    pub random_mean_p: f64,
    pub stage2_log: Stage2Log,
}

/// Mean gate proportion of a trained versus an untrained generator on
/// held-out unlabeled phantoms.
pub fn run_stage2_efficacy(cfg: &BenchmarkConfig, n_eval: usize, seed: u64) -> Result<Stage2Efficacy> {
    let labeled = phantom_split(cfg, Split::Labeled, cfg.n_labeled, seed)?;
    let unlabeled = phantom_split(cfg, Split::Unlabeled, cfg.n_unlabeled, seed)?;
    let held_out = phantom_split(cfg, Split::HeldOut, cfg.n_test, seed)?;
    let adv = AdvConfig { seed, ..cfg.adv };
    let (s, _) = train_stage1(&labeled, &adv)?;
    let random_g = adv.new_generator(s.input_norm);
    let (g, _, stage2_log) = train_stage2(random_g.clone(), &s, adv.new_classifier(s.input_norm), &labeled, &unlabeled, &adv)?;
    let s = Arc::new(s);
    let stream_cfg = adv.stream_config();
    let eval_seed = derive_seed(seed, 20);
    let trained = evaluate_generator(Arc::new(g), s.clone(), &held_out, n_eval, &stream_cfg, eval_seed)?;
    let random = evaluate_generator(Arc::new(random_g), s, &held_out, n_eval, &stream_cfg, eval_seed)?;
    Ok(Stage2Efficacy {
        seed,
        trained_mean_p: mean_proportion(&trained),
        random_mean_p: mean_proportion(&random),
        stage2_log,
    })
}
