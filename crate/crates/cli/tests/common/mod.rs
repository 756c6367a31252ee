#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small enough that the whole pipeline runs in seconds.
pub const TINY: &str = r#"
[data]
labeled_fraction = 0.25
test_fraction = 0.25

[data.phantom]
shape = [24, 24, 24]
organ_radius_mm = [16.0, 20.0]
tumor_diameter_mm = [6.0, 12.0]

[adv]
batch = 2
epochs = 2
steps_per_epoch = 2
patch = [24, 24, 24]
seg_patch = [16, 16, 16]
cls_patch = [8, 8, 8]
gen_width = 2
seg_width = 2
cls_width = 2

[adv.mask]
hi_mm = 12.0

[seg]
batch = 2
epochs = 2
steps_per_epoch = 2
patch = [16, 16, 16]
width = 2

[seg.mask]
hi_mm = 12.0

[infer]
window = [16, 16, 16]
"#;

pub fn freetumor(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_freetumor"))
        .current_dir(dir)
        .args(args)
        .env_remove("FREETUMOR__SEG__EPOCHS")
        .output()
        .expect("binary runs");
    out
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = freetumor(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

/// phantom-gen, stage 1, stage 2, augmented training, inference and
/// eval, all with relative paths under `dir` and the config file `config`
/// (relative to `dir`). Returns the eval report bytes.
pub fn pipeline(dir: &Path, config: &str) -> Vec<u8> {
    let c = ["--config", config];
    let run = |args: &[&str]| ok(dir, &[&c[..], args].concat());
    run(&["phantom-gen", "--count", "8", "--seed", "1", "--out", "data"]);
    run(&["train-stage1", "--data", "data", "--seed", "2", "--out", "s1"]);
    run(&["train-stage2", "--data", "data", "--segmenter", "s1/segmenter.ckpt", "--seed", "3", "--out", "s2"]);
    run(&[
        "train-seg", "--data", "data", "--seed", "4", "--out", "ft",
        "--generator", "s2/generator.ckpt", "--segmenter", "s1/segmenter.ckpt",
    ]);
    run(&["infer", "--model", "ft/model.ckpt", "--data", "data", "--out", "pred"]);
    run(&["eval", "--pred", "pred", "--gt", "data", "--report", "report.json"]);
    std::fs::read(dir.join("report.json")).unwrap()
}

pub const PIPELINE_MANIFESTS: [&str; 6] = [
    "data/manifest.json",
    "s1/manifest.json",
    "s2/manifest.json",
    "ft/manifest.json",
    "pred/manifest.json",
    "report.manifest.json",
];

pub fn tiny_pipeline(dir: &Path) -> Vec<u8> {
    tiny_config(dir);
    pipeline(dir, "tiny.toml")
}
