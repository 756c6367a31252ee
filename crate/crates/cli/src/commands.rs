use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};

use freetumor_core::adversarial::{train_stage1, train_stage2, AdvConfig};
use freetumor_core::benchmark::{phantom_case, BenchmarkConfig, Split};
use freetumor_core::components::{split_components, Connectivity};
use freetumor_core::io::{case_stems, load_case, load_labels, load_volume, save_case, save_labels};
use freetumor_core::metrics::evaluate;
use freetumor_core::nn::{load_encdec, save_checkpoint};
use freetumor_core::pipeline::{infer, synth_case_stream, train_segmentation, DatasetPool, SegTrainConfig, SynthEvent, SynthSample, Synthesis};
use freetumor_core::quality::{write_verdict_log, FailPolicy, QualityVerdict};
use freetumor_core::volume::Case;
use freetumor_turing::api::{serve, system_clock, AppState};
use freetumor_turing::cases::{build_case_set, save_case_set, CaseSet, PoolCase};
use freetumor_turing::report::{full_report, to_csv};
use freetumor_turing::store::SessionStore;
use freetumor_turing::Truth;

use crate::cli::{Command, ReportFormat, SplitArg};
use crate::config::Resolved;
use crate::manifest::{DataSplit, RunManifest, MANIFEST_FILE};
use crate::CliError;

pub fn run(cmd: Command, r: &Resolved) -> Result<(), CliError> {
    match cmd {
        Command::PhantomGen { count, seed, out } => phantom_gen(r, count, seed, &out),
        Command::TrainStage1 { data, seed, out } => stage1(r, &data, seed, &out).map_err(CliError::Runtime),
        Command::TrainStage2 { data, segmenter, seed, out } => stage2(r, &data, &segmenter, seed, &out).map_err(CliError::Runtime),
        Command::Synthesize {
            data,
            generator,
            segmenter,
            count,
            seed,
            out,
        } => synthesize(r, &data, &generator, &segmenter, count, seed, &out),
        Command::TrainSeg {
            data,
            seed,
            out,
            generator,
            segmenter,
        } => train_seg(r, &data, seed, &out, generator.zip(segmenter)).map_err(CliError::Runtime),
        Command::Infer { model, data, split, out } => run_infer(r, &model, &data, split, &out).map_err(CliError::Runtime),
        Command::Eval { pred, gt, report } => eval(r, &pred, &gt, &report).map_err(CliError::Runtime),
        Command::TuringBuild {
            data,
            generator,
            segmenter,
            seed,
            out,
        } => turing_build(r, &data, &generator, &segmenter, seed, &out).map_err(CliError::Runtime),
        Command::TuringServe { port, cases, sessions } => turing_serve(r, port, &cases, sessions),
        Command::TuringReport {
            out,
            cases,
            sessions,
            file,
        } => turing_report(&cases, sessions, out, file.as_deref()).map_err(CliError::Runtime),
        Command::Config => {
            let text = serde_json::to_string_pretty(&serde_json::json!({ "config_hash": r.hash, "config": r.value }))
                .map_err(|e| CliError::Runtime(e.into()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn pair_files(stem: &Path, root: &Path) -> [String; 2] {
    let rel = stem.strip_prefix(root).unwrap_or(stem).display().to_string();
    [format!("{rel}.json"), format!("{rel}.raw")]
}

fn case_files(dir: &Path, case: &Case) -> Vec<String> {
    let [image, organ, tumor] = case_stems(dir, case.id());
    let mut out: Vec<String> = [image, organ].iter().flat_map(|s| pair_files(s, dir)).collect();
    if case.tumor.is_some() {
        out.extend(pair_files(&tumor, dir));
    }
    out
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bench_config(r: &Resolved) -> BenchmarkConfig {
    BenchmarkConfig {
        phantom: r.config.data.phantom.clone(),
        window: r.config.data.window,
        ..BenchmarkConfig::default()
    }
}

/// Split sizes for `count` cases: labeled and test by fraction, the rest unlabeled.
pub fn split_sizes(count: usize, labeled_fraction: f64, test_fraction: f64) -> Option<[usize; 3]> {
    let lab = ((count as f64 * labeled_fraction).round() as usize).max(1);
    let test = (count as f64 * test_fraction).round() as usize;
    let unl = count.checked_sub(lab + test).filter(|&u| u > 0)?;
    Some([lab, unl, test])
}

fn phantom_gen(r: &Resolved, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let d = &r.config.data;
    let [n_lab, n_unl, n_test] = split_sizes(count, d.labeled_fraction, d.test_fraction).ok_or_else(|| {
        CliError::Usage(format!("--count {count} leaves no unlabeled cases at the configured fractions"))
    })?;
    let go = || -> Result<()> {
        create_dir(out)?;
        let bench = bench_config(r);
        let mut m = RunManifest::new("phantom-gen", &r.hash, &r.value).seed("seed", seed);
        let mut split = DataSplit {
            labeled: vec![],
            unlabeled: vec![],
            test: vec![],
        };
        for (which, n) in [(Split::Labeled, n_lab), (Split::Unlabeled, n_unl), (Split::Test, n_test)] {
            for i in 0..n {
                let case = phantom_case(&bench, which, i, seed)?;
                save_case(out, &case)?;
                m.outputs.extend(case_files(out, &case));
                let ids = match which {
                    Split::Labeled => &mut split.labeled,
                    Split::Unlabeled => &mut split.unlabeled,
                    _ => &mut split.test,
                };
                ids.push(case.id().to_string());
            }
        }
        eprintln!("wrote {n_lab} labeled, {n_unl} unlabeled and {n_test} test phantoms to {}", out.display());
        m.split = Some(split);
        m.write(&out.join(MANIFEST_FILE))
    };
    go().map_err(CliError::Runtime)
}

fn data_split(data: &Path) -> Result<DataSplit> {
    RunManifest::read(&data.join(MANIFEST_FILE))?
        .split
        .ok_or_else(|| anyhow!("{} has no data split; generate it with phantom-gen", data.display()))
}

fn load_cases(data: &Path, ids: &[String], labeled: bool) -> Result<Vec<Case>> {
    ids.iter()
        .map(|id| load_case(data, id, labeled).with_context(|| format!("loading case {id}")))
        .collect()
}

fn stage1(r: &Resolved, data: &Path, seed: u64, out: &Path) -> Result<()> {
    let split = data_split(data)?;
    let labeled = load_cases(data, &split.labeled, true)?;
    create_dir(out)?;
    let adv = AdvConfig { seed, ..r.config.adv };
    let (s, log) = train_stage1(&labeled, &adv)?;
    save_checkpoint(&out.join("segmenter.ckpt"), &s, &r.hash)?;
    write_json(&out.join("stage1_log.json"), &log)?;
    let mut m = RunManifest::new("train-stage1", &r.hash, &r.value).seed("seed", seed).input("data", data);
    m.outputs = vec!["segmenter.ckpt".into(), "stage1_log.json".into()];
    m.write(&out.join(MANIFEST_FILE))
}

fn stage2(r: &Resolved, data: &Path, segmenter: &Path, seed: u64, out: &Path) -> Result<()> {
    let split = data_split(data)?;
    let labeled = load_cases(data, &split.labeled, true)?;
    let unlabeled = load_cases(data, &split.unlabeled, false)?;
    let (s, _) = load_encdec(segmenter)?;
    create_dir(out)?;
    let adv = AdvConfig { seed, ..r.config.adv };
    let (g, c, log) = train_stage2(adv.new_generator(s.input_norm), &s, adv.new_classifier(s.input_norm), &labeled, &unlabeled, &adv)?;
    save_checkpoint(&out.join("generator.ckpt"), &g, &r.hash)?;
    save_checkpoint(&out.join("classifier.ckpt"), &c, &r.hash)?;
    write_json(&out.join("stage2_log.json"), &log)?;
    if let Some(e) = log.epochs.last() {
        eprintln!("stage 2 final epoch: l_seg {:.4}, pass rate {:.3}", e.l_seg, e.pass_rate);
    }
    let mut m = RunManifest::new("train-stage2", &r.hash, &r.value)
        .seed("seed", seed)
        .input("data", data)
        .input("segmenter", segmenter);
    m.outputs = vec!["generator.ckpt".into(), "classifier.ckpt".into(), "stage2_log.json".into()];
    m.write(&out.join(MANIFEST_FILE))
}

/// Draws until `want` cases pass the gate or `max_draws` is exhausted.
fn gated_samples(
    r: &Resolved,
    pool: Vec<Case>,
    generator: &Path,
    segmenter: &Path,
    want: usize,
    seed: u64,
) -> Result<(Vec<SynthSample>, Vec<QualityVerdict>)> {
    let (g, _) = load_encdec(generator)?;
    let (s, _) = load_encdec(segmenter)?;
    let cfg = freetumor_core::pipeline::SynthStreamConfig {
        fail_policy: FailPolicy::Drop,
        ..r.config.adv.stream_config()
    };
    let stream = synth_case_stream(Arc::new(pool), Arc::new(g), Arc::new(s), cfg, seed)?;
    let max_draws = 20 * want.max(1);
    let (mut kept, mut verdicts) = (Vec::new(), Vec::new());
    for ev in stream.take(max_draws) {
        match ev? {
            SynthEvent::Sample(s) => {
                verdicts.push(s.verdict.clone());
                kept.push(s);
            }
            SynthEvent::Dropped(v) => verdicts.push(v),
            SynthEvent::Skipped { .. } => {}
        }
        if kept.len() == want {
            break;
        }
    }
    Ok((kept, verdicts))
}

fn renamed(s: SynthSample, id: &str) -> Result<Case> {
    let (mut image, mut organ, mut label) = (s.image, s.organ, s.label);
    image.id = id.to_string();
    organ.id = id.to_string();
    label.id = id.to_string();
    Ok(Case::new(image, organ, Some(label))?)
}

fn synthesize(r: &Resolved, data: &Path, generator: &Path, segmenter: &Path, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be >= 1".into()));
    }
    let go = || -> Result<()> {
        let split = data_split(data)?;
        let pool = load_cases(data, &split.unlabeled, false)?;
        let (kept, verdicts) = gated_samples(r, pool, generator, segmenter, count, seed)?;
        if kept.is_empty() {
            bail!("no synthetic case passed the gate in {} draws", verdicts.len());
        }
        create_dir(out)?;
        let mut m = RunManifest::new("synthesize", &r.hash, &r.value)
            .seed("seed", seed)
            .input("data", data)
            .input("generator", generator)
            .input("segmenter", segmenter);
        let n = kept.len();
        for (i, s) in kept.into_iter().enumerate() {
            let case = renamed(s, &format!("syn-{i:04}"))?;
            save_case(out, &case)?;
            m.outputs.extend(case_files(out, &case));
        }
        write_verdict_log(&out.join("verdicts.jsonl"), &verdicts)?;
        m.outputs.push("verdicts.jsonl".into());
        if n < count {
            eprintln!("only {n} of {count} requested cases passed in {} draws", verdicts.len());
        }
        m.write(&out.join(MANIFEST_FILE))
    };
    go().map_err(CliError::Runtime)
}

fn train_seg(r: &Resolved, data: &Path, seed: u64, out: &Path, synth: Option<(PathBuf, PathBuf)>) -> Result<()> {
    let split = data_split(data)?;
    let labeled = load_cases(data, &split.labeled, true)?;
    let mut m = RunManifest::new("train-seg", &r.hash, &r.value).seed("seed", seed).input("data", data);
    let synthesis = match &synth {
        Some((g, s)) => {
            m = m.input("generator", g).input("segmenter", s);
            Some(Synthesis {
                gen: Arc::new(load_encdec(g)?.0),
                seg: Arc::new(load_encdec(s)?.0),
            })
        }
        None => None,
    };
    let unlabeled = if synthesis.is_some() {
        load_cases(data, &split.unlabeled, false)?
    } else {
        Vec::new()
    };
    let pool = DatasetPool::new(labeled, unlabeled)?;
    create_dir(out)?;
    let cfg = SegTrainConfig { seed, ..r.config.seg };
    let (model, log) = train_segmentation(&pool, synthesis.as_ref(), &cfg)?;
    save_checkpoint(&out.join("model.ckpt"), &model, &r.hash)?;
    write_json(&out.join("train_log.json"), &log)?;
    m.outputs = vec!["model.ckpt".into(), "train_log.json".into()];
    m.write(&out.join(MANIFEST_FILE))
}

fn run_infer(r: &Resolved, model: &Path, data: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let s = data_split(data)?;
    let ids: Vec<String> = match split {
        SplitArg::Labeled => s.labeled,
        SplitArg::Unlabeled => s.unlabeled,
        SplitArg::Test => s.test,
        SplitArg::All => [s.labeled, s.unlabeled, s.test].concat(),
    };
    let (net, _) = load_encdec(model)?;
    create_dir(out)?;
    let mut m = RunManifest::new("infer", &r.hash, &r.value).input("model", model).input("data", data);
    for id in &ids {
        let v = load_volume(&case_stems(data, id)[0]).with_context(|| format!("loading case {id}"))?;
        let (labels, _) = infer(&net, &v, &r.config.infer)?;
        let stem = out.join(format!("{id}.tumor"));
        save_labels(&stem, &labels)?;
        m.outputs.extend(pair_files(&stem, out));
    }
    eprintln!("wrote {} predictions to {}", ids.len(), out.display());
    m.write(&out.join(MANIFEST_FILE))
}

/// Ids of every `<id>.tumor.json` in `dir`, sorted.
fn label_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".tumor.json")).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

fn eval(r: &Resolved, pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let ids = label_ids(pred)?;
    if ids.is_empty() {
        bail!("no <id>.tumor predictions in {}", pred.display());
    }
    let mut pairs = Vec::with_capacity(ids.len());
    for id in &ids {
        let p = load_labels(&pred.join(format!("{id}.tumor"))).with_context(|| format!("prediction {id}"))?;
        let g = load_labels(&gt.join(format!("{id}.tumor"))).with_context(|| format!("ground truth {id}"))?;
        pairs.push((p, g));
    }
    let refs: Vec<_> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let metrics = evaluate(&refs)?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(report, &metrics)?;
    eprintln!("{} cases, mean Dice {:.2}", ids.len(), metrics.dice.unwrap_or(f64::NAN));
    let mut m = RunManifest::new("eval", &r.hash, &r.value).input("pred", pred).input("gt", gt);
    m.outputs = vec![report.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()];
    m.write(&report.with_extension("manifest.json"))
}

fn largest_component(mask: &freetumor_core::Grid<u8>) -> Option<freetumor_core::Grid<u8>> {
    split_components(mask, Connectivity::Full26)
        .into_iter()
        .max_by_key(|c| c.count_nonzero())
}

fn turing_build(r: &Resolved, data: &Path, generator: &Path, segmenter: &Path, seed: u64, out: &Path) -> Result<()> {
    let design = &r.config.turing.design;
    let split = data_split(data)?;
    // Phantoms have one organ; tumor types are assigned round-robin so
    // every type draws from the same distribution.
    let ty = |k: usize| design.types[k % design.types.len()];
    let mut real = Vec::new();
    for c in load_cases(data, &[split.labeled.clone(), split.test.clone()].concat(), true)? {
        if let Some(mask) = c.tumor.as_ref().and_then(|t| largest_component(&t.data)) {
            real.push(PoolCase {
                source_id: c.id().to_string(),
                tumor_type: ty(real.len()),
                image: c.image,
                mask,
            });
        }
    }
    let want = design.synthetic_per_type * design.types.len();
    let pool = load_cases(data, &split.unlabeled, false)?;
    let (kept, _) = gated_samples(r, pool, generator, segmenter, want, seed)?;
    let synthetic: Vec<PoolCase> = kept
        .into_iter()
        .enumerate()
        .map(|(k, s)| PoolCase {
            source_id: format!("syn-{k:04}-{}", s.image.id),
            tumor_type: ty(k),
            mask: s.label.data,
            image: s.image,
        })
        .collect();
    let built = build_case_set(&real, &synthetic, design, seed)?;
    create_dir(out)?;
    save_case_set(out, design, seed, &built)?;
    let mut m = RunManifest::new("turing-build", &r.hash, &r.value)
        .seed("seed", seed)
        .input("data", data)
        .input("generator", generator)
        .input("segmenter", segmenter);
    m.outputs.push(freetumor_turing::cases::CASES_FILE.into());
    for b in &built {
        for axis in freetumor_turing::render::Axis::ALL {
            let p = freetumor_turing::cases::image_path(out, &b.case.id, axis);
            m.outputs.push(p.strip_prefix(out).unwrap_or(&p).display().to_string());
        }
    }
    let n_syn = built.iter().filter(|b| b.case.truth == Truth::Synthetic).count();
    eprintln!("wrote {} cases ({n_syn} synthetic) to {}", built.len(), out.display());
    m.write(&out.join(MANIFEST_FILE))
}

fn sessions_dir(cases: &Path, sessions: Option<PathBuf>) -> PathBuf {
    sessions.unwrap_or_else(|| cases.join("sessions"))
}

fn turing_serve(r: &Resolved, port: u16, cases: &Path, sessions: Option<PathBuf>) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{port}", r.config.turing.bind)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad bind address {:?}: {e}", r.config.turing.bind)))?;
    let go = || -> Result<()> {
        let set = CaseSet::load(cases)?;
        let store = SessionStore::open(&sessions_dir(cases, sessions))?;
        let state = AppState::new(store, set, r.config.turing.order_seed, system_clock());
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        rt.block_on(serve(state, addr, |a| {
            println!("listening on http://{a}");
            let _ = std::io::stdout().flush();
        }))?;
        Ok(())
    };
    go().map_err(CliError::Runtime)
}

fn turing_report(cases: &Path, sessions: Option<PathBuf>, fmt: ReportFormat, file: Option<&Path>) -> Result<()> {
    let set = CaseSet::load(cases)?;
    let store = SessionStore::open(&sessions_dir(cases, sessions))?;
    let all: Vec<_> = store.sessions().collect();
    let full = full_report(&all, &set.cases)?;
    let text = match fmt {
        ReportFormat::Csv => to_csv(&full),
        ReportFormat::Json => serde_json::to_string_pretty(&full)? + "\n",
    };
    match file {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_round_and_keep_an_unlabeled_pool() {
        assert_eq!(split_sizes(250, 0.08, 0.12), Some([20, 200, 30]));
        assert_eq!(split_sizes(10, 0.08, 0.12), Some([1, 8, 1]));
        assert_eq!(split_sizes(1, 0.08, 0.12), None);
        assert_eq!(split_sizes(2, 0.5, 0.5), None);
    }
}
