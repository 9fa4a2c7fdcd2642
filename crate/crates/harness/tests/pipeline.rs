use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use semedit_core::directions::Method;
use semedit_core::discovery::LossWeights;
use semedit_core::generator::{GeneratorConfig, TapSpec};
use semedit_core::metrics::{evaluate_directions, Distance, Metric, MetricReport, Score};
use semedit_core::synth::SyntheticSceneSpec;
use semedit_harness::pipeline::{self, RunPaths};
use semedit_harness::{ExperimentConfig, HarnessError};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::test_scale();
    cfg.seed = 5;
    cfg.scene = SyntheticSceneSpec::with_size(16);
    cfg.generator = GeneratorConfig { class_count: 6, latent_channels: 8, blocks: 2, width: 4, hidden: 4, image_size: 16 };
    cfg.training.steps = 3;
    cfg.training.batch_size = 2;
    cfg.training.discriminator_width = 4;
    cfg.segmenter.steps = 2;
    cfg.segmenter.batch_size = 2;
    cfg.segmenter.width = 4;
    cfg.discovery.ctrl_sis.epochs = 1;
    cfg.discovery.ctrl_sis.dataset_maps = 24;
    cfg.discovery.ctrl_sis.batch_size = 8;
    cfg.discovery.ctrl_sis.norm_samples = 500;
    cfg.discovery.ctrl_sis.taps = TapSpec::norm_layers(2);
    cfg.discovery.ganspace.samples = 48;
    cfg.eval.label_maps = 2;
    cfg.eval.latent_codes = 2;
    cfg.eval.global_edits = 2;
    cfg.eval.quality_samples = 6;
    cfg
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("semedit-harness-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn shipped_configs_parse_to_the_presets() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    assert_eq!(ExperimentConfig::load(&root.join("test_scale.toml")).unwrap(), ExperimentConfig::test_scale());
    assert_eq!(ExperimentConfig::load(&root.join("default.toml")).unwrap(), ExperimentConfig::default());
    let d = ExperimentConfig::default();
    assert_eq!((d.scene.height, d.generator.latent_channels, d.scene.class_count, d.training.steps), (64, 64, 6, 20_000));
    let steps = d.discovery.ctrl_sis.epochs * d.discovery.ctrl_sis.dataset_maps / d.discovery.ctrl_sis.batch_size;
    assert_eq!(steps, 2000);
    assert_eq!(d.discovery.ctrl_sis.k, 5);
    assert_eq!(d.discovery.ctrl_sis.learning_rate, 1e-3);
    assert_eq!(d.discovery.ctrl_sis.batch_size, 16);
}

#[test]
fn config_hash_ignores_field_order_and_output_dir() {
    let cfg = tiny();
    let text = cfg.to_toml();
    // Reverse the order of top-level tables and of the keys inside each
    // plain table. Arrays of tables keep their order: it is data.
    let mut blocks: Vec<Vec<&str>> = vec![vec![]];
    for line in text.lines() {
        if line.starts_with('[') {
            blocks.push(vec![]);
        }
        blocks.last_mut().unwrap().push(line);
    }
    let head = blocks.remove(0);
    let root = |b: &Vec<&str>| b[0].trim_matches(|c| c == '[' || c == ']').split('.').next().unwrap().to_string();
    let mut groups: Vec<(String, Vec<Vec<&str>>)> = Vec::new();
    for b in blocks {
        let r = root(&b);
        match groups.last_mut() {
            Some((name, g)) if *name == r => g.push(b),
            _ => groups.push((r, vec![b])),
        }
    }
    let mut shuffled: Vec<String> = head.iter().rev().filter(|l| !l.is_empty()).map(|s| s.to_string()).collect();
    for (_, g) in groups.iter().rev() {
        for b in g {
            let (title, body) = b.split_first().unwrap();
            shuffled.push(String::new());
            shuffled.push(title.to_string());
            let keys: Vec<&str> = body.iter().copied().filter(|l| !l.is_empty()).collect();
            if !title.starts_with("[[") && keys.iter().all(|l| l.contains(" = ") && !l.ends_with('[')) {
                shuffled.extend(keys.iter().rev().map(|s| s.to_string()));
            } else {
                shuffled.extend(keys.iter().map(|s| s.to_string()));
            }
        }
    }
    let shuffled = shuffled.join("\n");
    assert_ne!(shuffled, text);
    let back = ExperimentConfig::from_toml(&shuffled).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    let mut moved = cfg.clone();
    moved.output_dir = "elsewhere".into();
    assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
    let mut reseeded = cfg.clone();
    reseeded.seed += 1;
    assert_ne!(reseeded.hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn bad_configs_are_usage_errors() {
    let missing = ExperimentConfig::load(&PathBuf::from("/nonexistent/semedit.toml"));
    assert!(matches!(missing, Err(HarnessError::Usage(_))));
    let typo = tiny().to_toml().replace("label_maps", "label_mapz");
    assert!(matches!(ExperimentConfig::from_toml(&typo), Err(HarnessError::Usage(_))));
    let mut mismatch = tiny();
    mismatch.generator.image_size = 32;
    assert!(ExperimentConfig::from_toml(&mismatch.to_toml()).is_err());
}

#[test]
fn zero_step_training_gives_the_initialization_deterministically() {
    let mut cfg = tiny();
    cfg.training.steps = 0;
    cfg.segmenter.steps = 0;
    let a = pipeline::train(&cfg, |_| {}).unwrap();
    let b = pipeline::train(&cfg, |_| {}).unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let init = semedit_core::generator::ToyGenerator::init(cfg.generator.clone(), semedit_core::rng::derive_seed(cfg.train_config().seed, &[1])).unwrap();
    assert_eq!(a.generator, init);
    assert_eq!(a.experiment_hash, cfg.training_lineage().unwrap());
    let mut trained = cfg.clone();
    trained.training.steps = 2;
    let c = pipeline::train(&trained, |_| {}).unwrap();
    assert_ne!(c.hash().unwrap(), a.hash().unwrap());
}

#[test]
fn discovery_covers_every_class_and_method_and_reruns_identically() {
    let cfg = tiny();
    let ck = pipeline::train(&cfg, |_| {}).unwrap();
    let classes = cfg.classes();
    let a = pipeline::discover(&cfg, &ck, &Method::ALL, &classes, |_| {}).unwrap();
    for &c in &classes {
        for m in Method::ALL {
            let s = a.get(c, m).unwrap_or_else(|| panic!("missing {c} {m:?}"));
            assert_eq!(s.k(), 5);
        }
    }
    let b = pipeline::discover(&cfg, &ck, &Method::ALL, &classes, |_| {}).unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let back = semedit_core::directions::DirectionsArchive::from_bytes(&a.to_bytes().unwrap(), &ck.hash().unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_bytes().unwrap(), a.to_bytes().unwrap());
}

#[test]
fn random_discovery_is_fast_at_the_default_scale() {
    let cfg = ExperimentConfig::default();
    let mut zero = cfg.clone();
    zero.training.steps = 0;
    zero.segmenter.steps = 0;
    let ck = pipeline::train(&zero, |_| {}).unwrap();
    let t = Instant::now();
    let a = pipeline::discover(&zero, &ck, &[Method::Random], &zero.classes(), |_| {}).unwrap();
    assert!(t.elapsed().as_secs_f64() < 10.0);
    assert_eq!(a.records.len(), 6);
}

#[test]
fn discovery_rejects_bad_selections() {
    let cfg = tiny();
    let ck = pipeline::train(&cfg, |_| {}).unwrap();
    assert!(matches!(pipeline::discover(&cfg, &ck, &[Method::Random], &[], |_| {}), Err(HarnessError::Usage(_))));
    assert!(matches!(pipeline::discover(&cfg, &ck, &[Method::Random], &[6], |_| {}), Err(HarnessError::Usage(_))));
    assert!(Method::parse("stylespace").is_err());
    let mut other = cfg.clone();
    other.seed += 1;
    let err = pipeline::discover(&other, &ck, &[Method::Random], &[0], |_| {}).unwrap_err();
    assert!(err.is_integrity());
}

#[test]
fn evaluation_matches_direct_library_calls_and_checks_lineage() {
    let cfg = tiny();
    let ck = pipeline::train(&cfg, |_| {}).unwrap();
    let archive = pipeline::discover(&cfg, &ck, &[Method::Random, Method::Sefa], &cfg.classes(), |_| {}).unwrap();
    let d = Distance::seeded();
    let all = Metric::ALL.to_vec();
    let report = pipeline::evaluate(&cfg, &ck, &archive, &all, &d).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["baseline", "random", "sefa"]);
    let baseline = report.row("baseline").unwrap();
    assert!(baseline.get(Metric::FidLite).unwrap() >= 0.0);
    let miou = baseline.get(Metric::MiouProxy).unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(baseline.get(Metric::Mcd).is_none());
    let sets: Vec<_> = archive.records.iter().filter(|r| r.method == Method::Sefa).cloned().collect();
    let maps = pipeline::eval_maps(&cfg).unwrap();
    let protocol = pipeline::protocol(&cfg, None);
    let pairwise: Vec<Metric> = all.iter().copied().filter(|m| m.is_pairwise()).collect();
    let direct = evaluate_directions(&ck.generator, &sets, &maps, &protocol, &d, &pairwise).unwrap();
    let row = report.row("sefa").unwrap();
    for (m, s) in &direct {
        assert_eq!(row.scores.get(m), Some(s), "{m:?}");
    }
    assert!(matches!(row.scores[&Metric::FidLite], Score::Single(_)));
    assert_eq!(report.provenance["checkpoint"], ck.hash().unwrap());
    assert_eq!(report.provenance["archive"], archive.hash().unwrap());

    // Integrity: another checkpoint, another discovery setup.
    let mut retrained = cfg.clone();
    retrained.training.steps += 1;
    let ck2 = pipeline::train(&retrained, |_| {}).unwrap();
    assert!(pipeline::evaluate(&retrained, &ck2, &archive, &all, &d).unwrap_err().is_integrity());
    let mut rediscovered = cfg.clone();
    rediscovered.discovery.map_seed += 1;
    assert!(pipeline::evaluate(&rediscovered, &ck, &archive, &all, &d).unwrap_err().is_integrity());
    assert!(pipeline::check_checkpoint(&retrained, &ck).unwrap_err().is_integrity());
}

#[test]
fn single_metric_and_msssim_reports() {
    let cfg = tiny();
    let ck = pipeline::train(&cfg, |_| {}).unwrap();
    let archive = pipeline::discover(&cfg, &ck, &[Method::Random], &cfg.classes(), |_| {}).unwrap();
    let only = pipeline::evaluate(&cfg, &ck, &archive, &[Metric::Mod], &Distance::seeded()).unwrap();
    assert_eq!(only.rows.len(), 1);
    let text = only.to_text();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["method", "mOD", "mOD", "[lit]"]);
    let ms = pipeline::evaluate(&cfg, &ck, &archive, &[Metric::Mcd, Metric::Mcc, Metric::Mod], &Distance::msssim()).unwrap();
    let text = ms.to_text();
    for col in ["mCD (MS-SSIM)", "mCC (MS-SSIM)", "mOD (MS-SSIM)"] {
        assert!(text.contains(col), "{text}");
    }
    assert_eq!(MetricReport::from_json(&ms.to_json().unwrap()).unwrap(), ms);
}

#[test]
fn ablation_runs_four_variants_with_echoed_weights() {
    let mut cfg = tiny();
    cfg.eval.ablation_seeds = vec![0, 1, 2];
    let ck = pipeline::train(&cfg, |_| {}).unwrap();
    let mut seen = Vec::new();
    let report = pipeline::ablate(&cfg, &ck, &[1, 2], &Distance::seeded(), |v, s| seen.push((v.to_string(), s))).unwrap();
    assert_eq!(seen.len(), 12);
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_div", "no_const", "no_dis"]);
    assert_eq!(report.row("full").unwrap().weights, LossWeights::FULL);
    assert_eq!(report.row("no_div").unwrap().weights, LossWeights { diversity: 0.0, disentanglement: 1.0, consistency: 1.0 });
    assert_eq!(report.row("no_const").unwrap().weights, LossWeights { diversity: 1.0, disentanglement: 1.0, consistency: 0.0 });
    assert_eq!(report.row("no_dis").unwrap().weights, LossWeights { diversity: 1.0, disentanglement: 0.0, consistency: 1.0 });
    for r in &report.rows {
        assert_eq!(r.per_seed.len(), 3);
        for m in pipeline::ABLATION_METRICS {
            let mut v: Vec<f64> = r.per_seed.iter().map(|s| s[&m]).collect();
            v.sort_by(f64::total_cmp);
            assert_eq!(r.median[&m], v[1]);
        }
    }
    assert!(report.sign_pattern().is_some());
    let text = report.to_text();
    assert!(text.contains("(0, 1, 1)"), "{text}");
    assert_eq!(pipeline::AblationReport::from_json(&report.to_json()).unwrap(), report);
    assert!(matches!(pipeline::ablate(&cfg, &ck, &[], &Distance::seeded(), |_, _| {}), Err(HarnessError::Usage(_))));
}

#[test]
fn median_of_small_sets() {
    assert_eq!(pipeline::median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(pipeline::median(&[4.0, 1.0]), 2.5);
    assert!(pipeline::median(&[]).is_nan());
}

fn semedit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_semedit")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = scratch("cli");
    let cfg_path = dir.join("exp.toml");
    let mut cfg = tiny();
    cfg.output_dir = dir.join("out");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let out = semedit(&["train", "--config", "/nonexistent.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = semedit(&["train", "--config", c]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let paths = RunPaths::new(&cfg.output_dir);
    assert!(paths.checkpoint().exists());
    let log = std::fs::read_to_string(paths.train_log()).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"generator\"")).count(), 3);
    assert_eq!(log.lines().filter(|l| l.contains("\"segmenter\"")).count(), 2);

    assert_eq!(semedit(&["discover", "--config", c, "--classes", ""]).status.code(), Some(2));
    assert_eq!(semedit(&["discover", "--config", c, "--methods", "stylegan"]).status.code(), Some(2));
    let out = semedit(&["discover", "--config", c, "--methods", "random,sefa"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = semedit(&["evaluate", "--config", c, "--metrics", "mOD,mCD", "--distance", "msssim"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mOD (MS-SSIM)"), "{stdout}");
    let json = paths.report("json");
    let shown = semedit(&["report", "--input", json.to_str().unwrap()]);
    assert!(shown.status.success());
    assert_eq!(String::from_utf8_lossy(&shown.stdout), std::fs::read_to_string(paths.report("txt")).unwrap());

    // An archive from another checkpoint is refused with the integrity status.
    let mut other = cfg.clone();
    other.seed += 1;
    other.output_dir = dir.join("other");
    let other_path = dir.join("other.toml");
    std::fs::write(&other_path, other.to_toml()).unwrap();
    assert!(semedit(&["train", "--config", other_path.to_str().unwrap()]).status.success());
    let out = semedit(&[
        "evaluate",
        "--config",
        other_path.to_str().unwrap(),
        "--archive",
        paths.archive().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}
