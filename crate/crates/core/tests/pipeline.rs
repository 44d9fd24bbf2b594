//! End-to-end plumbing on a tiny dataset: persistence, frozen weights,
//! contamination guards and CLI exit codes.

use std::fs;
use std::path::Path;

use vistex::checkpoint::{load_mstb, load_ovlm, metadata, save_mstb, save_ovlm, WEIGHTS_FILE};
use vistex::cli::run_command;
use vistex::error::VistexError;
use vistex::evaluation::{detect_queries, eval_episode, evaluate_fsod, EvalMode, EvalOptions};
use vistex::exec::Exec;
use vistex::mstb::{Mstb, MstbConfig};
use vistex::prompting::PromptSettings;
use vistex::synthdata::{Dataset, DatasetConfig};
use vistex::toyovlm::{DecodeParams, ToyOvlm};
use vistex::training::{check_no_novel, pretrain, pretrain_on, train_full, train_mstb, PretrainConfig, TrainConfig};

fn tiny_data() -> Dataset {
    Dataset::render(&DatasetConfig { images_per_class: 4, ..Default::default() }, 7).unwrap()
}

fn tiny_ovlm(ds: &Dataset) -> ToyOvlm {
    pretrain(ds, &PretrainConfig { epochs: 1, ..Default::default() }, 7, Exec::default()).unwrap().0
}

fn bytes_of(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn tiny_train() -> TrainConfig {
    TrainConfig { k: 1, epochs: 1, lr: 1e-3, queries_per_epoch: Some(6), ..Default::default() }
}

#[test]
fn mstb_training_leaves_detector_untouched() {
    let ds = tiny_data();
    let ovlm = tiny_ovlm(&ds);
    let before = bytes_of(ovlm.params.data());
    let mut mstb = Mstb::new(ovlm.config.clone(), MstbConfig::default(), 0).unwrap();
    let init = mstb.params.data().to_vec();
    train_mstb(&ovlm, &mut mstb, &ds, &tiny_train(), &PromptSettings::default(), 0, Exec::default()).unwrap();
    assert_eq!(bytes_of(ovlm.params.data()), before);
    assert_ne!(mstb.params.data(), &init[..]);

    let mut ft = ovlm.clone();
    train_full(&mut ft, &ds, &tiny_train(), 0, Exec::default()).unwrap();
    assert_ne!(bytes_of(ft.params.data()), before);
}

#[test]
fn checkpoints_round_trip() {
    let ds = tiny_data();
    let ovlm = tiny_ovlm(&ds);
    let mstb = Mstb::new(ovlm.config.clone(), MstbConfig { sharing: false, ..Default::default() }, 3).unwrap();
    let settings = PromptSettings { stages: Some(vec![1, 2]), ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("ovlm"), dir.path().join("mstb"));
    save_ovlm(&ovlm, metadata([("epochs", 1.into())]), &a).unwrap();
    save_mstb(&mstb, &settings, Default::default(), &b).unwrap();

    let (ovlm2, m) = load_ovlm(&a).unwrap();
    assert_eq!(m.metadata["epochs"], 1);
    assert_eq!(ovlm2.config, ovlm.config);
    assert_eq!(ovlm2.vocab, ovlm.vocab);
    for (x, y) in ovlm.params.data().iter().zip(ovlm2.params.data()) {
        assert_eq!(*x as f32, *y as f32);
    }
    let (mstb2, settings2, _) = load_mstb(&b).unwrap();
    assert_eq!(settings2, settings);
    assert_eq!(mstb2.config, mstb.config);
    assert_eq!(mstb2.params.specs(), mstb.params.specs());

    // a reloaded model saves to the same bytes
    let c = dir.path().join("again");
    save_ovlm(&ovlm2, metadata([("epochs", 1.into())]), &c).unwrap();
    for f in ["manifest.json", WEIGHTS_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap());
    }

    assert!(matches!(load_mstb(&a), Err(VistexError::Corruption(_))));
    let w = a.join(WEIGHTS_FILE);
    let mut bytes = fs::read(&w).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&w, bytes).unwrap();
    assert!(matches!(load_ovlm(&a), Err(VistexError::Corruption(_))));
}

#[test]
fn rendering_and_training_are_reproducible() {
    let a = tiny_data();
    let b = tiny_data();
    for r in &a.manifest.images {
        assert_eq!(a.raw_pixels(r.id), b.raw_pixels(r.id));
    }
    assert_eq!(a.manifest, b.manifest);
    let c = Dataset::render(&DatasetConfig { images_per_class: 4, ..Default::default() }, 8).unwrap();
    assert_ne!(a.raw_pixels(0), c.raw_pixels(0));

    let m1 = tiny_ovlm(&a);
    let m2 = pretrain(&a, &PretrainConfig { epochs: 1, ..Default::default() }, 7, Exec::Sequential).unwrap().0;
    assert_eq!(bytes_of(m1.params.data()), bytes_of(m2.params.data()));

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, a.manifest);
    assert_eq!(back.raw_pixels(5), a.raw_pixels(5));
}

#[test]
fn parallel_and_sequential_detections_agree() {
    let ds = tiny_data();
    let ovlm = tiny_ovlm(&ds);
    let prompt = ovlm.tokenize_text(&vistex::training::base_text_classes(&ds)).unwrap();
    let ids: Vec<usize> = (0..8).collect();
    let d = DecodeParams::default();
    let s = detect_queries(&ovlm, &prompt, &ds, &ids, &d, Exec::Sequential).unwrap();
    let p = detect_queries(&ovlm, &prompt, &ds, &ids, &d, Exec::Parallel).unwrap();
    assert_eq!(s, p);
}

#[test]
fn novel_labels_never_reach_training() {
    let ds = tiny_data();
    let novel_img = ds.manifest.images_with_class(ds.manifest.split.novel[0])[0];
    assert!(matches!(check_no_novel(&ds, &[novel_img]), Err(VistexError::Contamination(_))));
    let r = pretrain_on(&ds, &[0, novel_img], &PretrainConfig { epochs: 1, ..Default::default() }, 0, Exec::default());
    assert!(matches!(r, Err(VistexError::Contamination(_))));
    assert!(ds.base_image_ids().iter().all(|&id| check_no_novel(&ds, &[id]).is_ok()));
}

#[test]
fn evaluation_reports_base_and_novel() {
    let ds = tiny_data();
    let ovlm = tiny_ovlm(&ds);
    let ep = eval_episode(&ds, 1, 0).unwrap();
    let mstb = Mstb::new(ovlm.config.clone(), MstbConfig::default(), 0).unwrap();
    let st = PromptSettings::default();
    let zs = evaluate_fsod(&ovlm, None, &ds, &ep, EvalMode::ZeroShot, &st, &EvalOptions::default()).unwrap();
    let vt = evaluate_fsod(&ovlm, Some(&mstb), &ds, &ep, EvalMode::Vistex, &st, &EvalOptions::default()).unwrap();
    for r in [&zs, &vt] {
        assert_eq!(r.per_class.len(), 16);
        assert!(r.bap50.is_some() && r.nap50.is_some());
    }
    assert!(evaluate_fsod(&ovlm, None, &ds, &ep, EvalMode::Vistex, &st, &EvalOptions::default()).is_err());
}

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["vistex"];
    v.extend_from_slice(args);
    run_command(v)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 4, "data": {"images_per_class": 3}, "pretrain": {"epochs": 1}}"#).unwrap();
    let data = dir.path().join("data");
    let ovlm = dir.path().join("ovlm");
    let mstb = dir.path().join("mstb");
    let c = path(&cfg);

    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["eval", "--mode", "sideways", "--data", "x", "--ovlm", "y"]), 1);

    assert_eq!(cli(&["gen-data", "--config", c, "--out", path(&data)]), 0);
    assert_eq!(cli(&["pretrain", "--config", c, "--data", path(&data), "--out", path(&ovlm)]), 0);
    assert!(ovlm.join("train_log.csv").exists());
    assert_eq!(
        cli(&["train", "--config", c, "--trainable", "mstb", "--data", path(&data), "--ovlm", path(&ovlm), "--out", path(&mstb), "-k", "1", "--epochs", "1", "--stages", "1-2"]),
        0
    );
    let report = dir.path().join("eval.json");
    assert_eq!(
        cli(&["eval", "--config", c, "--mode", "vistex", "--data", path(&data), "--ovlm", path(&ovlm), "--mstb", path(&mstb), "-k", "1", "--json", path(&report)]),
        0
    );
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["K"], 1);
    assert!(v["nAP50"].is_number());
    assert_eq!(cli(&["eval", "--config", c, "--mode", "vistex", "--data", path(&data), "--ovlm", path(&ovlm), "-k", "1"]), 1);
    assert_eq!(
        cli(&["train", "--config", c, "--trainable", "mstb", "--data", path(&data), "--ovlm", path(&ovlm), "--out", path(&mstb), "-k", "1", "--epochs", "1", "--stages", "7"]),
        1
    );

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"sede": 1}"#).unwrap();
    assert_eq!(cli(&["gen-data", "--config", path(&bad_cfg), "--out", path(&data)]), 1);

    // data-side failures exit with 2
    assert_eq!(cli(&["pretrain", "--config", c, "--data", path(&dir.path().join("missing")), "--out", path(&ovlm)]), 2);
    assert_eq!(cli(&["eval", "--config", c, "--mode", "zero_shot", "--data", path(&data), "--ovlm", path(&mstb), "-k", "1"]), 2);
    let manifest = data.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let leaked = m["split"]["novel"][0].clone();
    m["split"]["base"].as_array_mut().unwrap().push(leaked);
    fs::write(&manifest, m.to_string()).unwrap();
    assert_eq!(cli(&["pretrain", "--config", c, "--data", path(&data), "--out", path(&ovlm)]), 2);
}
