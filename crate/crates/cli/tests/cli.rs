//! Command-line behavior: outputs, determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmha_core::geometry::metrics::correspondence_rmse;
use cmha_core::io::{import_scene, write_transform};
use cmha_core::synth::generate_scene;
use cmha_core::{RigidTransform, RunReport};

fn cmha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmha")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, seed: u64, count: usize) -> Vec<PathBuf> {
    let o = cmha(&["synth", "--seed", &seed.to_string(), "--count", &count.to_string(), "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (0..count as u64).map(|k| out.join(format!("scene_{:06}", seed + k))).collect()
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn synth_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth(dir.path(), 40, 3);
    assert_eq!(sorted_files(dir.path()).len(), 3);
    for (k, scene) in scenes.iter().enumerate() {
        assert_eq!(sorted_files(scene), ["gt.json", "meta.json", "src.ply", "tgt.ply"]);
        assert_eq!(import_scene(scene).unwrap().meta.seed, 40 + k as u64);
    }
}

#[test]
fn synth_is_byte_for_byte_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = synth(a.path(), 9, 1).remove(0);
    let sb = synth(b.path(), 9, 1).remove(0);
    for f in sorted_files(&sa) {
        assert_eq!(std::fs::read(sa.join(&f)).unwrap(), std::fs::read(sb.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmha(&["register", "--scene", s(&dir.path().join("nope")), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
}

#[test]
fn register_writes_outputs_for_ply_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(&dir.path().join("scenes"), 5, 1).remove(0);
    let out = dir.path().join("out");
    let o = cmha(&["register", "--src", s(&scene.join("src.ply")), "--tgt", s(&scene.join("tgt.ply")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sorted_files(&out), ["correspondences.csv", "report.json", "transform.json"]);
}

fn eval(scenes: &Path, preds: &Path) -> (Output, Option<RunReport>) {
    let report = preds.with_extension("json");
    let o = cmha(&["eval", "--predictions", s(preds), "--scenes", s(scenes), "--out", s(&report)]);
    let parsed = o
        .status
        .success()
        .then(|| serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap());
    (o, parsed)
}

fn predict(preds: &Path, scene: &Path, t: &RigidTransform<f64>) {
    let d = preds.join(scene.file_name().unwrap());
    std::fs::create_dir_all(&d).unwrap();
    write_transform(&d.join("transform.json"), t).unwrap();
}

#[test]
fn eval_recall_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    let scenes = synth(&scenes_dir, 60, 4);
    let (gt_preds, id_preds, mixed) = (dir.path().join("gt"), dir.path().join("id"), dir.path().join("mixed"));
    let mut expected = 0.0;
    for (k, scene) in scenes.iter().enumerate() {
        let files = import_scene(scene).unwrap();
        predict(&gt_preds, scene, &files.gt);
        predict(&id_preds, scene, &RigidTransform::identity());
        let guess = if k % 2 == 0 { files.gt.clone() } else { RigidTransform::identity() };
        predict(&mixed, scene, &guess);
        let regenerated = generate_scene(&files.meta).unwrap();
        let pairs = regenerated.gt_correspondences.index_pairs();
        if correspondence_rmse(&guess, &pairs, files.src.points(), files.tgt.points()) < 0.2 {
            expected += 1.0;
        }
    }
    let (_, gt) = eval(&scenes_dir, &gt_preds);
    assert_eq!(gt.unwrap().aggregate.rr, 1.0);
    let (_, id) = eval(&scenes_dir, &id_preds);
    assert_eq!(id.unwrap().aggregate.rr, 0.0);
    let (_, mixed) = eval(&scenes_dir, &mixed);
    let mixed = mixed.unwrap();
    assert_eq!(mixed.aggregate.rr, expected / 4.0);
    let mean: f64 = mixed.pairs.iter().map(|p| p.metrics.rr).sum::<f64>() / mixed.pairs.len() as f64;
    assert_eq!(mixed.aggregate.rr, mean);
}

#[test]
fn eval_rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    let scenes = synth(&scenes_dir, 1, 2);
    let preds = dir.path().join("preds");
    predict(&preds, &scenes[0], &RigidTransform::identity());
    let (o, report) = eval(&scenes_dir, &preds);
    assert_eq!(o.status.code(), Some(2));
    assert!(report.is_none());
}

#[test]
fn gradcheck_passes_and_catches_broken_gradients() {
    let ok = cmha(&["gradcheck", "--seed", "3"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let again = cmha(&["gradcheck", "--seed", "3"]);
    assert_eq!(ok.stdout, again.stdout);
    let broken = cmha(&["gradcheck", "--corrupt-gradient", "0.01"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("worst entry"));
}
