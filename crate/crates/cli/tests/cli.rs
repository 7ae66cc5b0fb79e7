use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use handfit::correctives::apply_correctives;
use handfit::fit::load_checkpoint;
use handfit::kinematics::PoseVector;
use handfit::model::load_model;
use handfit::obj::read_obj;

fn handfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = handfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn small_synth(dir: &Path) {
    ok(&[
        "synth",
        "--seed",
        "7",
        "--train",
        "3",
        "--test",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_synth(&a);
    small_synth(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key("manifest.json") && ta.contains_key("cameras.json"));
    assert!(ta.keys().any(|k| k.ends_with("view_0.pfm")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs");
    }
}

#[test]
fn deform_zero_pose_without_checkpoint_is_the_template() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data);
    let out = tmp.path().join("zero.obj");
    let model_path = data.join("model.obj");
    ok(&[
        "deform",
        "--model",
        model_path.to_str().unwrap(),
        "--pose",
        "zero",
        "--out",
        out.to_str().unwrap(),
    ]);
    let model = load_model(&model_path).unwrap();
    let mesh = read_obj(&out).unwrap();
    assert_eq!(mesh.faces, model.faces);
    for (a, b) in mesh.vertices.iter().zip(&model.template_vertices) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-12 * b[k].abs().max(1.0));
        }
    }
}

#[test]
fn fit_then_deform_eval_and_render() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"fit": {"epochs": 2, "batch_size": 3, "views_per_frame": 2, "warmup_iterations": 5, "eval_iterations": 5}}"#)
        .unwrap();
    ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let ckpt = run.join("checkpoint.hfc");
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("iter,pose,depth,penet_r,penet_nr,lap,total"));
    assert_eq!(csv.lines().count(), 3);

    // Zero pose with the fitted correctives is the refined template.
    let model_path = data.join("model.obj");
    let out = tmp.path().join("refined.obj");
    ok(&[
        "deform",
        "--model",
        model_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pose",
        "zero",
        "--out",
        out.to_str().unwrap(),
    ]);
    let model = load_model(&model_path).unwrap();
    let state = load_checkpoint(&ckpt, &model).unwrap();
    let refined = apply_correctives(&model, &state.nets, &state.beta, &PoseVector::zero(model.dof_mask.clone())).unwrap();
    let mesh = read_obj(&out).unwrap();
    for (a, b) in mesh.vertices.iter().zip(&refined.vertices) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-9 * b[k].abs().max(1.0));
        }
    }

    let metrics = tmp.path().join("metrics");
    let out = ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "train",
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("P_err"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(metrics.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["frames"].as_array().unwrap().len(), 3);
    assert!(metrics.join("metrics.csv").exists());

    let views = tmp.path().join("views");
    ok(&[
        "render",
        "--mesh",
        model_path.to_str().unwrap(),
        "--cameras",
        data.join("cameras.json").to_str().unwrap(),
        "--out",
        views.to_str().unwrap(),
    ]);
    assert_eq!(fs::read_dir(&views).unwrap().count(), 8);
}

#[test]
fn fit_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data);
    let mut ckpts = Vec::new();
    for name in ["r1", "r2"] {
        let run = tmp.path().join(name);
        ok(&[
            "--seed",
            "3",
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--epochs",
            "2",
            "--batch-size",
            "2",
            "--views",
            "2",
        ]);
        ckpts.push(fs::read(run.join("checkpoint.hfc")).unwrap());
    }
    assert!(ckpts[0] == ckpts[1]);
}

#[test]
fn gradcheck_passes_on_default_subject() {
    let out = ok(&["gradcheck"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.matches("PASS").count(), 5, "{table}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(handfit(&[]).status.code(), Some(1));
    assert_eq!(handfit(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(handfit(&["teleport"]).status.code(), Some(1));
    assert_eq!(handfit(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_data_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = handfit(&[
        "fit",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"synth": {"n_cameras": 0}}"#).unwrap();
    let out = handfit(&["--config", cfg.to_str().unwrap(), "synth", "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data);
    let out = handfit(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--epochs",
        "3",
        "--lr",
        "1e300",
        "--pose-lr",
        "1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
