use std::path::Path;
use std::process::{Command, Output};

fn betavae(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betavae"))
        .args(args)
        .env("BETAVAE_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path, ext: &str) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p, ext));
        } else if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn zero_subjects_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = betavae(&["gen-data", "--n", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible_and_append_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&betavae(&["gen-data", "--n", "3", "--dims", "16", "--seed", "7", "--out", s(&a)], tmp.path()));
    ok(&betavae(&["gen-data", "--n", "3", "--dims", "16", "--seed", "7", "--out", s(&b)], tmp.path()));
    let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.join("config.json").exists() && a.join("run.json").exists());

    let again = betavae(&["gen-data", "--n", "3", "--dims", "16", "--out", s(&a)], tmp.path());
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("not empty"));
}

#[test]
fn default_run_dirs_live_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&betavae(&["gen-data", "--n", "2", "--dims", "16"], tmp.path()));
    let dirs: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].to_string_lossy().starts_with("gen-data-"));
}

#[test]
fn verify_math_passes_and_detects_a_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let report = tmp.path().join("report.json");
    let out = betavae(&["verify-math", "--out", s(&good), "--report", s(&report)], tmp.path());
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"), "{stdout}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["max_gradient_rel_error"].as_f64().unwrap() <= 1e-5);
    let traces = std::fs::read_to_string(good.join("gd_traces.csv")).unwrap();
    assert!(traces.starts_with("trace,beta,alpha,step,dim,sigma,kld"));

    let bad = betavae(&["verify-math", "--inject-sign-flip", "--out", s(&tmp.path().join("bad"))], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name);
    let config = p("config.json");
    std::fs::write(&config, r#"{"eval": {"train_fraction": 0.75, "split_seed": 3, "gamma": 1.0}}"#).unwrap();
    let cfg = ["--config", s(&config)];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&cfg);
        let out = betavae(&all, root);
        ok(&out);
        out
    };

    run(&["gen-data", "--n", "4", "--dims", "32", "--seed", "7", "--out", s(&p("data"))]);
    run(&["train-stage1", "--beta", "100", "--epochs", "1", "--data", s(&p("data")), "--out", s(&p("s1"))]);
    let curve = std::fs::read_to_string(p("s1").join("curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,dice_loss,kld,beta,seconds\n0,"));
    assert!(curve.trim_end().ends_with(",100,0"), "{curve}");
    run(&["train-stage2", "--stage1", s(&p("s1")), "--epochs", "1", "--data", s(&p("data")), "--out", s(&p("s2"))]);
    run(&["aggregate", "--stage1", s(&p("s1")), "--stage2", s(&p("s2")), "--out", s(&p("agg"))]);
    let manifest = std::fs::read_to_string(p("agg").join("checkpoint/manifest.json")).unwrap();
    assert!(manifest.contains("\"aggregated\"") && manifest.contains("stage1:"));

    let agg = s(&p("agg")).to_string();
    let data = s(&p("data")).to_string();
    run(&["reconstruct", "--model", &agg, "--data", &data, "--out", s(&p("rec"))]);
    run(&["complete", "--model", &agg, "--data", &data, "--gamma", "0", "--class", "cranial", "--out", s(&p("cmp0"))]);
    let recs = files_under(&p("rec"), "vox");
    let cmps: Vec<_> = files_under(&p("cmp0"), "vox").into_iter().filter(|f| f.ends_with("cranial.vox")).collect();
    assert_eq!(cmps.len(), 1);
    let rec = recs.iter().find(|f| f.ends_with("cranial.vox")).unwrap();
    assert_eq!(std::fs::read(rec).unwrap(), std::fs::read(&cmps[0]).unwrap());

    run(&["sweep-gamma", "--model", &agg, "--data", &data, "--gammas", "0,0.25,0.5,0.75,1,1.5", "--out", s(&p("sweep"))]);
    let montage = files_under(&p("sweep"), "png");
    assert_eq!(montage.len(), 1);
    assert_eq!(files_under(&p("sweep"), "vox").len(), 6);
    let img = image_width(&montage[0]);
    assert_eq!(img, 6 * (32 * 4 + 4) + 4);

    run(&["plot-latent", "--model", &agg, "--data", &data, "--out", s(&p("latent"))]);
    let csv = std::fs::read_to_string(p("latent").join("latent.csv")).unwrap();
    assert!(csv.starts_with("subject_id,class,pc1,pc2\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    assert!(p("latent").join("latent.png").exists());

    let tagged = format!("aggregated={agg}");
    let out = run(&["evaluate", "--model", &tagged, "--data", &data, "--out", s(&p("eval"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| model |"));
    let dsc = std::fs::read_to_string(p("eval").join("dsc.csv")).unwrap();
    assert_eq!(dsc.lines().count(), 1 + 3 + 2);

    // Missing or mismatched checkpoints are runtime errors.
    let missing = betavae(&["reconstruct", "--model", s(&p("nope")), "--data", &data, "--out", s(&p("x"))], root);
    assert_eq!(missing.status.code(), Some(1));
    std::fs::write(p("small.json"), r#"{"model": {"input_shape": [32,32,32], "latent_dim": 8, "num_layers": 4, "base_channels": 4, "seed": 0}}"#).unwrap();
    ok(&betavae(
        &["train-stage1", "--epochs", "1", "--data", &data, "--out", s(&p("s1small")), "--config", s(&p("small.json"))],
        root,
    ));
    let mismatch = betavae(&["aggregate", "--stage1", s(&p("s1small")), "--stage2", s(&p("s2")), "--out", s(&p("bad"))], root);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("latent dim"));
}

fn image_width(path: &Path) -> u32 {
    // PNG IHDR: width is the big-endian u32 at byte 16.
    let bytes = std::fs::read(path).unwrap();
    u32::from_be_bytes(bytes[16..20].try_into().unwrap())
}
