use std::path::Path;
use std::process::{Command, Output};

fn ladet(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladet")).arg("--config").arg(cfg).args(args).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(root: &Path) -> std::path::PathBuf {
    let text = format!(
        "[global]\nseed = 9\nworkers = 1\n\
         [phantom]\ngrid_dims = 24 24 32\nspacing_mm = 2\n\
         [data]\ncases = 4\nbalanced = true\n\
         [patch]\nwork_spacing_mm = 2\n\
         [codec]\nwidth = 4\nlatent_dim = 4\ncodebook_size = 16\nbudget = 4\nbatch_size = 2\n\
         [denoiser]\nwidth = 4\ntimesteps = 50\nbudget = 4\n\
         [classifier]\nwidth = 4\nmax_t = 20\nbudget = 1\n\
         [sampler]\nmode = ddim\nnoise_level = 10\nguidance_scale = 0\nstride = 5\n\
         [sweep]\nnoise_levels = 10\nguidance_scales = 0 5\n\
         [paths]\ndata = {0}/data\nmodels = {0}/models\nout = {0}/out\n",
        root.display()
    );
    let p = root.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn full_run_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());

    let o = ladet(&cfg, &["detect"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("codec.ckpt"));

    assert!(ok(&ladet(&cfg, &["gen-data"])).contains("wrote 4 cases (2 with lesions)"));
    for stage in ["codec", "denoiser", "classifier"] {
        assert!(ok(&ladet(&cfg, &["train", stage])).starts_with(stage));
    }
    assert!(ok(&ladet(&cfg, &["train", "codec", "--resume"])).contains("8 steps"));

    ok(&ladet(&cfg, &["detect"]));
    let out = tmp.path().join("out");
    let entry = std::fs::read_dir(out.join("candidates")).unwrap().next().unwrap().unwrap();
    let first = std::fs::read(entry.path()).unwrap();
    assert!(first.starts_with(b"VOL1"));
    assert_eq!(std::fs::read_dir(out.join("montage")).unwrap().count(), 4);

    let summary = ok(&ladet(&cfg, &["eval"]));
    assert!(summary.starts_with("cases 4"), "{summary}");
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("case_id,bin,TP,FP,FN,precision,recall,f1,dsc"));

    ok(&ladet(&cfg, &["eval", "--detection-only"]));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.lines().skip(1).all(|l| l.ends_with(",N/A")));

    let other = tmp.path().join("elsewhere");
    let o = ladet(&cfg, &["sweep", "--out", other.to_str().unwrap()]);
    assert!(ok(&o).contains("best L=10"));
    let best = std::fs::read_to_string(other.join("best.cfg")).unwrap();
    assert!(best.contains("noise_level = 10"));
    assert_eq!(std::fs::read_to_string(other.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn detect_failure_exits_nonzero_but_writes_the_rest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    ok(&ladet(&cfg, &["gen-data", "--cases", "2"]));
    for stage in ["codec", "denoiser"] {
        ok(&ladet(&cfg, &["train", stage]));
    }
    let o = ladet(&cfg, &["detect", "case_nope", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("case_nope"));
    let log = std::fs::read_to_string(tmp.path().join("out/detect.csv")).unwrap();
    assert!(log.contains("case_nope,failed"));
}

#[test]
fn config_errors_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "[sampler]\nnoise_levle = 3\n").unwrap();
    let o = ladet(&bad, &["show-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let cfg = write_config(tmp.path());
    let text = ok(&ladet(&cfg, &["show-config", "--seed", "77", "--workers", "3", "--out", "/tmp/x"]));
    assert!(text.contains("seed = 77") && text.contains("workers = 3") && text.contains("out = /tmp/x"));

    let o = Command::new(env!("CARGO_BIN_EXE_ladet")).args(["train", "decoder"]).output().unwrap();
    assert!(!o.status.success());
}
