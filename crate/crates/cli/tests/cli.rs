use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[synth]
n_source = 12
n_target = 4
distance_range = [2.2, 4.0]

[synth.intrinsics]
fx = 40.0
fy = 40.0
cx = 8.0
cy = 8.0
width = 16
height = 16

[field]
resolutions = [6, 10]
features = 4
density_hidden = [16]
density_features = 5
color_hidden = [16]
appearance_dim = 3
sh_degree = 1
scene_bound = 0.6

[train]
iterations = 8
rays_per_batch = 64
eval_every = 4

[train.sampling]
n_samples = 12

[augment]
n_nerf = 3

[augment.sampling]
n_samples = 12
stratified = false

[probe]
seeds = 2

[probe.model]
input_size = 8
hidden = [16]

[probe.train]
steps = 10
batch_size = 4

[report]
diversity_poses = 1
diversity_draws = 3
sweep_alphas = [0.0, 1.0]
"#;

fn nerfaug(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_nerfaug"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env("NERFAUG_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nerfaug(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn ws(dir: &Path) -> String {
    dir.join("ws").to_string_lossy().into_owned()
}

fn pipeline(dir: &Path) {
    let w = ws(dir);
    ok(dir, &["-w", &w, "synth-gen"]);
    ok(dir, &["-w", &w, "nerf-train"]);
    ok(dir, &["-w", &w, "augment"]);
    ok(dir, &["-w", &w, "probe-ab"]);
    ok(dir, &["-w", &w, "report"]);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(&a.path().join("ws"));
    let fb = files(&b.path().join("ws"));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
    for name in [
        "source.json",
        "diffuse-target.json",
        "direct-target.json",
        "nerf.json",
        "train.json",
        "contact_sheet.png",
        "nerf_train/field.ckpt",
        "nerf_train/train_log.csv",
        "reports/probe_ab.csv",
        "reports/report.txt",
        "reports/diversity.csv",
        "reports/alpha_sweep.png",
    ] {
        assert!(fa.contains_key(Path::new(name)), "missing {name}");
    }

    // Rerunning a stage in place rewrites identical bytes.
    let w = ws(a.path());
    ok(a.path(), &["-w", &w, "synth-gen"]);
    assert_eq!(fs::read(a.path().join("ws/source.json")).unwrap(), fa[Path::new("source.json")]);

    let log = String::from_utf8(fa[Path::new("nerf_train/train_log.csv")].clone()).unwrap();
    let its: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(its, vec![4, 8]);

    let report = String::from_utf8(fa[Path::new("reports/probe_ab.csv")].clone()).unwrap();
    for target in ["diffuse-target", "direct-target"] {
        for arm in ["baseline", "ours"] {
            assert!(report.contains(&format!("{target},{arm},")), "{report}");
        }
    }
    let text = String::from_utf8(fa[Path::new("reports/report.txt")].clone()).unwrap();
    assert!(text.contains("random-pick") && text.contains("extrapolation [-4, 4]"), "{text}");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["-w", &ws(d), "synth-gen"]);
    }
    ok(a.path(), &["-w", &ws(a.path()), "nerf-train"]);
    ok(b.path(), &["-w", &ws(b.path()), "nerf-train", "--iterations", "4"]);
    ok(b.path(), &["-w", &ws(b.path()), "nerf-train", "--resume"]);
    for f in ["nerf_train/train_log.csv", "nerf_train/field.ckpt", "nerf_train/state.ckpt"] {
        assert!(
            fs::read(a.path().join("ws").join(f)).unwrap() == fs::read(b.path().join("ws").join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn no_texture_halves_the_augmented_set() {
    let d = tempfile::tempdir().unwrap();
    let w = ws(d.path());
    ok(d.path(), &["-w", &w, "synth-gen"]);
    ok(d.path(), &["-w", &w, "nerf-train"]);
    let count = |d: &Path| fs::read_dir(d.join("ws/nerf")).unwrap().count();
    ok(d.path(), &["-w", &w, "augment", "--n-nerf", "4"]);
    assert_eq!(count(d.path()), 8);
    let e = tempfile::tempdir().unwrap();
    let w2 = ws(e.path());
    ok(e.path(), &["-w", &w2, "synth-gen"]);
    ok(e.path(), &["-w", &w2, "nerf-train"]);
    ok(e.path(), &["-w", &w2, "augment", "--n-nerf", "4", "--no-texture"]);
    assert_eq!(count(e.path()), 4);

    let png = d.path().join("one.png");
    let out = ok(
        d.path(),
        &[
            "-w",
            &w,
            "nerf-render",
            "--pose-index",
            "2",
            "--embeddings",
            "0,1",
            "--alpha",
            "-2.5",
            "--texture-seed",
            "9",
            "--out",
            png.to_str().unwrap(),
        ],
    );
    assert!(png.exists(), "{out}");
}

#[test]
fn errors_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("no/such/parent/ws");
    let out = nerfaug(d.path(), &["-w", missing.to_str().unwrap(), "synth-gen"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/parent"));

    let w = ws(d.path());
    let out = nerfaug(d.path(), &["-w", &w, "probe-ab"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = nerfaug(d.path(), &["-w", &w, "augment", "--strategy", "sideways"]);
    assert_eq!(out.status.code(), Some(2));

    let out = nerfaug(d.path(), &["-w", &w, "augment", "--strategy", "extrapolation", "--alpha-min", "0.5"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[synth]\nn_sources = 4\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nerfaug"))
        .args(["--config", bad.to_str().unwrap(), "-w", &w, "synth-gen"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_nerfaug"))
        .args(["-w", &w, "report"])
        .env("NERFAUG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
