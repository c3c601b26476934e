use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nerfaug::augment::{
    alpha_sweep, diversity_csv, diversity_report, generate_augmented_set, measure_diversity, merge_sets,
    write_contact_sheet, AppearanceStrategy, StrategyKind,
};
use nerfaug::dataset_io::{read_manifest, split, write_manifest, DatasetManifest};
use nerfaug::field::RadianceField;
use nerfaug::geometry::{sample_uniform_pose, Pose, UnitQuaternion, Vec3};
use nerfaug::probe::ab_experiment;
use nerfaug::renderer::{contact_sheet, render_image};
use nerfaug::rng::derive_seed;
use nerfaug::scene_synth::{build_reference_target, generate_domain_set_with_range, DomainProfile};
use nerfaug::trainer::{load_views, TrainFailure, TrainState, Trainer};
use nerfaug::Error;

use crate::config::{RunConfig, Stage};
use crate::error::CliError;
use crate::RenderArgs;

pub const SOURCE: &str = "source";
pub const TARGETS: [&str; 2] = ["diffuse-target", "direct-target"];

/// Fixed artifact layout. Manifests sit at the top level so every image
/// path inside them is relative to the workspace.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        let root = cfg
            .workspace
            .clone()
            .ok_or_else(|| CliError::Config("no workspace given (--workspace or `workspace` in the config)".into()))?;
        if !root.is_dir() {
            fs::create_dir(&root).map_err(|e| Error::io(&root, e))?;
        }
        Ok(Self { root })
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.json"))
    }

    pub fn nerf_dir(&self) -> PathBuf {
        self.root.join("nerf_train")
    }

    pub fn field(&self) -> PathBuf {
        self.nerf_dir().join("field.ckpt")
    }

    pub fn state(&self) -> PathBuf {
        self.nerf_dir().join("state.ckpt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.nerf_dir().join("train_log.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn ensure(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_field(ws: &Workspace) -> Result<RadianceField, CliError> {
    let path = ws.field();
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run nerf-train first", path.display())).into());
    }
    Ok(RadianceField::load(&path)?)
}

pub fn synth_gen(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let s = &cfg.synth;
    let scene = build_reference_target(s.scene_seed);
    let range = (s.distance_range[0], s.distance_range[1]);
    let sets = [
        (DomainProfile::source(), s.n_source, Stage::Source),
        (DomainProfile::diffuse_target(), s.n_target, Stage::DiffuseTarget),
        (DomainProfile::direct_target(), s.n_target, Stage::DirectTarget),
    ];
    for (profile, n, stage) in sets {
        let m = generate_domain_set_with_range(&scene, &profile, n, &s.intrinsics, cfg.stage_seed(stage), &ws.root, range)?;
        let path = ws.manifest(&profile.name);
        write_manifest(&m, &path)?;
        println!("{}: {} images -> {}", profile.name, m.len(), path.display());
    }
    Ok(())
}

fn save_last_good(ws: &Workspace, failure: &TrainFailure) -> String {
    match &failure.last_good {
        Some(field) => {
            let path = ws.nerf_dir().join("last_good.ckpt");
            match field.save(&path) {
                Ok(()) => format!("; last finite field saved to {}", path.display()),
                Err(e) => format!("; saving the last finite field failed: {e}"),
            }
        }
        None => String::new(),
    }
}

pub fn nerf_train(cfg: &RunConfig, ws: &Workspace, resume: bool) -> Result<(), CliError> {
    let source = read_manifest(&ws.manifest(SOURCE))?;
    let tc = &cfg.train;
    let (train_set, val_set) = split(&source, tc.val_fraction, tc.seed)?;
    ws.ensure(&ws.nerf_dir())?;
    let train_views = load_views(&train_set)?;
    let val_views = load_views(&val_set)?;
    let mut trainer = if resume {
        let state = TrainState::load(&ws.state())?;
        if state.iteration > tc.iterations {
            return Err(CliError::Config(format!(
                "saved state is at iteration {}, beyond the requested {}",
                state.iteration, tc.iterations
            )));
        }
        Trainer::resume(state, tc.clone(), source.intrinsics, train_views, val_views)?
    } else {
        Trainer::new(cfg.field.clone(), tc.clone(), source.intrinsics, train_views, val_views)?
    };
    println!(
        "training on {} views, validating on {}; initial val PSNR {:.2} dB",
        trainer.train_views.len(),
        trainer.val_views.len(),
        trainer.state.log.initial_val_psnr
    );
    while trainer.state.iteration < tc.iterations {
        let next = ((trainer.state.iteration / tc.eval_every + 1) * tc.eval_every).min(tc.iterations);
        if let Err(failure) = trainer.run_until(next) {
            let note = save_last_good(ws, &failure);
            eprintln!("nerfaug: training stopped{note}");
            return Err(failure.error.into());
        }
        trainer.state.save(&ws.state())?;
        if let Some(e) = trainer.state.log.entries.last() {
            println!("iteration {:>6}  loss {:.6}  val PSNR {:.2} dB", e.iteration, e.loss, e.val_psnr);
        }
    }
    let outcome = trainer.finish();
    outcome.field.save(&ws.field())?;
    write_text(&ws.train_log(), &outcome.log.to_csv())?;
    println!(
        "best val PSNR {:.2} dB at iteration {} -> {}",
        outcome.log.best_val_psnr(),
        outcome.state.best_iteration,
        ws.field().display()
    );
    Ok(())
}

fn parse_pose(v: &[f64]) -> Result<Pose, CliError> {
    if v.len() != 7 {
        return Err(CliError::Config(format!("--pose takes 7 values w,x,y,z,tx,ty,tz, got {}", v.len())));
    }
    let q = UnitQuaternion::new(v[0], v[1], v[2], v[3])?;
    Ok(Pose::new(q, Vec3::new(v[4], v[5], v[6])))
}

pub fn nerf_render(cfg: &RunConfig, ws: &Workspace, args: &RenderArgs) -> Result<(), CliError> {
    let field = load_field(ws)?;
    let intr = cfg.synth.intrinsics;
    let pose = if let Some(v) = &args.pose {
        parse_pose(v)?
    } else if let Some(i) = args.pose_index {
        let source = read_manifest(&ws.manifest(SOURCE))?;
        source
            .records
            .get(i)
            .ok_or_else(|| CliError::Config(format!("pose index {i} outside the source set of {}", source.len())))?
            .pose()?
    } else {
        let [lo, hi] = cfg.synth.distance_range;
        sample_uniform_pose(cfg.stage_seed(Stage::Render), lo, hi, &intr)?
    };
    let n = field.appearance.len();
    let (i, j) = match args.embeddings.as_deref() {
        Some([i, j]) => (*i, *j),
        Some(other) => {
            return Err(CliError::Config(format!("--embeddings takes 2 values i,j, got {}", other.len())));
        }
        None => (0, 1.min(n - 1)),
    };
    if i >= n || j >= n {
        return Err(CliError::Config(format!("embeddings ({i}, {j}) outside the table of {n}")));
    }
    let e_app = nerfaug::augment::blend(field.appearance.get(i), field.appearance.get(j), args.alpha);
    let sampling = cfg.augment.sampling;
    let seed = cfg.stage_seed(Stage::Render);
    let img = match args.texture_seed {
        Some(ts) => {
            let textured = field.perturb_color_weights(cfg.augment.texture_noise_std, ts)?;
            render_image(&textured, &pose, &intr, &e_app, &sampling, seed)
        }
        None => render_image(&field, &pose, &intr, &e_app, &sampling, seed),
    };
    let out = args.out.clone().unwrap_or_else(|| ws.root.join("render.png"));
    img.save_png(&out)?;
    println!("rendered embeddings ({i}, {j}) at α = {} -> {}", args.alpha, out.display());
    Ok(())
}

pub fn augment(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let field = load_field(ws)?;
    let source = read_manifest(&ws.manifest(SOURCE))?;
    let nerf = generate_augmented_set(&field, &cfg.augment, &source.intrinsics, &ws.root)?;
    write_manifest(&nerf, &ws.manifest("nerf"))?;
    let merged = merge_sets(&source, &nerf)?;
    write_manifest(&merged, &ws.manifest("train"))?;
    let sheet = ws.root.join("contact_sheet.png");
    write_contact_sheet(&nerf, &sheet, 32, 8)?;
    println!(
        "{} augmented images ({}) -> {}; merged set of {} -> {}",
        nerf.len(),
        cfg.augment.strategy.label(),
        ws.manifest("nerf").display(),
        merged.len(),
        ws.manifest("train").display()
    );
    Ok(())
}

pub fn probe_ab(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let source = read_manifest(&ws.manifest(SOURCE))?;
    let nerf = read_manifest(&ws.manifest("nerf"))?;
    let targets = TARGETS
        .iter()
        .map(|t| Ok((t.to_string(), read_manifest(&ws.manifest(t))?)))
        .collect::<Result<Vec<(String, DatasetManifest)>, CliError>>()?;
    let p = &cfg.probe;
    let report = ab_experiment(&source, &nerf, &targets, &p.model, &p.train, p.seeds)?;
    ws.ensure(&ws.reports())?;
    write_text(&ws.reports().join("probe_ab.csv"), &report.to_csv())?;
    write_text(&ws.reports().join("probe_runs.csv"), &report.runs_csv())?;
    let mut text = report.format_table();
    writeln!(
        text,
        "seeds where ours beats baseline on every target: {} of {}",
        report.seeds_improving_all_targets(),
        report.n_seeds
    )
    .unwrap();
    write_text(&ws.reports().join("probe_ab.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn train_summary(ws: &Workspace) -> Result<Option<String>, CliError> {
    let path = ws.train_log();
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut best: Option<(usize, f64)> = None;
    let mut last = 0;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (Some(it), Some(psnr)) = (cols.first().and_then(|c| c.parse().ok()), cols.get(2).and_then(|c| c.parse().ok()))
        else {
            return Err(Error::Data(format!("{}: malformed row `{line}`", path.display())).into());
        };
        last = it;
        if best.is_none_or(|(_, b)| psnr > b) {
            best = Some((it, psnr));
        }
    }
    Ok(Some(match best {
        Some((it, psnr)) => format!("{last} iterations, best val PSNR {psnr:.2} dB at iteration {it}\n"),
        None => "no validation entries\n".to_string(),
    }))
}

pub fn report(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    ws.ensure(&ws.reports())?;
    let mut text = String::from("== datasets ==\n");
    for name in [SOURCE, TARGETS[0], TARGETS[1], "nerf", "train"] {
        let path = ws.manifest(name);
        if path.exists() {
            let m = read_manifest(&path)?;
            let hist: Vec<String> = m.domain_histogram().iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(text, "{name:<15} {:>6} images  {}", m.len(), hist.join(" ")).unwrap();
        }
    }
    if let Some(s) = train_summary(ws)? {
        text.push_str("\n== radiance field ==\n");
        text.push_str(&s);
    }
    if ws.field().exists() {
        let field = load_field(ws)?;
        let intr = cfg.synth.intrinsics;
        let [lo, hi] = cfg.synth.distance_range;
        let seed = cfg.stage_seed(Stage::Report);
        let r = &cfg.report;
        let poses = (0..r.diversity_poses)
            .map(|k| sample_uniform_pose(derive_seed(seed, &[k as u64]), lo, hi, &intr))
            .collect::<Result<Vec<_>, _>>()?;
        let extrap = if cfg.augment.strategy.variant == StrategyKind::Extrapolation {
            cfg.augment.strategy
        } else {
            AppearanceStrategy::default()
        };
        let sampling = cfg.augment.sampling;
        let rows = [AppearanceStrategy::random_pick(), AppearanceStrategy::interpolation(), extrap]
            .iter()
            .map(|s| measure_diversity(&field, s, &poses, r.diversity_draws, &intr, &sampling, seed))
            .collect::<Result<Vec<_>, _>>()?;
        write_text(&ws.reports().join("diversity.csv"), &diversity_csv(&rows))?;
        writeln!(text, "\n== appearance diversity ({} poses, {} draws) ==", r.diversity_poses, r.diversity_draws).unwrap();
        for row in &rows {
            writeln!(text, "{:<28} mean per-pixel variance {:.6e}", row.strategy, row.mean_variance).unwrap();
        }
        let j = 1.min(field.appearance.len() - 1);
        let strip = alpha_sweep(&field, &poses[0], &intr, (0, j), &r.sweep_alphas, &sampling, seed)?;
        if let Some(sheet) = contact_sheet(&strip, strip.len()) {
            sheet.save_png(&ws.reports().join("alpha_sweep.png"))?;
        }
        writeln!(text, "alpha sweep over {:?} -> reports/alpha_sweep.png", r.sweep_alphas).unwrap();
    }
    let nerf_path = ws.manifest("nerf");
    if nerf_path.exists() {
        let nerf = read_manifest(&nerf_path)?;
        let d = diversity_report(&nerf)?;
        writeln!(
            text,
            "augmented set: {} poses with siblings, mean per-pixel variance {:.6e}",
            d.poses, d.mean_variance
        )
        .unwrap();
        write_contact_sheet(&nerf, &ws.reports().join("augmented_sheet.png"), 32, 8)?;
    }
    let probe = ws.reports().join("probe_ab.txt");
    if probe.exists() {
        text.push_str("\n== probe comparison ==\n");
        text.push_str(&fs::read_to_string(&probe).map_err(|e| Error::io(&probe, e))?);
    }
    write_text(&ws.reports().join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
