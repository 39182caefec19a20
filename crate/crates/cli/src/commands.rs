use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dapa_core::body::{build_template, export_obj, forward_kinematics, lbs, BodyPose, BodyShape, GlobalOrient, KinematicTree, MeshTemplate, SHAPE_DIM};
use dapa_core::datagen::{load_dataset, load_keypoint_json, save_dataset, sample_domain, Dataset, Domain, DomainSpec};
use dapa_core::metrics::{default_groups, pck_curve, svg_plot, PckTable};
use dapa_core::pose_prior::{norm, train_prior, PriorConfig, PriorParams};
use dapa_core::regressor::{init_mean_params, RegressorParams};
use dapa_core::rng;
use dapa_core::trainer::{
    self, adapt, evaluate_predictions, log_csv, predict, pretrain, quick_mpjpe, AdaptContext, AdaptMode, Checkpoint,
    TrainState,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{kebab, RunConfig};
use crate::error::{require, CliError};

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_TRAIN_FILE: &str = "target_train.jsonl";
pub const TARGET_TEST_FILE: &str = "target_test.jsonl";
pub const PRIOR_FILE: &str = "prior.ckpt";
pub const REGRESSOR_FILE: &str = "regressor.ckpt";
pub const CONFIG_ECHO: &str = "config.json";

/// Everything a command needs besides the config.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub out: Option<PathBuf>,
    pub force: bool,
    pub resume: bool,
    /// Whether `--mode` was given; selects the adapted checkpoint over the
    /// pretrained one for eval-style commands.
    pub mode_given: bool,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub sample: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub provenance: bool,
}

type Result<T> = std::result::Result<T, CliError>;

fn world_tree(cfg: &RunConfig) -> Result<(Arc<KinematicTree>, MeshTemplate)> {
    let tree = Arc::new(KinematicTree::default_17());
    let template = build_template(&tree, cfg.template.rings_per_bone, cfg.template.ring_vertices)
        .map_err(|e| CliError::Config(format!("template: {e}")))?;
    Ok((tree, template))
}

/// Creates `dir`, refusing to reuse a nonempty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Config(format!(
            "output directory {} already exists (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::other(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(CONFIG_ECHO), cfg.to_pretty_json() + "\n")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(v).map_err(CliError::other)? + "\n")
}

fn load_data(path: &Path, tree: &KinematicTree, producer: &'static str) -> Result<Dataset> {
    require(path, producer)?;
    let ds = if path.extension().is_some_and(|e| e == "json") {
        load_keypoint_json(path, tree)?
    } else {
        load_dataset(path)?
    };
    if let Some(s) = ds.samples.iter().find(|s| s.keypoints.len() != tree.num_joints()) {
        return Err(CliError::Config(format!(
            "{}: sample {} has {} keypoints, the body model has {}",
            path.display(),
            s.id,
            s.keypoints.len(),
            tree.num_joints()
        )));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path, tree: &KinematicTree, producer: &'static str) -> Result<Checkpoint> {
    require(path, producer)?;
    let c = Checkpoint::load(path)?;
    if c.tree_fingerprint != tree.fingerprint() {
        return Err(CliError::Config(format!(
            "{} was written for a different body model",
            path.display()
        )));
    }
    Ok(c)
}

fn load_prior(cfg: &RunConfig, tree: &KinematicTree) -> Result<(PriorParams, String)> {
    let path = cfg.paths.prior.join(PRIOR_FILE);
    let c = load_checkpoint(&path, tree, "train-prior")?;
    let r = format!("{}:{}", path.display(), c.fingerprint()?);
    Ok((c.into_prior()?, r))
}

fn load_regressor(path: &Path, tree: &KinematicTree, producer: &'static str) -> Result<TrainState> {
    let c = load_checkpoint(path, tree, producer)?;
    Ok(TrainState::from_checkpoint(&c)?)
}

/// Checkpoint an eval-style command reads: explicit, adapted, or pretrained.
fn chosen_checkpoint(cfg: &RunConfig, inv: &Invocation) -> (PathBuf, &'static str) {
    match (&inv.checkpoint, inv.mode_given) {
        (Some(p), _) => (p.clone(), "pretrain"),
        (None, true) => (cfg.paths.adapt_dir(cfg.adapt.mode).join(REGRESSOR_FILE), "adapt"),
        (None, false) => (cfg.paths.pretrain.join(REGRESSOR_FILE), "pretrain"),
    }
}

fn chosen_dataset(cfg: &RunConfig, inv: &Invocation) -> PathBuf {
    inv.dataset.clone().unwrap_or_else(|| cfg.paths.data.join(TARGET_TEST_FILE))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn check_domain(spec: &DomainSpec, want: Domain, field: &str) -> Result<()> {
    if spec.domain != want {
        return Err(CliError::Config(format!("world.{field}.domain must be {want:?}")));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let out = inv.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let w = &cfg.world;
    check_domain(&w.source, Domain::Source, "source")?;
    check_domain(&w.target_train, Domain::Target, "target_train")?;
    check_domain(&w.target_test, Domain::Target, "target_test")?;
    let (tree, template) = world_tree(cfg)?;
    prepare_out(&out, inv.force)?;
    let mut manifest = Vec::new();
    for (spec, file) in [(&w.source, SOURCE_FILE), (&w.target_train, TARGET_TRAIN_FILE), (&w.target_test, TARGET_TEST_FILE)] {
        let ds = sample_domain(spec, &tree, &template)?;
        save_dataset(&out.join(file), &ds)?;
        eprintln!("wrote {} samples to {}", ds.len(), out.join(file).display());
        manifest.push(json!({"file": file, "name": ds.name, "count": ds.len(), "fingerprint": ds.fingerprint}));
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    echo_config(&out, cfg)
}

pub fn train_prior_cmd(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let out = inv.out.clone().unwrap_or_else(|| cfg.paths.prior.clone());
    let (tree, _) = world_tree(cfg)?;
    let corpus = cfg.world.corpus.generate(&tree)?;
    prepare_out(&out, inv.force)?;
    echo_config(&out, cfg)?;
    eprintln!("training prior on {} poses for {} steps", corpus.poses.len(), cfg.prior.steps);
    let (prior, log) = train_prior(&corpus.poses, &cfg.prior)?;
    let mut csv = String::from("step,loss,recon,kl\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.recon, r.kl));
    }
    write(&out.join("log.csv"), csv)?;
    let ckpt = Checkpoint::for_prior(
        prior,
        tree.fingerprint(),
        cfg.prior.seed,
        cfg.prior.steps,
        serde_json::to_value(&cfg.prior).map_err(CliError::other)?,
    );
    ckpt.save(&out.join(PRIOR_FILE))?;
    if let Some(last) = log.last() {
        println!("prior: step {} loss {:.5} recon {:.5} kl {:.4}", last.step, last.loss, last.recon, last.kl);
    }
    Ok(())
}

fn progress(phase: &str, total: usize) -> impl FnMut(&trainer::LogRow) {
    let every = (total / 10).max(1);
    let phase = phase.to_string();
    move |row| {
        if (row.step + 1) % every == 0 || row.step + 1 == total {
            let eval = row.eval_mpjpe.map(|m| format!(" eval_mpjpe {m:.1}")).unwrap_or_default();
            eprintln!("{phase} step {}/{total} loss {:.5}{eval}", row.step + 1, row.loss.total);
        }
    }
}

pub fn pretrain_cmd(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let out = inv.out.clone().unwrap_or_else(|| cfg.paths.pretrain.clone());
    let (tree, _) = world_tree(cfg)?;
    let source = load_data(&cfg.paths.data.join(SOURCE_FILE), &tree, "gen-data")?;
    let resume_from = out.join(REGRESSOR_FILE);
    let mut state = if inv.resume {
        load_regressor(&resume_from, &tree, "pretrain")?
    } else {
        prepare_out(&out, inv.force)?;
        let mean = init_mean_params(&source)?;
        let reg = RegressorParams::init(&cfg.regressor, &tree, mean, &mut rng::stream(cfg.pretrain.seed, 0))?;
        TrainState::new(reg, cfg.pretrain.lr)
    };
    echo_config(&out, cfg)?;
    let mut on_step = progress("pretrain", cfg.pretrain.steps);
    let log = pretrain(&mut state, &tree, &source, &cfg.pretrain, &mut on_step)?;
    append_log(&out.join("log.csv"), &log, inv.resume)?;
    state.to_checkpoint(&tree, &cfg.pretrain, None).save(&resume_from)?;
    let m = quick_mpjpe(&state.regressor, &tree, &source, cfg.pretrain.eval_samples)?;
    write_json(&out.join("summary.json"), &json!({"step": state.step, "source_mpjpe_mm": m}))?;
    println!("pretrain: step {} source MPJPE {m:.1} mm", state.step);
    Ok(())
}

/// Writes the log, extending an existing one when resuming.
fn append_log(path: &Path, rows: &[trainer::LogRow], resume: bool) -> Result<()> {
    if resume && path.exists() {
        let mut f = fs::OpenOptions::new().append(true).open(path)?;
        for r in rows {
            writeln!(f, "{}", r.csv())?;
        }
        Ok(())
    } else {
        write(path, log_csv(rows))
    }
}

pub fn adapt_cmd(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let mode = cfg.adapt.mode;
    let out = inv.out.clone().unwrap_or_else(|| cfg.paths.adapt_dir(mode));
    let (tree, template) = world_tree(cfg)?;
    let (prior, prior_ref) = if mode.augment_mode().is_some() {
        let (p, r) = load_prior(cfg, &tree)?;
        (p, Some(r))
    } else {
        // Never sampled in this mode; only fills the context.
        let tiny = PriorConfig {
            hidden: vec![1],
            latent_dim: 1,
            ..PriorConfig::default()
        };
        (PriorParams::init(&tiny, tree.pose_dim(), &mut rng::stream(0, 0)), None)
    };
    let target = load_data(&cfg.paths.data.join(TARGET_TRAIN_FILE), &tree, "gen-data")?;
    let test = load_data(&cfg.paths.data.join(TARGET_TEST_FILE), &tree, "gen-data")?;
    let resume_from = out.join(REGRESSOR_FILE);
    let mut state = if inv.resume {
        load_regressor(&resume_from, &tree, "adapt")?
    } else {
        let start = load_regressor(&cfg.paths.pretrain.join(REGRESSOR_FILE), &tree, "pretrain")?;
        prepare_out(&out, inv.force)?;
        start.restart(cfg.adapt.lr)
    };
    echo_config(&out, cfg)?;
    let weak = target.weak_view();
    let ctx = AdaptContext {
        tree: &tree,
        template: Some(&template),
        prior: &prior,
        target: &weak,
        eval: Some(&test),
    };
    let mut prov = if inv.provenance {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(inv.resume)
            .write(true)
            .truncate(!inv.resume)
            .open(out.join("provenance.jsonl"))?;
        Some(BufWriter::new(f))
    } else {
        None
    };
    let mut io_err = None;
    let mut report = progress(&format!("adapt[{}]", kebab(mode)), cfg.adapt.steps);
    let log = adapt(&mut state, &ctx, &cfg.adapt, &mut |o: &trainer::StepOutcome| {
        report(&o.row);
        if let Some(w) = prov.as_mut() {
            for r in &o.provenance {
                let line = serde_json::to_string(r).expect("record serializes");
                if let Err(e) = writeln!(w, "{line}") {
                    io_err.get_or_insert(e);
                }
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = prov {
        w.flush()?;
    }
    append_log(&out.join("log.csv"), &log, inv.resume)?;
    state.to_checkpoint(&tree, &cfg.adapt, prior_ref).save(&resume_from)?;
    let m = quick_mpjpe(&state.regressor, &tree, &test, cfg.adapt.eval_samples)?;
    write_json(
        &out.join("summary.json"),
        &json!({"mode": kebab(mode), "step": state.step, "target_test_mpjpe_mm": m}),
    )?;
    println!("adapt[{}]: step {} target MPJPE {m:.1} mm", kebab(mode), state.step);
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let (tree, template) = world_tree(cfg)?;
    let (ckpt, producer) = chosen_checkpoint(cfg, inv);
    let data = chosen_dataset(cfg, inv);
    let state = load_regressor(&ckpt, &tree, producer)?;
    let ds = load_data(&data, &tree, "gen-data")?;
    if ds.samples.iter().all(|s| s.eval_labels().is_none()) {
        return Err(CliError::Config(format!("{} has no ground truth to evaluate against", data.display())));
    }
    let out = inv.out.clone().unwrap_or_else(|| parent(&ckpt).join(format!("eval-{}", stem(&data))));
    prepare_out(&out, inv.force)?;
    echo_config(&out, cfg)?;
    let preds = predict(&state.regressor, &ds)?;
    let (report, per, acc) = evaluate_predictions(&preds, &ds, &tree, &template, &cfg.eval.alphas)?;
    let table = pck_curve(acc.pck_inputs(), &cfg.eval.alphas, &default_groups(&tree)).map_err(CliError::other)?;
    write_json(&out.join("metrics.json"), &report)?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    let mut csv = String::from("id,mpjpe_mm,pck_0.2\n");
    for s in &per {
        csv.push_str(&format!("{},{},{}\n", s.id, s.mpjpe, s.pck_02.map(|v| v.to_string()).unwrap_or_default()));
    }
    write(&out.join("per_sample.csv"), csv)?;
    write_json(&out.join("pck.json"), &table)?;
    write(&out.join("pck.csv"), table.to_csv())?;
    write(&out.join("pck.svg"), table.to_svg(&format!("PCK, {}", stem(&data))))?;
    let pck02 = report.pck_at(0.2).map(|v| format!(" PCK@0.2 {v:.3}")).unwrap_or_default();
    println!(
        "eval: {} samples MPJPE {:.1} mm PA-MPJPE {:.1} mm{pck02}",
        report.count, report.mpjpe, report.pa_mpjpe
    );
    Ok(())
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Series name for an eval directory: its run directory's name.
fn series_label(dir: &Path) -> String {
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match dir.parent().and_then(|p| p.file_name()) {
        Some(run) if name.starts_with("eval") => run.to_string_lossy().into_owned(),
        _ => name,
    }
}

pub fn plot_pck(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    if inv.inputs.is_empty() {
        return Err(CliError::Config("plot-pck needs at least one --input eval directory".into()));
    }
    let mut tables = Vec::new();
    for dir in &inv.inputs {
        let path = dir.join("pck.json");
        require(&path, "eval")?;
        let text = fs::read_to_string(&path)?;
        let t: PckTable = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        tables.push((series_label(dir), t));
    }
    let alphas = tables[0].1.alphas.clone();
    if let Some((name, _)) = tables.iter().find(|(_, t)| t.alphas != alphas) {
        return Err(CliError::Config(format!("{name} was evaluated at different thresholds")));
    }
    let out = inv.out.clone().unwrap_or_else(|| PathBuf::from("runs/pck"));
    prepare_out(&out, inv.force)?;
    echo_config(&out, cfg)?;
    let series: Vec<(&str, &[f64])> = tables.iter().map(|(n, t)| (n.as_str(), t.overall.as_slice())).collect();
    write(&out.join("pck.svg"), svg_plot("PCK", "alpha (x torso length)", "PCK", &alphas, &series))?;
    let mut csv = String::from("alpha");
    for (n, _) in &tables {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for (i, a) in alphas.iter().enumerate() {
        csv.push_str(&a.to_string());
        for (_, t) in &tables {
            csv.push_str(&format!(",{}", t.overall[i]));
        }
        csv.push('\n');
    }
    write(&out.join("pck.csv"), csv)?;
    println!("plot-pck: {} series at {} thresholds", tables.len(), alphas.len());
    Ok(())
}

pub fn export_mesh(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let (tree, template) = world_tree(cfg)?;
    let (name, orient, pose, shape) = match &inv.sample {
        None => ("rest".to_string(), GlobalOrient([0.0; 3]), BodyPose::zeros(&tree), BodyShape([0.0; SHAPE_DIM])),
        Some(id) => {
            let (ckpt, producer) = chosen_checkpoint(cfg, inv);
            let state = load_regressor(&ckpt, &tree, producer)?;
            let data = chosen_dataset(cfg, inv);
            let mut ds = load_data(&data, &tree, "gen-data")?;
            ds.samples.retain(|s| &s.id == id);
            if ds.samples.is_empty() {
                return Err(CliError::Config(format!("no sample {id:?} in {}", data.display())));
            }
            let p = predict(&state.regressor, &ds)?.remove(0);
            (id.clone(), p.orient, p.pose, p.shape)
        }
    };
    let out = inv.out.clone().unwrap_or_else(|| PathBuf::from("runs/mesh"));
    fs::create_dir_all(&out)?;
    let path = out.join(format!("{name}.obj"));
    if path.exists() && !inv.force {
        return Err(CliError::Config(format!("{} exists (pass --force to overwrite)", path.display())));
    }
    let state = forward_kinematics(&tree, &pose, &orient, &shape, [0.0; 3]).map_err(CliError::other)?;
    let verts = lbs(&template, &state);
    let f = fs::File::create(&path)?;
    export_obj(BufWriter::new(f), &verts, &template.faces).map_err(CliError::other)?;
    println!("export-mesh: {} vertices, {} faces -> {}", verts.len(), template.faces.len(), path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LatentSummary {
    count: usize,
    mean: f64,
    median: f64,
}

pub fn latent_diag(cfg: &RunConfig, inv: &Invocation) -> Result<()> {
    let (tree, _) = world_tree(cfg)?;
    let (ckpt, producer) = chosen_checkpoint(cfg, inv);
    let state = load_regressor(&ckpt, &tree, producer)?;
    let (prior, _) = load_prior(cfg, &tree)?;
    let data = chosen_dataset(cfg, inv);
    let ds = load_data(&data, &tree, "gen-data")?;
    let out = inv.out.clone().unwrap_or_else(|| parent(&ckpt).join(format!("latent-{}", stem(&data))));
    prepare_out(&out, inv.force)?;
    echo_config(&out, cfg)?;
    let preds = predict(&state.regressor, &ds)?;
    let poses: Vec<BodyPose> = preds.into_iter().map(|p| p.pose).collect();
    let posts = prior.encode_batch(&poses)?;
    let norms: Vec<f64> = posts.iter().map(|p| norm(&p.mu)).collect();
    let mut csv = String::from("id,cluster,mu_norm\n");
    for (s, n) in ds.samples.iter().zip(&norms) {
        let c = s.cluster.map(|c| c.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{c},{n}\n", s.id));
    }
    write(&out.join("latent.csv"), csv)?;
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let summary = LatentSummary {
        count: n,
        mean: norms.iter().sum::<f64>() / n.max(1) as f64,
        median,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("latent-diag: {} samples mean |mu| {:.3} median {:.3}", n, summary.mean, summary.median);
    Ok(())
}

/// `AdaptMode` from a kebab or snake name.
pub fn parse_mode(s: &str) -> std::result::Result<AdaptMode, String> {
    AdaptMode::parse(s).ok_or_else(|| {
        let names: Vec<String> = AdaptMode::ALL.iter().map(|m| kebab(*m)).collect();
        format!("unknown mode {s:?} (expected one of {})", names.join(", "))
    })
}
