use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mpgan::checkpoint::Checkpoint;
use mpgan::datagen::{self, SilhouetteDataset};
use mpgan::eval::{self, FeatureExtractor};
use mpgan::gan::{ModelBundle, StepMetrics};
use mpgan::joint::JointRun;
use mpgan::nets::NetConfig;
use mpgan::projection::{silhouette_from_grid, Viewpoint};
use mpgan::viewpoint::{
    assign_slots, classifier_checkpoint, classifier_from_checkpoint, cluster_views, oracle_assignment,
    single_slot, synthesize_view_pairs, train_view_classifier, ClusterAssignment, NUM_BINS,
};
use mpgan::{rng, Error};
use serde_json::json;

use crate::config::{Mode, RunConfig};
use crate::error::{usage, CliResult};
use crate::{mesh, plot, DatasetArgs, EvalArgs, ExtractorArgs, Format, GenerateArgs, Metric, TrainArgs};

const EXTRACTOR_VERSION: u32 = 1;

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.is_file() {
        return Err(usage(format!("{} is a file", dir.display())));
    }
    if is_nonempty_dir(dir) {
        if !force {
            return Err(usage(format!("{} is not empty; pass --force to replace it", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn fresh_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite it", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn init_threads(n: Option<usize>) {
    if let Some(n) = n.filter(|&n| n > 0) {
        // Fails only if a pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn dataset(a: DatasetArgs, threads: Option<usize>) -> CliResult<()> {
    let mut overrides = a.cfg.overrides.clone();
    for (key, v) in [("seed", a.seed.map(|v| v.to_string())), ("resolution", a.resolution.map(|v| v.to_string()))]
        .into_iter()
        .chain([("shapes", a.shapes.map(|v| v.to_string())), ("views_per_shape", a.views.map(|v| v.to_string()))])
    {
        if let Some(v) = v {
            overrides.push(format!("dataset.{key}={v}"));
        }
    }
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &overrides)?;
    init_threads(threads.or(cfg.train.threads));
    fresh_dir(&a.out, a.force)?;
    if let Some(src) = &a.import {
        let data = datagen::import_silhouette_folder(src, cfg.dataset.resolution)?;
        datagen::write_dataset(&a.out, None, &data, None)?;
        println!("imported {} masks ({0}x{0}) into {}", data.size(), a.out.display());
        return Ok(());
    }
    let spec = cfg.dataset.spec();
    let built = datagen::build_dataset(&spec)?;
    datagen::write_dataset(&a.out, Some(&spec), &built.training, Some(&built.oracle))?;
    let hist = built.oracle.histogram()?;
    println!(
        "wrote {} images ({} shapes x {} views, {}x{}) to {}",
        built.training.len(),
        spec.shapes,
        spec.views_per_shape,
        spec.resolution,
        spec.resolution,
        a.out.display()
    );
    println!("bin histogram: {:?}", hist.weights().iter().map(|w| (w * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn config(&self) -> PathBuf {
        self.dir.join("run.toml")
    }
    fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    fn step_ckpt(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_step{step:06}.mpg"))
    }
    fn bootstrap_ckpt(&self) -> PathBuf {
        self.dir.join("ckpt_bootstrap.mpg")
    }
    fn joint_ckpt(&self, n: usize) -> PathBuf {
        self.dir.join(format!("ckpt_joint{n}.mpg"))
    }
    fn clusters(&self, n: usize) -> PathBuf {
        self.dir.join(format!("clusters_joint{n}.json"))
    }
    fn classifier(&self, n: usize) -> PathBuf {
        self.dir.join(format!("classifier_joint{n}.mpg"))
    }

    /// Highest-numbered file matching `prefix{number}.mpg`.
    fn latest(&self, prefix: &str) -> Option<(u64, PathBuf)> {
        fs::read_dir(&self.dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let num = name.strip_prefix(prefix)?.strip_suffix(".mpg")?.parse().ok()?;
                Some((num, e.path()))
            })
            .max_by_key(|(n, _)| *n)
    }
}

/// Keeps the metric lines with `step <= last` (drops work lost to an interrupt).
fn truncate_metrics(path: &Path, last: u64) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("metrics: {e}")))?;
        if m.step <= last {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn read_metrics(path: &Path) -> CliResult<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        out.push(serde_json::from_str(&line?)?);
    }
    Ok(out)
}

fn loss_plot(metrics: &[StepMetrics]) -> String {
    let heads = metrics.iter().map(|m| m.d_loss.len()).max().unwrap_or(0);
    let stride = (metrics.len() / 2000).max(1);
    let mut series: Vec<(String, Vec<(f64, f64)>)> = (0..heads)
        .map(|h| {
            let pts = metrics
                .iter()
                .step_by(stride)
                .filter_map(|m| m.d_loss.get(h).map(|&d| (m.step as f64, d)))
                .collect();
            (format!("d_loss[{h}]"), pts)
        })
        .collect();
    series.push(("g_loss".into(), metrics.iter().step_by(stride).map(|m| (m.step as f64, m.g_loss)).collect()));
    plot::line_chart("training losses", &series)
}

pub fn train(a: TrainArgs, threads: Option<usize>) -> CliResult<()> {
    let files = RunFiles { dir: a.out.clone() };
    let mut overrides = a.cfg.overrides.clone();
    if let Some(m) = a.mode {
        let name = match m {
            Mode::Single => "single",
            Mode::MpGanOracle => "mp-gan-oracle",
            Mode::VpMpGan => "vp-mp-gan",
        };
        overrides.push(format!("train.mode=\"{name}\""));
    }
    if let Some(k) = a.heads {
        overrides.push(format!("model.heads={k}"));
    }
    if let Some(s) = a.steps {
        overrides.push(format!("train.steps={s}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("train.seed={s}"));
    }

    let cfg = if a.resume {
        let saved = files.config();
        if !saved.exists() {
            return Err(usage(format!("nothing to resume in {}", a.out.display())));
        }
        if a.cfg.config.is_some() {
            return Err(usage("--resume uses the run's saved configuration; drop --config"));
        }
        RunConfig::load(Some(&saved), &overrides)?
    } else {
        let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &overrides)?;
        if cfg.train.mode == Mode::Single {
            cfg.model.heads = 1;
        }
        fresh_dir(&a.out, a.force)?;
        fs::write(files.config(), cfg.to_toml())?;
        cfg
    };
    init_threads(threads.or(cfg.train.threads));

    let data = Arc::new(datagen::load_training_set(&a.data)?);
    if data.size() != cfg.model.resolution {
        return Err(usage(format!(
            "dataset images are {0}x{0} but model.resolution is {1}",
            data.size(),
            cfg.model.resolution
        )));
    }

    let result = match cfg.train.mode {
        Mode::Single | Mode::MpGanOracle => train_fixed_slots(&cfg, &a, &files, data),
        Mode::VpMpGan => train_joint(&cfg, &a, &files, data),
    };
    if files.metrics().exists() {
        let metrics = read_metrics(&files.metrics())?;
        if !metrics.is_empty() {
            fs::write(files.dir.join("losses.svg"), loss_plot(&metrics))?;
        }
    }
    result
}

fn open_log(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?))
}

fn train_fixed_slots(cfg: &RunConfig, a: &TrainArgs, files: &RunFiles, data: Arc<SilhouetteDataset>) -> CliResult<()> {
    let slots = match cfg.train.mode {
        Mode::Single => single_slot(Arc::clone(&data)),
        _ => {
            let oracle = datagen::load_oracle(&a.data)?;
            if oracle.records.len() != data.len() {
                return Err(Error::Malformed("oracle labels do not match the dataset".into()).into());
            }
            assign_slots(&oracle_assignment(&oracle.bins(), cfg.model.heads)?, Arc::clone(&data))?
        }
    };
    let mut bundle = match (a.resume, files.latest("ckpt_step")) {
        (true, Some((_, path))) => {
            let (b, _) = ModelBundle::load(&path)?;
            if b.net != cfg.model {
                return Err(Error::Malformed("checkpoint model does not match run.toml".into()).into());
            }
            b
        }
        _ => ModelBundle::new(cfg.model.clone(), cfg.train.train_config(), cfg.train.seed)?,
    };
    truncate_metrics(&files.metrics(), bundle.step)?;
    let mode = json!({ "mode": cfg.train.mode });
    let mut log = open_log(&files.metrics())?;
    while bundle.step < cfg.train.steps {
        let next = ((bundle.step / cfg.train.checkpoint_every) + 1) * cfg.train.checkpoint_every;
        let chunk = next.min(cfg.train.steps) - bundle.step;
        bundle.train(&slots, chunk, Some(&mut log), |_| {})?;
        log.flush()?;
        bundle.save(files.step_ckpt(bundle.step), mode.clone())?;
        let last = bundle.step;
        println!("step {last}: checkpoint {}", files.step_ckpt(last).display());
    }
    Ok(())
}

fn train_joint(cfg: &RunConfig, a: &TrainArgs, files: &RunFiles, data: Arc<SilhouetteDataset>) -> CliResult<()> {
    let mut run =
        JointRun::new(cfg.model.clone(), cfg.train.train_config(), cfg.joint.clone(), Arc::clone(&data), cfg.train.seed)?;
    // Oracle labels, when the dataset has them, only score the reports.
    if a.data.join("oracle.json").exists() {
        let bins = datagen::load_oracle(&a.data)?.bins();
        if bins.len() == data.len() {
            run.probes.oracle_bins = Some(bins);
        }
    }
    if a.resume {
        let resume_from = files
            .latest("ckpt_joint")
            .map(|(n, p)| (n as usize, p))
            .or_else(|| files.bootstrap_ckpt().exists().then(|| (0, files.bootstrap_ckpt())));
        if let Some((n, path)) = resume_from {
            let (bundle, _) = ModelBundle::load(&path)?;
            if bundle.net != cfg.model {
                return Err(Error::Malformed("checkpoint model does not match run.toml".into()).into());
            }
            run.bundle = bundle;
            run.bootstrapped = true;
            run.iteration = n;
            if n > 0 {
                run.assignment = Some(ClusterAssignment::load(&files.clusters(n))?);
            }
        }
    }
    truncate_metrics(&files.metrics(), if run.bootstrapped { run.bundle.step } else { 0 })?;
    let mut log = open_log(&files.metrics())?;
    if !run.bootstrapped {
        run.bootstrap(Some(&mut log), |_| {})?;
        log.flush()?;
        run.bundle.save(files.bootstrap_ckpt(), run.extra())?;
        println!("bootstrap done at step {}", run.bundle.step);
    }
    let mut reports = Vec::new();
    while run.iteration < cfg.joint.iterations {
        let rep = run.iterate(Some(&mut log), |_| {})?;
        log.flush()?;
        let n = run.iteration;
        run.bundle.save(files.joint_ckpt(n), run.extra())?;
        if let Some(asg) = &run.assignment {
            asg.save(&files.clusters(n))?;
        }
        if let Some(clf) = run.classifier.as_mut() {
            classifier_checkpoint(clf, &cfg.model).save(files.classifier(n))?;
        }
        match rep.view_accuracy {
            Some(acc) => println!(
                "joint iteration {n}: cluster sizes {:?}, view accuracy {:.3} ({:.3} up to mirror)",
                rep.cluster_sizes, acc.exact, acc.up_to_mirror
            ),
            None => println!("joint iteration {n}: cluster sizes {:?}", rep.cluster_sizes),
        }
        reports.push(rep);
    }
    let report_path = files.dir.join("joint_report.json");
    let mut all: Vec<serde_json::Value> = if a.resume && report_path.exists() {
        serde_json::from_str(&fs::read_to_string(&report_path)?)?
    } else {
        Vec::new()
    };
    all.extend(reports.iter().map(|r| serde_json::to_value(r).expect("report serializes")));
    fs::write(report_path, serde_json::to_string_pretty(&all)?)?;
    Ok(())
}

fn load_generator(path: &Path) -> CliResult<ModelBundle> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(kind) = ckpt.manifest.extra.get("kind").and_then(|k| k.as_str()) {
        return Err(Error::Malformed(format!("{} holds a {kind}, not a generator", path.display())).into());
    }
    Ok(ModelBundle::from_checkpoint(&ckpt)?)
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage("--threshold must be in (0, 1)"));
    }
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let mut bundle = load_generator(&a.checkpoint)?;
    fresh_dir(&a.out, a.force)?;
    let grids = eval::sample_generator(&mut bundle.gen, a.count, &mut rng::seeded(a.seed))?;
    for (i, g) in grids.iter().enumerate() {
        match a.format {
            Format::Voxel => g.save(a.out.join(format!("sample_{i:04}.mpgvox")))?,
            Format::Mesh => fs::write(a.out.join(format!("sample_{i:04}.obj")), mesh::to_obj(&g.binarize(a.threshold)?, 0.5))?,
            Format::Silhouette => {
                for &deg in &a.azimuths {
                    let sil = silhouette_from_grid(g, Viewpoint::new(deg.to_radians())).threshold(a.threshold);
                    sil.save_pgm(a.out.join(format!("sample_{i:04}_az{:03}.pgm", deg.round() as i64)))?;
                }
            }
        }
    }
    println!("wrote {} samples to {}", grids.len(), a.out.display());
    Ok(())
}

fn emit_report(a: &EvalArgs, report: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report)?;
    match &a.out {
        Some(p) => {
            fresh_file(p, a.force)?;
            fs::write(p, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn write_plot(a: &EvalArgs, svg: String) -> CliResult<()> {
    if let Some(p) = &a.plot {
        fresh_file(p, a.force)?;
        fs::write(p, svg)?;
    }
    Ok(())
}

fn bin_labels() -> Vec<String> {
    (0..NUM_BINS).map(|b| b.to_string()).collect()
}

pub fn eval(a: EvalArgs, threads: Option<usize>) -> CliResult<()> {
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    init_threads(threads.or(cfg.train.threads));
    let report = match a.metric {
        Metric::Fid => eval_fid(&a, &cfg)?,
        Metric::ViewAcc => eval_view_acc(&a, &cfg)?,
        Metric::ViewDist => eval_view_dist(&a, &cfg)?,
    };
    emit_report(&a, &report)
}

fn eval_fid(a: &EvalArgs, cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let ex_path = a.extractor.as_ref().ok_or_else(|| usage("fid needs --extractor (see `mpgan extractor-train`)"))?;
    let ckpt = a.checkpoint.as_ref().ok_or_else(|| usage("fid needs a generator --checkpoint"))?;
    let extractor = FeatureExtractor::from_checkpoint(&Checkpoint::load(ex_path)?)?;
    let manifest = datagen::read_manifest(&a.data)?;
    let spec = manifest
        .spec
        .ok_or_else(|| Error::Config("fid needs a procedural dataset (its manifest has no generating spec)".into()))?;
    let reference = datagen::reference_shapes(&spec)?;
    if reference.len() < 2 * (eval::FEATURE_DIM + 1) {
        return Err(usage(format!(
            "fid needs at least {} reference shapes for the split-half baseline, the dataset has {}",
            2 * (eval::FEATURE_DIM + 1),
            reference.len()
        )));
    }
    let mut bundle = load_generator(ckpt)?;
    if bundle.net.resolution != extractor.resolution() || spec.resolution != extractor.resolution() {
        return Err(usage("generator, dataset and extractor resolutions differ"));
    }
    let fref = extractor.features(&reference)?;
    let half = fref.len() / 2;
    let floor = eval::fid(&fref[..half], &fref[half..])?;
    let fake = eval::sample_generator(&mut bundle.gen, cfg.eval.samples, &mut rng::seeded(a.seed))?;
    let value = eval::fid(&extractor.features(&fake)?, &fref)?;
    write_plot(
        a,
        plot::bar_chart("FID", &["split-half floor".into(), "generator".into()], &[("fid".into(), vec![floor, value])]),
    )?;
    Ok(json!({
        "metric": "fid",
        "value": value,
        "baseline_split_half": floor,
        "samples": cfg.eval.samples,
        "reference_shapes": reference.len(),
        "checkpoint_step": bundle.step,
    }))
}

/// A classifier from `--classifier`, or trained on renders of `--checkpoint`'s generator.
fn obtain_classifier(a: &EvalArgs, cfg: &RunConfig) -> CliResult<mpgan::nets::ViewClassifier> {
    if let Some(p) = &a.classifier {
        return Ok(classifier_from_checkpoint(&Checkpoint::load(p)?)?);
    }
    let ckpt = a.checkpoint.as_ref().ok_or_else(|| usage("view metrics need --classifier or --checkpoint"))?;
    let mut bundle = load_generator(ckpt)?;
    let mut r = rng::seeded(a.seed);
    let pairs = synthesize_view_pairs(&mut bundle.gen, cfg.joint.view_shapes, &mut r)?;
    let (clf, _) = train_view_classifier(&pairs, &bundle.net, &cfg.joint.classifier, &mut r)?;
    Ok(clf)
}

fn eval_view_acc(a: &EvalArgs, cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let oracle = datagen::load_oracle(&a.data)?;
    let data = datagen::load_training_set(&a.data)?;
    let mut clf = obtain_classifier(a, cfg)?;
    let acc = eval::view_accuracy(&mut clf, data.pixels(), &oracle.bins())?;
    write_plot(
        a,
        plot::bar_chart(
            "view accuracy",
            &["exact".into(), "up to mirror".into(), "chance".into()],
            &[("accuracy".into(), vec![acc.exact, acc.up_to_mirror, 1.0 / NUM_BINS as f64])],
        ),
    )?;
    Ok(json!({
        "metric": "view-acc",
        "exact": acc.exact,
        "up_to_mirror": acc.up_to_mirror,
        "chance": 1.0 / NUM_BINS as f64,
        "images": data.len(),
    }))
}

fn eval_view_dist(a: &EvalArgs, cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let oracle = datagen::load_oracle(&a.data)?;
    let assignment = match &a.clusters {
        Some(p) => ClusterAssignment::load(p)?,
        None => {
            let data = datagen::load_training_set(&a.data)?;
            let mut clf = obtain_classifier(a, cfg)?;
            let probs = clf.predict(data.pixels())?;
            cluster_views(&probs, cfg.model.heads, cfg.joint.soft_clusters, &mut rng::seeded(a.seed))?
        }
    };
    if assignment.labels.len() != oracle.records.len() {
        return Err(Error::Malformed("cluster assignment does not match the dataset".into()).into());
    }
    let tv = eval::view_distribution_error(&assignment, &oracle)?;
    let union = assignment.union_distribution()?;
    let truth = oracle.histogram()?;
    write_plot(
        a,
        plot::bar_chart(
            "view distribution",
            &bin_labels(),
            &[("learned".into(), union.weights().to_vec()), ("true".into(), truth.weights().to_vec())],
        ),
    )?;
    Ok(json!({
        "metric": "view-dist",
        "total_variation": tv,
        "learned": union.weights().to_vec(),
        "true": truth.weights().to_vec(),
        "clusters": assignment.clusters(),
    }))
}

pub fn extractor_train(a: ExtractorArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    NetConfig { resolution: a.resolution, ..NetConfig::default() }.validate().map_err(|e| usage(e.to_string()))?;
    fresh_file(&a.out, a.force)?;
    let (mut ex, acc) = FeatureExtractor::train(a.resolution, &cfg.eval.extractor, &mut rng::seeded(a.seed))?;
    let mut ckpt = ex.to_checkpoint();
    ckpt.manifest.seed = a.seed;
    ckpt.manifest.extra = json!({
        "kind": "extractor",
        "version": EXTRACTOR_VERSION,
        "held_out_accuracy": acc,
        "training": cfg.eval.extractor,
    });
    ckpt.save(&a.out)?;
    println!("extractor held-out family accuracy {acc:.3}; saved {}", a.out.display());
    Ok(())
}

