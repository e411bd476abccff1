//! Pipeline CLI: dataset generation, preprocessing, training, evaluation,
//! inverse-control inference, and surface-complexity analysis.
//!
//! Every command resolves its configuration, then writes a `run.json` into
//! the output directory recording the resolved parameters and SHA-256 hashes
//! of the produced artifacts — also on failure paths reached after
//! resolution. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use smnet::autodiff::AutodiffError;
use smnet::metrics::{
    build_error_map, chamfer_distance, complexity_from_cloud, distance_stddev,
    hausdorff_distance, surface_complexity, ErrorMap, HeightGrid, MapLayout, MetricsError,
    MetricsReport, SurfaceFaces, ERROR_MAP_RESOLUTION,
};
use smnet::model::{
    clamp_control, prepare_dataset, write_history_csv, ModelError, ModelKind, PreprocessParams,
    SMNet, SMNetConfig, TrainConfig,
};
use smnet::pointcloud::{
    center_and_normalize, random_downsample, read_cloud, remove_interior_points,
    voxel_average_downsample, write_pcd1, CloudError, PointCloud,
};
use smnet::sim::{
    generate_dataset, ActuatorLayout, DatasetManifest, Mechanism, SimError, Surrogate,
    SurrogateSpec, Topology,
};

// ---------------------------------------------------------------------------
// errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct CliError {
    code: i32,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.msg.fmt(f)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Config(_) => Self::usage(msg),
            ModelError::Diverged { .. } => Self::numeric(msg),
            ModelError::Autodiff(AutodiffError::NonFinite(_)) => Self::numeric(msg),
            ModelError::Autodiff(_) => Self::numeric(msg),
            ModelError::Metrics(m) => CliError::from(m),
            _ => Self::data(msg),
        }
    }
}

impl From<CloudError> for CliError {
    fn from(e: CloudError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) => Self::data(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// flags
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "smnet", about = "Inverse actuator control from deformed point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Thermal,
    Ionic,
    Pneumatic,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Plate,
    Cube,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Smnet,
    Kpconv,
    Pointnetpp,
}

impl AblationArg {
    fn kind(self) -> ModelKind {
        match self {
            AblationArg::Smnet => ModelKind::Smnet,
            AblationArg::Kpconv => ModelKind::KpconvOnly,
            AblationArg::Pointnetpp => ModelKind::PointnetOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FacesArg {
    Plate,
    Cube,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a surrogate dataset with a manifest
    Gen(GenArgs),
    /// Preprocess a dataset: interior removal, voxel averaging, downsample, normalize
    Preprocess(PreprocessArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics, per-dimension errors, error maps
    Eval(EvalArgs),
    /// Predict the control vector for a target cloud
    Infer(InferArgs),
    /// Surface complexity of a cloud or built-in analytic surface
    Complexity(ComplexityArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    mechanism: MechanismArg,
    #[arg(long, value_enum)]
    topology: TopologyArg,
    #[arg(long)]
    samples: u32,
    /// surface samples per face edge
    #[arg(long, default_value_t = 24)]
    density: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// dataset manifest to preprocess
    #[arg(long = "in")]
    input: PathBuf,
    /// target point count; defaults to the dataset minimum post-voxel count
    #[arg(long)]
    n_points: Option<usize>,
    /// voxel cell size for interior removal and averaging
    #[arg(long, default_value_t = 0.05)]
    cell: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset directory containing manifest.json
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, value_enum, default_value = "smnet")]
    model: AblationArg,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// override the preset's point count
    #[arg(long)]
    n_points: Option<usize>,
    /// optional interior-removal cell applied before downsampling
    #[arg(long)]
    interior_cell: Option<f64>,
    /// optional voxel-averaging cell applied before downsampling
    #[arg(long)]
    voxel_cell: Option<f64>,
    /// write a checkpoint every this many epochs (0 disables)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// training output directory (model.cfg + model.params)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "smnet")]
    ablation: AblationArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// training output directory (model.cfg + model.params)
    #[arg(long)]
    model: PathBuf,
    /// target cloud (XYZ/PLY/PCD1)
    #[arg(long)]
    target: PathBuf,
    /// replay the clamped prediction through the surrogate and compare
    #[arg(long)]
    replay: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComplexityArgs {
    /// cloud file, or a built-in surface: plane, dome, saddle, wavy:k
    #[arg(long = "in")]
    input: String,
    #[arg(long, default_value_t = 31)]
    grid: usize,
    #[arg(long, value_enum, default_value = "plate")]
    faces: FacesArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// run.json
// ---------------------------------------------------------------------------

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// SHA-256 of every regular file directly in `dir`, except run.json itself.
fn hash_outputs(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name == "run.json" || !entry.file_type()?.is_file() {
            continue;
        }
        out.insert(name, sha256_file(&entry.path())?);
    }
    Ok(out)
}

/// Writes run.json for a resolved command, recording success or failure.
fn write_run_json(
    out_dir: &Path,
    command: &str,
    resolved: serde_json::Value,
    result: &Result<()>,
) {
    let outputs = hash_outputs(out_dir).unwrap_or_default();
    let record = serde_json::json!({
        "command": command,
        "resolved": resolved,
        "status": if result.is_ok() { "ok" } else { "error" },
        "error": result.as_ref().err().map(|e| e.msg.clone()),
        "outputs": outputs,
    });
    let text = serde_json::to_string_pretty(&record).expect("serializable");
    let _ = std::fs::write(out_dir.join("run.json"), text);
}

/// Creates the output directory, runs the body, and writes run.json either
/// way.
fn with_run_json(
    out_dir: &Path,
    command: &str,
    resolved: serde_json::Value,
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let result = body();
    write_run_json(out_dir, command, resolved, &result);
    result
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mechanism = match args.mechanism {
        MechanismArg::Thermal => Mechanism::ThermalLike,
        MechanismArg::Ionic => Mechanism::IonicLike,
        MechanismArg::Pneumatic => Mechanism::PneumaticLike,
    };
    let layout = match (args.topology, mechanism) {
        (TopologyArg::Plate, _) => ActuatorLayout::plate36(),
        // the thermal analogue shares edge/corner cells (152 controls);
        // the others drive each face independently (216)
        (TopologyArg::Cube, Mechanism::ThermalLike) => ActuatorLayout::cube152(),
        (TopologyArg::Cube, _) => ActuatorLayout::cube216(),
    };
    let spec = SurrogateSpec::default_for(mechanism);
    let resolved = serde_json::json!({
        "mechanism": format!("{mechanism:?}"),
        "topology": format!("{:?}", layout.topology),
        "control_dim": layout.control_dim,
        "samples": args.samples,
        "density": args.density,
        "seed": args.seed,
    });
    with_run_json(&args.out, "gen", resolved, || {
        let manifest =
            generate_dataset(args.samples, &spec, &layout, args.density, args.seed, &args.out)?;
        println!("manifest: {}", args.out.join("manifest.json").display());
        println!("control_dim: {}", manifest.control_dim);
        println!("density: {}", manifest.density);
        println!("spec_hash: {}", manifest.spec_hash);
        println!("samples: {}", manifest.samples.len());
        Ok(())
    })
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.input)
        .map_err(|e| CliError::data(format!("{}: {e}", args.input.display())))?;
    let in_dir = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolved = serde_json::json!({
        "in": args.input.display().to_string(),
        "cell": args.cell,
        "n_points": args.n_points,
    });
    with_run_json(&args.out.clone(), "preprocess", resolved, || {
        // already-processed input with matching parameters: copy verbatim so
        // the command is idempotent bit-for-bit
        if let Some(done) = &manifest.preprocessing {
            let same_cell = done.get("interior_cell") == Some(&serde_json::json!(args.cell));
            let recorded_n = done.get("n_points").and_then(|v| v.as_u64()).map(|v| v as usize);
            let same_n = match args.n_points {
                Some(n) => recorded_n == Some(n),
                None => recorded_n.is_some(),
            };
            if same_cell && same_n {
                for s in &manifest.samples {
                    std::fs::copy(in_dir.join(&s.file), args.out.join(&s.file))?;
                }
                std::fs::copy(&args.input, args.out.join("manifest.json"))?;
                println!("n_points = {}", recorded_n.expect("recorded"));
                println!("already preprocessed; copied unchanged");
                return Ok(());
            }
        }

        // pass 1: clean every cloud and find the minimum surviving count
        let mut cleaned = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let cloud = read_cloud(&in_dir.join(&s.file))?;
            let cloud = remove_interior_points(&cloud, args.cell)?;
            let cloud = voxel_average_downsample(&cloud, args.cell)?;
            cleaned.push(cloud);
        }
        let min_count = cleaned.iter().map(PointCloud::len).min().unwrap_or(0);
        let n_points = args.n_points.unwrap_or(min_count);
        println!("n_points = {n_points}");
        let offenders: Vec<u32> = manifest
            .samples
            .iter()
            .zip(&cleaned)
            .filter(|(_, c)| c.len() < n_points)
            .map(|(s, _)| s.id)
            .collect();
        if !offenders.is_empty() {
            return Err(CliError::data(format!(
                "{} samples have fewer than {n_points} points after cleaning: {offenders:?}",
                offenders.len()
            )));
        }

        // pass 2: downsample, normalize, write
        for (s, cloud) in manifest.samples.iter().zip(&cleaned) {
            let cloud = random_downsample(cloud, n_points, s.seed)?;
            let (cloud, _) = center_and_normalize(&cloud)?;
            write_pcd1(&cloud, &args.out.join(&s.file))?;
        }
        let mut updated = manifest.clone();
        updated.preprocessing = Some(serde_json::json!({
            "interior_cell": args.cell,
            "voxel_cell": args.cell,
            "n_points": n_points,
        }));
        updated.save(&args.out.join("manifest.json"))?;
        Ok(())
    })
}

/// Preprocessing parameters consistent between train and eval: recorded
/// values for already-preprocessed datasets, command flags otherwise.
fn resolve_pp(
    manifest: &DatasetManifest,
    n_points: usize,
    interior_cell: Option<f64>,
    voxel_cell: Option<f64>,
) -> PreprocessParams {
    match &manifest.preprocessing {
        Some(done) => {
            let n = done
                .get("n_points")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .unwrap_or(n_points);
            PreprocessParams { interior_cell: None, voxel_cell: None, n_points: n, seed: 0 }
        }
        None => PreprocessParams { interior_cell, voxel_cell, n_points, seed: 0 },
    }
}

fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = data.join("manifest.json");
    DatasetManifest::load(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_per_dim_csv(report: &smnet::model::EvalReport, path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "dim,mae,r2").map_err(CliError::from)?;
    for (d, (mae, r2)) in report.per_dim_mae.iter().zip(&report.per_dim_r2).enumerate() {
        writeln!(w, "{d},{mae},{r2}").map_err(CliError::from)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let mut config = SMNetConfig::preset(&args.preset)?;
    config.kind = args.model.kind();
    config.out_dim = manifest.control_dim;
    config.seed = args.seed;
    if let Some(n) = args.n_points {
        config.n_points = n;
    }
    let pp = resolve_pp(&manifest, config.n_points, args.interior_cell, args.voxel_cell);
    config.n_points = pp.n_points;
    let train_cfg = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        lr: args.lr,
        momentum: args.momentum,
        shuffle_seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: Some(args.out.join("checkpoints")),
    };
    let resolved = serde_json::json!({
        "data": args.data.display().to_string(),
        "preset": args.preset,
        "model": config.kind.name(),
        "n_points": config.n_points,
        "out_dim": config.out_dim,
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "momentum": args.momentum,
        "seed": args.seed,
        "interior_cell": pp.interior_cell,
        "voxel_cell": pp.voxel_cell,
    });
    with_run_json(&args.out.clone(), "train", resolved, || {
        let mut model = SMNet::new(config.clone())?;
        let data = prepare_dataset(&model, &manifest, &args.data, &pp)?;
        println!("train samples: {}  test samples: {}", data.train.len(), data.test.len());
        let history = model.train(&data.train, &data.test, &train_cfg)?;
        write_history_csv(&history, &args.out.join("history.csv"))?;
        config.save_file(&args.out.join("model.cfg"))?;
        model.save_params(&args.out.join("model.params"))?;
        std::fs::write(
            args.out.join("preprocess.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "interior_cell": pp.interior_cell,
                "voxel_cell": pp.voxel_cell,
                "n_points": pp.n_points,
            }))
            .expect("serializable"),
        )?;
        std::fs::write(
            args.out.join("surrogate.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "spec": manifest.spec,
                "topology": manifest.topology,
                "density": manifest.density,
            }))
            .expect("serializable"),
        )?;
        if !data.test.is_empty() {
            let report = model.evaluate(&data.test)?;
            let metrics = MetricsReport {
                mse: Some(report.pooled.mse),
                mae: Some(report.pooled.mae),
                r2: Some(report.pooled.r2),
                ..MetricsReport::default()
            };
            metrics.write_json(&args.out.join("metrics.json"))?;
            write_per_dim_csv(&report, &args.out.join("per_dim_error.csv"))?;
            println!(
                "test mse {:.6}  mae {:.6}  r2 {:.4}",
                report.pooled.mse, report.pooled.mae, report.pooled.r2
            );
        }
        Ok(())
    })
}

fn load_model(dir: &Path) -> Result<SMNet> {
    let config = SMNetConfig::load_file(&dir.join("model.cfg"))
        .map_err(|e| CliError::data(format!("{}: {e}", dir.join("model.cfg").display())))?;
    SMNet::load(config, &dir.join("model.params")).map_err(CliError::from)
}

fn load_pp(dir: &Path, n_points: usize) -> Result<PreprocessParams> {
    let path = dir.join("preprocess.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(PreprocessParams {
        interior_cell: v.get("interior_cell").and_then(|x| x.as_f64()),
        voxel_cell: v.get("voxel_cell").and_then(|x| x.as_f64()),
        n_points: v
            .get("n_points")
            .and_then(|x| x.as_u64())
            .map(|x| x as usize)
            .unwrap_or(n_points),
        seed: 0,
    })
}

/// Regenerates each test target from the manifest, replays the model's
/// clamped prediction through the same surrogate with the same sampling
/// seed, and bins the per-point displacement error by reference position.
fn replay_error_map(
    manifest: &DatasetManifest,
    test_ids: &[u32],
    predictions: &[Vec<f64>],
) -> Result<ErrorMap> {
    let layout = ActuatorLayout::by_topology(manifest.topology);
    let surrogate = Surrogate::new(manifest.spec.clone(), layout);
    let mut refs = Vec::new();
    let mut errors = Vec::new();
    for (id, pred) in test_ids.iter().zip(predictions) {
        let entry = manifest
            .samples
            .iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| CliError::data(format!("unknown sample id {id}")))?;
        let jitter = entry.seed.wrapping_add(1);
        let target = surrogate.simulate(&entry.control, manifest.density, jitter)?;
        let replay = surrogate.simulate(&clamp_control(pred), manifest.density, jitter)?;
        let reference = target.reference_points().expect("simulate carries references");
        for i in 0..target.len() {
            let a = target.points()[i];
            let b = replay.points()[i];
            let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
            refs.push(reference[i]);
            errors.push(d2.sqrt());
        }
    }
    let layout_kind = match manifest.topology {
        Topology::Plate => MapLayout::Plate,
        _ => MapLayout::UnfoldedCube,
    };
    Ok(build_error_map(&PointCloud::new(refs)?, &errors, layout_kind)?)
}

fn write_error_map_faces(map: &ErrorMap, out: &Path) -> Result<()> {
    use std::io::Write as _;
    for face in &map.faces {
        let tag: String = face
            .name
            .chars()
            .map(|c| match c {
                '+' => 'p',
                '-' => 'm',
                c => c,
            })
            .collect();
        let path = out.join(format!("errmap_face_{tag}.csv"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "{}", face.name).map_err(CliError::from)?;
        for row in 0..ERROR_MAP_RESOLUTION {
            let cells: Vec<String> = (0..ERROR_MAP_RESOLUTION)
                .map(|col| match face.at(row, col) {
                    Some(v) => format!("{v}"),
                    None => "nan".to_string(),
                })
                .collect();
            writeln!(w, "{}", cells.join(",")).map_err(CliError::from)?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let manifest = load_manifest(&args.data)?;
    if args.ablation.kind() != model.config.kind {
        return Err(CliError::data(format!(
            "ablation mismatch: checkpoint is {}, requested {}",
            model.config.kind.name(),
            args.ablation.kind().name()
        )));
    }
    if manifest.control_dim != model.config.out_dim {
        return Err(CliError::data(format!(
            "architecture mismatch: model out_dim {}, dataset control_dim {}",
            model.config.out_dim, manifest.control_dim
        )));
    }
    let pp = load_pp(&args.model, model.config.n_points)?;
    let resolved = serde_json::json!({
        "model": args.model.display().to_string(),
        "data": args.data.display().to_string(),
        "ablation": model.config.kind.name(),
        "n_points": pp.n_points,
    });
    with_run_json(&args.out.clone(), "eval", resolved, || {
        let data = prepare_dataset(&model, &manifest, &args.data, &pp)?;
        if data.test.is_empty() {
            return Err(CliError::data("dataset has no test split"));
        }
        let report = model.evaluate(&data.test)?;
        let metrics = MetricsReport {
            mse: Some(report.pooled.mse),
            mae: Some(report.pooled.mae),
            r2: Some(report.pooled.r2),
            ..MetricsReport::default()
        };
        metrics.write_json(&args.out.join("metrics.json"))?;
        write_per_dim_csv(&report, &args.out.join("per_dim_error.csv"))?;
        let test_ids: Vec<u32> = data.test.iter().map(|s| s.id).collect();
        let map = replay_error_map(&manifest, &test_ids, &report.predictions)?;
        write_error_map_faces(&map, &args.out)?;
        println!(
            "test mse {:.6}  mae {:.6}  r2 {:.4}",
            report.pooled.mse, report.pooled.mae, report.pooled.r2
        );
        Ok(())
    })
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut pp = load_pp(&args.model, model.config.n_points)?;
    pp.seed = args.seed;
    let resolved = serde_json::json!({
        "model": args.model.display().to_string(),
        "target": args.target.display().to_string(),
        "replay": args.replay,
        "seed": args.seed,
        "n_points": pp.n_points,
    });
    with_run_json(&args.out.clone(), "infer", resolved, || {
        let target = read_cloud(&args.target)
            .map_err(|e| CliError::data(format!("{}: {e}", args.target.display())))?;
        let start = Instant::now();
        let (prediction, _record) = model.predict_control(&target, &pp)?;
        let seconds = start.elapsed().as_secs_f64();
        let clamped = clamp_control(&prediction);
        println!("prediction time: {seconds:.3} s");
        let mut out_json = serde_json::json!({
            "control": prediction,
            "clamped": clamped,
            "seconds": seconds,
        });
        std::fs::write(
            args.out.join("prediction.json"),
            serde_json::to_string_pretty(&out_json).expect("serializable"),
        )?;
        if args.replay {
            let path = args.model.join("surrogate.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let spec: SurrogateSpec = serde_json::from_value(v["spec"].clone())
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let topology: Topology = serde_json::from_value(v["topology"].clone())
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let density = v["density"].as_u64().unwrap_or(24) as usize;
            let surrogate = Surrogate::new(spec, ActuatorLayout::by_topology(topology));
            let replayed = surrogate.simulate(&clamped, density, args.seed)?;
            let (faces, n_faces) = match topology {
                Topology::Plate => (SurfaceFaces::Plate, 1.0),
                _ => (SurfaceFaces::Cube, 6.0),
            };
            // grid coarse enough that every cell sees a few points
            let per_face = replayed.len() as f64 / n_faces;
            let grid = ((per_face.sqrt() / 2.0).floor() as usize).clamp(3, 20);
            let chamfer = chamfer_distance(&target, &replayed)?;
            let stddev = distance_stddev(&target, &replayed)?;
            let hausdorff = hausdorff_distance(&target, &replayed)?;
            let target_complexity = complexity_from_cloud(&target, faces, grid)?;
            let replay_complexity = complexity_from_cloud(&replayed, faces, grid)?;
            let metrics = serde_json::json!({
                "chamfer": chamfer,
                "stddev": stddev,
                "hausdorff": hausdorff,
                "target_complexity": target_complexity,
                "replay_complexity": replay_complexity,
            });
            std::fs::write(
                args.out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics).expect("serializable"),
            )?;
            out_json["replay"] = metrics;
            println!("chamfer {chamfer:.6}  stddev {stddev:.6}  hausdorff {hausdorff:.6}");
        }
        Ok(())
    })
}

/// Built-in analytic surfaces over a symmetric grid spanning [-1, 1]².
fn builtin_surface(name: &str, n: usize) -> Result<Option<HeightGrid>> {
    let f: Box<dyn Fn(f64, f64) -> f64> = match name {
        "plane" => Box::new(|_, _| 0.0),
        "dome" => Box::new(|x, y| x * x + y * y),
        "saddle" => Box::new(|x, y| x * x - y * y),
        _ => match name.strip_prefix("wavy:") {
            Some(k) => {
                let k: f64 = k
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad wavy frequency {name:?}")))?;
                Box::new(move |x, y| {
                    0.2 * ((k * std::f64::consts::PI * x).sin()
                        + (k * std::f64::consts::PI * y).sin())
                })
            }
            None => return Ok(None),
        },
    };
    let spacing = 2.0 / (n.max(2) - 1) as f64;
    let half = (n - 1) as f64 / 2.0;
    let mut heights = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 - half) * spacing;
            let y = (row as f64 - half) * spacing;
            heights.push(f(x, y));
        }
    }
    Ok(Some(HeightGrid::new(n, [spacing, spacing], heights)?))
}

fn cmd_complexity(args: ComplexityArgs) -> Result<()> {
    let resolved = serde_json::json!({
        "in": args.input,
        "grid": args.grid,
        "faces": match args.faces { FacesArg::Plate => "plate", FacesArg::Cube => "cube" },
    });
    with_run_json(&args.out.clone(), "complexity", resolved, || {
        let value = match builtin_surface(&args.input, args.grid)? {
            Some(grid) => surface_complexity(&grid)?,
            None => {
                let cloud = read_cloud(Path::new(&args.input))
                    .map_err(|e| CliError::data(format!("{}: {e}", args.input)))?;
                let faces = match args.faces {
                    FacesArg::Plate => SurfaceFaces::Plate,
                    FacesArg::Cube => SurfaceFaces::Cube,
                };
                complexity_from_cloud(&cloud, faces, args.grid)?
            }
        };
        println!("complexity: {value}");
        Ok(())
    })
}

fn main() {
    if let Ok(threads) = std::env::var("SMNET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version exits are successes
            if e.use_stderr() {
                let _ = e.print();
                std::process::exit(1);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Complexity(args) => cmd_complexity(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
