//! `latent-sdf`: dataset generation, training, fitting, meshing, sampling,
//! degradation and evaluation from the shell.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 I/O, 4 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use latent_sdf::experiment::{
    fit_in_mm, load_transform, mesh_in_mm, normalize_dataset, save_transform, ExperimentConfig,
};
use latent_sdf::fitting::{load_latent, save_latent, trace_to_csv};
use latent_sdf::geometry::{add_gaussian_noise, crop_sphere_hole, OrientedPointCloud, Plane};
use latent_sdf::io::{read_cloud_ply, read_mesh, write_cloud_ply, write_mesh, PlyEncoding};
use latent_sdf::meshing::GridSpec;
use latent_sdf::metrics::{evaluate_reconstruction, EvaluationReport};
use latent_sdf::sampling::{Covariance, LatentGaussian};
use latent_sdf::sdfnet::LatentSdfModel;
use latent_sdf::synthetic::{generate_dataset, write_dataset, DatasetManifest, MANIFEST_FILE};
use latent_sdf::training::{LatentCodebook, Trainer, CODEBOOK_FILE, MODEL_FILE};
use latent_sdf::Error;

#[derive(Parser)]
#[command(name = "latent-sdf", version, about = "Latent-conditioned SDF shape models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's random choices.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic torsos: ground-truth meshes, dense clouds and a manifest.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// Points sampled per shape.
        #[arg(long)]
        points: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and latent codebook on a dataset directory.
    Train {
        /// Directory with a manifest, or with `*.ply` clouds carrying normals.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a latent code to a point cloud (millimetres; normals ignored).
    Fit {
        /// Training output directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the surface of a latent code.
    Mesh {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Grid nodes per axis over the normalized cube.
        #[arg(long)]
        res: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw latent codes from a Gaussian fitted to the codebook and mesh them.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the codebook stored with the model.
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        res: Option<usize>,
        /// Use the full covariance instead of the diagonal.
        #[arg(long)]
        full_covariance: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Punch a hole into and/or add noise to a point cloud.
    Degrade {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        hole_radius: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Random subset of this many points, drawn before degrading.
        #[arg(long)]
        subsample: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a predicted mesh with a ground-truth mesh.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON list of crop planes; `none` disables cropping. Defaults to the config's planes.
        #[arg(long)]
        planes: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

/// Errors sorted by exit code.
enum Failure {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    match &common.config {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            require(p, "config")?;
            let text = fs::read_to_string(p)?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn finish(config: &ExperimentConfig, out: &Path) -> Outcome {
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    config.echo(out)?;
    Ok(())
}

fn cube_grid(config: &ExperimentConfig, res: Option<usize>) -> GridSpec {
    match res {
        Some(r) => GridSpec { resolution: [r; 3], ..config.grid },
        None => config.grid,
    }
}

fn gen_data(count: Option<usize>, points: Option<usize>, force: bool, common: &Common) -> Outcome {
    let mut config = load_config(common)?;
    config.data.count = count.unwrap_or(config.data.count);
    config.data.seed = common.seed.unwrap_or(config.data.seed);
    if let Some(p) = points {
        config.data.settings.points_per_shape = p;
    }
    if config.data.count == 0 || config.data.settings.points_per_shape == 0 {
        return Err(Failure::Usage("--count and --points must be at least 1".into()));
    }
    let out = &common.out;
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        return Err(Failure::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    finish(&config, out)?;
    let t = Instant::now();
    let shapes = generate_dataset(config.data.count, config.data.seed, &config.data.settings)?;
    write_dataset(out, &shapes, config.data.seed, &config.data.settings)?;
    eprintln!("wrote {} shapes to {} in {:.1?}", shapes.len(), out.display(), t.elapsed());
    Ok(())
}

/// Manifest clouds, or every `*.ply` in name order with the file stem as id.
fn read_dataset(dir: &Path) -> Result<Vec<(String, OrientedPointCloud)>, Failure> {
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(DatasetManifest::load(dir)?.load_clouds(dir)?);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Usage(format!("{} holds no manifest and no .ply clouds", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, read_cloud_ply(p)?))
        })
        .collect()
}

fn train(data: &Path, epochs: Option<usize>, resume: bool, common: &Common) -> Outcome {
    require(data, "data directory")?;
    let mut config = load_config(common)?;
    config.training.epochs = epochs.unwrap_or(config.training.epochs);
    config.training.seed = common.seed.unwrap_or(config.training.seed);
    let out = &common.out;
    let dataset = read_dataset(data)?;
    let mut trainer = if resume {
        require(&out.join(MODEL_FILE), "checkpoint")?;
        let transform = load_transform(out)?;
        let normalized = dataset.iter().map(|(id, c)| (id.clone(), transform.apply_cloud(c))).collect();
        Trainer::resume(normalized, config.training.clone(), out)?
    } else {
        let (transform, normalized) = normalize_dataset(&dataset)?;
        let model = LatentSdfModel::geometric_init(config.network, config.training.seed)?;
        let trainer = Trainer::new(normalized, config.training.clone(), model)?;
        save_transform(out, &transform)?;
        trainer
    };
    finish(&config, out)?;
    let every = (config.training.epochs / 20).max(1);
    let t = Instant::now();
    trainer.run(Some(out), |row| {
        if row.epoch % every == 0 || row.epoch == 1 {
            eprintln!("epoch {:>6}  loss {:.6}  ({:.1?})", row.epoch, row.loss.total, t.elapsed());
        }
    })?;
    eprintln!("trained {} epochs; checkpoint in {}", trainer.epochs_done(), out.display());
    Ok(())
}

fn fit(model_dir: &Path, cloud: &Path, lambda: Option<f64>, iterations: Option<usize>, common: &Common) -> Outcome {
    require(model_dir, "model directory")?;
    require(cloud, "cloud")?;
    let mut config = load_config(common)?;
    config.fit.lambda = lambda.unwrap_or(config.fit.lambda);
    config.fit.iterations = iterations.unwrap_or(config.fit.iterations);
    config.fit.seed = common.seed.unwrap_or(config.fit.seed);
    finish(&config, &common.out)?;
    let model = LatentSdfModel::load(model_dir.join(MODEL_FILE))?;
    let transform = load_transform(model_dir)?;
    let points = read_cloud_ply(cloud)?;
    let t = Instant::now();
    let result = fit_in_mm(&model, &transform, &points, &config.fit)?;
    let out = &common.out;
    save_latent(out.join("latent.bin"), &result.latent)?;
    fs::write(out.join("trace.csv"), trace_to_csv(&result.trace))?;
    fs::write(
        out.join("fit.csv"),
        format!("objective,best_iteration,seconds\n{:?},{},{:?}\n", result.objective, result.best_iteration, t.elapsed().as_secs_f64()),
    )?;
    eprintln!(
        "objective {:.6} at iteration {} ({:.1?}); latent in {}",
        result.objective,
        result.best_iteration,
        t.elapsed(),
        out.join("latent.bin").display()
    );
    Ok(())
}

fn mesh(model_dir: &Path, latent: &Path, res: Option<usize>, common: &Common) -> Outcome {
    require(model_dir, "model directory")?;
    require(latent, "latent")?;
    let mut config = load_config(common)?;
    config.grid = cube_grid(&config, res);
    finish(&config, &common.out)?;
    let model = LatentSdfModel::load(model_dir.join(MODEL_FILE))?;
    let z = load_latent(latent)?;
    let m = mesh_in_mm(&model, &load_transform(model_dir)?, &z, &config.grid)?;
    if m.is_empty() {
        return Err(Failure::Numerical("the zero level set is empty on this grid".into()));
    }
    write_mesh(common.out.join("mesh.ply"), &m)?;
    eprintln!("{} vertices, {} faces, closed: {}", m.vertices().len(), m.faces().len(), m.is_closed());
    Ok(())
}

fn sample(
    model_dir: &Path,
    codebook: Option<&Path>,
    count: usize,
    res: Option<usize>,
    full: bool,
    common: &Common,
) -> Outcome {
    require(model_dir, "model directory")?;
    let mut config = load_config(common)?;
    config.grid = cube_grid(&config, res);
    if full {
        config.sampling.covariance = Covariance::Full;
    }
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let seed = common.seed.unwrap_or(0);
    finish(&config, &common.out)?;
    let model = LatentSdfModel::load(model_dir.join(MODEL_FILE))?;
    let transform = load_transform(model_dir)?;
    let book_path = codebook.map(Path::to_path_buf).unwrap_or_else(|| model_dir.join(CODEBOOK_FILE));
    require(&book_path, "codebook")?;
    let gaussian = LatentGaussian::fit(&LatentCodebook::load(&book_path)?, config.sampling.covariance)?;
    let mut summary = String::from("sample,vertices,faces,closed,components\n");
    let mut good = 0;
    for (i, z) in gaussian.sample(count, seed).iter().enumerate() {
        let m = mesh_in_mm(&model, &transform, z, &config.grid)?;
        let name = format!("sample_{i:03}");
        save_latent(common.out.join(format!("{name}.latent")), z)?;
        let (closed, components) = (m.is_closed(), m.connected_components());
        if !m.is_empty() {
            write_mesh(common.out.join(format!("{name}.ply")), &m)?;
        }
        good += usize::from(closed && components == 1);
        summary += &format!("{name},{},{},{closed},{components}\n", m.vertices().len(), m.faces().len());
    }
    fs::write(common.out.join("samples.csv"), summary)?;
    eprintln!("{good} of {count} samples are closed single-component meshes");
    Ok(())
}

fn degrade(
    cloud: &Path,
    hole_radius: Option<f64>,
    noise_sigma: Option<f64>,
    subsample: Option<usize>,
    common: &Common,
) -> Outcome {
    if hole_radius.is_none() && noise_sigma.is_none() {
        return Err(Failure::Usage("pass --hole-radius and/or --noise-sigma".into()));
    }
    require(cloud, "cloud")?;
    let config = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    finish(&config, &common.out)?;
    let mut c = read_cloud_ply(cloud)?;
    if let Some(n) = subsample {
        if n == 0 {
            return Err(Failure::Usage("--subsample must be at least 1".into()));
        }
        c = c.subsample(n, seed);
    }
    let before = c.len();
    if let Some(r) = hole_radius {
        let (kept, center) = crop_sphere_hole(&c, r, seed)?;
        eprintln!("hole at {:?} removed {} of {before} points", center.as_slice(), before - kept.len());
        c = kept;
    }
    if let Some(s) = noise_sigma {
        c = add_gaussian_noise(&c, s, seed.wrapping_add(1))?;
    }
    write_cloud_ply(common.out.join("cloud.ply"), &c, PlyEncoding::default())?;
    Ok(())
}

fn eval(pred: &Path, gt: &Path, planes: Option<&str>, common: &Common) -> Outcome {
    require(pred, "predicted mesh")?;
    require(gt, "ground-truth mesh")?;
    let mut config = load_config(common)?;
    config.evaluation.seed = common.seed.unwrap_or(config.evaluation.seed);
    match planes {
        None => {}
        Some("none") => config.evaluation.planes.clear(),
        Some(p) => {
            require(Path::new(p), "planes file")?;
            let parsed: Vec<Plane> = serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Failure::Usage(format!("{p}: {e}")))?;
            config.evaluation.planes = parsed;
        }
    }
    finish(&config, &common.out)?;
    let e = &config.evaluation;
    let report = evaluate_reconstruction(&read_mesh(pred)?, &read_mesh(gt)?, &e.planes, e.samples, e.tau_mm, e.seed)?;
    fs::write(common.out.join("metrics.csv"), format!("{}\n{}\n", EvaluationReport::CSV_HEADER, report.csv_row()))?;
    fs::write(
        common.out.join("metrics.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Io(e.to_string()))?,
    )?;
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::GenData { count, points, force, common } => gen_data(*count, *points, *force, common),
        Command::Train { data, epochs, resume, common } => train(data, *epochs, *resume, common),
        Command::Fit { model, cloud, lambda, iterations, common } => fit(model, cloud, *lambda, *iterations, common),
        Command::Mesh { model, latent, res, common } => mesh(model, latent, *res, common),
        Command::Sample { model, codebook, count, res, full_covariance, common } => {
            sample(model, codebook.as_deref(), *count, *res, *full_covariance, common)
        }
        Command::Degrade { cloud, hole_radius, noise_sigma, subsample, common } => {
            degrade(cloud, *hole_radius, *noise_sigma, *subsample, common)
        }
        Command::Eval { pred, gt, planes, common } => eval(pred, gt, planes.as_deref(), common),
    }
}

fn main() -> ExitCode {
    // clap already exits with 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("I/O error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical error: {m}");
            ExitCode::from(4)
        }
    }
}
