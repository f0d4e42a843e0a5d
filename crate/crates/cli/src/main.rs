//! `betavae`: data generation, two-stage training, math verification, latent
//! manipulation and evaluation, each writing into its own run directory.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use betavae::data::{
    generate_synthetic_triplets, load_dataset, save_dataset, save_voxel_file, split_subjects, GeneratorInfo,
    ShapeClass, SkullTriplet,
};
use betavae::eval::{emit_report, evaluate_completion, evaluate_reconstruction, EvalReport};
use betavae::latent::{
    complete_shape, deviation_vectors, encode_dataset, gamma_sweep, implant_extract, pca_project, write_latent_csv,
    DeviationVectors, DEFAULT_GAMMAS,
};
use betavae::nn::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, Parameters};
use betavae::render::{save_scatter, save_slice_montage, BLACK};
use betavae::training::{aggregate, train_stage1, train_stage2, training_grids, ShapeModel, TrainingCurve, Vae};
use betavae::verify::{run_verification, VerifyOptions};
use clap::{Args, Parser, Subcommand};

use config::{run_dir, write_run_record, RunConfig, RunRecord};

const CHECKPOINT_DIR: &str = "checkpoint";
const CURVE_CSV: &str = "curve.csv";
const TIMING_CSV: &str = "timing.csv";

#[derive(Parser)]
#[command(name = "betavae", version, about = "Two-stage beta-VAE shape modelling")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Run directory (must be absent or empty). Defaults to
    /// `$BETAVAE_OUTPUT_ROOT/<command>-<time>-<hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelData {
    /// Stage-1 or aggregated checkpoint (or the run directory holding it).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one subject id; defaults to every held-out subject.
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skull-triplet dataset.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        /// Cube edge (`32`) or `D,H,W`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train encoder and decoder jointly under a KLD weight.
    TrainStage1 {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a decoupled decoder on a frozen stage-1 encoder.
    TrainStage2 {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Combine a stage-1 encoder with a stage-2 decoder.
    Aggregate {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Check the KLD closed forms and gradients against independent oracles.
    VerifyMath {
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Deterministic reconstructions (z = μ).
    Reconstruct {
        #[command(flatten)]
        io: ModelData,
        #[command(flatten)]
        out: OutArg,
    },
    /// Shape completion by latent arithmetic.
    Complete {
        #[command(flatten)]
        io: ModelData,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_parser = parse_defect_class)]
        class: ShapeClass,
        #[command(flatten)]
        out: OutArg,
    },
    /// Completions over a list of γ with a slice montage per subject.
    SweepGamma {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_defect_class, default_value = "cranial")]
        class: ShapeClass,
        #[command(flatten)]
        out: OutArg,
    },
    /// PCA of the training latents with class centroids and deviation arrows.
    PlotLatent {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// REC and CMP Dice scores on the held-out subjects.
    Evaluate {
        /// `tag=path`, repeatable.
        #[arg(long = "model", value_parser = parse_tagged, required = true)]
        models: Vec<(String, PathBuf)>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [e] => Ok([e; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err("expected one extent or D,H,W".into()),
    }
}

fn parse_defect_class(s: &str) -> std::result::Result<ShapeClass, String> {
    match s.parse::<ShapeClass>().map_err(|e| e.to_string())? {
        ShapeClass::Complete => Err("completion needs a defect class: cranial or facial".into()),
        c => Ok(c),
    }
}

fn parse_tagged(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((tag, path)) if !tag.is_empty() => Ok((tag.to_string(), PathBuf::from(path))),
        _ => Ok(("model".to_string(), PathBuf::from(s))),
    }
}

/// Accepts a checkpoint directory or a run directory containing one.
fn checkpoint_path(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.join("manifest.json").exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn load_ckpt(p: &Path) -> Result<Checkpoint> {
    let path = checkpoint_path(p);
    load_checkpoint(&path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// A stage-1 or aggregated checkpoint as a full model.
fn load_model(p: &Path) -> Result<(Box<dyn ShapeModel>, String)> {
    let ckpt = load_ckpt(p)?;
    let hash = ckpt.manifest.sha256.clone();
    let (Some(encoder), Some(decoder)) = (ckpt.encoder, ckpt.decoder) else {
        bail!("{} holds no encoder/decoder pair (kind {:?})", p.display(), ckpt.manifest.kind);
    };
    let model: Box<dyn ShapeModel> = match ckpt.manifest.kind {
        CheckpointKind::Aggregated => Box::new(aggregate(encoder, decoder)?),
        _ => Box::new(Vae { encoder, decoder }),
    };
    Ok((model, hash))
}

struct Dataset {
    triplets: Vec<SkullTriplet>,
    train: Vec<usize>,
    test: Vec<usize>,
    manifest_hash: String,
}

impl Dataset {
    fn load(root: &Path, config: &RunConfig) -> Result<Self> {
        let (_, triplets) = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
        let manifest = std::fs::read(root.join("manifest.json"))?;
        let (train, test) = split_subjects(triplets.len(), config.eval.train_fraction, config.eval.split_seed);
        Ok(Self {
            triplets,
            train,
            test,
            manifest_hash: betavae::data::sha256_hex(&manifest),
        })
    }

    fn pick(&self, idx: &[usize]) -> Vec<SkullTriplet> {
        idx.iter().map(|&i| self.triplets[i].clone()).collect()
    }

    /// Held-out subjects, or the one named.
    fn targets(&self, subject: Option<&str>) -> Result<Vec<SkullTriplet>> {
        match subject {
            None => Ok(self.pick(&self.test)),
            Some(id) => match self.triplets.iter().find(|t| t.subject_id == id) {
                Some(t) => Ok(vec![t.clone()]),
                None => bail!("subject {id} is not in the dataset"),
            },
        }
    }

    fn deviations(&self, model: &dyn ShapeModel) -> Result<DeviationVectors> {
        let latents = encode_dataset(model, &self.pick(&self.train))?;
        Ok(deviation_vectors(&latents)?)
    }
}

fn write_curve(dir: &Path, curve: &TrainingCurve, config: &RunConfig) -> Result<()> {
    curve.write_csv(&dir.join(CURVE_CSV), config.deterministic)?;
    curve.write_timing_csv(&dir.join(TIMING_CSV))?;
    Ok(())
}

fn progress(r: &betavae::training::EpochRecord) {
    eprintln!("epoch {:>5}  dice {:.5}  kld {:.4}  {:.1}s", r.epoch, r.dice_loss, r.kld, r.seconds);
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut inputs = Vec::new();
    let record = |dir: &Path, name: &str, inputs: Vec<(String, String)>, config: &RunConfig| {
        write_run_record(
            dir,
            &RunRecord {
                command: name,
                args: args.clone(),
                config_hash: config.hash(),
                inputs,
            },
        )
    };

    match cli.command {
        Command::GenData { n, dims, seed, out } => {
            if let Some(n) = n {
                config.data.n = n as usize;
            }
            if let Some(d) = dims {
                config.data.dims = d;
            }
            if let Some(s) = seed {
                config.data.seed = s;
            }
            let dc = config.data.clone();
            let triplets = generate_synthetic_triplets(dc.n, dc.dims, dc.seed)?;
            let dir = run_dir(out.out.as_deref(), "gen-data", &config)?;
            let generator = GeneratorInfo {
                n: dc.n,
                dims: dc.dims,
                seed: dc.seed,
            };
            save_dataset(&dir, &triplets, Some(generator))?;
            record(&dir, "gen-data", inputs, &config)?;
            println!("{} subjects written to {}", triplets.len(), dir.display());
        }
        Command::TrainStage1 { beta, epochs, data, out } => {
            let ds = Dataset::load(&data, &config)?;
            let mut stage = config.stage1_large.clone();
            if let Some(b) = beta {
                stage.beta = b;
            }
            if let Some(e) = epochs {
                stage.epochs = e as usize;
            }
            config.stage1_large = stage.clone();
            let grids = training_grids(&ds.triplets, &ds.train);
            let dir = run_dir(out.out.as_deref(), "train-stage1", &config)?;
            let (enc, dec, curve) = train_stage1(&config.model, &grids, &stage, Some(&mut progress))?;
            let meta = CheckpointMeta {
                kind: CheckpointKind::Stage1,
                epoch: stage.epochs,
                seed: stage.seed,
                provenance: &[format!("dataset:{}", ds.manifest_hash)],
            };
            save_checkpoint(&dir.join(CHECKPOINT_DIR), meta, Some(&enc), Some(&dec))?;
            write_curve(&dir, &curve, &config)?;
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "train-stage1", inputs, &config)?;
            println!("stage-1 checkpoint written to {}", dir.display());
        }
        Command::TrainStage2 { stage1, epochs, data, out } => {
            let ds = Dataset::load(&data, &config)?;
            let ckpt = load_ckpt(&stage1)?;
            let Some(encoder) = ckpt.encoder else {
                bail!("{} holds no encoder", stage1.display());
            };
            if let Some(e) = epochs {
                config.stage2.epochs = e as usize;
            }
            let stage = config.stage2.clone();
            let grids = training_grids(&ds.triplets, &ds.train);
            let dir = run_dir(out.out.as_deref(), "train-stage2", &config)?;
            let (dec, curve) = train_stage2(&encoder, &grids, &stage, stage.seed, Some(&mut progress))?;
            let meta = CheckpointMeta {
                kind: CheckpointKind::Stage2,
                epoch: stage.epochs,
                seed: stage.seed,
                provenance: &[format!("stage1:{}", ckpt.manifest.sha256), format!("dataset:{}", ds.manifest_hash)],
            };
            save_checkpoint(&dir.join(CHECKPOINT_DIR), meta, None, Some(&dec))?;
            write_curve(&dir, &curve, &config)?;
            inputs.push(("stage1".into(), ckpt.manifest.sha256));
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "train-stage2", inputs, &config)?;
            println!("stage-2 checkpoint written to {}", dir.display());
        }
        Command::Aggregate { stage1, stage2, out } => {
            let (s1, s2) = (load_ckpt(&stage1)?, load_ckpt(&stage2)?);
            let Some(encoder) = s1.encoder else {
                bail!("{} holds no encoder", stage1.display());
            };
            let Some(decoder) = s2.decoder else {
                bail!("{} holds no decoder", stage2.display());
            };
            let model = aggregate(encoder, decoder)?;
            let dir = run_dir(out.out.as_deref(), "aggregate", &config)?;
            let provenance = [
                format!("stage1:{}", s1.manifest.sha256),
                format!("stage2:{}", s2.manifest.sha256),
            ];
            let meta = CheckpointMeta {
                kind: CheckpointKind::Aggregated,
                epoch: s2.manifest.epoch,
                seed: s2.manifest.seed,
                provenance: &provenance,
            };
            save_checkpoint(&dir.join(CHECKPOINT_DIR), meta, Some(model.encoder()), Some(model.decoder()))?;
            inputs.push(("stage1".into(), s1.manifest.sha256));
            inputs.push(("stage2".into(), s2.manifest.sha256));
            record(&dir, "aggregate", inputs, &config)?;
            println!(
                "aggregated model written to {} (encoder {}, decoder {})",
                dir.display(),
                &model.encoder().params_hash()[..12],
                &model.decoder().params_hash()[..12]
            );
        }
        Command::VerifyMath { report, inject_sign_flip, out } => {
            let opts = VerifyOptions {
                inject_sign_flip,
                ..Default::default()
            };
            let result = run_verification(&opts)?;
            print!("{}", result.table());
            println!("max relative gradient error {:.3e}", result.max_gradient_rel_error);
            let dir = run_dir(out.out.as_deref(), "verify-math", &config)?;
            let json = serde_json::to_string_pretty(&result)?;
            std::fs::write(dir.join("report.json"), &json)?;
            if let Some(path) = report {
                std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            result.write_traces_csv(&dir.join("gd_traces.csv"))?;
            record(&dir, "verify-math", inputs, &config)?;
            if !result.all_passed() {
                eprintln!("verification failed");
                return Ok(false);
            }
        }
        Command::Reconstruct { io, out } => {
            let ds = Dataset::load(&io.data, &config)?;
            let (model, hash) = load_model(&io.model)?;
            let dir = run_dir(out.out.as_deref(), "reconstruct", &config)?;
            for t in ds.targets(io.subject.as_deref())? {
                for class in ShapeClass::ALL {
                    let rec = model.reconstruct(t.grid(class))?;
                    save_voxel_file(&rec, &dir.join(&t.subject_id).join(format!("{class}.vox")))?;
                }
            }
            inputs.push(("model".into(), hash));
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "reconstruct", inputs, &config)?;
            println!("reconstructions written to {}", dir.display());
        }
        Command::Complete { io, gamma, class, out } => {
            let gamma = gamma.unwrap_or(config.eval.gamma);
            config.eval.gamma = gamma;
            let ds = Dataset::load(&io.data, &config)?;
            let (model, hash) = load_model(&io.model)?;
            let dev = ds.deviations(model.as_ref())?;
            let dir = run_dir(out.out.as_deref(), "complete", &config)?;
            for t in ds.targets(io.subject.as_deref())? {
                let x = t.grid(class);
                let completed = complete_shape(model.as_ref(), x, class, gamma, &dev)?;
                let sub = dir.join(&t.subject_id);
                save_voxel_file(&completed, &sub.join(format!("{class}.vox")))?;
                save_voxel_file(&implant_extract(&completed, x)?, &sub.join(format!("{class}_implant.vox")))?;
            }
            std::fs::write(dir.join("deviation.json"), serde_json::to_string_pretty(&dev)?)?;
            inputs.push(("model".into(), hash));
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "complete", inputs, &config)?;
            println!("completions (gamma {gamma}) written to {}", dir.display());
        }
        Command::SweepGamma { io, gammas, class, out } => {
            let gammas = gammas.unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
            let ds = Dataset::load(&io.data, &config)?;
            let (model, hash) = load_model(&io.model)?;
            let dev = ds.deviations(model.as_ref())?;
            let dir = run_dir(out.out.as_deref(), "sweep-gamma", &config)?;
            for t in ds.targets(io.subject.as_deref())? {
                let grids = gamma_sweep(model.as_ref(), t.grid(class), class, &gammas, &dev)?;
                let sub = dir.join(&t.subject_id);
                for (g, grid) in gammas.iter().zip(&grids) {
                    save_voxel_file(grid, &sub.join(format!("{class}_gamma{g}.vox")))?;
                }
                save_slice_montage(&grids, &sub.join("montage.png"), 4)?;
            }
            inputs.push(("model".into(), hash));
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "sweep-gamma", inputs, &config)?;
            println!("gamma sweep written to {}", dir.display());
        }
        Command::PlotLatent { model, data, out } => {
            let ds = Dataset::load(&data, &config)?;
            let (m, hash) = load_model(&model)?;
            let latents = encode_dataset(m.as_ref(), &ds.pick(&ds.train))?;
            let dev = deviation_vectors(&latents)?;
            let pca = pca_project(&latents, 2)?;
            let dir = run_dir(out.out.as_deref(), "plot-latent", &config)?;
            write_latent_csv(&pca, latents.subject_ids(), &dir.join("latent.csv"))?;
            // Arrows start at the origin, so they are drawn as projected directions.
            let arrows = [
                (pca.project_direction(&dev.dev_cr), BLACK),
                (pca.project_direction(&dev.dev_fa), BLACK),
            ];
            save_scatter(&pca.points, &pca.centroids, &arrows, &dir.join("latent.png"))?;
            std::fs::write(dir.join("pca.json"), serde_json::to_string_pretty(&pca)?)?;
            if pca.degenerate {
                eprintln!("warning: all latents coincide; the projection axes are arbitrary");
            }
            inputs.push(("model".into(), hash));
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "plot-latent", inputs, &config)?;
            println!("latent projection written to {}", dir.display());
        }
        Command::Evaluate {
            models,
            data,
            gamma,
            out,
        } => {
            let gamma = gamma.unwrap_or(config.eval.gamma);
            config.eval.gamma = gamma;
            let ds = Dataset::load(&data, &config)?;
            let test = ds.pick(&ds.test);
            let mut report = EvalReport::default();
            for (tag, path) in &models {
                let (model, hash) = load_model(path)?;
                let dev = ds.deviations(model.as_ref())?;
                report.extend(evaluate_reconstruction(model.as_ref(), tag, &test)?);
                report.extend(evaluate_completion(model.as_ref(), tag, &test, &dev, gamma)?);
                report.metadata.insert(format!("model.{tag}"), hash.clone());
                inputs.push((tag.clone(), hash));
            }
            report.metadata.insert("dataset".into(), ds.manifest_hash.clone());
            report.metadata.insert("split_seed".into(), config.eval.split_seed.to_string());
            report.metadata.insert("gamma".into(), gamma.to_string());
            let dir = run_dir(out.out.as_deref(), "evaluate", &config)?;
            let emitted = emit_report(&report, &dir)?;
            inputs.push(("dataset".into(), ds.manifest_hash));
            record(&dir, "evaluate", inputs, &config)?;
            print!("{}", std::fs::read_to_string(&emitted.markdown)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
