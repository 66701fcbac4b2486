use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dse_core::cvgae::{self, Cvgae, GeneratorConfig, IdentityGenerator, RandomGenerator, SurrogateGenerator};
use dse_core::evalharness;
use dse_core::explainers::{self, ExplainerConfig, ExplainerKind};
use dse_core::frontdoor::{self, Dse, DseConfig, Estimator};
use dse_core::graph::{parse_dataset, serialize_dataset};
use dse_core::nn::Checkpoint;
use dse_core::predictor::{self, Predictor, PredictorConfig};
use dse_core::tr3::{self, Tr3Config};

#[derive(Parser)]
#[command(name = "dse", version, about = "Deconfounded subgraph evaluation for GNN explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a TR3 dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        num_graphs: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train the GNN classifier.
    TrainPredictor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Produce explanation masks for every graph.
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated list, e.g. `sa,gradcam,random`.
        #[arg(long, default_value = "sa,gradcam,maskopt,occlusion,screener,random")]
        explainers: String,
        #[arg(long, default_value_t = 0.15)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the CVGAE surrogate generator.
    TrainGenerator {
        #[arg(long)]
        data: PathBuf,
        /// Writes `<prefix>.generator.ckpt`, `<prefix>.critic.ckpt` and `<prefix>.losses.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        encode_dim: Option<usize>,
        /// Contrastive loss weight.
        #[arg(long)]
        gamma: Option<f64>,
        /// Adversarial loss weight.
        #[arg(long)]
        omega: Option<f64>,
        /// Gradient penalty weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Contrastive temperature.
        #[arg(long)]
        tau: Option<f64>,
        /// Fraction of edges kept in the training subgraphs.
        #[arg(long)]
        ratio: Option<f64>,
        /// KL weight.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score masks by removal and by the deconfounded estimator.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        /// Generator checkpoint, or `random` / `identity`.
        #[arg(long)]
        generator: String,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        surrogates: usize,
        #[arg(long, default_value = "reduced")]
        estimator: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment from a TOML config.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(dse_core::DseError::MissingArtifact(path.to_path_buf()).into());
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Vec<dse_core::Graph>> {
    Ok(parse_dataset(&read(path)?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read(path)?;
    Ok(Checkpoint::load(path)?)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, num_graphs, seed } => {
            let cfg = Tr3Config {
                num_graphs,
                seed,
                ..Default::default()
            };
            let graphs = tr3::generate_dataset(&cfg)?;
            fs::write(&out, serialize_dataset(&graphs))?;
            let manifest = out.with_file_name("manifest.json");
            fs::write(&manifest, serde_json::to_string_pretty(&tr3::manifest(&cfg, &graphs))?)?;
            println!("wrote {} graphs to {}", graphs.len(), out.display());
        }
        Command::TrainPredictor { data, out, epochs, seed } => {
            let graphs = load_dataset(&data)?;
            let cfg = PredictorConfig {
                max_epochs: epochs,
                seed,
                ..Default::default()
            };
            let model = predictor::train_with_progress(&graphs, &cfg, |e, loss| log::info!("epoch {e}: loss {loss:.4}"))?;
            model.to_checkpoint().save(&out)?;
            println!(
                "train accuracy {:.4}, test accuracy {}",
                model.metrics.train_accuracy,
                model.metrics.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::Explain {
            data,
            predictor,
            out,
            explainers: kinds,
            ratio,
            seed,
        } => {
            let graphs = load_dataset(&data)?;
            let model = Predictor::from_checkpoint(&load_checkpoint(&predictor)?)?;
            let kinds = ExplainerKind::parse_list(&kinds)?;
            let cfg = ExplainerConfig {
                mask_ratio: ratio,
                seed,
                ..Default::default()
            };
            let masks = explainers::explain_all(&model, &graphs, &kinds, &cfg)?;
            fs::write(&out, explainers::write_masks_jsonl(&masks)?)?;
            println!("wrote {} masks to {}", masks.len(), out.display());
        }
        Command::TrainGenerator {
            data,
            out,
            epochs,
            seed,
            encode_dim,
            gamma,
            omega,
            lambda,
            tau,
            ratio,
            beta,
            lr,
        } => {
            let graphs = load_dataset(&data)?;
            let d = GeneratorConfig::default();
            let cfg = GeneratorConfig {
                max_epochs: epochs,
                seed,
                encode_dim: encode_dim.unwrap_or(d.encode_dim),
                contrastive_weight: gamma.unwrap_or(d.contrastive_weight),
                adversarial_weight: omega.unwrap_or(d.adversarial_weight),
                penalty_weight: lambda.unwrap_or(d.penalty_weight),
                temperature: tau.unwrap_or(d.temperature),
                masking_ratio: ratio.unwrap_or(d.masking_ratio),
                kl_weight: beta.unwrap_or(d.kl_weight),
                learning_rate: lr.unwrap_or(d.learning_rate),
                ..d
            };
            let trained = cvgae::train_generator_with_progress(&graphs, &cfg, |l| {
                log::info!("epoch {}: vae {:.4} c {:.4} d {:.4}", l.epoch, l.vae, l.contrastive, l.discriminator)
            })?;
            trained.generator.to_checkpoint().save(&with_suffix(&out, ".generator.ckpt"))?;
            trained.critic.to_checkpoint().save(&with_suffix(&out, ".critic.ckpt"))?;
            fs::write(with_suffix(&out, ".losses.csv"), cvgae::losses_csv(&trained.losses))?;
            println!("trained for {} epochs", trained.losses.len());
        }
        Command::Evaluate {
            data,
            predictor,
            generator,
            masks,
            out,
            surrogates,
            estimator,
            seed,
        } => {
            let graphs = load_dataset(&data)?;
            let model = Predictor::from_checkpoint(&load_checkpoint(&predictor)?)?;
            let masks = explainers::read_masks_jsonl(&String::from_utf8(read(&masks)?)?)?;
            let cvgae_model;
            let gen: &dyn SurrogateGenerator = match generator.as_str() {
                "random" => &RandomGenerator,
                "identity" => &IdentityGenerator,
                path => {
                    cvgae_model = Cvgae::from_checkpoint(&load_checkpoint(Path::new(path))?)?;
                    &cvgae_model
                }
            };
            let cfg = DseConfig {
                num_surrogates: surrogates,
                estimator: estimator.parse::<Estimator>()?,
                seed,
                ..Default::default()
            };
            let dse = Dse::new(&model, gen, cfg)?;
            let records = frontdoor::evaluate_all(&dse, &graphs, &masks)?;
            fs::write(&out, frontdoor::write_records_jsonl(&records)?)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Report { config } => {
            let output = evalharness::run_experiment(&config)?;
            let r = &output.report;
            println!("run directory: {}", output.out_dir.display());
            println!("predictor test accuracy: {:?}", r.predictor_test_accuracy);
            for (k, s) in &r.explainers {
                println!(
                    "{k:<10} prec {:.3}  imp_re {:.3}  imp_dse {:.3}  rho_re {:?}  rho_dse {:?}",
                    s.mean_precision, s.mean_imp_re, s.mean_imp_dse, s.rho_re.value, s.rho_dse.value
                );
            }
            println!("spearman re {:?}, dse {:?}", r.spearman_re.value, r.spearman_dse.value);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
