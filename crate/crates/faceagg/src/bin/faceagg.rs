use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use faceagg::attention::Mode;
use faceagg::eval::{identify, verify, Aggregator, Metric};
use faceagg::grad::finite_diff_check;
use faceagg::grad::MarginHead;
use faceagg::io;
use faceagg::rng::SplitMix64;
use faceagg::synth::{generate, LabeledCorpus, SynthConfig};
use faceagg::trainer::{self, Checkpoint, Model, TrainConfig};
use faceagg::types::{FeatureSet, FeatureVector};
use faceagg::attention::AttentionParams;

#[derive(Parser)]
#[command(
    name = "faceagg",
    about = "Aggregate variable-length embedding sets into templates, train the aggregator, evaluate verification/identification metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Avg,
    Max,
    Nan,
    Attn,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a TOML config
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an aggregator on a corpus; loss history goes to stdout
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint file
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a resumable checkpoint here
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Continue training saved parameters on a second corpus
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one template per set (as K=1 sets in corpus format)
    Aggregate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verification metrics over a pairs file
    EvalVerify {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.1])]
        far: Vec<f64>,
    },
    /// Identification metrics: rank-N and open-set TPIR@FPIR
    EvalIdentify {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        rank: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1])]
        fpir: Vec<f64>,
    },
    /// Compare analytic gradients against central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &PathBuf) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn aggregator_for(method: Method, params: Option<&PathBuf>) -> anyhow::Result<Aggregator> {
    match method {
        Method::Avg => Ok(Aggregator::Average),
        Method::Max => Ok(Aggregator::Max),
        Method::Nan => {
            let path = params.context("--method nan requires --params")?;
            let (model, _) = io::read_params(path)?;
            match model {
                Model::FrameLevel(p) => Ok(Aggregator::FrameLevel(p)),
                _ => bail!("params file does not hold a frame-level model"),
            }
        }
        Method::Attn => {
            let path = params.context("--method attn requires --params")?;
            let (model, _) = io::read_params(path)?;
            match model {
                Model::Attention(p) => Ok(Aggregator::DimensionWise(p)),
                _ => bail!("params file does not hold a dimension-wise model"),
            }
        }
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = load_toml(&config)?;
            let corpus = generate(&cfg)?;
            io::write_corpus(&out, &corpus)?;
            let frames: usize = corpus.sets.iter().map(|s| s.len()).sum();
            println!("identities\t{}", cfg.num_identities);
            println!("sets\t{}", corpus.sets.len());
            println!("frames\t{frames}");
        }
        Command::Train {
            corpus,
            config,
            out,
            resume,
            checkpoint_out,
        } => {
            let corpus = io::read_corpus(&corpus)?;
            let cfg: TrainConfig = load_toml(&config)?;
            let (ckpt, history) = match resume {
                Some(path) => {
                    let prev = io::read_checkpoint(&path)?;
                    trainer::resume(&corpus, &cfg, prev)?
                }
                None => trainer::train(&corpus, &cfg)?,
            };
            print!("{}", io::format_loss_history(&history));
            io::write_params(&out, &ckpt.model, &ckpt.head)?;
            if let Some(path) = checkpoint_out {
                io::write_checkpoint(&path, &ckpt)?;
            }
        }
        Command::Finetune {
            corpus,
            params,
            out,
            config,
        } => {
            let corpus = io::read_corpus(&corpus)?;
            let cfg: TrainConfig = match config {
                Some(path) => load_toml(&path)?,
                None => TrainConfig::default(),
            };
            let (model, head) = io::read_params(&params)?;
            let ckpt = Checkpoint {
                model,
                head,
                epoch: 0,
                running_loss: 0.0,
                rng_state: cfg.rng_seed,
            };
            let (ckpt, history) = trainer::finetune(ckpt, &corpus, &cfg)?;
            print!("{}", io::format_loss_history(&history));
            io::write_params(&out, &ckpt.model, &ckpt.head)?;
        }
        Command::Aggregate {
            corpus,
            params,
            method,
            out,
        } => {
            let corpus = io::read_corpus(&corpus)?;
            let aggregator = aggregator_for(method, params.as_ref())?;
            let mut sets = Vec::with_capacity(corpus.sets.len());
            for s in &corpus.sets {
                let template = aggregator.template(s)?;
                sets.push(FeatureSet::new(vec![template], s.label, s.set_id.clone())?);
            }
            let templates = LabeledCorpus {
                sets,
                dim: corpus.dim,
                identity_centroids: Vec::new(),
            };
            io::write_corpus(&out, &templates)?;
            println!("templates\t{}", templates.sets.len());
        }
        Command::EvalVerify {
            templates,
            pairs,
            far,
        } => {
            let corpus = io::read_corpus(&templates)?;
            let pairs = io::parse_pairs(&std::fs::read_to_string(&pairs)?)?;
            let (tar, auc) = verify(&corpus, &pairs, &Aggregator::Average, Metric::Cosine, &far)?;
            for (level, value) in &tar {
                println!("tar_at_far_{level}\t{value:.6}");
            }
            println!("auc\t{auc:.6}");
        }
        Command::EvalIdentify {
            gallery,
            probes,
            rank,
            fpir,
        } => {
            let gallery = io::read_corpus(&gallery)?;
            let probes = io::read_corpus(&probes)?;
            let (rank_n, tpir) = identify(
                &gallery.sets,
                &probes.sets,
                &Aggregator::Average,
                Metric::Cosine,
                &rank,
                &fpir,
            )?;
            for (n, acc) in &rank_n {
                println!("rank_{n}\t{acc:.6}");
            }
            for (level, value) in &tpir {
                println!("tpir_at_fpir_{level}\t{value:.6}");
            }
        }
        Command::Gradcheck {
            dim,
            frames,
            classes,
            seed,
        } => {
            let mut rng = SplitMix64::new(seed);
            let fs: Vec<FeatureVector> = (0..frames)
                .map(|_| FeatureVector::new(rng.gaussian_vec(dim, 1.0)))
                .collect::<Result<_, _>>()?;
            let s = FeatureSet::new(fs, 0, "gradcheck")?;
            let p = AttentionParams::cascaded(
                dim,
                rng.gaussian_vec(dim * dim, 0.4),
                rng.gaussian_vec(dim, 0.4),
                rng.gaussian_vec(dim * dim, 0.4),
                rng.gaussian_vec(dim, 0.4),
            )?;
            let head = MarginHead::random_unit(dim, classes, &mut rng).with_margin(0.3, 4.0);
            let label = (seed % classes as u64) as u32;
            let _ = Mode::CascadedTanh;
            let err = finite_diff_check(&s, &p, &head, label, 1e-5)?;
            println!("max_relative_error\t{err:.3e}");
            if err >= 1e-4 {
                bail!("gradient check failed: max relative error {err:.3e} >= 1e-4");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
