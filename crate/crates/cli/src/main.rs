use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tap_core::datastore::store::DEFAULT_SHARD_SIZE;
use tap_core::datastore::{precompute_embeddings, Dataset, EmbeddingStoreWriter, SynthConfig};
use tap_core::evaluator::evaluate;
use tap_core::inference::TapModel;
use tap_core::teacher::{SyntheticTeacher, TeacherConfig};
use tap_core::trainer::{train_finetune, train_pretrain, TrainConfig};
use tap_core::vocab::{dataset_vocab_weights, merge_and_dedup, VocabBundle};

#[derive(Parser)]
#[command(name = "tap", version, about = "Promptable region segmentation, recognition and captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Concept vocabulary tools.
    Vocab {
        #[command(subcommand)]
        cmd: VocabCmd,
    },
    /// Synthetic data generation.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Teacher embedding precomputation.
    Embed {
        #[command(subcommand)]
        cmd: EmbedCmd,
    },
    /// Pre-training and caption fine-tuning.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        teacher: TeacherArgs,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args, Clone)]
struct TeacherArgs {
    /// Text/image embedding width of the synthetic teacher.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Teacher seed.
    #[arg(long, default_value_t = TeacherConfig::default().seed)]
    teacher_seed: u64,
}

impl TeacherArgs {
    fn teacher(&self, sigma: f64) -> SyntheticTeacher {
        SyntheticTeacher::new(TeacherConfig {
            dim: self.dim,
            seed: self.teacher_seed,
            noise_sigma: sigma,
            ..TeacherConfig::default()
        })
    }
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Merge concept name lists (one name per line) into a vocabulary with
    /// source/target weight matrices.
    Build {
        #[arg(long, num_args = 1.., required = true)]
        names: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        teacher: TeacherArgs,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a shapes-world dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Index of the first image; give held-out splits a disjoint range.
        #[arg(long, default_value_t = 0)]
        first_index: usize,
        #[arg(long, default_value_t = 256)]
        images_per_shard: usize,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Encode every region with the teacher and store the embeddings.
    Precompute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Teacher image-embedding noise.
        #[arg(long, default_value_t = TeacherConfig::default().noise_sigma)]
        sigma: f64,
        #[command(flatten)]
        teacher: TeacherArgs,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Pretrain {
        #[arg(long)]
        cfg: PathBuf,
    },
    Finetune {
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab {
            cmd: VocabCmd::Build { names, out, teacher },
        } => {
            let lists = names.iter().map(|p| read_names(p)).collect::<Result<Vec<_>>>()?;
            let vocab = merge_and_dedup(&lists)?;
            let bundle = VocabBundle::build(vocab, &teacher.teacher(0.0))?;
            bundle.save(&out)?;
            println!("{} concepts -> {}", bundle.vocab.len(), out.display());
        }
        Command::Data {
            cmd:
                DataCmd::Synth {
                    n,
                    k,
                    seed,
                    out,
                    first_index,
                    images_per_shard,
                },
        } => {
            let ds = Dataset::synthesize(SynthConfig {
                num_images: n,
                num_concepts: k,
                seed,
                first_index,
                ..SynthConfig::default()
            })?;
            ds.save(&out, images_per_shard)?;
            let names: String = ds.concepts().iter().map(|c| format!("{c}\n")).collect();
            fs::write(out.join("names.txt"), names)?;
            println!("{} images, {} regions -> {}", n, ds.num_regions(), out.display());
        }
        Command::Embed {
            cmd: EmbedCmd::Precompute {
                data,
                out,
                sigma,
                teacher,
            },
        } => {
            let ds = Dataset::load(&data)?;
            let t = teacher.teacher(sigma);
            let mut writer = EmbeddingStoreWriter::create(&out, teacher.dim, DEFAULT_SHARD_SIZE)?;
            let n = precompute_embeddings(&ds, &t, &mut writer)?;
            writer.finish()?;
            println!("{n} embeddings -> {}", out.display());
        }
        Command::Train {
            cmd: TrainCmd::Pretrain { cfg },
        } => {
            let cfg = TrainConfig::load(&cfg)?;
            let s = train_pretrain(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train {
            cmd: TrainCmd::Finetune { cfg, init },
        } => {
            let cfg = TrainConfig::load(&cfg)?;
            if cfg.out == init {
                bail!("fine-tune output must differ from the initial checkpoint");
            }
            let s = train_finetune(&cfg, &init)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval {
            ckpt,
            data,
            report,
            teacher,
        } => {
            let model = TapModel::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let weights = dataset_vocab_weights(ds.concepts(), &teacher.teacher(0.0))?;
            let r = evaluate(&model, &ds, &weights)?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            println!(
                "instances {} miou {:.4} top1 {:.4} top5 {:.4} bleu4 {}",
                r.instances,
                r.miou,
                r.top1,
                r.top5,
                r.bleu4.map_or("n/a".to_owned(), |b| format!("{b:.4}"))
            );
        }
        Command::Serve { ckpt, port, host } => {
            let model = TapModel::load(&ckpt)?;
            let addr = format!("{host}:{port}");
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(tap_server::serve(model, &addr, tap_server::ServerConfig::default()))?;
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
