//! `memefuse`: train, evaluate and query the troll-meme classifier.
//!
//! Exit codes: 0 success, 1 internal error, 2 input error, 3 incompatible
//! checkpoint/config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memefuse_core::dataset::{self, SYNTH_WORDS};
use memefuse_core::fusion::sigmoid;
use memefuse_core::image::RawImage;
use memefuse_core::metrics::{render, report};
use memefuse_core::text::{clean_caption, StopWords, Vocabulary};
use memefuse_core::train::{evaluate, train};
use memefuse_core::{checkpoint, ClassificationReport, Error, ErrorKind, MemeClassifier, Preprocessor, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "memefuse", version, about = "Multimodal troll-meme classifier")]
struct Cli {
    /// Worker threads for image decoding and preprocessing.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and validation reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest; overrides `data.train`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; overrides `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the classification report of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write metrics.toml; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refuse to evaluate unless the checkpoint matches this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Classify one meme; prints `<label>\t<probability>`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
    },
    /// Render a metrics file written by `eval` or `train` as a table.
    Report { metrics: PathBuf },
    /// Write the seeded synthetic dataset as PNGs plus manifest.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 40)]
        side: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Compatibility => 3,
                ErrorKind::Internal => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::preset(Preset::Test),
            };
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            if manifest.is_some() {
                cfg.train_manifest = manifest;
            }
            if out.is_some() {
                cfg.out = out;
            }
            cfg.validate()?;
            // Parallel preprocessing stays off for the test preset unless asked for.
            let default_threads = (cfg.preset == Preset::Test).then_some(1);
            set_threads(cli.threads.or(cfg.threads).or(default_threads))?;
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            config,
        } => {
            set_threads(cli.threads)?;
            cmd_eval(&checkpoint, &manifest, out.as_deref(), config.as_deref())
        }
        Command::Predict {
            checkpoint,
            image,
            caption,
        } => cmd_predict(&checkpoint, &image, &caption),
        Command::Report { metrics } => {
            print!("{}", render(&ClassificationReport::load(metrics)?));
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            per_class,
            side,
        } => {
            let memes = dataset::synth_dataset(seed, per_class, side, &SYNTH_WORDS)?;
            let manifest = dataset::export(&memes, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), Error> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_split(path: &Path) -> Result<Vec<dataset::Meme>, Error> {
    let (rows, stats) = dataset::load_manifest(path)?;
    eprintln!("{}: {stats}", path.display());
    dataset::load_memes(&rows)
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Error> {
    let train_path = cfg
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::Config {
            key: "data.train".into(),
            reason: "no training manifest given".into(),
        })?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("memefuse-run"));
    fs::create_dir_all(out.join("validation")).map_err(|e| Error::Input {
        path: out.clone(),
        reason: e.to_string(),
    })?;

    let stopwords = match &cfg.stopwords {
        Some(p) => StopWords::load(p)?,
        None => StopWords::default(),
    };
    let train_memes = load_split(train_path)?;
    let captions: Vec<String> = train_memes.iter().map(|m| clean_caption(&m.caption, &stopwords)).collect();
    let vocab = Vocabulary::build(&captions, cfg.min_freq)?;
    let model_cfg = cfg.model_config(vocab.len());
    let pre = Preprocessor::new(&model_cfg, stopwords, vocab)?;
    let train_data = dataset::encode_memes(&pre, &train_memes)?;
    let validation = match &cfg.validation_manifest {
        Some(p) => Some(dataset::encode_memes(&pre, &load_split(p)?)?),
        None => None,
    };

    let mut model = MemeClassifier::<f32>::new(model_cfg, cfg.seed)?;
    eprintln!(
        "model: {} parameters, vocabulary {}, {} training steps",
        model.params.num_elements(),
        pre.vocab.len(),
        cfg.train.total_steps(train_data.len())
    );
    let mut write_err = None;
    let history = train(&mut model, &train_data, validation.as_deref(), &cfg.train, |e| {
        let val = e
            .validation
            .as_ref()
            .map(|r| format!(", validation accuracy {:.4}, weighted F1 {:.4}", r.accuracy, r.weighted_avg.f1))
            .unwrap_or_default();
        eprintln!("epoch {} (step {}): train accuracy {:.4}{val}", e.epoch, e.step, e.train_accuracy);
        if let Some(r) = &e.validation {
            let stem = out.join("validation").join(format!("epoch-{:03}", e.epoch));
            let res = write(&stem.with_extension("toml"), r.to_toml())
                .and_then(|_| write(&stem.with_extension("txt"), render(r)));
            if let Err(err) = res {
                write_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(err) = write_err {
        return Err(err);
    }

    write(&out.join("history.jsonl"), history.steps_jsonl())?;
    let epochs: String = history
        .epochs
        .iter()
        .map(|e| format!("{{\"epoch\":{},\"step\":{},\"train_accuracy\":{}}}\n", e.epoch, e.step, e.train_accuracy))
        .collect();
    write(&out.join("epochs.jsonl"), epochs)?;
    pre.vocab.save(out.join("vocab.txt"))?;
    let ckpt = out.join("checkpoint.mfc");
    checkpoint::save(&ckpt, &model, &pre)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest: &Path, out: Option<&Path>, config: Option<&Path>) -> Result<(), Error> {
    let (model, pre) = checkpoint::load::<f32>(ckpt)?;
    if let Some(config) = config {
        let expected = RunConfig::load(config)?.model_config(pre.vocab.len());
        if &expected != model.config() {
            return Err(Error::Incompatible {
                what: "model config".into(),
                left: format!("{} (checkpoint)", describe(model.config())),
                right: format!("{} ({})", describe(&expected), config.display()),
            });
        }
    }
    let memes = load_split(manifest)?;
    let data = dataset::encode_memes(&pre, &memes)?;
    let r = report(&evaluate(&model, &data)?)?;
    print!("{}", render(&r));
    for flag in &r.undefined {
        eprintln!("warning: {flag} is 0/0, reported as 0");
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::Input {
        path: dir.clone(),
        reason: e.to_string(),
    })?;
    write(&dir.join("metrics.toml"), r.to_toml())
}

fn describe(m: &memefuse_core::ModelConfig) -> String {
    format!(
        "vit {}x{}/{} text {}x{}/{} vocab {}",
        m.vit.depth, m.vit.embed_dim, m.vit.heads, m.text.depth, m.text.embed_dim, m.text.heads, m.text.vocab_size
    )
}

fn cmd_predict(ckpt: &Path, image: &Path, caption: &str) -> Result<(), Error> {
    let (model, pre) = checkpoint::load::<f32>(ckpt)?;
    let img = RawImage::open(image)?;
    let sample = pre.encode(&img, caption, memefuse_core::ClassLabel::NonTroll)?;
    let z = model.logit(&sample)?;
    println!("{}\t{:.4}", model.fusion.predict(z), sigmoid(z));
    Ok(())
}
