use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use sketchstyle::data::components::{stroke_coverage, Category};
use sketchstyle::data::raster::{decode_rgb_png, encode_labels_png, encode_sketch_png};
use sketchstyle::data::{
    extract_labels, extract_sketch, generate_procedural_corpus, load_dataset, save_dataset, LabelSchema, SegmenterTraining,
    Split, TrainingSample,
};
use sketchstyle::losses::{PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
use sketchstyle::model::{Generator, GeneratorConfig, ScModel};
use sketchstyle::pipeline;
use sketchstyle::retrieval::EmbedderTraining;
use sketchstyle::service::artifacts::{GLOBAL_INDEX, SEGMENTER_FILE};
use sketchstyle::service::{serve, AppState, Artifacts, StyleCatalog};
use sketchstyle::training::{
    evaluate_mean_baseline, evaluate_oracle, evaluate_reconstruction, model_for, pretrain_generator, run_ablation_grid,
    to_csv, AblationGrid, GanConfig, TrainConfig, Trainer,
};
use sketchstyle::{Error, Result};

#[derive(Parser)]
#[command(name = "sketchstyle", version, about = "Sketch and label-map conditioned face synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset generation and preprocessing
    #[command(subcommand)]
    Data(DataCmd),
    /// Adversarially pretrain a generator on procedural faces
    PretrainGan(PretrainArgs),
    /// Train the conditional encoder from a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on one split; prints CSV
    Eval(EvalArgs),
    /// Run an ablation grid from a TOML file
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Retrieval indexes
    #[command(subcommand)]
    Index(IndexCmd),
    /// Write a style catalog from a dataset's paired codes
    Styles {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write a dataset directory: procedural, or sampled from a generator
    Gen(GenArgs),
    /// Extract an edge sketch from one RGB PNG
    Sketch {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter (--train) or apply one to an RGB PNG
    Segment(SegmentArgs),
    /// Cut every sample of a dataset into per-category components (JSON)
    Decompose {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training-split size; defaults to 80%
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Sample from this generator instead of rendering procedural faces
    #[arg(long, requires = "segmenter")]
    generator: Option<PathBuf>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    train: bool,
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, required_unless_present = "train")]
    input: Option<PathBuf>,
    #[arg(long, required_unless_present = "train")]
    segmenter: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Optional TOML with GAN settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    corpus_n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Train an embedder and index one category (or `global`)
    Build {
        #[arg(long)]
        category: String,
        /// Dataset directory whose samples carry poses
        #[arg(long)]
        corpus: PathBuf,
        /// Artifact directory; the index goes to <out>/<category>
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Artifact directory with styles, segmenter and indexes
    #[arg(long)]
    index_dir: Option<PathBuf>,
}

fn extractor(dev: &Device) -> Result<PerceptualExtractor> {
    PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED, dev)
}

fn load_samples(dir: &Path, style_split: usize) -> Result<Vec<TrainingSample>> {
    load_dataset(dir, &LabelSchema::desk(), style_split)
}

fn need<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::Config(format!("the training config must set {what}")))
}

fn data(cmd: DataCmd, dev: &Device) -> Result<()> {
    let schema = LabelSchema::desk();
    match cmd {
        DataCmd::Gen(a) => {
            let n_train = a.n_train.unwrap_or(a.n * 4 / 5);
            let samples = match (&a.generator, &a.segmenter) {
                (Some(g), Some(s)) => {
                    let (g, _) = Generator::load(g, dev)?;
                    let seg = sketchstyle::data::Segmenter::load(s, dev)?;
                    pipeline::generated_dataset(&g, &seg, a.n, n_train, a.seed)?
                }
                _ => pipeline::procedural_dataset(a.n, n_train, a.seed, a.res)?,
            };
            save_dataset(&a.out, &samples, &schema)?;
            eprintln!("wrote {} samples ({n_train} train) to {}", samples.len(), a.out.display());
        }
        DataCmd::Sketch { input, out } => {
            let img = decode_rgb_png(&fs::read(input)?)?;
            fs::write(out, encode_sketch_png(&extract_sketch(&img), img.res)?)?;
        }
        DataCmd::Segment(a) if a.train => {
            let corpus = generate_procedural_corpus(a.n, a.seed, 64);
            let opts = SegmenterTraining {
                steps: a.steps,
                ..Default::default()
            };
            let (seg, acc) = pipeline::train_segmenter(&corpus, a.n * 5 / 6, opts, dev)?;
            seg.save(&a.out)?;
            println!("{}", serde_json::json!({ "held_out_pixel_accuracy": acc }));
        }
        DataCmd::Segment(a) => {
            let seg = sketchstyle::data::Segmenter::load(a.segmenter.as_ref().expect("clap requires it"), dev)?;
            let img = decode_rgb_png(&fs::read(a.input.as_ref().expect("clap requires it"))?)?;
            fs::write(&a.out, encode_labels_png(&extract_labels(&img, &seg)?, img.res, &schema)?)?;
        }
        DataCmd::Decompose { dataset, out } => {
            let samples = load_samples(&dataset, 0)?;
            let comps = pipeline::corpus_components(&samples)?;
            let mut cov = 0.0;
            for s in &samples {
                let own: Vec<_> = comps.iter().filter(|c| c.source_id == s.id).cloned().collect();
                cov += stroke_coverage(&s.sketch, &own, s.image.res);
            }
            fs::write(&out, serde_json::to_vec(&comps)?)?;
            eprintln!(
                "{} components, mean stroke coverage {:.3}",
                comps.len(),
                cov / samples.len().max(1) as f64
            );
        }
    }
    Ok(())
}

fn pretrain(a: PretrainArgs, dev: &Device) -> Result<()> {
    let mut cfg: GanConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => GanConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let g = Generator::new(&GeneratorConfig::desk(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(a.seed), dev)?;
    let corpus: Vec<_> = generate_procedural_corpus(a.corpus_n, a.seed, g.config().max_res)
        .into_iter()
        .map(|s| s.image)
        .collect();
    let report = pretrain_generator(&g, &corpus, &cfg, &extractor(dev)?, |s| {
        if s.step % 100 == 0 {
            eprintln!("step {} d {:.4} g {:.4}", s.step, s.d_loss, s.g_loss);
        }
    })?;
    g.save(&a.out, serde_json::json!({ "gan": cfg, "final_fid": report.final_fid }))?;
    println!(
        "{}",
        serde_json::json!({ "baseline_fid": report.baseline_fid, "final_fid": report.final_fid, "steps": report.steps })
    );
    Ok(())
}

fn train(path: &Path, dev: &Device) -> Result<()> {
    let cfg = TrainConfig::load(path)?;
    let (g, _) = Generator::load(need(&cfg.generator, "generator")?, dev)?;
    let out = need(&cfg.out_dir, "out_dir")?.clone();
    let samples = load_samples(need(&cfg.dataset, "dataset")?, g.config().high_style_count())?;
    let train: Vec<_> = samples.into_iter().filter(|s| s.split == Split::Train).collect();
    let model = model_for(&g, &cfg)?;
    let steps = cfg.steps;
    let mut trainer = Trainer::new(model, cfg, train, extractor(dev)?)?;
    trainer.run(steps, |r, _| {
        if r.step % 100 == 0 {
            eprintln!("step {} total {:.4}", r.step, r.losses.total);
        }
        Ok(true)
    })?;
    let p = trainer.save_checkpoint(&out)?;
    eprintln!("saved {}", p.display());
    Ok(())
}

fn eval(a: EvalArgs, dev: &Device) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        s => return Err(Error::Config(format!("unknown split {s:?}"))),
    };
    let (model, _) = ScModel::load(&a.checkpoint, dev)?;
    let samples = load_samples(&a.dataset, model.generator_config().high_style_count())?;
    let train: Vec<_> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<_> = samples.iter().filter(|s| s.split == split).collect();
    let loss = sketchstyle::losses::LossConfig::for_generator(model.generator_config());
    let ex = extractor(dev)?;
    let rows = vec![
        evaluate_reconstruction("model", &model, &test, &loss, &ex)?,
        evaluate_mean_baseline(&train, &test, &loss, &ex)?,
        evaluate_oracle(&model, &test, &loss, &ex)?,
    ];
    let csv = to_csv(&rows);
    match a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(grid: &Path, out: &Path, dev: &Device) -> Result<()> {
    let grid = AblationGrid::from_toml(&fs::read_to_string(grid)?)?;
    let (g, _) = Generator::load(need(&grid.base.generator, "generator")?, dev)?;
    let samples = load_samples(need(&grid.base.dataset, "dataset")?, g.config().high_style_count())?;
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);
    let test: Vec<_> = test.iter().collect();
    let report = run_ablation_grid(&grid, &g, &train, &test, &extractor(dev)?, |spec, _| {
        eprintln!("trained {}", spec.name);
        Ok(())
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    fs::write(out.join("ablation.json"), report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn index(cmd: IndexCmd, dev: &Device) -> Result<()> {
    let IndexCmd::Build { category, corpus, out, steps } = cmd;
    let samples = load_samples(&corpus, 0)?;
    let opts = EmbedderTraining {
        steps,
        ..Default::default()
    };
    let (bundle, report) = if category == GLOBAL_INDEX {
        pipeline::global_bundle(&samples, opts, dev)?
    } else {
        let c = Category::parse(&category).ok_or_else(|| Error::Config(format!("unknown category {category:?}")))?;
        pipeline::component_bundle(c, &pipeline::corpus_components(&samples)?, opts, dev)?
    };
    bundle.save(&out.join(&category))?;
    println!(
        "{}",
        serde_json::json!({
            "category": category,
            "rows": bundle.index.len(),
            "untrained_l1": report.untrained_l1,
            "trained_l1": report.trained_l1,
        })
    );
    Ok(())
}

fn styles(dataset: &Path, generator: &Path, n: usize, out: &Path, dev: &Device) -> Result<()> {
    let (g, _) = Generator::load(generator, dev)?;
    let samples = load_samples(dataset, g.config().high_style_count())?;
    let codes: Vec<_> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .take(n)
        .map(|s| Ok((s.id.clone(), s.require_style()?.clone())))
        .collect::<Result<_>>()?;
    StyleCatalog::from_codes(&codes).save(out)
}

fn run(cli: Cli) -> Result<()> {
    let dev = Device::Cpu;
    match cli.cmd {
        Cmd::Data(c) => data(c, &dev),
        Cmd::PretrainGan(a) => pretrain(a, &dev),
        Cmd::Train { config } => train(&config, &dev),
        Cmd::Eval(a) => eval(a, &dev),
        Cmd::Ablate { grid, out } => ablate(&grid, &out, &dev),
        Cmd::Index(c) => index(c, &dev),
        Cmd::Styles { dataset, generator, n, out } => styles(&dataset, &generator, n, &out, &dev),
        Cmd::Serve(a) => {
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|e| Error::Config(format!("bad address: {e}")))?;
            if let Some(d) = &a.index_dir {
                if !d.join(SEGMENTER_FILE).exists() {
                    eprintln!("no {SEGMENTER_FILE} in {}; /extract will be unavailable", d.display());
                }
            }
            let artifacts = Artifacts::load(a.checkpoint.as_deref(), a.index_dir.as_deref(), &dev)?;
            let state = AppState::new(artifacts)?;
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on {addr}");
            rt.block_on(serve(addr, state))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
