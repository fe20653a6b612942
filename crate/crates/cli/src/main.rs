use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vbfusion_core::config::RunConfig;
use vbfusion_core::dataset::{read_dataset, DataConfig, Split};
use vbfusion_core::pipeline::{
    evaluate_split, extract_boxes, format_report, generate_data, load_boxes_config, load_run,
    report_json, train_run, write_run,
};
use vbfusion_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vbfusion", version, about = "Visual question answering over multispectral images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `data` section is used; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        questions_per_image: Option<usize>,
    },
    /// Train a model and write its run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on one split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sample boxes from one image and write the resized stack.
    ExtractBoxes {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            out,
            config,
            n,
            bands,
            seed,
            image_size,
            questions_per_image,
        } => {
            let mut data = match config {
                Some(path) => RunConfig::load(&path)?.data,
                None => DataConfig::default(),
            };
            data.n_images = n.unwrap_or(data.n_images);
            data.bands = bands.unwrap_or(data.bands);
            data.seed = seed.unwrap_or(data.seed);
            data.image_size = image_size.unwrap_or(data.image_size);
            data.questions_per_image = questions_per_image.unwrap_or(data.questions_per_image);
            let ds = generate_data(&out, &data)?;
            println!("wrote {} images and {} triplets to {}", ds.images.len(), ds.triplets.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            config.validate()?;
            let dataset = read_dataset(&data)?;
            let run = train_run(&dataset, &config)?;
            write_run(&out, &run)?;
            for record in &run.history {
                match &record.validation {
                    Some(v) => println!("epoch {:>3}  loss {:.4}  val OA {:.2}", record.epoch, record.train_loss, v.oa),
                    None => println!("epoch {:>3}  loss {:.4}", record.epoch, record.train_loss),
                }
            }
            println!("best epoch {}", run.best_epoch);
        }
        Command::Evaluate {
            model,
            data,
            split,
            report,
        } => {
            let split = Split::parse(&split)?;
            let saved = load_run(&model)?;
            let dataset = read_dataset(&data)?;
            let metrics = evaluate_split(&saved.model, &saved.vocab, &saved.answers, &saved.config, &dataset, split)?;
            write(&report, &report_json(&metrics))?;
            print!("{}", format_report(&metrics));
        }
        Command::ExtractBoxes { image, boxes, seed, out } => {
            let config = load_boxes_config(&boxes)?;
            let specs = extract_boxes(&image, &config, seed, &out)?;
            for b in &specs {
                println!("{b:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
