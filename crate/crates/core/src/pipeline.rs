//! End-to-end commands: data generation, training runs with their output
//! directory, evaluation of a saved run and box extraction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer_head::AnswerVocabulary;
use crate::box_extractor::{extract_with_boxes, BoxSpec};
use crate::config::{BoxesConfig, RunConfig};
use crate::dataset::{
    encode_rsb, generate_synthetic, read_rsb, to_jsonl, write_dataset, DataConfig, Dataset,
    MultispectralImage, Split,
};
use crate::error::{Error, Result};
use crate::model::VqaModel;
use crate::rng;
use crate::text::Vocabulary;
use crate::train::{self, calibrate_features, image_features, prepare_examples, EpochRecord, MetricsReport, BOX_STREAM};

pub const MODEL_FILE: &str = "model.vbf";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ANSWERS_FILE: &str = "answers.json";
pub const CONFIG_FILE: &str = "config.resolved.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate a synthetic dataset into `out` together with the resolved config.
pub fn generate_data(out: &Path, config: &DataConfig) -> Result<Dataset> {
    let ds = generate_synthetic(config)?;
    create_dir(out)?;
    write_dataset(out, &ds)?;
    let resolved = RunConfig {
        data: config.clone(),
        ..RunConfig::default()
    };
    resolved.save(&out.join(CONFIG_FILE))?;
    Ok(ds)
}

/// A trained model with everything needed to evaluate it again.
pub struct TrainRun {
    pub model: VqaModel,
    pub vocab: Vocabulary,
    pub answers: AnswerVocabulary,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Fully resolved configuration the run used.
    pub config: RunConfig,
}

fn image_dims(dataset: &Dataset) -> Result<(usize, usize, usize)> {
    let first = dataset.images.first().ok_or(Error::Empty("dataset has no images"))?;
    Ok((first.bands(), first.height(), first.width()))
}

/// Build the text and answer vocabularies from the training split, train,
/// and keep the best validation epoch.
pub fn train_run(dataset: &Dataset, config: &RunConfig) -> Result<TrainRun> {
    config.validate()?;
    let (bands, height, width) = image_dims(dataset)?;
    let config = config.resolved(bands, height, width);
    let train_triplets = dataset.split_triplets(Split::Train);
    if train_triplets.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let questions: Vec<&str> = train_triplets.iter().map(|t| t.question.as_str()).collect();
    let vocab = Vocabulary::build(&questions);
    let answer_list: Vec<&str> = train_triplets.iter().map(|t| t.answer.as_str()).collect();
    let answers = AnswerVocabulary::build(&answer_list, config.answers.k_max)?;

    let mut model = VqaModel::new(config.model_config(bands, vocab.size(), answers.len()))?;
    let mut features = image_features(&model, dataset, &config.box_extractor(height, width))?;
    let max_len = config.model.max_text_len;
    let train_ex = prepare_examples(dataset, Split::Train, &vocab, &answers, max_len);
    calibrate_features(&mut model, &mut features, &train_ex)?;
    let val_ex = prepare_examples(dataset, Split::Validation, &vocab, &answers, max_len);
    let outcome = train::train(model, &features, &train_ex, &val_ex, &answers, &config.train)?;
    Ok(TrainRun {
        model: outcome.model,
        vocab,
        answers,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        config,
    })
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    to_jsonl(history)
}

/// Write `model.vbf`, `history.jsonl`, `vocab.json`, `answers.json` and
/// `config.resolved.json` into `dir`.
pub fn write_run(dir: &Path, run: &TrainRun) -> Result<()> {
    create_dir(dir)?;
    run.model.save(&dir.join(MODEL_FILE))?;
    let path = dir.join(HISTORY_FILE);
    fs::write(&path, history_jsonl(&run.history)).map_err(|e| Error::io(&path, e))?;
    run.vocab.save(&dir.join(VOCAB_FILE))?;
    run.answers.save(&dir.join(ANSWERS_FILE))?;
    run.config.save(&dir.join(CONFIG_FILE))
}

/// A saved run loaded back from its model file and sibling files.
pub struct SavedRun {
    pub model: VqaModel,
    pub vocab: Vocabulary,
    pub answers: AnswerVocabulary,
    pub config: RunConfig,
}

pub fn load_run(model_path: &Path) -> Result<SavedRun> {
    let dir = model_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let answers = AnswerVocabulary::load(&dir.join(ANSWERS_FILE))?;
    let model_config = config.model_config(config.data.bands, vocab.size(), answers.len());
    let model = VqaModel::load(model_path, model_config)?;
    Ok(SavedRun {
        model,
        vocab,
        answers,
        config,
    })
}

/// Evaluate a model on one split with the boxes its configuration implies.
pub fn evaluate_split(
    model: &VqaModel,
    vocab: &Vocabulary,
    answers: &AnswerVocabulary,
    config: &RunConfig,
    dataset: &Dataset,
    split: Split,
) -> Result<MetricsReport> {
    let (bands, height, width) = image_dims(dataset)?;
    if bands != model.config().bands {
        return Err(Error::BandMismatch {
            expected: model.config().bands,
            got: bands,
        });
    }
    let examples = prepare_examples(dataset, split, vocab, answers, config.model.max_text_len);
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let features = image_features(model, dataset, &config.box_extractor(height, width))?;
    train::evaluate(model, &features, &examples, answers)
}

pub fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("serializable")
}

/// Plain-text table of per-type accuracy, AA and OA with two decimals.
pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>8}", "type", "accuracy", "count");
    for (t, acc) in &report.per_type {
        let _ = writeln!(out, "{:<12} {:>8.2} {:>8}", t.as_str(), acc, report.counts[t]);
    }
    let _ = writeln!(out, "{:<12} {:>8.2} {:>8}", "AA", report.aa, "");
    let _ = writeln!(out, "{:<12} {:>8.2} {:>8}", "OA", report.oa, report.total());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSidecar {
    pub seed: u64,
    pub boxes: Vec<BoxSpec>,
}

/// Sidecar path next to a box stack: same stem, `.json` extension.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// Sample boxes from an RSB image and write the `b × c × H' × W'` stack as
/// consecutive RSB records plus a JSON sidecar listing the boxes. Boxes
/// match those of image index 0 under `seed` during training.
pub fn extract_boxes(image: &Path, boxes: &BoxesConfig, seed: u64, out: &Path) -> Result<Vec<BoxSpec>> {
    let img = MultispectralImage::new(read_rsb(image)?)?;
    let config = boxes.resolve(img.height(), img.width(), seed);
    let mut r = rng::image_stream(seed, 0, BOX_STREAM);
    let (stack, specs) = extract_with_boxes(&img, &config, &mut r)?;
    let mut bytes = Vec::new();
    for i in 0..specs.len() {
        bytes.extend(encode_rsb(&stack.slice_leading(i))?);
    }
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    let sidecar = BoxSidecar {
        seed,
        boxes: specs.clone(),
    };
    let path = sidecar_path(out);
    fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("serializable"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(specs)
}

pub fn load_boxes_config(path: &Path) -> Result<BoxesConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
