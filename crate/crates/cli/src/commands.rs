use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use acrodis::checkpoint;
use acrodis::corpus::{
    build_pairs, compute_split_stats, gen_synthetic, load_dictionary, load_samples_mapped, pairs_to_json,
    samples_to_json, Dictionary, FieldMapping, SentenceSample, Upsample,
};
use acrodis::eval::{
    comparison_table, evaluate, macro_metrics, macro_metrics_over, mf_baseline, predict_all, predictions_to_json,
    ClassSet, ComparisonRow, MetricsReport, ModelScorer, PredictionRecord,
};
use acrodis::exec::ExecMode;
use acrodis::grad::{train, TrainData};
use acrodis::model::{bpe_word_corpus, tokenizer_corpus, DualPathModel, EncodedPair, Tokenizers};
use acrodis::tokenize::{bpe_train, wp_build_vocab, BpeVocab, WordPieceVocab};

use crate::config::RunConfig;
use crate::{Cli, Command, Global, Inputs, SplitName, UpsampleMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] acrodis::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn out_dir(g: &Global) -> Result<&Path> {
    let dir = g.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir)
}

/// Write to `<out>/<name>` when `--out` is given, else to stdout.
fn emit(g: &Global, name: &str, contents: &str) -> Result<()> {
    match &g.out {
        Some(_) => write(&out_dir(g)?.join(name), contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_json(&read(p)?).map_err(acrodis::Error::from)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.sync_seed();
    if let Some(p) = &g.preset {
        cfg.apply_preset(p)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {p:?}")))?;
    }
    match (g.upsample, g.upsample_mode) {
        (_, Some(UpsampleMode::ToCandidateCount)) => cfg.upsample = Upsample::ToCandidateCount,
        (_, Some(UpsampleMode::Balanced)) => cfg.upsample = Upsample::Balanced,
        (true, None) => cfg.upsample = Upsample::ToCandidateCount,
        (false, None) => {}
    }
    if let Some(p) = g.paths {
        cfg.paths = p.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_mode(g: &Global) -> Result<ExecMode> {
    match g.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(1) => Ok(ExecMode::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            // A pool may already exist when running in-process; keep it.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(ExecMode::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(ExecMode::Sequential),
        None => Ok(ExecMode::best_available()),
    }
}

fn load_dict(path: &Path) -> Result<Dictionary> {
    Ok(load_dictionary(&read(path)?)?)
}

fn load_split(path: &Path, dict: &Dictionary, require_gold: bool, mapping: &FieldMapping) -> Result<Vec<SentenceSample>> {
    Ok(load_samples_mapped(&read(path)?, dict, require_gold, mapping)?)
}

fn mapping(inputs: &Inputs) -> Result<FieldMapping> {
    match &inputs.field_map {
        Some(p) => Ok(FieldMapping::from_json(&read(p)?)?),
        None => Ok(FieldMapping::default()),
    }
}

/// Dictionary plus every sample file, each tagged with its file stem.
fn load_inputs(inputs: &Inputs, require_gold: bool) -> Result<(Dictionary, Vec<(String, Vec<SentenceSample>)>)> {
    let dict = load_dict(&inputs.dict)?;
    let m = mapping(inputs)?;
    let mut splits = Vec::new();
    for p in &inputs.samples {
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        splits.push((name, load_split(p, &dict, require_gold, &m)?));
    }
    Ok((dict, splits))
}

fn load_data_dir(dir: &Path, split: SplitName) -> Result<(Dictionary, Vec<SentenceSample>)> {
    let dict = load_dict(&dir.join("dictionary.json"))?;
    let samples = load_split(&dir.join(split.file()), &dict, true, &FieldMapping::default())?;
    Ok((dict, samples))
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerMeta {
    max_len_a: usize,
    max_len_b: usize,
}

struct LoadedModel {
    model: DualPathModel,
    tokenizers: Tokenizers,
}

fn load_model_dir(dir: &Path, best: bool) -> Result<LoadedModel> {
    let bpe = BpeVocab::from_file_str(&String::from_utf8_lossy(&read(&dir.join("bpe.txt"))?))?;
    let wordpiece = WordPieceVocab::from_file_str(&String::from_utf8_lossy(&read(&dir.join("wordpiece.txt"))?))?;
    let meta: TokenizerMeta =
        serde_json::from_slice(&read(&dir.join("tokenizer.json"))?).map_err(acrodis::Error::from)?;
    let ckpt = dir.join(if best { "best.ckpt" } else { "model.ckpt" });
    let model = checkpoint::from_bytes(&read(&ckpt)?)?;
    Ok(LoadedModel {
        model,
        tokenizers: Tokenizers {
            bpe,
            wordpiece,
            max_len_a: meta.max_len_a,
            max_len_b: meta.max_len_b,
        },
    })
}

/// `NAME=PATH`, or a bare path named after its last component.
fn named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let n = p
                .file_stem()
                .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (n, p)
        }
    }
}

fn report(gold: &[SentenceSample], pred: &[PredictionRecord], dict: &Dictionary, cs: ClassSet) -> Result<MetricsReport> {
    let g: Vec<&str> = gold.iter().map(|s| s.long_form.as_deref().unwrap_or_default()).collect();
    let p: Vec<&str> = pred.iter().map(|r| r.prediction.as_str()).collect();
    Ok(match cs {
        ClassSet::Union => macro_metrics(&g, &p)?,
        ClassSet::Dictionary => macro_metrics_over(&g, &p, dict.iter().flat_map(|(_, lfs)| lfs))?,
    })
}

/// Align cached predictions with the split by sample id.
fn align_cached(samples: &[SentenceSample], cached: Vec<PredictionRecord>) -> Result<Vec<PredictionRecord>> {
    let mut by_id: std::collections::HashMap<String, PredictionRecord> =
        cached.into_iter().map(|r| (r.id.clone(), r)).collect();
    samples
        .iter()
        .map(|s| {
            by_id
                .remove(&s.id)
                .ok_or_else(|| CliError::Usage(format!("no cached prediction for sample {:?}", s.id)))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = run_config(g)?;
    let mode = exec_mode(g)?;
    match cli.command {
        Command::Gen => {
            let dir = out_dir(g)?;
            let corpus = gen_synthetic(&cfg.synth)?;
            write(&dir.join("dictionary.json"), corpus.dictionary.to_json())?;
            write(&dir.join("train.json"), samples_to_json(&corpus.train))?;
            write(&dir.join("dev.json"), samples_to_json(&corpus.dev))?;
            write(&dir.join("test.json"), samples_to_json(&corpus.test))?;
            write(&dir.join("config.json"), cfg.to_json())?;
        }
        Command::Stats(inputs) => {
            let (dict, splits) = load_inputs(&inputs, false)?;
            let refs: Vec<(&str, &[SentenceSample])> = splits.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
            let stats = compute_split_stats(&refs, &dict)?;
            emit(g, "stats.json", &json(&stats))?;
        }
        Command::Pairs(inputs) => {
            let (dict, splits) = load_inputs(&inputs, true)?;
            let samples: Vec<SentenceSample> = splits.into_iter().flat_map(|(_, s)| s).collect();
            let pairs = build_pairs(&samples, &dict, cfg.upsample)?;
            emit(g, "pairs.json", &pairs_to_json(&pairs))?;
        }
        Command::TokTrainBpe { inputs, merges } => {
            let (dict, splits) = load_inputs(&inputs, false)?;
            let samples: Vec<SentenceSample> = splits.into_iter().flat_map(|(_, s)| s).collect();
            if let Some(m) = merges {
                cfg.tokenizer.bpe_merges = m;
            }
            let lines = tokenizer_corpus(&samples, &dict);
            let vocab = bpe_train(&bpe_word_corpus(&lines), cfg.tokenizer.bpe_merges)?;
            emit(g, "bpe.txt", &vocab.to_file_string())?;
        }
        Command::TokTrainWp { inputs, size } => {
            let (dict, splits) = load_inputs(&inputs, false)?;
            let samples: Vec<SentenceSample> = splits.into_iter().flat_map(|(_, s)| s).collect();
            if let Some(s) = size {
                cfg.tokenizer.wordpiece_size = s;
            }
            let vocab = wp_build_vocab(&tokenizer_corpus(&samples, &dict), cfg.tokenizer.wordpiece_size)?;
            emit(g, "wordpiece.txt", &vocab.to_file_string())?;
        }
        Command::Train { data, bpe, wordpiece } => {
            let dir = out_dir(g)?;
            let (dict, train_samples) = load_data_dir(&data, SplitName::Train)?;
            let dev_samples = load_split(&data.join("dev.json"), &dict, true, &FieldMapping::default())?;
            let tokenizers = match (bpe, wordpiece) {
                (Some(b), Some(w)) => Tokenizers {
                    bpe: BpeVocab::from_file_str(&String::from_utf8_lossy(&read(&b)?))?,
                    wordpiece: WordPieceVocab::from_file_str(&String::from_utf8_lossy(&read(&w)?))?,
                    max_len_a: cfg.tokenizer.max_len,
                    max_len_b: cfg.tokenizer.max_len,
                },
                _ => Tokenizers::train(&train_samples, &dict, &cfg.tokenizer)?,
            };
            let train_pairs = build_pairs(&train_samples, &dict, cfg.upsample)?;
            let train_set = TrainData::encode(&tokenizers, &train_pairs)?;
            let dev_set: Vec<EncodedPair> = build_pairs(&dev_samples, &dict, Upsample::Off)?
                .iter()
                .map(|p| tokenizers.encode_pair(p))
                .collect::<acrodis::Result<_>>()?;
            let model_cfg = cfg.model_config(tokenizers.bpe.vocab_size(), tokenizers.wordpiece.vocab_size());
            let mut model = DualPathModel::new(model_cfg, cfg.seed)?;
            log::info!(
                "training on {} pairs ({} sentences), {} dev pairs",
                train_set.len(),
                train_samples.len(),
                dev_set.len()
            );
            let outcome = train(&mut model, &train_set, Some(&dev_set), &cfg.train, mode)?;

            write(&dir.join("config.json"), cfg.to_json())?;
            write(&dir.join("bpe.txt"), tokenizers.bpe.to_file_string())?;
            write(&dir.join("wordpiece.txt"), tokenizers.wordpiece.to_file_string())?;
            let meta = TokenizerMeta {
                max_len_a: tokenizers.max_len_a,
                max_len_b: tokenizers.max_len_b,
            };
            write(&dir.join("tokenizer.json"), json(&meta))?;
            write(&dir.join("loss.csv"), outcome.history.to_csv())?;
            write(&dir.join("model.ckpt"), checkpoint::to_bytes(&model))?;
            let best = match outcome.best_dev {
                Some(b) => DualPathModel {
                    config: model.config.clone(),
                    params: b.params,
                },
                None => model,
            };
            write(&dir.join("best.ckpt"), checkpoint::to_bytes(&best))?;
        }
        Command::Eval {
            data,
            split,
            models,
            predictions,
            mf,
            best,
            dictionary_classes,
        } => {
            if models.is_empty() && predictions.is_empty() && !mf {
                return Err(CliError::Usage("nothing to evaluate: give --model, --predictions or --mf".into()));
            }
            if dictionary_classes {
                cfg.class_set = ClassSet::Dictionary;
            }
            let dir = out_dir(g)?;
            let (dict, samples) = load_data_dir(&data, split)?;
            let mut rows = Vec::new();
            let mut record = |name: &str, rep: &MetricsReport, preds: &[PredictionRecord]| -> Result<()> {
                write(&dir.join(format!("metrics_{name}.json")), rep.to_json())?;
                write(&dir.join(format!("predictions_{name}.json")), predictions_to_json(preds))?;
                rows.push(ComparisonRow::new(name, rep));
                Ok(())
            };
            if mf {
                let train_samples = load_split(&data.join("train.json"), &dict, true, &FieldMapping::default())?;
                let base = mf_baseline(&train_samples, &dict);
                let ev = evaluate(&base, &samples, &dict, cfg.class_set, mode)?;
                record("mf", &ev.report, &ev.predictions)?;
            }
            for spec in &models {
                let (name, path) = named(spec);
                let lm = load_model_dir(&path, best)?;
                let scorer = ModelScorer {
                    model: &lm.model,
                    tokenizers: &lm.tokenizers,
                };
                let ev = evaluate(&scorer, &samples, &dict, cfg.class_set, mode)?;
                record(&name, &ev.report, &ev.predictions)?;
            }
            for spec in &predictions {
                let (name, path) = named(spec);
                let cached: Vec<PredictionRecord> = serde_json::from_slice(&read(&path)?).map_err(acrodis::Error::from)?;
                let aligned = align_cached(&samples, cached)?;
                let rep = report(&samples, &aligned, &dict, cfg.class_set)?;
                record(&name, &rep, &aligned)?;
            }
            write(&dir.join("comparison.md"), comparison_table(&rows))?;
            write(&dir.join("comparison.json"), json(&rows))?;
            write(&dir.join("config.json"), cfg.to_json())?;
            print!("{}", comparison_table(&rows));
        }
        Command::Predict { model, inputs, best } => {
            let lm = load_model_dir(&model, best)?;
            let (dict, splits) = load_inputs(&inputs, false)?;
            let samples: Vec<SentenceSample> = splits.into_iter().flat_map(|(_, s)| s).collect();
            let scorer = ModelScorer {
                model: &lm.model,
                tokenizers: &lm.tokenizers,
            };
            let preds = predict_all(&scorer, &samples, &dict, mode)?;
            emit(g, "predictions.json", &predictions_to_json(&preds))?;
        }
        Command::BaselineMf {
            data,
            split,
            dictionary_classes,
        } => {
            if dictionary_classes {
                cfg.class_set = ClassSet::Dictionary;
            }
            let (dict, samples) = load_data_dir(&data, split)?;
            let train_samples = load_split(&data.join("train.json"), &dict, true, &FieldMapping::default())?;
            let base = mf_baseline(&train_samples, &dict);
            let ev = evaluate(&base, &samples, &dict, cfg.class_set, mode)?;
            if g.out.is_some() {
                let dir = out_dir(g)?;
                write(&dir.join("predictions_mf.json"), predictions_to_json(&ev.predictions))?;
                write(&dir.join("config.json"), cfg.to_json())?;
            }
            emit(g, "metrics_mf.json", &ev.report.to_json())?;
        }
    }
    Ok(())
}
