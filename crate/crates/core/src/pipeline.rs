//! Glue shared by the command line, the FFI layer and the tests: config
//! files, corpus directories and checkpoints that carry their vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, ContrastiveItem, DatasetKind, FeatureDims, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, InputAblation, Model, ModelConfig};
use crate::training::{train_with, MetricRecord, TrainConfig, TrainData, TrainOutcome};

/// Model shape and training settings, read from a TOML file with `[model]`
/// and `[train]` tables. `model.vocab_size` is replaced by the size of the
/// corpus vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Everything read from a directory written by `gen-data`.
#[derive(Clone, Debug)]
pub struct CorpusDir {
    pub vocab: Vocabulary,
    pub data: TrainData,
    /// Absent when the directory has no `contrastive.jsonl`.
    pub contrastive: Option<Vec<ContrastiveItem>>,
}

/// Loads `vocab.txt` plus whichever of the dataset files exist. Only the
/// parallel set is required.
pub fn load_corpus_dir(dir: &Path, dims: &FeatureDims) -> Result<CorpusDir> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let optional = |name: &str, kind: DatasetKind| -> Result<Option<crate::data::Dataset>> {
        let path = dir.join(name);
        if path.exists() {
            load_dataset(&path, kind, &vocab, dims).map(Some)
        } else {
            Ok(None)
        }
    };
    let parallel = load_dataset(&dir.join("parallel.jsonl"), DatasetKind::Parallel, &vocab, dims)?
        .into_examples()?;
    let monolingual = optional("monolingual.jsonl", DatasetKind::Monolingual)?
        .map(|d| d.into_examples())
        .transpose()?
        .unwrap_or_default();
    let dev = optional("dev.jsonl", DatasetKind::Parallel)?
        .map(|d| d.into_examples())
        .transpose()?
        .unwrap_or_default();
    let contrastive = optional("contrastive.jsonl", DatasetKind::Contrastive)?
        .map(|d| d.into_items())
        .transpose()?;
    Ok(CorpusDir {
        vocab,
        data: TrainData {
            parallel,
            monolingual,
            dev,
        },
        contrastive,
    })
}

/// Feature shapes a corpus must have to be fed to models built from `cfg`.
pub fn feature_dims(cfg: &ModelConfig) -> FeatureDims {
    FeatureDims::from(cfg)
}

/// Initializes a model for `vocab` from `seed` and trains it. The seed also
/// replaces `cfg.train.seed`.
pub fn train_from_seed(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    data: &TrainData,
    seed: u64,
    observer: &mut dyn FnMut(&MetricRecord),
) -> Result<(TrainConfig, TrainOutcome)> {
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let model = Model::init(
        model_cfg,
        train_cfg.freeze_policy,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let outcome = train_with(&model, data, &train_cfg, observer)?;
    Ok((train_cfg, outcome))
}

pub const META_VOCAB: &str = "vocab";
pub const META_ABLATION: &str = "ablation";
pub const META_TRAIN_CONFIG: &str = "train_config";

/// Wraps a trained model with the vocabulary and the ablation it was
/// trained under so that the file is usable on its own.
pub fn make_checkpoint(
    model: &Model,
    vocab: &Vocabulary,
    train: &TrainConfig,
    extra: BTreeMap<String, String>,
) -> Result<Checkpoint> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Contract(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let json = |v: serde_json::Result<String>| v.map_err(|e| Error::Checkpoint(e.to_string()));
    let mut metadata = extra;
    metadata.insert(META_VOCAB.into(), json(serde_json::to_string(vocab.tokens()))?);
    metadata.insert(
        META_ABLATION.into(),
        json(serde_json::to_string(&train.effective_ablation()))?,
    );
    metadata.insert(META_TRAIN_CONFIG.into(), json(serde_json::to_string(train))?);
    Ok(Checkpoint {
        model: model.clone(),
        policy: Some(train.freeze_policy.name().to_string()),
        metadata,
    })
}

pub fn checkpoint_vocab(ckpt: &Checkpoint) -> Result<Vocabulary> {
    let raw = ckpt
        .metadata
        .get(META_VOCAB)
        .ok_or_else(|| Error::Checkpoint("no vocabulary in checkpoint metadata".into()))?;
    let tokens: Vec<String> =
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("vocabulary: {e}")))?;
    let vocab = Vocabulary::from_words(tokens.iter().map(String::as_str));
    if vocab.tokens() != tokens.as_slice() || vocab.len() != ckpt.model.config.vocab_size {
        return Err(Error::Checkpoint(
            "stored vocabulary does not match the model".into(),
        ));
    }
    Ok(vocab)
}

/// The ablation recorded at training time, or none for older files.
pub fn checkpoint_ablation(ckpt: &Checkpoint) -> Result<InputAblation> {
    match ckpt.metadata.get(META_ABLATION) {
        None => Ok(InputAblation::default()),
        Some(raw) => {
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("ablation: {e}")))
        }
    }
}
