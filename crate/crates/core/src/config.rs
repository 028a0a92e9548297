//! Run configuration and the train / fine-tune workflows built on it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_karpathy_json, load_manifest, synth_dataset, CaptionDataset, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Captioner, ModelConfig, ModelSpec};
use crate::params::ParamStore;
use crate::training::{
    config_hash, prepare_items, train_scst, train_xe, Checkpoint, EvalSet, ScstConfig, Stage, TrainItem, TrainLog,
    TrainState, XeConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A `manifest.json` listing feature files and captions.
    Manifest {
        path: PathBuf,
        #[serde(default = "default_min_count")]
        min_count: usize,
    },
    /// A Karpathy-split caption file plus a directory of feature files.
    Karpathy {
        captions: PathBuf,
        features: PathBuf,
        #[serde(default = "default_extension")]
        extension: String,
        #[serde(default = "default_min_count")]
        min_count: usize,
    },
    /// Generated in memory. The last `holdout` items form the test split.
    Synth {
        seed: u64,
        items: usize,
        grammar: usize,
        #[serde(default)]
        holdout: usize,
    },
}

fn default_min_count() -> usize {
    5
}

fn default_extension() -> String {
    "oft".into()
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 2,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub xe: XeConfig,
    #[serde(default)]
    pub scst: ScstConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates a JSON config; relative paths are resolved
    /// against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.dataset {
            DatasetConfig::Manifest { path, .. } => fix(path),
            DatasetConfig::Karpathy { captions, features, .. } => {
                fix(captions);
                fix(features);
            }
            DatasetConfig::Synth { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        let field = |name: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        };
        self.xe.validate().map_err(|e| field("xe", e))?;
        self.scst.validate().map_err(|e| field("scst", e))?;
        if self.eval.beam == 0 {
            return Err(Error::Config("eval.beam: must be at least 1".into()));
        }
        if let DatasetConfig::Synth {
            items, grammar, holdout, ..
        } = self.dataset
        {
            if holdout >= items || !(2..=8).contains(&grammar) {
                return Err(Error::Config(
                    "dataset.synth: items must exceed holdout and grammar must lie within 2..=8".into(),
                ));
            }
        }
        Ok(())
    }

    /// Loads the dataset and vocabulary and encodes the train and eval splits.
    pub fn prepare(&self) -> Result<Prepared> {
        let (dataset, vocab) = self.load_dataset()?;
        let max_len = self.model.max_len;
        let train = prepare_items(&dataset, Split::Train, &vocab, max_len)?;
        let eval = if self.eval.split == Split::Train {
            train.clone()
        } else {
            prepare_items(&dataset, self.eval.split, &vocab, max_len)?
        };
        let levels = train[0].features.shapes();
        for it in train.iter().chain(&eval) {
            if it.features.shapes() != levels {
                return Err(Error::Data(format!(
                    "image {} has feature levels {:?}, expected {:?}",
                    it.id,
                    it.features.shapes(),
                    levels
                )));
            }
        }
        Ok(Prepared {
            vocab,
            train,
            eval,
            levels,
        })
    }

    fn load_dataset(&self) -> Result<(CaptionDataset, Vocabulary)> {
        match &self.dataset {
            DatasetConfig::Synth {
                seed,
                items,
                grammar,
                holdout,
            } => {
                let mut s = synth_dataset(*seed, *items, *grammar)?;
                for it in s.dataset.items.iter_mut().skip(items - holdout) {
                    it.split = Split::Test;
                }
                Ok((s.dataset, s.vocab))
            }
            DatasetConfig::Manifest { path, min_count } => {
                let d = load_manifest(path)?.into_memory()?;
                let v = d.vocabulary(*min_count)?;
                Ok((d, v))
            }
            DatasetConfig::Karpathy {
                captions,
                features,
                extension,
                min_count,
            } => {
                if !features.is_dir() {
                    return Err(Error::Data(format!(
                        "feature directory {} does not exist",
                        features.display()
                    )));
                }
                let d = load_karpathy_json(captions, features, extension)?.into_memory()?;
                let v = d.vocabulary(*min_count)?;
                Ok((d, v))
            }
        }
    }

    pub fn spec(&self, prepared: &Prepared) -> ModelSpec {
        ModelSpec {
            config: self.model.clone(),
            levels: prepared.levels.clone(),
            vocab_size: prepared.vocab.len(),
        }
    }

    fn eval_set<'a>(&self, prepared: &'a Prepared) -> EvalSet<'a> {
        EvalSet {
            items: &prepared.eval,
            vocab: &prepared.vocab,
            beam: self.eval.beam,
        }
    }
}

/// Encoded training and evaluation data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<TrainItem>,
    pub eval: Vec<TrainItem>,
    pub levels: Vec<(usize, usize)>,
}

/// Cross-entropy stage from freshly initialized parameters.
pub fn run_xe(cfg: &RunConfig, prepared: &Prepared) -> Result<(Checkpoint, TrainLog)> {
    let spec = cfg.spec(prepared);
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, &spec, cfg.seed)?;
    let mut state = TrainState::new(store, Stage::Xe);
    let mut log = TrainLog::xe();
    train_xe(
        &model,
        &mut state,
        &prepared.train,
        &cfg.xe,
        cfg.seed,
        Some(cfg.eval_set(prepared)),
        &mut log,
    )?;
    Ok((
        Checkpoint {
            spec,
            vocab: prepared.vocab.words().to_vec(),
            state,
        },
        log,
    ))
}

/// Self-critical stage starting from an XE checkpoint (or resuming an SCST
/// one). The checkpoint must match the config's model section and vocabulary.
pub fn run_scst(cfg: &RunConfig, prepared: &Prepared, ckpt: Checkpoint) -> Result<(Checkpoint, TrainLog)> {
    let spec = cfg.spec(prepared);
    if config_hash(&spec) != ckpt.config_hash() {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match the run config ({})",
            ckpt.config_hash(),
            config_hash(&spec)
        )));
    }
    if ckpt.spec != spec || ckpt.vocab != prepared.vocab.words() {
        return Err(Error::Data("checkpoint vocabulary or feature layout differs from the dataset".into()));
    }
    let model = ckpt.model()?;
    let mut state = match ckpt.state.stage {
        Stage::Xe => ckpt.state.restart(Stage::Scst),
        Stage::Scst => ckpt.state,
    };
    let mut log = TrainLog::scst();
    train_scst(
        &model,
        &mut state,
        &prepared.train,
        &prepared.vocab,
        &cfg.scst,
        cfg.seed,
        Some(cfg.eval_set(prepared)),
        &mut log,
    )?;
    Ok((
        Checkpoint {
            spec,
            vocab: ckpt.vocab,
            state,
        },
        log,
    ))
}
