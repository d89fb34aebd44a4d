//! Versioned JSON checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{LabelSet, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamWState;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub planned_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub labels: LabelSet,
    pub params: Vec<NamedTensor>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamWState>,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocab, labels: &LabelSet) -> Self {
        let params = model
            .params
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            vocab: vocab.tokens().to_vec(),
            labels: labels.clone(),
            params,
            train: None,
            optimizer: None,
            progress: Progress::default(),
        }
    }

    pub fn from_trainer(trainer: &Trainer, vocab: &Vocab, labels: &LabelSet) -> Self {
        let mut c = Self::from_model(&trainer.model, vocab, labels);
        c.train = Some(trainer.config.clone());
        c.optimizer = Some(trainer.optimizer.clone());
        c.progress = Progress {
            epoch: trainer.epoch,
            step: trainer.step,
            planned_steps: trainer.planned_steps,
        };
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let c: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    /// Rebuilds the model, checking every stored tensor against the shape the
    /// configuration implies.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        let mut seen = BTreeSet::new();
        for t in &self.params {
            let id = model
                .params
                .find(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {:?}", t.name)))?;
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("parameter {:?} stored twice", t.name)));
            }
            let value = Tensor::new(t.shape.clone(), t.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {:?}: {e}", t.name)))?;
            model.params.set(id, value)?;
        }
        if let Some(missing) = model.params.entries().iter().find(|e| !seen.contains(e.name.as_str())) {
            return Err(Error::Checkpoint(format!("parameter {:?} missing", missing.name)));
        }
        Ok(model)
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn restore_trainer(&self, config: Option<TrainConfig>) -> Result<Trainer> {
        let model = self.restore_model()?;
        let config = config
            .or_else(|| self.train.clone())
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training configuration".into()))?;
        let mut trainer = Trainer::new(model, config)?;
        if let Some(opt) = &self.optimizer {
            opt.validate(&trainer.model.params)?;
            let lr = trainer.optimizer.config.lr;
            let wd = trainer.optimizer.config.weight_decay;
            trainer.optimizer = opt.clone();
            trainer.optimizer.config.lr = lr;
            trainer.optimizer.config.weight_decay = wd;
        }
        trainer.epoch = self.progress.epoch;
        trainer.step = self.progress.step;
        trainer.planned_steps = self.progress.planned_steps;
        Ok(trainer)
    }
}
