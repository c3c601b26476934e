//! Resumable training state: field, optimizer moments, progress and the
//! best validation checkpoint, stored in the field checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::adam::{Adam, AdamConfig, AdamState};
use super::TrainLog;
use crate::error::{Error, Result};
use crate::field::checkpoint::{read_container, write_container};
use crate::field::RadianceField;

pub const STATE_KIND: &str = "train-state";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub field: RadianceField,
    pub adam: Adam,
    /// Updates applied so far.
    pub iteration: usize,
    pub log: TrainLog,
    pub best_field: RadianceField,
    /// Iteration of `best_field`; 0 for the initial field.
    pub best_iteration: usize,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    field: Value,
    learning_rates: Vec<f64>,
    adam_step: u64,
    iteration: usize,
    best_iteration: usize,
    log: TrainLog,
}

fn field_meta(field: &RadianceField) -> Result<Value> {
    serde_json::to_value(serde_json::json!({
        "config": field.config,
        "labels": field.appearance.labels,
    }))
    .map_err(|e| Error::Data(e.to_string()))
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = StateMeta {
            field: field_meta(&self.field)?,
            learning_rates: self.adam.states.iter().map(|s| s.config.learning_rate).collect(),
            adam_step: self.adam.states.first().map_or(0, |s| s.step),
            iteration: self.iteration,
            best_iteration: self.best_iteration,
            log: self.log.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?;
        let mut blocks: Vec<&[f64]> = Vec::new();
        blocks.extend(self.field.param_slices().into_iter().map(|(_, s)| s));
        blocks.extend(self.adam.states.iter().map(|s| s.m.as_slice()));
        blocks.extend(self.adam.states.iter().map(|s| s.v.as_slice()));
        blocks.extend(self.best_field.param_slices().into_iter().map(|(_, s)| s));
        write_container(path, STATE_KIND, meta, &blocks)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let (meta, mut blocks) = read_container(path, STATE_KIND)?;
        let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
        let meta: StateMeta = serde_json::from_value(meta).map_err(|e| bad(e.to_string()))?;
        let n = meta.learning_rates.len();
        if blocks.len() != 4 * n {
            return Err(bad(format!("expected {} blocks, found {}", 4 * n, blocks.len())));
        }
        let best = blocks.split_off(3 * n);
        let v = blocks.split_off(2 * n);
        let m = blocks.split_off(n);
        let field = RadianceField::from_parts(meta.field.clone(), blocks).map_err(bad)?;
        let best_field = RadianceField::from_parts(meta.field, best).map_err(bad)?;
        let states = meta
            .learning_rates
            .iter()
            .zip(m)
            .zip(v)
            .map(|((&lr, m), v)| AdamState {
                config: AdamConfig::with_lr(lr),
                step: meta.adam_step,
                m,
                v,
            })
            .collect();
        Ok(TrainState {
            field,
            adam: Adam { states },
            iteration: meta.iteration,
            log: meta.log,
            best_field,
            best_iteration: meta.best_iteration,
        })
    }
}
