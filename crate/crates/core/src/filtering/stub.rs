//! Scripted model factory for exercising the loop without real training.

use super::{FilterError, IterationModel, ModelFactory, SampleView};
use crate::data::ImageShape;
use std::collections::HashMap;
use std::sync::Arc;

/// Predictions keyed by (iteration, sample id). Unscripted queries echo the
/// sample's current label, which leaves active samples active and flagged
/// samples flagged.
#[derive(Debug, Clone, Default)]
pub struct ScriptedFactory {
    script: Arc<HashMap<(u32, u64), u16>>,
    /// (iteration, trained-on ids) per call, for assertions.
    pub train_calls: Vec<(u32, Vec<u64>)>,
}

impl ScriptedFactory {
    pub fn new(entries: impl IntoIterator<Item = ((u32, u64), u16)>) -> Self {
        ScriptedFactory {
            script: Arc::new(entries.into_iter().collect()),
            train_calls: Vec::new(),
        }
    }
}

struct ScriptedModel {
    script: Arc<HashMap<(u32, u64), u16>>,
    iteration: u32,
}

impl IterationModel for ScriptedModel {
    fn predict(&self, samples: &[SampleView]) -> Result<Vec<u16>, FilterError> {
        Ok(samples
            .iter()
            .map(|v| {
                self.script
                    .get(&(self.iteration, v.id))
                    .copied()
                    .unwrap_or(v.label)
            })
            .collect())
    }
}

impl ModelFactory for ScriptedFactory {
    fn train(
        &mut self,
        train: &[SampleView],
        _shape: ImageShape,
        _num_classes: u16,
        iteration: u32,
        _seed: u64,
    ) -> Result<Box<dyn IterationModel>, FilterError> {
        self.train_calls
            .push((iteration, train.iter().map(|v| v.id).collect()));
        Ok(Box::new(ScriptedModel {
            script: Arc::clone(&self.script),
            iteration,
        }))
    }
}
