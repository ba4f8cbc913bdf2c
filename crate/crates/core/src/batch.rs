//! Label batches shared by the counting, loss, and metric paths.

use serde::{Deserialize, Serialize};

/// Conventional marker for pixels excluded from losses and metrics.
pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Integer class labels for a batch of instances.
///
/// Every label must be a class index in `[0, C)` or equal `ignore_index`;
/// consumers validate against their own class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch {
    pub labels: Vec<u32>,
    pub ignore_index: u32,
}

impl LabelBatch {
    pub fn new(labels: Vec<u32>, ignore_index: u32) -> Self {
        Self {
            labels,
            ignore_index,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First label that is neither a valid class nor the ignore marker.
    pub fn first_invalid(&self, num_classes: usize) -> Option<(usize, u32)> {
        self.labels
            .iter()
            .enumerate()
            .find(|&(_, &l)| l != self.ignore_index && l as usize >= num_classes)
            .map(|(i, &l)| (i, l))
    }
}
