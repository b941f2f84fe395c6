//! Compositional task taxonomy over input and output stem sets.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Rng;

const MAX_TASK_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskLabel {
    /// Unconditional generation: no inputs.
    UG,
    /// Accompaniment generation: disjoint inputs and outputs.
    AG,
    /// Source separation: outputs strictly inside the inputs.
    SS,
    /// Edit-add: inputs strictly inside the outputs.
    EA,
    /// Edit-replace: overlapping sets, neither containing the other.
    ER,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 5] = [
        TaskLabel::UG,
        TaskLabel::AG,
        TaskLabel::SS,
        TaskLabel::EA,
        TaskLabel::ER,
    ];
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    /// Input stem indices, sorted.
    pub inputs: Vec<usize>,
    /// Output stem indices, sorted, non-empty.
    pub outputs: Vec<usize>,
    pub label: TaskLabel,
}

/// Labels a task. Identical non-empty sets are not a task and are rejected.
pub fn classify_task(inputs: &[usize], outputs: &[usize]) -> Result<TaskLabel> {
    let y: BTreeSet<usize> = inputs.iter().copied().collect();
    let x: BTreeSet<usize> = outputs.iter().copied().collect();
    if x.is_empty() {
        return Err(Error::Task("the output set must be non-empty".into()));
    }
    if y.is_empty() {
        return Ok(TaskLabel::UG);
    }
    if y == x {
        return Err(Error::Task("input and output sets are identical".into()));
    }
    if y.is_disjoint(&x) {
        Ok(TaskLabel::AG)
    } else if x.is_subset(&y) {
        Ok(TaskLabel::SS)
    } else if y.is_subset(&x) {
        Ok(TaskLabel::EA)
    } else {
        Ok(TaskLabel::ER)
    }
}

/// Which task labels [`sample_task`] may return.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPolicy {
    All,
    Only(BTreeSet<TaskLabel>),
}

impl TaskPolicy {
    pub fn allows(&self, label: TaskLabel) -> bool {
        match self {
            TaskPolicy::All => true,
            TaskPolicy::Only(set) => set.contains(&label),
        }
    }
}

fn mask_to_set(mask: u64) -> Vec<usize> {
    (0..64).filter(|i| mask >> i & 1 == 1).collect()
}

/// Uniform draw over valid `(inputs, outputs)` pairs of an `n_stems` track
/// whose label the policy allows.
pub fn sample_task(n_stems: usize, policy: &TaskPolicy, rng: &mut Rng) -> Result<TaskSample> {
    if n_stems == 0 {
        return Err(Error::Task(
            "cannot sample a task from a track without stems".into(),
        ));
    }
    if n_stems > 63 {
        return Err(Error::Task(format!(
            "{n_stems} stems exceed the supported 63"
        )));
    }
    let full = (1u64 << n_stems) - 1;
    for _ in 0..MAX_TASK_ATTEMPTS {
        let x = rng.random_range(1..=full);
        let y = rng.random_range(0..=full);
        if x == y {
            continue;
        }
        let (inputs, outputs) = (mask_to_set(y), mask_to_set(x));
        let label = classify_task(&inputs, &outputs)?;
        if policy.allows(label) {
            return Ok(TaskSample {
                inputs,
                outputs,
                label,
            });
        }
    }
    Err(Error::Task(format!(
        "no task allowed by {policy:?} on {n_stems} stems"
    )))
}
