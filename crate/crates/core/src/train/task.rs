use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::state::{enumerate_states, BinaryState, OutputVector};

use super::init_stack;

/// Depth and weight half-width of the random stack that labels the teacher task.
const TEACHER_DEPTH: usize = 2;
const TEACHER_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Parity,
    Teacher,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "parity" => Ok(TaskKind::Parity),
            "teacher" => Ok(TaskKind::Teacher),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Parity => "parity",
            TaskKind::Teacher => "teacher",
        })
    }
}

/// Toy classification tasks over every input `x ∈ {0,1}^n`, uniformly weighted.
///
/// `seed` only matters for the teacher task, whose labels are the argmax
/// decode of a random depth-2 stack.
pub fn make_task(kind: TaskKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("task width must be at least 1".into()));
    }
    let xs = enumerate_states(n)?;
    let labels: Vec<BinaryState> = match kind {
        TaskKind::Copy => xs.clone(),
        TaskKind::Parity => xs
            .iter()
            .map(|x| {
                let mut y = vec![0u8; n];
                y[0] = x.bits().iter().fold(0, |acc, b| acc ^ b);
                BinaryState::new(y)
            })
            .collect::<Result<_>>()?,
        TaskKind::Teacher => {
            let teacher = init_stack(n, TEACHER_DEPTH, seed, TEACHER_SCALE)?;
            xs.iter().map(|x| teacher.decode(x)).collect::<Result<_>>()?
        }
    };
    Dataset::uniform(
        xs.into_iter()
            .zip(labels.iter().map(OutputVector::from))
            .collect(),
    )
}
