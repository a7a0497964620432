use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-label conditioning. `Null` is the unconditional slot used by
/// classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    /// Row of the condition-embedding table; the null slot sits after the classes.
    pub fn slot(self, num_classes: usize) -> usize {
        match self {
            Condition::Class(c) => c,
            Condition::Null => num_classes,
        }
    }

    pub fn check(self, num_classes: usize) -> Result<()> {
        match self {
            Condition::Class(c) if c >= num_classes => Err(Error::invalid(format!(
                "condition {c} out of range for {num_classes} classes"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "null" | "none" | "uncond" => Ok(Condition::Null),
            other => other
                .parse()
                .map(Condition::Class)
                .map_err(|_| Error::invalid(format!("bad condition `{other}`"))),
        }
    }
}
