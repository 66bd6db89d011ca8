use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paddy growth stage: vegetative (GS1), reproductive (GS2), ripening (GS3),
/// harvesting/post-harvesting (GS4), plowing (GS5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    GS1,
    GS2,
    GS3,
    GS4,
    GS5,
}

pub const STAGE_COUNT: usize = 5;

pub const ALL_STAGES: [Stage; STAGE_COUNT] =
    [Stage::GS1, Stage::GS2, Stage::GS3, Stage::GS4, Stage::GS5];

impl Stage {
    /// Zero-based class index (GS1 -> 0 ... GS5 -> 4).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Stage> {
        ALL_STAGES
            .get(i)
            .copied()
            .ok_or_else(|| Error::data(format!("stage index {i} out of range 0..{STAGE_COUNT}")))
    }

    pub fn parse(token: &str) -> Result<Stage> {
        match token {
            "GS1" => Ok(Stage::GS1),
            "GS2" => Ok(Stage::GS2),
            "GS3" => Ok(Stage::GS3),
            "GS4" => Ok(Stage::GS4),
            "GS5" => Ok(Stage::GS5),
            other => Err(Error::data(format!("unknown stage token {other:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::GS1 => "GS1",
            Stage::GS2 => "GS2",
            Stage::GS3 => "GS3",
            Stage::GS4 => "GS4",
            Stage::GS5 => "GS5",
        };
        f.write_str(s)
    }
}
