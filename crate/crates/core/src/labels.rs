//! The ten-way label taxonomy for crystallization trial images.
//!
//! Five labels denote crystal presence, five denote failed or non-crystal
//! outcomes. Label ids are stable and used as class indices by every model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassLabel {
    BadDrop = 0,
    Clear = 1,
    HeavyPrecipitate = 2,
    LargeCrystals = 3,
    LightPrecipitate = 4,
    MediumCrystals = 5,
    MicroCrystals = 6,
    NeedlesPlates = 7,
    PhaseSeparation = 8,
    SmallCrystals = 9,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::BadDrop,
        ClassLabel::Clear,
        ClassLabel::HeavyPrecipitate,
        ClassLabel::LargeCrystals,
        ClassLabel::LightPrecipitate,
        ClassLabel::MediumCrystals,
        ClassLabel::MicroCrystals,
        ClassLabel::NeedlesPlates,
        ClassLabel::PhaseSeparation,
        ClassLabel::SmallCrystals,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::BadDrop => "bad_drop",
            ClassLabel::Clear => "clear",
            ClassLabel::HeavyPrecipitate => "heavy_precipitate",
            ClassLabel::LargeCrystals => "large_crystals",
            ClassLabel::LightPrecipitate => "light_precipitate",
            ClassLabel::MediumCrystals => "medium_crystals",
            ClassLabel::MicroCrystals => "micro_crystals",
            ClassLabel::NeedlesPlates => "needles_plates",
            ClassLabel::PhaseSeparation => "phase_separation",
            ClassLabel::SmallCrystals => "small_crystals",
        }
    }

    pub fn is_crystal(self) -> bool {
        matches!(
            self,
            ClassLabel::LargeCrystals
                | ClassLabel::MediumCrystals
                | ClassLabel::MicroCrystals
                | ClassLabel::NeedlesPlates
                | ClassLabel::SmallCrystals
        )
    }

    pub fn crystal_labels() -> impl Iterator<Item = ClassLabel> {
        Self::ALL.into_iter().filter(|l| l.is_crystal())
    }
}

/// True when label id `id` is a crystal class. Out-of-range ids are not crystals.
pub fn is_crystal_id(id: usize) -> bool {
    ClassLabel::from_id(id).is_some_and(ClassLabel::is_crystal)
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
