use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::geometry::{LabelMap, IGNORE_LABEL};

/// MidAir source classes, indexed by id.
pub const MIDAIR_CLASSES: [&str; 14] = [
    "Sky",
    "Animals",
    "Trees",
    "Dirt Ground",
    "Ground Vegetation",
    "Rocky Ground",
    "Boulders",
    "Empty",
    "Water",
    "Man-Made Construction",
    "Road",
    "Train Track",
    "Road Sign",
    "Others",
];

/// Target classes, indexed by id.
pub const TARGET_CLASSES: [&str; 7] = ["Sky", "Water", "Land", "Trees", "Boulders", "Road", "Others"];

pub const SKY: u8 = 0;
pub const WATER: u8 = 1;
pub const LAND: u8 = 2;
pub const TREES: u8 = 3;
pub const BOULDERS: u8 = 4;
pub const ROAD: u8 = 5;
pub const OTHERS: u8 = 6;

/// Total map from source class ids to dense target ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub source_names: Vec<String>,
    pub target_names: Vec<String>,
    /// `table[source] = target`.
    pub table: Vec<u8>,
}

/// MidAir id of Man-Made Construction, which no named merge covers.
pub const MIDAIR_CONSTRUCTION: u8 = 9;

impl ClassMapping {
    /// MidAir's 14 classes onto the 7 targets; Man-Made Construction goes to
    /// `construction_target` (Others by default).
    pub fn midair(construction_target: u8) -> Result<Self> {
        if construction_target as usize >= TARGET_CLASSES.len() {
            return Err(DataError::Config(format!(
                "construction target {construction_target} is not a target class"
            )));
        }
        let table = vec![
            SKY,    // Sky
            OTHERS, // Animals
            TREES,  // Trees
            LAND,   // Dirt Ground
            LAND,   // Ground Vegetation
            LAND,   // Rocky Ground
            BOULDERS,
            OTHERS, // Empty
            WATER,
            construction_target,
            ROAD,
            OTHERS, // Train Track
            OTHERS, // Road Sign
            OTHERS,
        ];
        Self::new(
            MIDAIR_CLASSES.iter().map(|s| s.to_string()).collect(),
            TARGET_CLASSES.iter().map(|s| s.to_string()).collect(),
            table,
        )
    }

    pub fn new(source_names: Vec<String>, target_names: Vec<String>, table: Vec<u8>) -> Result<Self> {
        if table.len() != source_names.len() {
            return Err(DataError::Config("mapping must cover every source class".into()));
        }
        if let Some(&t) = table.iter().find(|&&t| t as usize >= target_names.len()) {
            return Err(DataError::Config(format!("target id {t} out of range")));
        }
        Ok(Self {
            source_names,
            target_names,
            table,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn map_id(&self, source: u8) -> Result<u8> {
        if source == IGNORE_LABEL {
            return Ok(IGNORE_LABEL);
        }
        self.table
            .get(source as usize)
            .copied()
            .ok_or(DataError::UnknownClass(source))
    }

    /// Maps every pixel; the ignore label passes through.
    pub fn remap(&self, labels: &LabelMap) -> Result<LabelMap> {
        let out = labels
            .labels
            .iter()
            .map(|&l| self.map_id(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelMap::new(labels.width, labels.height, out))
    }
}

impl Default for ClassMapping {
    fn default() -> Self {
        Self::midair(OTHERS).expect("default mapping is valid")
    }
}

/// [`ClassMapping::remap`] with the default MidAir mapping.
pub fn remap_semantic_labels(labels: &LabelMap) -> Result<LabelMap> {
    ClassMapping::default().remap(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(name: &str) -> u8 {
        MIDAIR_CLASSES.iter().position(|&n| n == name).unwrap() as u8
    }

    #[test]
    fn named_merges() {
        let m = ClassMapping::default();
        for n in ["Ground Vegetation", "Rocky Ground", "Dirt Ground"] {
            assert_eq!(m.map_id(id(n)).unwrap(), LAND, "{n}");
        }
        for n in ["Animals", "Empty", "Train Track", "Road Sign", "Others", "Man-Made Construction"] {
            assert_eq!(m.map_id(id(n)).unwrap(), OTHERS, "{n}");
        }
        for (n, t) in [("Sky", SKY), ("Water", WATER), ("Trees", TREES), ("Boulders", BOULDERS), ("Road", ROAD)] {
            assert_eq!(m.map_id(id(n)).unwrap(), t);
            assert_eq!(TARGET_CLASSES[t as usize], n);
        }
    }

    #[test]
    fn total_and_surjective() {
        let m = ClassMapping::default();
        let all = LabelMap::new(14, 1, (0..14).collect());
        let out = m.remap(&all).unwrap();
        let mut seen: Vec<u8> = out.labels.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, (0..7).collect::<Vec<u8>>());
    }

    #[test]
    fn unknown_source_is_error_and_override_works() {
        let m = ClassMapping::default();
        assert!(matches!(m.map_id(14), Err(DataError::UnknownClass(14))));
        assert_eq!(m.map_id(IGNORE_LABEL).unwrap(), IGNORE_LABEL);
        let m = ClassMapping::midair(LAND).unwrap();
        assert_eq!(m.map_id(MIDAIR_CONSTRUCTION).unwrap(), LAND);
        assert!(ClassMapping::midair(7).is_err());
    }
}
