use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One radiologist-scored characteristic with an integer score range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub min_score: i32,
    pub max_score: i32,
}

impl Attribute {
    pub fn new(name: impl Into<String>, min_score: i32, max_score: i32) -> Self {
        Self {
            name: name.into(),
            min_score,
            max_score,
        }
    }

    pub fn classes(&self) -> RangeInclusive<i32> {
        self.min_score..=self.max_score
    }

    pub fn num_classes(&self) -> usize {
        (self.max_score - self.min_score + 1) as usize
    }

    pub fn contains(&self, score: f64) -> bool {
        score >= self.min_score as f64 && score <= self.max_score as f64
    }

    /// Discrete class of a (mean) score: rounded half away from zero and
    /// clamped to the range.
    pub fn class_of(&self, score: f64) -> i32 {
        (score.round() as i32).clamp(self.min_score, self.max_score)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

/// Column headers used in report tables, in LIDC schema order.
pub const LIDC_SHORT_NAMES: [&str; 8] = ["Sub", "IS", "Cal", "Sph", "Mar", "Lob", "Spic", "Tex"];

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::InvalidInput("attribute schema is empty".into()));
        }
        if let Some(a) = attributes.iter().find(|a| a.min_score >= a.max_score) {
            return Err(Error::InvalidInput(format!(
                "attribute `{}` needs at least two classes, has range {}..={}",
                a.name, a.min_score, a.max_score
            )));
        }
        Ok(Self { attributes })
    }

    /// The eight LIDC-IDRI nodule characteristics.
    pub fn lidc() -> Self {
        Self {
            attributes: vec![
                Attribute::new("subtlety", 1, 5),
                Attribute::new("internalStructure", 1, 4),
                Attribute::new("calcification", 1, 6),
                Attribute::new("sphericity", 1, 5),
                Attribute::new("margin", 1, 5),
                Attribute::new("lobulation", 1, 5),
                Attribute::new("spiculation", 1, 5),
                Attribute::new("texture", 1, 5),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn get(&self, a: usize) -> &Attribute {
        &self.attributes[a]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lidc_ranges() {
        let s = AttributeSchema::lidc();
        assert_eq!(s.len(), 8);
        let counts: Vec<_> = s.iter().map(Attribute::num_classes).collect();
        assert_eq!(counts, [5, 4, 6, 5, 5, 5, 5, 5]);
    }

    #[test]
    fn class_rounding() {
        let a = Attribute::new("x", 1, 5);
        assert_eq!(a.class_of(2.5), 3);
        assert_eq!(a.class_of(2.49), 2);
        assert_eq!(a.class_of(0.2), 1);
        assert_eq!(a.class_of(5.0), 5);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(AttributeSchema::new(vec![]).is_err());
        assert!(AttributeSchema::new(vec![Attribute::new("x", 2, 2)]).is_err());
    }
}
