use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Diagnostic class of a slide or specimen.
///
/// The declaration order is the canonical order used to break argmax ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Basaloid,
    Squamous,
    Melanocytic,
    Other,
}

pub const N_CLASSES: usize = 4;

impl ClassLabel {
    pub const ALL: [ClassLabel; N_CLASSES] = [
        ClassLabel::Basaloid,
        ClassLabel::Squamous,
        ClassLabel::Melanocytic,
        ClassLabel::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Basaloid => "Basaloid",
            ClassLabel::Squamous => "Squamous",
            ClassLabel::Melanocytic => "Melanocytic",
            ClassLabel::Other => "Other",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "basaloid" => Ok(ClassLabel::Basaloid),
            "squamous" => Ok(ClassLabel::Squamous),
            "melanocytic" => Ok(ClassLabel::Melanocytic),
            "other" | "others" => Ok(ClassLabel::Other),
            _ => Err(Error::invalid(format!("unknown class label `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_classes_round_trip() {
        assert_eq!(ClassLabel::ALL.len(), N_CLASSES);
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*c));
            assert_eq!(c.as_str().parse::<ClassLabel>().unwrap(), *c);
        }
        assert!(ClassLabel::from_index(4).is_none());
        assert!("benign".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn canonical_order() {
        assert!(ClassLabel::Basaloid < ClassLabel::Squamous);
        assert!(ClassLabel::Squamous < ClassLabel::Melanocytic);
        assert!(ClassLabel::Melanocytic < ClassLabel::Other);
    }
}
