use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered label names with an injective palette; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const LEFT_EYE: u8 = 2;
    pub const RIGHT_EYE: u8 = 3;
    pub const NOSE: u8 = 4;
    pub const MOUTH: u8 = 5;
    pub const HAIR: u8 = 6;
    pub const GLASSES: u8 = 7;
    pub const HAT: u8 = 8;
    pub const CLOTH: u8 = 9;
}

impl LabelSchema {
    pub fn desk() -> Self {
        let names = [
            "background", "skin", "left_eye", "right_eye", "nose", "mouth", "hair", "glasses", "hat", "cloth",
        ];
        let palette = vec![
            [0, 0, 0],
            [204, 0, 0],
            [51, 51, 255],
            [204, 0, 204],
            [76, 153, 0],
            [255, 255, 0],
            [0, 0, 204],
            [204, 204, 0],
            [255, 51, 153],
            [0, 204, 204],
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            palette,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn palette_bytes(&self) -> Vec<u8> {
        self.palette.iter().flatten().copied().collect()
    }

    pub fn label_of_color(&self, rgb: [u8; 3]) -> Option<u8> {
        self.palette.iter().position(|p| *p == rgb).map(|i| i as u8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.first().map(String::as_str) != Some("background") {
            return Err(Error::Config("label 0 must be background".into()));
        }
        if self.palette.len() != self.names.len() || self.names.len() > 256 {
            return Err(Error::Config("palette must have one colour per label".into()));
        }
        for (i, a) in self.palette.iter().enumerate() {
            if self.palette[..i].contains(a) {
                return Err(Error::Config(format!("palette colour {a:?} is used twice")));
            }
        }
        Ok(())
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schema_is_valid() {
        let s = LabelSchema::desk();
        s.validate().unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.index_of("hat"), Some(label::HAT));
        assert_eq!(s.index_of("cloth"), Some(label::CLOTH));
    }
}
