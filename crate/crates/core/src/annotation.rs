//! Ground-truth records shared by training and evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{BBox, Landmarks};

/// WIDER FACE difficulty partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Attribute columns of the official WIDER FACE ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaceAttributes {
    pub blur: u8,
    pub expression: u8,
    pub illumination: u8,
    pub invalid: bool,
    pub occlusion: u8,
    pub pose: u8,
}

/// One annotated face.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub bbox: BBox,
    pub landmarks: Option<Landmarks>,
    pub attributes: Option<FaceAttributes>,
    /// Membership in the easy/medium/hard evaluation sets, indexed by
    /// [`Difficulty::index`].
    pub sets: [bool; 3],
}

impl Face {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            landmarks: None,
            attributes: None,
            sets: [true; 3],
        }
    }

    pub fn with_landmarks(mut self, landmarks: Landmarks) -> Self {
        self.landmarks = Some(landmarks);
        self
    }

    /// Faces flagged invalid never produce training targets.
    pub fn is_trainable(&self) -> bool {
        !self.attributes.is_some_and(|a| a.invalid) && self.bbox.has_positive_area()
    }

    pub fn in_set(&self, set: Difficulty) -> bool {
        self.sets[set.index()]
    }
}

/// All faces of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    /// Image path relative to the dataset root.
    pub image: String,
    pub faces: Vec<Face>,
}

impl Annotation {
    pub fn new(image: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            faces: Vec::new(),
        }
    }
}
