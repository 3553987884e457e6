use crate::anatomask::SEG_CLASSES;
use crate::error::{Error, Result};

/// A per-pixel class map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {width}×{height} with {} pixels",
                data.len()
            )));
        }
        if let Some(&c) = data.iter().find(|&&c| c as usize >= SEG_CLASSES) {
            return Err(Error::Index(format!("mask class {c} ≥ {SEG_CLASSES}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Panics on a class outside the 15-class alphabet.
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        assert!((class as usize) < SEG_CLASSES, "class {class} out of range");
        self.data[y * self.width + x] = class;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "masks {}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// Sorted list of classes that occur in the mask.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; SEG_CLASSES];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..SEG_CLASSES as u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn to_targets(&self) -> Vec<usize> {
        self.data.iter().map(|&c| c as usize).collect()
    }
}
