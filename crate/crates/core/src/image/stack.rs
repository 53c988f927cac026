use super::Image;
use crate::error::{Error, Result};

/// An ordered exposure bracket: images with strictly increasing exposure
/// times, all of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack {
    images: Vec<Image>,
    times: Vec<f64>,
}

impl ExposureStack {
    pub fn new(images: Vec<Image>, times: Vec<f64>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty exposure stack".into()));
        }
        if images.len() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} exposure times",
                images.len(),
                times.len()
            )));
        }
        if times.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return Err(Error::InvalidArgument(
                "exposure times must be positive and finite".into(),
            ));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "exposure times must be strictly increasing".into(),
            ));
        }
        let dims = images[0].dims();
        if let Some(bad) = images.iter().position(|im| im.dims() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "image {bad} is {:?}, expected {:?}",
                images[bad].dims(),
                dims
            )));
        }
        Ok(Self { images, times })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, k: usize) -> &Image {
        &self.images[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }
}

/// A stack together with the index lists of the fused subset and the
/// measurement subset. Indices are 0-based; `fuse ⊆ measure ⊆ 0..K`, both
/// strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSets {
    stack: ExposureStack,
    fuse_idx: Vec<usize>,
    measure_idx: Vec<usize>,
}

impl SceneSets {
    pub fn new(stack: ExposureStack, fuse_idx: Vec<usize>, measure_idx: Vec<usize>) -> Result<Self> {
        check_indices(&fuse_idx, &measure_idx, stack.len())?;
        Ok(Self {
            stack,
            fuse_idx,
            measure_idx,
        })
    }

    /// Sets where every image is both fused and measured.
    pub fn all(stack: ExposureStack) -> Self {
        let idx: Vec<usize> = (0..stack.len()).collect();
        Self {
            stack,
            fuse_idx: idx.clone(),
            measure_idx: idx,
        }
    }

    /// Same stack with the measurement set replaced by the fused set.
    pub fn coupled(&self) -> Self {
        Self {
            stack: self.stack.clone(),
            fuse_idx: self.fuse_idx.clone(),
            measure_idx: self.fuse_idx.clone(),
        }
    }

    pub fn stack(&self) -> &ExposureStack {
        &self.stack
    }

    pub fn fuse_idx(&self) -> &[usize] {
        &self.fuse_idx
    }

    pub fn measure_idx(&self) -> &[usize] {
        &self.measure_idx
    }

    pub fn fuse_images(&self) -> impl Iterator<Item = &Image> + '_ {
        self.fuse_idx.iter().map(|&k| self.stack.image(k))
    }

    pub fn measure_images(&self) -> impl Iterator<Item = &Image> + '_ {
        self.measure_idx.iter().map(|&k| self.stack.image(k))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.stack.dims()
    }
}

/// Validates `fuse ⊆ measure ⊆ 0..k` with both lists strictly increasing.
pub(crate) fn check_indices(fuse: &[usize], measure: &[usize], k: usize) -> Result<()> {
    if fuse.is_empty() || measure.is_empty() {
        return Err(Error::InvalidSets("index lists must be nonempty".into()));
    }
    for (name, list) in [("fuse", fuse), ("measure", measure)] {
        if list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSets(format!(
                "{name} indices must be strictly increasing: {list:?}"
            )));
        }
        if let Some(&bad) = list.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidSets(format!(
                "{name} index {bad} out of range for a {k}-image stack"
            )));
        }
    }
    if let Some(&bad) = fuse.iter().find(|i| measure.binary_search(i).is_err()) {
        return Err(Error::InvalidSets(format!(
            "fused image {bad} is not in the measurement set {measure:?}"
        )));
    }
    Ok(())
}
