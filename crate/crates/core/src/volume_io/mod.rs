//! CT volumes with paired lung and lesion annotations.
//!
//! A [`CtVolume`] holds three aligned slide stacks: Hounsfield values and two
//! binary masks. Volumes are persisted as a directory bundle (see
//! [`bundle`]) and can be synthesized procedurally (see [`phantom`]).

pub mod bundle;
pub mod phantom;

use std::fmt;

use crate::error::{Error, Result};

pub use bundle::{load_bundle, write_bundle, BundleManifest, ChannelDtype};
pub use phantom::{inject_defect, synth_volume, Defect, PhantomSpec};

/// Smallest slice edge accepted for a volume.
pub const MIN_SLICE_EDGE: usize = 8;

/// A slide-major stack of `slides` row-major `height x width` planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceStack<T> {
    slides: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> SliceStack<T> {
    pub fn new(slides: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != slides * height * width {
            return Err(Error::Shape(format!(
                "stack of {slides}x{height}x{width} needs {} elements, got {}",
                slides * height * width,
                data.len()
            )));
        }
        Ok(Self { slides, height, width, data })
    }

    pub fn filled(slides: usize, height: usize, width: usize, value: T) -> Self {
        Self { slides, height, width, data: vec![value; slides * height * width] }
    }

    pub fn slides(&self) -> usize {
        self.slides
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.slides, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, index: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn slice_mut(&mut self, index: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[index * n..(index + 1) * n]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// A stack of HU-valued slides with lung and COVID lesion masks.
///
/// Construct through [`CtVolume::new`] to get invariant checking.
/// [`CtVolume::from_parts_unchecked`] exists so that malformed data can be
/// represented and reported by [`validate_bundle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtVolume {
    volume_id: String,
    ct: SliceStack<i16>,
    lung: SliceStack<u8>,
    covid: SliceStack<u8>,
}

impl CtVolume {
    pub fn new(
        volume_id: impl Into<String>,
        ct: SliceStack<i16>,
        lung: SliceStack<u8>,
        covid: SliceStack<u8>,
    ) -> Result<Self> {
        let volume = Self::from_parts_unchecked(volume_id, ct, lung, covid);
        match validate_bundle(&volume).into_iter().next() {
            None => Ok(volume),
            Some(v) if v.invariant == Invariant::BinaryMask => Err(Error::InvalidMask(v.to_string())),
            Some(v) => Err(Error::Shape(v.to_string())),
        }
    }

    pub fn from_parts_unchecked(
        volume_id: impl Into<String>,
        ct: SliceStack<i16>,
        lung: SliceStack<u8>,
        covid: SliceStack<u8>,
    ) -> Self {
        Self { volume_id: volume_id.into(), ct, lung, covid }
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn slide_count(&self) -> usize {
        self.ct.slides()
    }

    pub fn slice_height(&self) -> usize {
        self.ct.height()
    }

    pub fn slice_width(&self) -> usize {
        self.ct.width()
    }

    pub fn ct(&self) -> &SliceStack<i16> {
        &self.ct
    }

    pub fn lung_masks(&self) -> &SliceStack<u8> {
        &self.lung
    }

    pub fn covid_masks(&self) -> &SliceStack<u8> {
        &self.covid
    }

    pub(crate) fn masks_mut(&mut self) -> (&mut SliceStack<u8>, &mut SliceStack<u8>) {
        (&mut self.lung, &mut self.covid)
    }

    pub fn into_parts(self) -> (String, SliceStack<i16>, SliceStack<u8>, SliceStack<u8>) {
        (self.volume_id, self.ct, self.lung, self.covid)
    }
}

/// Which volume invariant a [`Violation`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    /// Channels disagree on `S x H x W`.
    MatchingShape,
    /// A mask holds something other than 0 or 1.
    BinaryMask,
    /// `S >= 1` and `H, W >= 8`.
    MinimumSize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: Invariant,
    /// First offending slide, when the violation is localized.
    pub slide: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slide {
            Some(s) => write!(f, "{:?} at slide {s}: {}", self.invariant, self.detail),
            None => write!(f, "{:?}: {}", self.invariant, self.detail),
        }
    }
}

/// Lists every violated volume invariant. Never fails.
pub fn validate_bundle(volume: &CtVolume) -> Vec<Violation> {
    let mut out = Vec::new();
    let ct_dims = volume.ct.dims();
    let (s, h, w) = ct_dims;
    if s < 1 || h < MIN_SLICE_EDGE || w < MIN_SLICE_EDGE {
        out.push(Violation {
            invariant: Invariant::MinimumSize,
            slide: None,
            detail: format!("volume is {s}x{h}x{w}; need at least 1 slide of {MIN_SLICE_EDGE}x{MIN_SLICE_EDGE}"),
        });
    }
    for (name, mask) in [("lung", &volume.lung), ("covid", &volume.covid)] {
        if mask.dims() != ct_dims {
            let (ms, mh, mw) = mask.dims();
            out.push(Violation {
                invariant: Invariant::MatchingShape,
                slide: None,
                detail: format!("{name} mask is {ms}x{mh}x{mw}, ct is {s}x{h}x{w}"),
            });
        }
        let plane = mask.plane_len().max(1);
        if let Some(pos) = mask.as_slice().iter().position(|&v| v > 1) {
            out.push(Violation {
                invariant: Invariant::BinaryMask,
                slide: Some(pos / plane),
                detail: format!("{name} mask holds value {}", mask.as_slice()[pos]),
            });
        }
    }
    out
}
