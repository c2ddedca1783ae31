//! Point-cloud export of a volume and its masks for table-to-points
//! visualizers.
//!
//! Coordinates: `x` is the column, `y` the row (origin top-left), and slide
//! `i` sits at `z = i * z_step`. Only pixels inside the lung are emitted.
//! CT clouds carry the normalized intensity of every lung pixel; mask clouds
//! carry only the positive pixels, all with value 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::threshold;
use crate::preprocess::{build_sample_sized, normalize_hu, resize_nearest};
use crate::unet::{predict_samples, ModelState};
use crate::volume_io::{CtVolume, SliceStack};

pub const DEFAULT_Z_STEP: f64 = 1.0;
pub const CSV_HEADER: &str = "x,y,z,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Ct,
    GroundTruth,
    Prediction,
}

impl PointKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ct" => Some(PointKind::Ct),
            "ground_truth" | "gt" => Some(PointKind::GroundTruth),
            "prediction" | "pred" => Some(PointKind::Prediction),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Ct => "ct",
            PointKind::GroundTruth => "ground_truth",
            PointKind::Prediction => "prediction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRow {
    pub x: usize,
    pub y: usize,
    pub z: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub kind: PointKind,
    /// Sorted by `(z, y, x)`.
    pub rows: Vec<PointRow>,
    pub z_step: f64,
}

/// Source of the values for one cloud.
#[derive(Debug, Clone, Copy)]
pub enum PointSource<'a> {
    Ct,
    GroundTruth,
    Prediction(&'a SliceStack<u8>),
}

impl PointSource<'_> {
    pub fn kind(&self) -> PointKind {
        match self {
            PointSource::Ct => PointKind::Ct,
            PointSource::GroundTruth => PointKind::GroundTruth,
            PointSource::Prediction(_) => PointKind::Prediction,
        }
    }
}

pub fn volume_to_points(volume: &CtVolume, source: PointSource<'_>, z_step: f64) -> Result<PointCloud> {
    if !(z_step > 0.0 && z_step.is_finite()) {
        return Err(Error::InvalidArgument(format!("z step {z_step} must be positive")));
    }
    let lung = volume.lung_masks();
    let mask = match source {
        PointSource::Ct => None,
        PointSource::GroundTruth => Some(volume.covid_masks()),
        PointSource::Prediction(p) => Some(p),
    };
    if let Some(m) = mask {
        if m.dims() != lung.dims() {
            return Err(Error::Shape(format!("mask stack {:?} does not match volume {:?}", m.dims(), lung.dims())));
        }
    }
    let w = volume.slice_width();
    let mut rows = Vec::new();
    for i in 0..volume.slide_count() {
        let z = i as f64 * z_step;
        let l = lung.slice(i);
        let ct = volume.ct().slice(i);
        for (p, _) in l.iter().enumerate().filter(|&(_, &v)| v != 0) {
            let value = match mask {
                None => normalize_hu(ct[p] as f64),
                Some(m) if m.slice(i)[p] != 0 => 1.0,
                Some(_) => continue,
            };
            rows.push(PointRow { x: p % w, y: p / w, z, value });
        }
    }
    Ok(PointCloud { kind: source.kind(), rows, z_step })
}

/// Thresholded model predictions for every slide, resized back to the
/// volume's slice shape.
pub fn predicted_masks(model: &ModelState, volume: &CtVolume, t: f64) -> Result<SliceStack<u8>> {
    let (h, w) = (volume.slice_height(), volume.slice_width());
    let size = model.config.input_size;
    let samples = (0..volume.slide_count())
        .map(|i| {
            let (ct, lung, covid) = (volume.ct().slice(i), volume.lung_masks().slice(i), volume.covid_masks().slice(i));
            build_sample_sized(ct, lung, covid, h, w, volume.volume_id(), i, size)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(volume.slide_count() * h * w);
    for p in predict_samples(model, &samples)? {
        data.extend(resize_nearest(&threshold(&p, t)?, size, size, h, w)?);
    }
    SliceStack::new(volume.slide_count(), h, w, data)
}

pub fn to_csv(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(32 * (cloud.rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in &cloud.rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.x, r.y, r.z, r.value);
    }
    s
}

pub fn write_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(cloud)).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

/// Parses rows written by [`write_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<PointRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Vec<PointRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!("point file must start with {CSV_HEADER:?}")));
    }
    lines
        .map(|line| {
            let bad = || Error::InvalidArgument(format!("bad point row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(PointRow {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                z: f[2].parse().map_err(|_| bad())?,
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
