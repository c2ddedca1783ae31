//! Slide preprocessing: nearest-neighbor resize, HU windowing, channel
//! stacking, lung-slide filtering and class-balanced splits.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume_io::CtVolume;

/// Model-side slide edge length.
pub const SAMPLE_SIZE: usize = 320;
/// Lower edge of the HU window mapped to 0.
pub const HU_WINDOW_MIN: f64 = -970.0;
/// Upper edge of the HU window mapped to 1.
pub const HU_WINDOW_MAX: f64 = -150.0;

/// Resizes a row-major plane with nearest-neighbor sampling.
///
/// Output pixel `(r, c)` copies input `(floor(r * h / out_h), floor(c * w / out_w))`,
/// so no new values are ever introduced.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} must be positive")));
    }
    if h == 0 || w == 0 || src.len() != h * w {
        return Err(Error::InvalidArgument(format!("plane of {} values is not {h}x{w}", src.len())));
    }
    let cols: Vec<usize> = (0..out_w).map(|c| c * w / out_w).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let row = &src[(r * h / out_h) * w..][..w];
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Ok(out)
}

/// Windowed HU normalization: `clamp((hu + 970) / 820, 0, 1)`.
pub fn normalize_hu(hu: f64) -> f64 {
    ((hu - HU_WINDOW_MIN) / (HU_WINDOW_MAX - HU_WINDOW_MIN)).clamp(0.0, 1.0)
}

pub fn normalize_slice(hu: &[i16]) -> Vec<f32> {
    hu.iter().map(|&v| normalize_hu(v as f64) as f32).collect()
}

/// One training example at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSample {
    pub volume_id: String,
    pub slide_index: usize,
    pub size: usize,
    /// `size x size x 2`, channels last: normalized CT then lung mask.
    pub input: Vec<f32>,
    /// `size x size` lesion mask.
    pub target: Vec<u8>,
    pub has_covid: bool,
}

impl SlideSample {
    pub fn key(&self) -> (&str, usize) {
        (&self.volume_id, self.slide_index)
    }

    /// Lung channel as a binary plane.
    pub fn lung(&self) -> Vec<u8> {
        self.input.chunks_exact(2).map(|px| px[1] as u8).collect()
    }
}

/// Builds a [`SAMPLE_SIZE`] sample from one slide.
pub fn build_sample(
    ct: &[i16],
    lung: &[u8],
    covid: &[u8],
    height: usize,
    width: usize,
    volume_id: &str,
    slide_index: usize,
) -> Result<SlideSample> {
    build_sample_sized(ct, lung, covid, height, width, volume_id, slide_index, SAMPLE_SIZE)
}

/// [`build_sample`] with an explicit output edge length.
#[allow(clippy::too_many_arguments)]
pub fn build_sample_sized(
    ct: &[i16],
    lung: &[u8],
    covid: &[u8],
    height: usize,
    width: usize,
    volume_id: &str,
    slide_index: usize,
    size: usize,
) -> Result<SlideSample> {
    let n = height * width;
    if ct.len() != n || lung.len() != n || covid.len() != n {
        return Err(Error::InvalidArgument(format!(
            "slide channels disagree: ct {}, lung {}, covid {} values for {height}x{width}",
            ct.len(),
            lung.len(),
            covid.len()
        )));
    }
    let ct = normalize_slice(&resize_nearest(ct, height, width, size, size)?);
    let lung = resize_nearest(lung, height, width, size, size)?;
    let target = resize_nearest(covid, height, width, size, size)?;
    let mut input = Vec::with_capacity(2 * size * size);
    for (c, l) in ct.iter().zip(&lung) {
        input.push(*c);
        input.push(*l as f32);
    }
    let has_covid = target.contains(&1);
    Ok(SlideSample { volume_id: volume_id.to_owned(), slide_index, size, input, target, has_covid })
}

/// Indices of slides whose lung mask has at least one pixel, in order.
pub fn filter_lung_slides(volume: &CtVolume) -> Vec<usize> {
    let lung = volume.lung_masks();
    (0..lung.slides()).filter(|&i| lung.slice(i).contains(&1)).collect()
}

/// Samples for every lung-bearing slide of `volume`.
pub fn volume_samples(volume: &CtVolume, size: usize) -> Result<Vec<SlideSample>> {
    let (h, w) = (volume.slice_height(), volume.slice_width());
    filter_lung_slides(volume)
        .into_iter()
        .map(|i| {
            build_sample_sized(
                volume.ct().slice(i),
                volume.lung_masks().slice(i),
                volume.covid_masks().slice(i),
                h,
                w,
                volume.volume_id(),
                i,
                size,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "validation" | "val" => Some(Partition::Validation),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Train / validation / test partition of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SlideSample>,
    pub validation: Vec<SlideSample>,
    pub test: Vec<SlideSample>,
    pub seed: u64,
}

impl DatasetSplit {
    /// `(volume_id, slide_index, partition)` for every sample, train first.
    pub fn assignments(&self) -> Vec<(String, usize, Partition)> {
        let tag = |set: &[SlideSample], p: Partition| {
            set.iter().map(move |s| (s.volume_id.clone(), s.slide_index, p)).collect::<Vec<_>>()
        };
        let mut out = tag(&self.train, Partition::Train);
        out.extend(tag(&self.validation, Partition::Validation));
        out.extend(tag(&self.test, Partition::Test));
        out
    }
}

/// Class-balanced split: `n_train` and `n_val` samples, each half positive
/// (the extra one on odd sizes is positive); everything else is test.
///
/// Each class is shuffled with a ChaCha8 stream seeded by `seed`, then
/// consumed as train prefix, validation prefix, test remainder.
pub fn make_split(samples: Vec<SlideSample>, n_train: usize, n_val: usize, seed: u64) -> Result<DatasetSplit> {
    let mut keys = HashSet::new();
    for s in &samples {
        if !keys.insert((s.volume_id.clone(), s.slide_index)) {
            return Err(Error::InvalidArgument(format!("duplicate sample {}:{}", s.volume_id, s.slide_index)));
        }
    }
    let (pos_train, neg_train) = (n_train - n_train / 2, n_train / 2);
    let (pos_val, neg_val) = (n_val - n_val / 2, n_val / 2);

    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.has_covid);
    if pos.len() < pos_train + pos_val || neg.len() < neg_train + neg_val {
        return Err(Error::InfeasibleSplit(format!(
            "need {} covid and {} non-covid samples, have {} and {}",
            pos_train + pos_val,
            neg_train + neg_val,
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut pos = pos.into_iter();
    let mut neg = neg.into_iter();
    let mut take = |np: usize, nn: usize| -> Vec<SlideSample> {
        let mut v: Vec<_> = pos.by_ref().take(np).collect();
        v.extend(neg.by_ref().take(nn));
        v
    };
    let train = take(pos_train, neg_train);
    let validation = take(pos_val, neg_val);
    let mut test: Vec<_> = pos.chain(neg).collect();
    test.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(DatasetSplit { train, validation, test, seed })
}

/// Writes `volume_id,slide_index,partition` lines.
pub fn write_split_file(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("volume_id,slide_index,partition\n");
    for (id, idx, p) in split.assignments() {
        let _ = writeln!(text, "{id},{idx},{}", p.as_str());
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

pub fn read_split_file(path: impl AsRef<Path>) -> Result<Vec<(String, usize, Partition)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("volume_id")) {
            continue;
        }
        let parts: Vec<&str> = line.rsplitn(3, ',').collect();
        let parsed = match parts.as_slice() {
            [p, idx, id] => idx.parse().ok().zip(Partition::parse(p)).map(|(i, p)| (id.to_string(), i, p)),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| Error::InvalidArgument(format!("split file line {}: {line:?}", n + 1)))?);
    }
    Ok(out)
}
