//! Directory bundle: the canonical on-disk form of a [`CtVolume`].
//!
//! ```text
//! <dir>/manifest.txt   UTF-8 `key=value` lines
//! <dir>/ct.raw         int16 little-endian, slide-major then row-major
//! <dir>/lung.raw       uint8, same order
//! <dir>/covid.raw      uint8, same order
//! ```
//!
//! Required manifest keys are `volume_id`, `slides`, `height` and `width`.
//! `byte_order` (only `little`) and the per-channel dtype keys `ct_dtype`,
//! `lung_dtype`, `covid_dtype` are written for completeness and checked when
//! present. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{validate_bundle, CtVolume, Invariant, SliceStack};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CT_FILE: &str = "ct.raw";
pub const LUNG_FILE: &str = "lung.raw";
pub const COVID_FILE: &str = "covid.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelDtype {
    Int16,
    Uint8,
}

impl ChannelDtype {
    pub fn bytes(self) -> usize {
        match self {
            ChannelDtype::Int16 => 2,
            ChannelDtype::Uint8 => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ChannelDtype::Int16 => "int16",
            ChannelDtype::Uint8 => "uint8",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "int16" => Some(ChannelDtype::Int16),
            "uint8" => Some(ChannelDtype::Uint8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleManifest {
    pub volume_id: String,
    pub slide_count: usize,
    pub height: usize,
    pub width: usize,
    pub ct_dtype: ChannelDtype,
    pub lung_dtype: ChannelDtype,
    pub covid_dtype: ChannelDtype,
}

impl BundleManifest {
    pub fn for_volume(volume: &CtVolume) -> Self {
        Self {
            volume_id: volume.volume_id().to_owned(),
            slide_count: volume.slide_count(),
            height: volume.slice_height(),
            width: volume.slice_width(),
            ct_dtype: ChannelDtype::Int16,
            lung_dtype: ChannelDtype::Uint8,
            covid_dtype: ChannelDtype::Uint8,
        }
    }

    /// Byte length a channel file of the given dtype must have.
    pub fn expected_len(&self, dtype: ChannelDtype) -> usize {
        self.slide_count * self.height * self.width * dtype.bytes()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "volume_id={}", self.volume_id);
        let _ = writeln!(s, "slides={}", self.slide_count);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "byte_order=little");
        let _ = writeln!(s, "ct_dtype={}", self.ct_dtype.as_str());
        let _ = writeln!(s, "lung_dtype={}", self.lung_dtype.as_str());
        let _ = writeln!(s, "covid_dtype={}", self.covid_dtype.as_str());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut volume_id = None;
        let mut slides = None;
        let mut height = None;
        let mut width = None;
        let mut dtypes = [ChannelDtype::Int16, ChannelDtype::Uint8, ChannelDtype::Uint8];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptBundle(format!("manifest line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::CorruptBundle(format!("manifest key {key}: not an integer: {v:?}")))
            };
            match key {
                "volume_id" => volume_id = Some(value.to_owned()),
                "slides" => slides = Some(int(value)?),
                "height" => height = Some(int(value)?),
                "width" => width = Some(int(value)?),
                "byte_order" if value != "little" => {
                    return Err(Error::CorruptBundle(format!("unsupported byte_order {value:?}")));
                }
                "ct_dtype" | "lung_dtype" | "covid_dtype" => {
                    let dt = ChannelDtype::parse(value)
                        .ok_or_else(|| Error::CorruptBundle(format!("unknown dtype {value:?} for {key}")))?;
                    let slot = match key {
                        "ct_dtype" => 0,
                        "lung_dtype" => 1,
                        _ => 2,
                    };
                    dtypes[slot] = dt;
                }
                _ => {}
            }
        }
        let missing = |k: &str| Error::CorruptBundle(format!("manifest is missing `{k}`"));
        let manifest = Self {
            volume_id: volume_id.ok_or_else(|| missing("volume_id"))?,
            slide_count: slides.ok_or_else(|| missing("slides"))?,
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
            ct_dtype: dtypes[0],
            lung_dtype: dtypes[1],
            covid_dtype: dtypes[2],
        };
        if manifest.ct_dtype != ChannelDtype::Int16
            || manifest.lung_dtype != ChannelDtype::Uint8
            || manifest.covid_dtype != ChannelDtype::Uint8
        {
            return Err(Error::CorruptBundle("channels must be ct=int16, lung=uint8, covid=uint8".into()));
        }
        Ok(manifest)
    }
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(path, e))
}

fn read_channel(dir: &Path, name: &str, expected: usize) -> Result<Vec<u8>> {
    let bytes = read_file(dir, name)?;
    if bytes.len() != expected {
        return Err(Error::CorruptBundle(format!(
            "{name} holds {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Reads a bundle directory. HU values are passed through unmodified.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<CtVolume> {
    let dir = dir.as_ref();
    let text = read_file(dir, MANIFEST_FILE)?;
    let text = String::from_utf8(text).map_err(|_| Error::CorruptBundle("manifest is not UTF-8".into()))?;
    let m = BundleManifest::parse(&text)?;

    let ct_bytes = read_channel(dir, CT_FILE, m.expected_len(m.ct_dtype))?;
    let lung = read_channel(dir, LUNG_FILE, m.expected_len(m.lung_dtype))?;
    let covid = read_channel(dir, COVID_FILE, m.expected_len(m.covid_dtype))?;
    let ct: Vec<i16> = ct_bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();

    let volume = CtVolume::from_parts_unchecked(
        m.volume_id,
        SliceStack::new(m.slide_count, m.height, m.width, ct)?,
        SliceStack::new(m.slide_count, m.height, m.width, lung)?,
        SliceStack::new(m.slide_count, m.height, m.width, covid)?,
    );
    if let Some(v) = validate_bundle(&volume).into_iter().next() {
        return Err(match v.invariant {
            Invariant::BinaryMask => Error::InvalidMask(v.to_string()),
            _ => Error::CorruptBundle(v.to_string()),
        });
    }
    Ok(volume)
}

/// Writes `volume` as a bundle, creating `dir` if needed.
pub fn write_bundle(volume: &CtVolume, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if let Some(v) = validate_bundle(volume).into_iter().next() {
        return Err(Error::InvalidArgument(format!("refusing to write invalid volume: {v}")));
    }
    let io = |path: &Path, e| Error::Io { path: path.to_owned(), source: e };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

    let manifest = BundleManifest::for_volume(volume).to_text();
    let mut ct = Vec::with_capacity(volume.ct().as_slice().len() * 2);
    for v in volume.ct().as_slice() {
        ct.extend_from_slice(&v.to_le_bytes());
    }
    let files: [(&str, &[u8]); 4] = [
        (MANIFEST_FILE, manifest.as_bytes()),
        (CT_FILE, &ct),
        (LUNG_FILE, volume.lung_masks().as_slice()),
        (COVID_FILE, volume.covid_masks().as_slice()),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::phantom::{synth_volume, PhantomSpec};

    fn tiny() -> CtVolume {
        let ct: Vec<i16> = (0..128).map(|i| (i as i16) * 37 - 2000).collect();
        CtVolume::new(
            "tiny",
            SliceStack::new(2, 8, 8, ct).unwrap(),
            SliceStack::filled(2, 8, 8, 0),
            SliceStack::filled(2, 8, 8, 0),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny();
        write_bundle(&v, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.slide_count(), 2);
        assert_eq!((back.slice_height(), back.slice_width()), (8, 8));
        assert_eq!(back, v);
    }

    #[test]
    fn round_trip_clinical_sizes() {
        for size in [630, 512] {
            let spec = PhantomSpec { slide_count: 2, height: size, width: size, seed: size as u64, ..PhantomSpec::default() };
            let v = synth_volume(&spec).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_bundle(&v, dir.path()).unwrap();
            assert_eq!(load_bundle(dir.path()).unwrap(), v);
        }
    }

    #[test]
    fn truncated_ct_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(CT_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::CorruptBundle(_))));
    }

    #[test]
    fn lung_value_two_is_invalid_mask() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(LUNG_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] = 2;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn missing_channel_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(COVID_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::NotFound(_))));
        assert!(matches!(load_bundle(dir.path().join("nope")), Err(Error::NotFound(_))));
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        // A regular file where a directory is expected cannot be created into,
        // even with elevated privileges.
        let blocker = dir.path().join("blocker");
        fs::write(&blocker, b"x").unwrap();
        let err = write_bundle(&tiny(), blocker.join("bundle")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn manifest_rejects_big_endian_and_missing_keys() {
        assert!(BundleManifest::parse("volume_id=a\nslides=1\nheight=8\nwidth=8\nbyte_order=big\n").is_err());
        assert!(BundleManifest::parse("volume_id=a\nslides=1\nheight=8\n").is_err());
        let m = BundleManifest::parse("# comment\n\nvolume_id = a\nslides=3\nheight=8\nwidth=9\n").unwrap();
        assert_eq!((m.slide_count, m.height, m.width), (3, 8, 9));
        assert_eq!(m.expected_len(ChannelDtype::Int16), 3 * 8 * 9 * 2);
    }
}
