//! Procedural chest phantoms.
//!
//! Each slide is an elliptical soft-tissue body in air with two elliptical
//! lungs. Lung size follows a smooth apex-to-base profile along the stack.
//! Small bright vessel dots sit inside the lungs as non-lesion structure.
//! On COVID-positive slides, disc-shaped lesions are placed entirely inside a
//! lung and marked in the COVID mask.
//!
//! Generation draws from a single ChaCha8 stream seeded with
//! [`PhantomSpec::seed`], so the output is a pure function of the spec.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CtVolume, SliceStack, MIN_SLICE_EDGE};
use crate::error::{Error, Result};
use crate::preprocess::{HU_WINDOW_MAX, HU_WINDOW_MIN};

const AIR_HU: f64 = -1000.0;
const AIR_STD: f64 = 10.0;
const BODY_STD: f64 = 20.0;
const VESSEL_STD: f64 = 20.0;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Annotation defects that can be planted in a generated volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    /// Mark `pixels` lesion pixels in a horizontal run near the top-left
    /// corner of `slide`, which is always air.
    CovidOutsideLung { slide: usize, pixels: usize },
    /// Clear the lung mask of `slide` and leave only a tiny `pixels`-long
    /// lesion mark in its center.
    CovidWithoutLung { slide: usize, pixels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub volume_id: String,
    pub slide_count: usize,
    pub height: usize,
    pub width: usize,
    pub lung_hu_mean: f64,
    pub lung_hu_std: f64,
    pub lesion_hu_mean: f64,
    pub lesion_hu_std: f64,
    /// Inclusive range of lesions per positive slide.
    pub lesion_count_range: (usize, usize),
    /// Inclusive range of lesion radii in pixels.
    pub lesion_radius_range: (f64, f64),
    pub covid_slide_fraction: f64,
    pub seed: u64,
    // Extensions below are not part of the core phantom contract.
    pub body_hu: f64,
    pub vessel_count: usize,
    pub vessel_hu: f64,
    pub defects: Vec<Defect>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_id: "phantom".into(),
            slide_count: 16,
            height: 320,
            width: 320,
            lung_hu_mean: -850.0,
            lung_hu_std: 30.0,
            lesion_hu_mean: -500.0,
            lesion_hu_std: 40.0,
            lesion_count_range: (1, 3),
            lesion_radius_range: (10.0, 24.0),
            covid_slide_fraction: 0.5,
            seed: 0,
            body_hu: 40.0,
            vessel_count: 8,
            vessel_hu: 60.0,
            defects: Vec::new(),
        }
    }
}

impl PhantomSpec {
    /// Number of slides that receive lesions: `floor(fraction * S)`.
    pub fn covid_slide_count(&self) -> usize {
        (self.covid_slide_fraction * self.slide_count as f64).floor() as usize
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.slide_count == 0 {
            return bad("phantom needs at least one slide".into());
        }
        if self.height < MIN_SLICE_EDGE || self.width < MIN_SLICE_EDGE {
            return bad(format!("phantom slices must be at least {MIN_SLICE_EDGE}x{MIN_SLICE_EDGE}"));
        }
        if !(HU_WINDOW_MIN..=HU_WINDOW_MAX).contains(&self.lung_hu_mean) {
            return bad(format!(
                "lung_hu_mean {} outside the [{HU_WINDOW_MIN}, {HU_WINDOW_MAX}] window",
                self.lung_hu_mean
            ));
        }
        if !(0.0..=1.0).contains(&self.covid_slide_fraction) {
            return bad(format!("covid_slide_fraction {} outside [0, 1]", self.covid_slide_fraction));
        }
        if self.lung_hu_std < 0.0 || self.lesion_hu_std < 0.0 {
            return bad("HU standard deviations must be non-negative".into());
        }
        let (cmin, cmax) = self.lesion_count_range;
        let (rmin, rmax) = self.lesion_radius_range;
        if cmin > cmax || !(rmin > 0.0 && rmin <= rmax) {
            return bad("lesion ranges must be non-empty with positive radii".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

/// Lung size factor along the stack: small at apex and base.
fn lung_scale(slide: usize, slides: usize) -> f64 {
    0.8 + 0.2 * (std::f64::consts::PI * (slide as f64 + 0.5) / slides as f64).sin()
}

fn lungs(slide: usize, spec: &PhantomSpec) -> [Ellipse; 2] {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let s = lung_scale(slide, spec.slide_count);
    let a = (0.15 * w * s).max(1.0);
    let b = (0.25 * h * s).max(1.0);
    [Ellipse { cx: 0.32 * w, cy: 0.5 * h, a, b }, Ellipse { cx: 0.68 * w, cy: 0.5 * h, a, b }]
}

fn body(spec: &PhantomSpec) -> Ellipse {
    let (w, h) = (spec.width as f64, spec.height as f64);
    Ellipse { cx: 0.5 * w, cy: 0.5 * h, a: 0.45 * w, b: 0.36 * h }
}

fn clamp_hu(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("std validated non-negative")
}

/// Pixel indices of the disc of radius `r` centered at `(cx, cy)`.
fn disc_pixels(cx: f64, cy: f64, r: f64, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Generates a phantom volume.
///
/// Fails with [`Error::InfeasibleSpec`] when the largest requested lesion
/// cannot fit inside the smallest lung of the stack.
pub fn synth_volume(spec: &PhantomSpec) -> Result<CtVolume> {
    spec.check()?;
    let (s, h, w) = (spec.slide_count, spec.height, spec.width);
    let positives_wanted = spec.covid_slide_count();
    if positives_wanted > 0 {
        let smallest = (0..s)
            .map(|i| {
                let e = lungs(i, spec)[0];
                e.a.min(e.b)
            })
            .fold(f64::INFINITY, f64::min);
        let rmax = spec.lesion_radius_range.1;
        if rmax + 1.0 >= smallest {
            return Err(Error::InfeasibleSpec(format!(
                "lesion radius up to {rmax} px does not fit a lung semi-axis of {smallest:.1} px"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut rng);
    let mut positive = vec![false; s];
    for &i in order.iter().take(positives_wanted) {
        positive[i] = true;
    }

    let plane = h * w;
    let mut ct = vec![0i16; s * plane];
    let mut lung = vec![0u8; s * plane];
    let mut covid = vec![0u8; s * plane];

    let air = normal(AIR_HU, AIR_STD);
    let tissue = normal(spec.body_hu, BODY_STD);
    let parenchyma = normal(spec.lung_hu_mean, spec.lung_hu_std);
    let vessel = normal(spec.vessel_hu, VESSEL_STD);
    let lesion = normal(spec.lesion_hu_mean, spec.lesion_hu_std);
    let torso = body(spec);

    for slide in 0..s {
        let lobes = lungs(slide, spec);
        let ct_s = &mut ct[slide * plane..(slide + 1) * plane];
        let lung_s = &mut lung[slide * plane..(slide + 1) * plane];
        let covid_s = &mut covid[slide * plane..(slide + 1) * plane];

        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * w + x;
                if lobes.iter().any(|e| e.contains(px, py)) {
                    lung_s[i] = 1;
                    ct_s[i] = clamp_hu(parenchyma.sample(&mut rng));
                } else if torso.contains(px, py) {
                    ct_s[i] = clamp_hu(tissue.sample(&mut rng));
                } else {
                    ct_s[i] = clamp_hu(air.sample(&mut rng));
                }
            }
        }

        for _ in 0..spec.vessel_count {
            let e = lobes[rng.random_range(0..2)];
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let rho = rng.random_range(0.0f64..0.85).sqrt();
            let (cx, cy) = (e.cx + rho * e.a * t.cos(), e.cy + rho * e.b * t.sin());
            let r = rng.random_range(1.0..2.0);
            for i in disc_pixels(cx, cy, r, h, w) {
                if lung_s[i] == 1 {
                    ct_s[i] = clamp_hu(vessel.sample(&mut rng));
                }
            }
        }

        if positive[slide] {
            let (cmin, cmax) = spec.lesion_count_range;
            let count = rng.random_range(cmin..=cmax).max(1);
            for _ in 0..count {
                let (rmin, rmax) = spec.lesion_radius_range;
                let r = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
                let pixels = place_lesion(&mut rng, &lobes, r, h, w, lung_s).ok_or_else(|| {
                    Error::InfeasibleSpec(format!("could not place a radius-{r:.1} lesion inside the lungs of slide {slide}"))
                })?;
                for i in pixels {
                    covid_s[i] = 1;
                    ct_s[i] = clamp_hu(lesion.sample(&mut rng));
                }
            }
        }
    }

    let mut volume = CtVolume::from_parts_unchecked(
        spec.volume_id.clone(),
        SliceStack::new(s, h, w, ct)?,
        SliceStack::new(s, h, w, lung)?,
        SliceStack::new(s, h, w, covid)?,
    );
    for &d in &spec.defects {
        inject_defect(&mut volume, d)?;
    }
    Ok(volume)
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    lobes: &[Ellipse; 2],
    r: f64,
    h: usize,
    w: usize,
    lung: &[u8],
) -> Option<Vec<usize>> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let e = lobes[rng.random_range(0..2)];
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = rng.random_range(0.0f64..1.0).sqrt();
        let cx = e.cx + rho * (e.a - r).max(0.0) * t.cos();
        let cy = e.cy + rho * (e.b - r).max(0.0) * t.sin();
        let pixels = disc_pixels(cx, cy, r, h, w);
        if !pixels.is_empty() && pixels.iter().all(|&i| lung[i] == 1) {
            return Some(pixels);
        }
    }
    None
}

/// Plants an annotation defect into an existing volume.
pub fn inject_defect(volume: &mut CtVolume, defect: Defect) -> Result<()> {
    let (s, h, w) = (volume.slide_count(), volume.slice_height(), volume.slice_width());
    let (slide, pixels) = match defect {
        Defect::CovidOutsideLung { slide, pixels } | Defect::CovidWithoutLung { slide, pixels } => (slide, pixels),
    };
    if slide >= s {
        return Err(Error::InvalidArgument(format!("defect slide {slide} beyond {s} slides")));
    }
    if pixels == 0 || pixels > w.saturating_sub(4) {
        return Err(Error::InvalidArgument(format!("defect of {pixels} pixels does not fit a row of width {w}")));
    }
    let (lung, covid) = volume.masks_mut();
    match defect {
        Defect::CovidOutsideLung { .. } => {
            let row = 2 * w;
            let lung_s = lung.slice(slide).to_vec();
            let covid_s = covid.slice_mut(slide);
            for x in 2..2 + pixels {
                if lung_s[row + x] == 1 {
                    return Err(Error::InvalidArgument("defect corner overlaps the lung".into()));
                }
                covid_s[row + x] = 1;
            }
        }
        Defect::CovidWithoutLung { .. } => {
            lung.slice_mut(slide).fill(0);
            let covid_s = covid.slice_mut(slide);
            covid_s.fill(0);
            let row = (h / 2) * w;
            for x in 2..2 + pixels {
                covid_s[row + x] = 1;
            }
        }
    }
    Ok(())
}
