//! Thresholding, confusion counts, per-slide and pooled metrics, and the
//! annotation QA scanner.
//!
//! Degenerate counts follow one rule: a ratio whose denominator is zero is 1
//! when the slide is entirely correct (`fp == fn == 0`) and 0 otherwise.
//! An empty prediction on an empty truth therefore scores 1 everywhere.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::SlideSample;
use crate::unet::{predict_samples, ModelState};
use crate::volume_io::CtVolume;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binarizes probabilities: 1 iff `p >= t`.
pub fn threshold(pred: &[f32], t: f64) -> Result<Vec<u8>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} must lie strictly inside (0, 1)")));
    }
    Ok(pred.iter().map(|&p| (p as f64 >= t) as u8).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Pixelwise counts over two equally shaped binary maps.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    confusion_in(pred, truth, None)
}

/// [`confusion`] restricted to pixels where `roi` is 1.
pub fn confusion_in(pred: &[u8], truth: &[u8], roi: Option<&[u8]>) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() || roi.is_some_and(|r| r.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, truth {}, roi {:?}",
            pred.len(),
            truth.len(),
            roi.map(<[u8]>::len)
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if roi.is_some_and(|r| r[i] == 0) {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// F1 variant. `Paper` is the literal `Pr * Re / (Pr + Re)`, half of the
/// harmonic mean, kept for auditing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum F1Formula {
    #[default]
    Standard,
    Paper,
}

impl F1Formula {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(F1Formula::Standard),
            "paper" => Some(F1Formula::Paper),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            F1Formula::Standard => "standard",
            F1Formula::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    fn mean(items: impl ExactSizeIterator<Item = Metrics>) -> Metrics {
        let n = items.len() as f64;
        let mut s = Metrics { accuracy: 0.0, precision: 0.0, recall: 0.0, f1: 0.0 };
        for m in items {
            s.accuracy += m.accuracy;
            s.precision += m.precision;
            s.recall += m.recall;
            s.f1 += m.f1;
        }
        Metrics { accuracy: s.accuracy / n, precision: s.precision / n, recall: s.recall / n, f1: s.f1 / n }
    }
}

/// Accuracy, precision, recall and F1 of one set of counts.
///
/// F1 is evaluated from counts (`2TP / (2TP + FP + FN)`, or `TP / (...)` for
/// [`F1Formula::Paper`]), which is algebraically the precision/recall form
/// and exact whenever precision equals recall.
pub fn metrics(c: &ConfusionCounts, formula: F1Formula) -> Metrics {
    let perfect = c.fp == 0 && c.fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            if perfect { 1.0 } else { 0.0 }
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(c.tp + c.tn, c.total());
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if c.tp == 0 {
        match (perfect, formula) {
            (true, F1Formula::Standard) => 1.0,
            (true, F1Formula::Paper) => 0.5,
            (false, _) => 0.0,
        }
    } else {
        let num = match formula {
            F1Formula::Standard => 2 * c.tp,
            F1Formula::Paper => c.tp,
        };
        num as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    Metrics { accuracy, precision, recall, f1 }
}

/// Pixels that count towards metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Roi {
    #[default]
    Full,
    Lung,
}

impl Roi {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Roi::Full),
            "lung" => Some(Roi::Lung),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Roi::Full => "full",
            Roi::Lung => "lung",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub f1_formula: F1Formula,
    pub roi: Roi,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, f1_formula: F1Formula::Standard, roi: Roi::Full }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideMetrics {
    pub volume_id: String,
    pub slide_index: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Sorted by `(volume_id, slide_index)`.
    pub per_slide: Vec<SlideMetrics>,
    /// Arithmetic mean of the per-slide metrics.
    pub macro_avg: Metrics,
    pub micro_counts: ConfusionCounts,
    /// Metrics of the summed counts.
    pub micro: Metrics,
}

/// Anything that maps samples to probability maps.
pub trait Predictor {
    fn predict(&self, samples: &[SlideSample]) -> Result<Vec<Vec<f32>>>;
}

impl Predictor for ModelState {
    fn predict(&self, samples: &[SlideSample]) -> Result<Vec<Vec<f32>>> {
        predict_samples(self, samples)
    }
}

/// Runs `model` over `samples` and scores every slide.
pub fn evaluate(model: &impl Predictor, samples: &[SlideSample], opts: &EvalOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let preds = model.predict(samples)?;
    report_from_predictions(samples, &preds, opts)
}

pub fn report_from_predictions(samples: &[SlideSample], preds: &[Vec<f32>], opts: &EvalOptions) -> Result<MetricsReport> {
    if samples.is_empty() || samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples but {} predictions", samples.len(), preds.len())));
    }
    let mut per_slide = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(preds) {
        let bin = threshold(p, opts.threshold)?;
        let lung = (opts.roi == Roi::Lung).then(|| s.lung());
        let counts = confusion_in(&bin, &s.target, lung.as_deref())?;
        per_slide.push(SlideMetrics {
            volume_id: s.volume_id.clone(),
            slide_index: s.slide_index,
            counts,
            metrics: metrics(&counts, opts.f1_formula),
        });
    }
    per_slide.sort_by(|a, b| (&a.volume_id, a.slide_index).cmp(&(&b.volume_id, b.slide_index)));
    let macro_avg = Metrics::mean(per_slide.iter().map(|s| s.metrics));
    let micro_counts = per_slide.iter().fold(ConfusionCounts::default(), |acc, s| acc + s.counts);
    Ok(MetricsReport { macro_avg, micro: metrics(&micro_counts, opts.f1_formula), micro_counts, per_slide })
}

/// Text table: one row per slide, then `macro` and `micro` aggregate rows.
pub fn format_report(report: &MetricsReport) -> String {
    let mut s = String::from("volume_id,slide,tp,fp,fn,tn,acc,pre,rec,f1\n");
    let m6 = |m: &Metrics| format!("{:.6},{:.6},{:.6},{:.6}", m.accuracy, m.precision, m.recall, m.f1);
    for r in &report.per_slide {
        let c = r.counts;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.volume_id, r.slide_index, c.tp, c.fp, c.fn_, c.tn, m6(&r.metrics));
    }
    let _ = writeln!(s, "macro,,,,,,{}", m6(&report.macro_avg));
    let c = report.micro_counts;
    let _ = writeln!(s, "micro,,{},{},{},{},{}", c.tp, c.fp, c.fn_, c.tn, m6(&report.micro));
    s
}

pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_report(report)).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaKind {
    /// Lesion pixels outside the lung on a slide that has lung.
    CovidOutsideLung,
    /// Lesion pixels on a slide whose lung mask is empty.
    CovidWithoutLungSlide,
}

impl QaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QaKind::CovidOutsideLung => "covid_outside_lung",
            QaKind::CovidWithoutLungSlide => "covid_without_lung_slide",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaIssue {
    pub kind: QaKind,
    pub volume_id: String,
    pub slide_index: usize,
    pub offending_pixel_count: usize,
}

impl std::fmt::Display for QaIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.kind.as_str(), self.volume_id, self.slide_index, self.offending_pixel_count)
    }
}

/// Finds lesion annotations that cannot be right: marks outside the lung,
/// or marks on a slide without any lung. Each slide yields at most one
/// issue; a lung-less slide is reported only as `CovidWithoutLungSlide`.
pub fn qa_annotations(volume: &CtVolume) -> Vec<QaIssue> {
    let (lung, covid) = (volume.lung_masks(), volume.covid_masks());
    let mut out = Vec::new();
    for i in 0..lung.slides().min(covid.slides()) {
        let (l, c) = (lung.slice(i), covid.slice(i));
        let marked = c.iter().filter(|&&v| v != 0).count();
        if marked == 0 {
            continue;
        }
        let outside = c.iter().zip(l).filter(|(&c, &l)| c != 0 && l == 0).count();
        let kind = if !l.contains(&1) {
            QaKind::CovidWithoutLungSlide
        } else if outside > 0 {
            QaKind::CovidOutsideLung
        } else {
            continue;
        };
        out.push(QaIssue { kind, volume_id: volume.volume_id().to_owned(), slide_index: i, offending_pixel_count: outside });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{synth_volume, Defect, PhantomSpec};

    #[test]
    fn threshold_tie_goes_to_one() {
        assert_eq!(threshold(&[0.5], 0.5).unwrap(), vec![1]);
        assert_eq!(threshold(&[0.1, 0.2, 0.49], 0.5).unwrap(), vec![0, 0, 0]);
        assert!(threshold(&[0.5], 1.0).is_err());
        assert!(threshold(&[0.5], 0.0).is_err());
    }

    #[test]
    fn threshold_is_monotone() {
        let p: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        let lo = threshold(&p, 0.3).unwrap();
        let hi = threshold(&p, 0.6).unwrap();
        assert!(lo.iter().zip(&hi).all(|(l, h)| h <= l));
    }

    #[test]
    fn ten_by_ten_counts() {
        let mut pred = vec![0u8; 100];
        let mut truth = vec![0u8; 100];
        for i in [11, 22, 33] {
            pred[i] = 1;
            truth[i] = 1;
        }
        pred[50] = 1;
        truth[70] = 1;
        truth[80] = 1;
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 94 });

        let m = metrics(&c, F1Formula::Standard);
        assert!((m.accuracy - 0.97).abs() < 1e-15);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn identical_and_opposite_maps() {
        let a = [1u8, 0, 1, 1];
        let c = confusion(&a, &a).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&[1; 16], &[0; 16]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 16, fn_: 0, tn: 0 });
        assert!(matches!(confusion(&[1; 3], &[0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn degenerate_conventions() {
        let empty = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 }, F1Formula::Standard);
        assert_eq!((empty.accuracy, empty.precision, empty.recall, empty.f1), (1.0, 1.0, 1.0, 1.0));
        let missed = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 4 }, F1Formula::Standard);
        assert_eq!((missed.precision, missed.recall, missed.f1), (0.0, 0.0, 0.0));
        let false_alarm = metrics(&ConfusionCounts { tp: 0, fp: 2, fn_: 0, tn: 4 }, F1Formula::Standard);
        assert_eq!((false_alarm.precision, false_alarm.recall, false_alarm.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bounds_over_small_counts() {
        for tp in 0..=6 {
            for fp in 0..=6 {
                for fn_ in 0..=6 {
                    for tn in 0..=6 {
                        for f in [F1Formula::Standard, F1Formula::Paper] {
                            let m = metrics(&ConfusionCounts { tp, fp, fn_, tn }, f);
                            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                                assert!((0.0..=1.0).contains(&v));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn qa_finds_planted_defects_only() {
        let base = PhantomSpec { slide_count: 8, height: 64, width: 64, lesion_radius_range: (2.0, 4.0), ..PhantomSpec::default() };
        assert!(qa_annotations(&synth_volume(&base).unwrap()).is_empty());

        let spec = PhantomSpec { defects: vec![Defect::CovidOutsideLung { slide: 5, pixels: 3 }], ..base.clone() };
        let issues = qa_annotations(&synth_volume(&spec).unwrap());
        assert_eq!(issues.len(), 1);
        assert_eq!((issues[0].kind, issues[0].slide_index, issues[0].offending_pixel_count), (QaKind::CovidOutsideLung, 5, 3));

        let spec = PhantomSpec { defects: vec![Defect::CovidWithoutLung { slide: 2, pixels: 4 }], ..base };
        let issues = qa_annotations(&synth_volume(&spec).unwrap());
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].kind, QaKind::CovidWithoutLungSlide);
    }
}
