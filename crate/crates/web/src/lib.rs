//! Browser demo: a phantom slice viewer, a threshold/metrics explorer and a
//! point-cloud export preview, all running the pipeline crate in wasm.

use wasm_bindgen::prelude::*;

use lungseg::evaluation::{confusion, metrics, threshold, F1Formula};
use lungseg::preprocess::normalize_hu;
use lungseg::reconstruct3d::{to_csv, volume_to_points, PointSource};
use lungseg::volume_io::synth_volume;
use lungseg::{CtVolume, PhantomSpec};

const EDGE: usize = 128;

#[wasm_bindgen]
pub struct Demo {
    volume: CtVolume,
}

#[wasm_bindgen]
impl Demo {
    /// Builds an 8-slide 128x128 phantom.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, lesion_hu_mean: f64) -> Result<Demo, JsError> {
        let spec = PhantomSpec {
            slide_count: 8,
            height: EDGE,
            width: EDGE,
            lesion_hu_mean,
            lesion_radius_range: (3.0, 7.0),
            vessel_count: 4,
            seed,
            ..PhantomSpec::default()
        };
        Ok(Demo { volume: synth_volume(&spec)? })
    }

    pub fn edge(&self) -> usize {
        EDGE
    }

    pub fn slides(&self) -> usize {
        self.volume.slide_count()
    }

    /// RGBA pixels of one slide through the HU window, with the lung tinted
    /// blue and the lesion annotation red when `overlay` is set.
    pub fn render(&self, slide: usize, overlay: bool) -> Vec<u8> {
        let slide = slide.min(self.slides() - 1);
        let ct = self.volume.ct().slice(slide);
        let lung = self.volume.lung_masks().slice(slide);
        let covid = self.volume.covid_masks().slice(slide);
        let mut out = Vec::with_capacity(4 * ct.len());
        for i in 0..ct.len() {
            let g = (normalize_hu(ct[i] as f64) * 255.0).round() as u8;
            let [r, gr, b] = match (overlay, covid[i], lung[i]) {
                (true, 1, _) => [255, g / 3, g / 3],
                (true, _, 1) => [g / 2, g / 2, g / 2 + 100],
                _ => [g, g, g],
            };
            out.extend_from_slice(&[r, gr, b, 255]);
        }
        out
    }

    /// Simulated soft prediction of one slide: the lesion annotation
    /// box-blurred with `radius`, so its edges fade out.
    pub fn soft_prediction(&self, slide: usize, radius: usize) -> Vec<f32> {
        let covid = self.volume.covid_masks().slice(slide.min(self.slides() - 1));
        box_blur(covid, EDGE, radius)
    }

    /// Metrics of the thresholded soft prediction against the annotation,
    /// as a JSON object.
    pub fn metrics_json(&self, slide: usize, radius: usize, t: f64) -> Result<String, JsError> {
        let slide = slide.min(self.slides() - 1);
        let pred = threshold(&self.soft_prediction(slide, radius), t)?;
        let c = confusion(&pred, self.volume.covid_masks().slice(slide))?;
        let s = metrics(&c, F1Formula::Standard);
        let p = metrics(&c, F1Formula::Paper);
        Ok(format!(
            "{{\"tp\":{},\"fp\":{},\"fn\":{},\"tn\":{},\"accuracy\":{:.6},\"precision\":{:.6},\"recall\":{:.6},\"f1\":{:.6},\"f1_paper\":{:.6}}}",
            c.tp, c.fp, c.fn_, c.tn, s.accuracy, s.precision, s.recall, s.f1, p.f1
        ))
    }

    /// Row count and the first `max_rows` CSV rows of the point export
    /// (`kind` is `ct` or `ground_truth`).
    pub fn points_preview(&self, kind: &str, z_step: f64, max_rows: usize) -> Result<String, JsError> {
        let source = match kind {
            "ct" => PointSource::Ct,
            "ground_truth" => PointSource::GroundTruth,
            other => return Err(JsError::new(&format!("unknown point kind {other:?}"))),
        };
        let mut cloud = volume_to_points(&self.volume, source, z_step)?;
        let total = cloud.rows.len();
        cloud.rows.truncate(max_rows);
        Ok(format!("{total} rows\n{}", to_csv(&cloud)))
    }
}

/// Mean over a `(2r + 1)^2` window, clipped at the borders.
fn box_blur(mask: &[u8], edge: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; mask.len()];
    for y in 0..edge {
        for x in 0..edge {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(edge - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(edge - 1));
            let mut sum = 0u32;
            for yy in y0..=y1 {
                sum += mask[yy * edge + x0..=yy * edge + x1].iter().map(|&v| v as u32).sum::<u32>();
            }
            out[y * edge + x] = sum as f32 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_rgba_of_the_slice() {
        let d = Demo::new(1, -500.0).unwrap();
        assert_eq!(d.render(0, true).len(), 4 * EDGE * EDGE);
        assert_eq!(d.render(99, false).len(), 4 * EDGE * EDGE);
    }

    #[test]
    fn sharp_prediction_is_perfect() {
        let d = Demo::new(2, -500.0).unwrap();
        for s in 0..d.slides() {
            let json = d.metrics_json(s, 0, 0.5).unwrap();
            assert!(json.contains("\"f1\":1.000000"), "{json}");
        }
    }

    #[test]
    fn blur_radius_zero_keeps_mask() {
        let m = [0u8, 1, 0, 1];
        assert_eq!(box_blur(&m, 2, 0), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(box_blur(&[1, 1, 1, 1], 2, 1), vec![1.0; 4]);
    }

    #[test]
    fn preview_counts_all_rows() {
        let d = Demo::new(3, -500.0).unwrap();
        let text = d.points_preview("ground_truth", 1.0, 3).unwrap();
        let mut lines = text.lines();
        let total: usize = lines.next().unwrap().trim_end_matches(" rows").parse().unwrap();
        let positives = d.volume.covid_masks().as_slice().iter().filter(|&&v| v == 1).count();
        assert_eq!(total, positives);
        assert_eq!(lines.next(), Some("x,y,z,value"));
        assert_eq!(lines.count(), 3.min(total));
    }
}
