//! Single-scale normalized cross-correlation detector.
//!
//! Correlation numerators come from one FFT per image channel and one inverse
//! FFT per template (channel products are summed first). Window means and
//! energies come from integral images, following Lewis' fast NCC.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{io_error, DetectError, DetectorBackend, RawDetections, TileView};
use crate::bbox::{iou, BBox};

/// Candidate peaks overlapping an accepted one by at least this IoU are dropped,
/// whatever their class.
const PEAK_SUPPRESSION_IOU: f64 = 0.25;
const MAX_DETECTIONS: usize = 100;
/// Windows whose summed channel variance falls below this are treated as flat.
const FLAT_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Template {
    pub class_id: u32,
    pub image: RgbImage,
}

/// Reads `<class_id>.png` or `<class_id>_<name>.png` files, sorted by class id.
pub fn load_templates(dir: &Path) -> Result<Vec<Template>, DetectError> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        DetectError::BackendUnavailable(format!("cannot read template directory {}: {e}", dir.display()))
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_error(dir))?.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id_part = stem.split('_').next().unwrap_or_default();
        let class_id: u32 = id_part.parse().map_err(|_| DetectError::BadTemplate {
            path: path.clone(),
            reason: "file name must start with a numeric class id".into(),
        })?;
        let image = image::open(&path)
            .map_err(|e| DetectError::BadTemplate { path: path.clone(), reason: e.to_string() })?
            .into_rgb8();
        out.push(Template { class_id, image });
    }
    if out.is_empty() {
        return Err(DetectError::NoTemplates);
    }
    out.sort_by_key(|t| t.class_id);
    Ok(out)
}

struct PreparedTemplate {
    class_id: u32,
    h: usize,
    w: usize,
    /// Zero-mean channel planes.
    planes: [Vec<f64>; 3],
    energy: f64,
}

type SpectrumCache = HashMap<(usize, usize, usize, usize), Arc<Vec<Complex<f64>>>>;

pub struct ReferenceDetector {
    templates: Vec<PreparedTemplate>,
    threshold: f64,
    planner: FftPlanner<f64>,
    /// Conjugated template channel spectra keyed by (template, channel, H, W).
    spectra: SpectrumCache,
}

impl ReferenceDetector {
    pub fn new(templates: Vec<Template>, threshold: f64) -> Result<Self, DetectError> {
        if templates.is_empty() {
            return Err(DetectError::NoTemplates);
        }
        let prepared = templates
            .into_iter()
            .map(|t| {
                let (w, h) = (t.image.width() as usize, t.image.height() as usize);
                let mut planes = channel_planes(&t.image);
                let mut energy = 0.0;
                for p in planes.iter_mut() {
                    let mean = p.iter().sum::<f64>() / p.len() as f64;
                    for v in p.iter_mut() {
                        *v -= mean;
                        energy += *v * *v;
                    }
                }
                PreparedTemplate { class_id: t.class_id, h, w, planes, energy }
            })
            .collect();
        Ok(Self { templates: prepared, threshold, planner: FftPlanner::new(), spectra: HashMap::new() })
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.templates.iter().map(|t| t.class_id).collect()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Correlation score map of one template over every top-left position;
    /// positions whose window touches an invalid pixel or is flat are `None`.
    pub fn score_map(&mut self, tile: TileView<'_>, template_index: usize) -> Result<Vec<Option<f64>>, DetectError> {
        let prep = self.prepare_tile(tile)?;
        Ok(self.scores(&prep, template_index))
    }

    pub fn detect(&mut self, tile: TileView<'_>) -> Result<Vec<(u32, f64, BBox)>, DetectError> {
        let prep = self.prepare_tile(tile)?;
        let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
        for t in 0..self.templates.len() {
            let map = self.scores(&prep, t);
            let (oh, ow) = (prep.h - self.templates[t].h + 1, prep.w - self.templates[t].w + 1);
            for y in 0..oh {
                for x in 0..ow {
                    let Some(s) = map[y * ow + x] else { continue };
                    if s < self.threshold || !is_local_max(&map, ow, oh, x, y, s) {
                        continue;
                    }
                    candidates.push((s, y, x, t));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        let mut accepted: Vec<(u32, f64, BBox)> = Vec::new();
        for (s, y, x, t) in candidates {
            let tpl = &self.templates[t];
            let b = BBox::new(x as f64, y as f64, tpl.w as f64, tpl.h as f64);
            if accepted.iter().all(|(_, _, a)| iou(a, &b) < PEAK_SUPPRESSION_IOU) {
                accepted.push((tpl.class_id, s.clamp(0.0, 1.0), b));
                if accepted.len() == MAX_DETECTIONS {
                    break;
                }
            }
        }
        Ok(accepted)
    }

    fn prepare_tile(&mut self, tile: TileView<'_>) -> Result<PreparedTile, DetectError> {
        let (w, h) = (tile.image.width() as usize, tile.image.height() as usize);
        for t in &self.templates {
            if t.h > h || t.w > w {
                return Err(DetectError::TemplateLargerThanTile {
                    class_id: t.class_id,
                    th: t.h as u32,
                    tw: t.w as u32,
                    h: h as u32,
                    w: w as u32,
                });
            }
        }
        let planes = channel_planes(tile.image);
        let mut spectra = Vec::with_capacity(3);
        let mut sums = Vec::with_capacity(3);
        let mut squares = Vec::with_capacity(3);
        for p in &planes {
            let mut buf: Vec<Complex<f64>> = p.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft2(&mut self.planner, &mut buf, h, w, false);
            spectra.push(buf);
            sums.push(integral(p, h, w, |v| v));
            squares.push(integral(p, h, w, |v| v * v));
        }
        let invalid: Vec<f64> = if tile.mask.len() == w * h {
            tile.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
        } else {
            vec![0.0; w * h]
        };
        let invalid = integral(&invalid, h, w, |v| v);
        Ok(PreparedTile { h, w, spectra, sums, squares, invalid })
    }

    fn scores(&mut self, prep: &PreparedTile, t: usize) -> Vec<Option<f64>> {
        let (h, w) = (prep.h, prep.w);
        let (th, tw, energy) = (self.templates[t].h, self.templates[t].w, self.templates[t].energy);
        // Channel correlations are summed in the frequency domain so a single
        // inverse transform serves all three.
        let mut acc = vec![Complex::new(0.0, 0.0); h * w];
        for c in 0..3 {
            let spec = self.channel_spectrum(t, c, h, w);
            for ((a, i), s) in acc.iter_mut().zip(&prep.spectra[c]).zip(spec.iter()) {
                *a += i * s;
            }
        }
        fft2(&mut self.planner, &mut acc, h, w, true);
        let scale = 1.0 / (h * w) as f64;
        let n = (th * tw) as f64;
        let (oh, ow) = (h - th + 1, w - tw + 1);
        let mut out = vec![None; oh * ow];
        if energy <= 0.0 {
            return out;
        }
        for y in 0..oh {
            for x in 0..ow {
                if box_sum(&prep.invalid, w, x, y, tw, th) > 0.5 {
                    continue;
                }
                let mut var = 0.0;
                for c in 0..3 {
                    let s1 = box_sum(&prep.sums[c], w, x, y, tw, th);
                    let s2 = box_sum(&prep.squares[c], w, x, y, tw, th);
                    var += s2 - s1 * s1 / n;
                }
                if var <= FLAT_VARIANCE * n {
                    continue;
                }
                let num = acc[y * w + x].re * scale;
                out[y * ow + x] = Some((num / (var * energy).sqrt()).clamp(-1.0, 1.0));
            }
        }
        out
    }

    fn channel_spectrum(&mut self, t: usize, c: usize, h: usize, w: usize) -> Arc<Vec<Complex<f64>>> {
        if let Some(s) = self.spectra.get(&(t, c, h, w)) {
            return s.clone();
        }
        // Spectra are tile-sized, so only the current tile size is kept.
        self.spectra.retain(|k, _| (k.2, k.3) == (h, w));
        let tpl = &self.templates[t];
        let mut buf = vec![Complex::new(0.0, 0.0); h * w];
        for y in 0..tpl.h {
            for x in 0..tpl.w {
                buf[y * w + x].re = tpl.planes[c][y * tpl.w + x];
            }
        }
        fft2(&mut self.planner, &mut buf, h, w, false);
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        let buf = Arc::new(buf);
        self.spectra.insert((t, c, h, w), buf.clone());
        buf
    }
}

impl DetectorBackend for ReferenceDetector {
    fn name(&self) -> &str {
        "reference"
    }

    fn detect_batch(&mut self, tiles: &[TileView<'_>]) -> Result<Vec<RawDetections>, DetectError> {
        tiles.iter().map(|t| self.detect(*t)).collect()
    }
}

struct PreparedTile {
    h: usize,
    w: usize,
    spectra: Vec<Vec<Complex<f64>>>,
    sums: Vec<Vec<f64>>,
    squares: Vec<Vec<f64>>,
    invalid: Vec<f64>,
}

fn channel_planes(img: &RgbImage) -> [Vec<f64>; 3] {
    let n = (img.width() * img.height()) as usize;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for p in img.pixels() {
        for (plane, v) in planes.iter_mut().zip(p.0) {
            plane.push(v as f64 / 255.0);
        }
    }
    planes
}

/// Summed-area table with one row and column of zero padding.
fn integral(data: &[f64], h: usize, w: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(data[y * w + x]);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, x: usize, y: usize, bw: usize, bh: usize) -> f64 {
    let stride = w + 1;
    s[(y + bh) * stride + x + bw] - s[y * stride + x + bw] - s[(y + bh) * stride + x] + s[y * stride + x]
}

fn is_local_max(map: &[Option<f64>], ow: usize, oh: usize, x: usize, y: usize, s: f64) -> bool {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= ow as i64 || ny >= oh as i64 {
                continue;
            }
            if let Some(v) = map[ny as usize * ow + nx as usize] {
                // Plateaus keep only their first (raster-order) member.
                let earlier = dy < 0 || (dy == 0 && dx < 0);
                if v > s || (v == s && earlier) {
                    return false;
                }
            }
        }
    }
    true
}

/// In-place 2-D FFT of a row-major `h × w` buffer. The inverse is unnormalized.
fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(data);
    let mut t = vec![Complex::new(0.0, 0.0); h * w];
    transpose(data, &mut t, h, w);
    col_fft.process(&mut t);
    transpose(&t, data, w, h);
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], h: usize, w: usize) {
    const B: usize = 32;
    for by in (0..h).step_by(B) {
        for bx in (0..w).step_by(B) {
            for y in by..(by + B).min(h) {
                for x in bx..(bx + B).min(w) {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
    }
}
