//! Sample pairs, sliding-window augmentation, resizing and normalization.

pub mod manifest;
pub mod png;
pub mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{split_counts, CaseEntry, DatasetManifest, Provenance, Split, Tissue};
pub use synth::{beer_lambert_rgb, synth_cases, synth_pair, SynthConfig};

/// An aligned (RGB input, StO₂ target) pair, both 3×H×W in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x: Tensor,
    /// StO₂ replicated to three identical channels.
    pub y: Tensor,
    pub case_id: String,
    pub crop_index: usize,
    /// Top-left (row, col) of the crop in the source image.
    pub offset: (usize, usize),
}

/// Maps [0, 1] to [−1, 1].
pub fn normalize_value(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Maps [−1, 1] back to [0, 1].
pub fn denormalize_value(v: f32) -> f32 {
    (v + 1.0) * 0.5
}

pub fn normalize(t: &Tensor) -> Tensor {
    t.map(normalize_value)
}

pub fn denormalize(t: &Tensor) -> Tensor {
    t.map(denormalize_value)
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match *t.dims() {
        [c, h, w] => Ok([c, h, w]),
        ref other => Err(Error::Contract(format!("expected a C×H×W image, got dims {other:?}"))),
    }
}

/// Copies a 1×H×W map into three identical channels.
pub fn replicate_channels(mono: &Tensor) -> Result<Tensor> {
    let [c, h, w] = dims3(mono)?;
    if c != 1 {
        return Err(Error::shape("replicate_channels", mono.dims(), &[1, h, w]));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(mono.data());
    }
    Tensor::new(&[3, h, w], data)
}

/// Channel `c` of a C×H×W image as 1×H×W.
pub fn take_channel(image: &Tensor, c: usize) -> Result<Tensor> {
    let [channels, h, w] = dims3(image)?;
    if c >= channels {
        return Err(Error::Contract(format!("channel {c} out of range for {channels} channels")));
    }
    Tensor::new(&[1, h, w], image.data()[c * h * w..(c + 1) * h * w].to_vec())
}

/// Rows and columns of the sliding-window grid.
pub fn crop_grid(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Geometry(format!("window {window} and stride {stride} must be positive")));
    }
    if window > h || window > w {
        return Err(Error::Geometry(format!("window {window} does not fit a {h}×{w} image")));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Top-left offsets of every window position, in raster order.
pub fn crop_offsets(h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = crop_grid(h, w, window, stride)?;
    Ok((0..rows).flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride))).collect())
}

/// Exact window×window sub-array at `offset`.
pub fn crop_at(image: &Tensor, offset: (usize, usize), window: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(image)?;
    let (top, left) = offset;
    if window == 0 || top + window > h || left + window > w {
        return Err(Error::Geometry(format!("crop {window}×{window} at {offset:?} exceeds {h}×{w}")));
    }
    let mut data = Vec::with_capacity(c * window * window);
    for ch in 0..c {
        for r in top..top + window {
            let start = (ch * h + r) * w + left;
            data.extend_from_slice(&image.data()[start..start + window]);
        }
    }
    Tensor::new(&[c, window, window], data)
}

/// Every window×window crop at the given stride, in raster order.
pub fn crop_slide(image: &Tensor, window: usize, stride: usize) -> Result<Vec<Tensor>> {
    let [_, h, w] = dims3(image)?;
    crop_offsets(h, w, window, stride)?
        .into_iter()
        .map(|off| crop_at(image, off, window))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Resizes a C×H×W image on a corner-aligned sampling grid.
pub fn resize(image: &Tensor, out_h: usize, out_w: usize, interp: Interpolation) -> Result<Tensor> {
    let [c, h, w] = dims3(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param(format!("resize target {out_h}×{out_w} must be positive")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    // source coordinate, lower index, upper index, fraction
    let axis = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let scale = if out > 1 { (inp - 1) as f64 / (out - 1) as f64 } else { 0.0 };
        (0..out)
            .map(|i| {
                let src = i as f64 * scale;
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                match interp {
                    Interpolation::Bilinear => (lo, hi, (src - lo as f64) as f32),
                    Interpolation::Nearest => {
                        let n = (src.round() as usize).min(inp - 1);
                        (n, n, 0.0)
                    }
                }
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let (p, q) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let top = a + (b - a) * fx;
                let bottom = p + (q - p) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize(image, out_h, out_w, Interpolation::Bilinear)
}

/// Sliding-window augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub augment: bool,
    pub window: usize,
    pub stride: usize,
    /// Side every crop is resized to (the network input size).
    pub net_size: usize,
    pub interpolation: Interpolation,
}

impl Default for AugmentConfig {
    /// Desk scale: 96×128 sources, 64-pixel windows at stride 16, 64-pixel
    /// network input.
    fn default() -> Self {
        AugmentConfig {
            augment: true,
            window: 64,
            stride: 16,
            net_size: 64,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl AugmentConfig {
    /// 128-pixel windows at stride 16 on 192×256 sources, upsampled to 256.
    pub fn full_scale() -> Self {
        AugmentConfig {
            augment: true,
            window: 128,
            stride: 16,
            net_size: 256,
            interpolation: Interpolation::Bilinear,
        }
    }

    /// Crops produced per source image of the given size.
    pub fn pairs_per_case(&self, h: usize, w: usize) -> Result<usize> {
        if !self.augment {
            return Ok(1);
        }
        let (rows, cols) = crop_grid(h, w, self.window, self.stride)?;
        Ok(rows * cols)
    }
}

/// One source case: StO₂ map (1×H×W) and RGB image (3×H×W), both in [0, 1].
#[derive(Clone, Debug)]
pub struct CaseImages {
    pub case_id: String,
    pub tissue: Tissue,
    pub split: Split,
    pub sto2: Tensor,
    pub rgb: Tensor,
}

/// All sample pairs derived from one source case.
#[derive(Clone, Debug)]
pub struct CaseSamples {
    pub case_id: String,
    pub tissue: Tissue,
    pub split: Split,
    /// Crop grid (rows, cols); (1, 1) without augmentation.
    pub grid: (usize, usize),
    pub pairs: Vec<SamplePair>,
}

impl CaseSamples {
    /// Index of the crop nearest the image center.
    pub fn center_index(&self) -> usize {
        let (rows, cols) = self.grid;
        (rows / 2) * cols + cols / 2
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub cases: Vec<CaseSamples>,
}

impl Dataset {
    pub fn train_pairs(&self) -> Vec<&SamplePair> {
        self.cases
            .iter()
            .filter(|c| c.split == Split::Train)
            .flat_map(|c| c.pairs.iter())
            .collect()
    }

    pub fn train_cases(&self) -> Vec<&CaseSamples> {
        self.cases.iter().filter(|c| c.split == Split::Train).collect()
    }

    pub fn test_cases(&self) -> Vec<&CaseSamples> {
        self.cases.iter().filter(|c| c.split == Split::Test).collect()
    }

    /// Indices into `cases` of the train and test splits.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |s: Split| {
            self.cases
                .iter()
                .enumerate()
                .filter(|(_, c)| c.split == s)
                .map(|(i, _)| i)
                .collect()
        };
        (pick(Split::Train), pick(Split::Test))
    }
}

fn expand_case(case: &CaseImages, aug: &AugmentConfig) -> Result<CaseSamples> {
    let [c, h, w] = dims3(&case.rgb)?;
    if c != 3 {
        return Err(Error::Data(format!("case {}: RGB image has {c} channels", case.case_id)));
    }
    if dims3(&case.sto2)? != [1, h, w] {
        return Err(Error::shape("build_dataset", case.rgb.dims(), case.sto2.dims()));
    }
    let (grid, offsets, window) = if aug.augment {
        let grid = crop_grid(h, w, aug.window, aug.stride)?;
        (grid, crop_offsets(h, w, aug.window, aug.stride)?, aug.window)
    } else {
        if h != w {
            return Err(Error::Data(format!(
                "case {}: un-augmented images must be square, got {h}×{w}",
                case.case_id
            )));
        }
        ((1, 1), vec![(0, 0)], h)
    };
    let pairs = offsets
        .into_iter()
        .enumerate()
        .map(|(crop_index, offset)| {
            let x = crop_at(&case.rgb, offset, window)?;
            let y = crop_at(&case.sto2, offset, window)?;
            let x = resize(&x, aug.net_size, aug.net_size, aug.interpolation)?;
            let y = resize(&y, aug.net_size, aug.net_size, aug.interpolation)?;
            Ok(SamplePair {
                x: normalize(&x),
                y: normalize(&replicate_channels(&y)?),
                case_id: case.case_id.clone(),
                crop_index,
                offset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseSamples {
        case_id: case.case_id.clone(),
        tissue: case.tissue,
        split: case.split,
        grid,
        pairs,
    })
}

/// Expands every case into normalized sample pairs. Crops of x and y are
/// taken at identical offsets. Cases are processed in parallel; output order
/// follows the input order.
pub fn build_dataset(cases: &[CaseImages], aug: &AugmentConfig) -> Result<Dataset> {
    if cases.len() < 2 {
        return Err(Error::Data(format!("need at least 2 cases, got {}", cases.len())));
    }
    if !cases.iter().any(|c| c.split == Split::Test) {
        return Err(Error::Data("split has no test cases".into()));
    }
    if !cases.iter().any(|c| c.split == Split::Train) {
        return Err(Error::Data("split has no train cases".into()));
    }
    let cases = cases.par_iter().map(|c| expand_case(c, aug)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { cases })
}
