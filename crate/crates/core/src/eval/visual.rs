use std::path::Path;

use crate::data::{denormalize, png, take_channel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GUTTER_VALUE: f32 = 1.0;

/// Side-by-side panel in [0, 1]: input RGB, true StO₂, predicted StO₂ and
/// |prediction − truth|, separated by white gutters. Inputs are 3×H×W in
/// [−1, 1]; the result is 3×H×(4W + 3·gutter).
pub fn qualitative_panel(x: &Tensor, y: &Tensor, pred: &Tensor, gutter: usize) -> Result<Tensor> {
    let &[3, h, w] = x.dims() else {
        return Err(Error::Contract(format!("expected a 3×H×W input, got dims {:?}", x.dims())));
    };
    for t in [y, pred] {
        if t.dims() != x.dims() {
            return Err(Error::shape("qualitative_panel", x.dims(), t.dims()));
        }
    }
    let truth = denormalize(&take_channel(y, 0)?);
    let guess = denormalize(&take_channel(pred, 0)?);
    let diff = Tensor::from_fn(&[1, h, w], |i| (guess.data()[i] - truth.data()[i]).abs());
    let rgb = denormalize(x);
    let panels: [(&Tensor, bool); 4] = [(&rgb, true), (&truth, false), (&guess, false), (&diff, false)];
    let width = 4 * w + 3 * gutter;
    let mut out = Tensor::full(&[3, h, width], GUTTER_VALUE);
    for (k, (panel, color)) in panels.iter().enumerate() {
        let left = k * (w + gutter);
        for c in 0..3 {
            let src_c = if *color { c } else { 0 };
            for r in 0..h {
                let src = &panel.data()[(src_c * h + r) * w..(src_c * h + r + 1) * w];
                let start = (c * h + r) * width + left;
                out.data_mut()[start..start + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Writes [`qualitative_panel`] as an 8-bit PNG; `text` becomes tEXt chunks.
pub fn emit_qualitative(path: &Path, x: &Tensor, y: &Tensor, pred: &Tensor, gutter: usize, text: &[(&str, &str)]) -> Result<()> {
    let panel = qualitative_panel(x, y, pred, gutter)?;
    png::write(path, &panel, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_diff_pixels() {
        let (h, w, g) = (3, 5, 2);
        let x = Tensor::full(&[3, h, w], -1.0);
        let y = Tensor::full(&[3, h, w], 0.0);
        let pred = Tensor::full(&[3, h, w], 0.5);
        let panel = qualitative_panel(&x, &y, &pred, g).unwrap();
        assert_eq!(panel.dims(), &[3, h, 4 * w + 3 * g]);
        let bytes = png::encode(&panel, &[]).unwrap();
        let (back, _) = png::decode(&bytes).unwrap();
        let width = 4 * w + 3 * g;
        let px = |col: usize| (back.data()[col] * 255.0).round() as u8;
        assert_eq!(px(0), 0);
        assert_eq!(px(w), 255);
        assert_eq!(px(w + g), 128);
        // |0.75 − 0.5| · 255 = 63.75 → 64
        assert_eq!(px(3 * (w + g)), 64);
        assert_eq!(px(width - 1), 64);
    }
}
