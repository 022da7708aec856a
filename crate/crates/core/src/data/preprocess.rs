use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};

/// Placement of a resized image on the output canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub target_h: usize,
    /// Width after aspect-preserving resize.
    pub scaled_w: usize,
    pub canvas_w: usize,
    /// Columns dropped on the left when cropping.
    pub crop_left: usize,
}

pub fn layout(h: usize, w: usize, target_h: usize, canvas_w: usize) -> Result<Layout> {
    if h == 0 || w == 0 || target_h == 0 || canvas_w == 0 {
        return Err(Error::Dimension(format!(
            "cannot place a {h}x{w} image on a {target_h}x{canvas_w} canvas"
        )));
    }
    let scaled_w = ((w as f64 * target_h as f64 / h as f64).round() as usize).max(1);
    let crop_left = scaled_w.saturating_sub(canvas_w) / 2;
    Ok(Layout {
        target_h,
        scaled_w,
        canvas_w,
        crop_left,
    })
}

/// Half-pixel-centred source coordinate for output index `i`.
fn source(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Bilinear resize to `target_h` (aspect preserved), then zero-pad right or
/// centre-crop to `canvas_w`. Intensities are mapped to [0, 1].
pub fn preprocess_image(img: &GrayImage, target_h: usize, canvas_w: usize) -> Result<Vec<f64>> {
    let (h, w) = img.dims();
    let l = layout(h, w, target_h, canvas_w)?;
    let (sy, sx) = (h as f64 / target_h as f64, w as f64 / l.scaled_w as f64);
    let mut out = vec![0.0; target_h * canvas_w];
    let visible = l.scaled_w.min(canvas_w);
    for y in 0..target_h {
        let fy = source(y, sy).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..visible {
            let fx = source(x + l.crop_left, sx).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| img.get(yy, xx) as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out[y * canvas_w + x] = (top * (1.0 - ty) + bottom * ty) / 255.0;
        }
    }
    Ok(out)
}

/// Nearest-neighbour counterpart of [`preprocess_image`] for masks.
pub fn preprocess_mask(mask: &Mask, target_h: usize, canvas_w: usize) -> Result<Mask> {
    let (h, w) = mask.dims();
    let l = layout(h, w, target_h, canvas_w)?;
    let (sy, sx) = (h as f64 / target_h as f64, w as f64 / l.scaled_w as f64);
    let visible = l.scaled_w.min(canvas_w);
    Ok(Mask::from_fn(target_h, canvas_w, |y, x| {
        if x >= visible {
            return false;
        }
        let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let xx = ((((x + l.crop_left) as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask.get(yy, xx)
    }))
}
