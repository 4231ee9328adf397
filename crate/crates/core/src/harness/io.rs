//! PNG reading and writing for `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Nearest 8-bit level of every value; the exact set of values a PNG can hold.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid(format!("expected [3, H, W], got {:?}", t.shape())));
    };
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Panels side by side; all must share one shape.
pub fn hstack(panels: &[Tensor]) -> Result<Tensor> {
    let first = panels.first().ok_or_else(|| Error::invalid("no panels"))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", first.shape())));
    };
    if panels.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::invalid("panels differ in shape"));
    }
    let wide = w * panels.len();
    Ok(Tensor::from_fn(&[c, h, wide], |i| {
        let (ch, rest) = (i / (h * wide), i % (h * wide));
        let (y, x) = (rest / wide, rest % wide);
        panels[x / w].data()[ch * h * w + y * w + x % w]
    }))
}

/// Rows of equally sized panels, each row as wide as `cols` panels.
pub fn grid(panels: &[Tensor], cols: usize) -> Result<Tensor> {
    if panels.is_empty() || cols == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let blank = Tensor::zeros(panels[0].shape());
    let rows: Vec<Tensor> = panels
        .chunks(cols)
        .map(|row| {
            let mut row = row.to_vec();
            row.resize(cols, blank.clone());
            hstack(&row)
        })
        .collect::<Result<_>>()?;
    let &[c, h, w] = rows[0].shape() else { unreachable!() };
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane * rows.len());
    for ch in 0..c {
        for r in &rows {
            data.extend_from_slice(&r.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    Ok(Tensor::new(vec![c, h * rows.len(), w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn png_round_trip_is_exact_for_quantised_values() {
        let mut rng = Rng::new(1);
        let t = quantize(&rng.uniform_tensor(&[3, 5, 7], 0.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_png(&t, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), t);
    }

    #[test]
    fn stacking_layout() {
        let a = Tensor::full(&[3, 2, 2], 0.25);
        let b = Tensor::full(&[3, 2, 2], 0.75);
        let row = hstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(row.shape(), &[3, 2, 4]);
        assert_eq!(&row.data()[..4], &[0.25, 0.25, 0.75, 0.75]);
        let g = grid(&[a.clone(), b, a], 2).unwrap();
        assert_eq!(g.shape(), &[3, 4, 4]);
        // second row: a then blank
        assert_eq!(&g.data()[8..12], &[0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_shapes() {
        assert!(save_png(&Tensor::zeros(&[2, 4, 4]), Path::new("/nonexistent/x.png")).is_err());
        assert!(hstack(&[Tensor::zeros(&[3, 2, 2]), Tensor::zeros(&[3, 2, 3])]).is_err());
    }
}
