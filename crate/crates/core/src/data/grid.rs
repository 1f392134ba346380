use std::path::Path;

use image::{ColorType, ImageFormat};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Gap between and around tiles, in pixels.
pub const GRID_MARGIN: usize = 2;

/// Margin fill: the 8-bit code of 0.5.
const MARGIN_LEVEL: u8 = 128;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(height, width)` of a grid of `rows × cols` tiles of `h × w` pixels.
pub fn grid_extent(rows: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    (
        rows * h + (rows + 1) * GRID_MARGIN,
        cols * w + (cols + 1) * GRID_MARGIN,
    )
}

/// Writes one grid row per stack `[n, h, w, c]`. Single-channel stacks (such
/// as blending maps) are rendered grayscale; if any stack has three channels
/// the file is RGB. Format follows the extension: `.png`, or `.ppm`/`.pgm`.
pub fn export_grid(rows: &[Tensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = rows.first().ok_or_else(|| Error::InvalidArgument("grid needs at least one row".into()))?;
    let (cols, h, w, _) = first.nhwc()?;
    let mut rgb = false;
    for r in rows {
        let (n, rh, rw, c) = r.nhwc()?;
        if (rh, rw) != (h, w) {
            return shape_err("export_grid", format!("mixed image sizes {h}x{w} and {rh}x{rw}"));
        }
        if n != cols {
            return shape_err("export_grid", format!("rows hold {cols} and {n} images"));
        }
        match c {
            1 => {}
            3 => rgb = true,
            _ => return shape_err("export_grid", format!("{c}-channel images cannot be rendered")),
        }
    }
    let out_c = if rgb { 3 } else { 1 };
    let (gh, gw) = grid_extent(rows.len(), cols, h, w);
    let mut buf = vec![MARGIN_LEVEL; gh * gw * out_c];
    for (ri, r) in rows.iter().enumerate() {
        let c = r.shape()[3];
        for i in 0..cols {
            let top = GRID_MARGIN + ri * (h + GRID_MARGIN);
            let left = GRID_MARGIN + i * (w + GRID_MARGIN);
            for y in 0..h {
                for x in 0..w {
                    let src = ((i * h + y) * w + x) * c;
                    let dst = ((top + y) * gw + left + x) * out_c;
                    for k in 0..out_c {
                        buf[dst + k] = quantize(r.data()[src + if c == 1 { 0 } else { k }]);
                    }
                }
            }
        }
    }
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => ImageFormat::Png,
        Some("ppm" | "pgm" | "pnm") => ImageFormat::Pnm,
        _ => return invalid(format!("{}: grid files must end in .png, .ppm or .pgm", path.display())),
    };
    let color = if rgb { ColorType::Rgb8 } else { ColorType::L8 };
    image::save_buffer_with_format(path, &buf, gw as u32, gh as u32, color, format)?;
    Ok(())
}

/// Reads an image file as `[h, w, c]` values in `[0, 1]`, keeping 1 or 3 channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (raw, c) = if img.color().has_color() {
        (img.to_rgb8().into_raw(), 3)
    } else {
        (img.to_luma8().into_raw(), 1)
    };
    Tensor::new(vec![h, w, c], raw.iter().map(|&b| f64::from(b) / 255.0).collect())
}
