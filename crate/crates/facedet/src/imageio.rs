use std::path::Path;

use facedet_core::image::Image;

use crate::error::{Error, Result};

/// Decodes a PNG or JPEG file to RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_rgb8(w as usize, h as usize, img.as_raw())?)
}

/// Writes an 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })
}
