use serde::{Deserialize, Serialize};

use super::image::Image;
use super::similarity::{SimilarityTransform, ALIGNED_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub transform: SimilarityTransform,
}

/// An aligned 112×112 RGB crop. Values are in `[0, 1]` until normalized,
/// then in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFace {
    pub image: Image,
    pub normalized: bool,
    pub provenance: Option<Provenance>,
}

impl AlignedFace {
    pub fn new(image: Image) -> Result<Self> {
        if image.width() != ALIGNED_SIZE || image.height() != ALIGNED_SIZE {
            return Err(Error::validation(format!(
                "aligned face must be {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            image,
            normalized: false,
            provenance: None,
        })
    }
}

/// Resamples `image` into the aligned frame: output pixel `p` reads the source
/// at `transform^-1(p)` with bilinear interpolation, zero outside the source.
pub fn warp_and_crop(image: &Image, transform: &SimilarityTransform) -> Result<AlignedFace> {
    let inv = transform.inverse()?;
    let mut out = Image::new(ALIGNED_SIZE, ALIGNED_SIZE);
    for y in 0..ALIGNED_SIZE {
        for x in 0..ALIGNED_SIZE {
            let s = inv.apply([x as f64, y as f64]);
            out.put_pixel(x, y, image.sample_bilinear(s[0], s[1]));
        }
    }
    AlignedFace::new(out)
}

/// Per-channel affine map `x -> (x - 0.5) / 0.5`, taking `[0, 1]` to `[-1, 1]`.
pub fn normalize_image(face: &AlignedFace) -> Result<AlignedFace> {
    if face.normalized {
        return Err(Error::validation("image is already normalized"));
    }
    if let Some(v) = face
        .image
        .data()
        .iter()
        .find(|v| !(**v >= 0.0 && **v <= 1.0))
    {
        return Err(Error::validation(format!("pixel value {v} outside [0, 1]")));
    }
    let data = face.image.data().iter().map(|v| (v - 0.5) / 0.5).collect();
    Ok(AlignedFace {
        image: Image::from_vec(face.image.width(), face.image.height(), data)?,
        normalized: true,
        provenance: face.provenance.clone(),
    })
}
