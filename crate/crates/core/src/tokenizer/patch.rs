//! 16×16 patch raster for image-like data.

use crate::{Error, Result};

pub const PATCH: usize = 16;

/// 8-bit pixel grid, channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("images need 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// How an image was padded into whole patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl PatchGeometry {
    pub fn for_image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pad_bottom: (PATCH - height % PATCH) % PATCH,
            pad_right: (PATCH - width % PATCH) % PATCH,
        }
    }

    pub fn patch_rows(&self) -> usize {
        (self.height + self.pad_bottom) / PATCH
    }

    pub fn patch_cols(&self) -> usize {
        (self.width + self.pad_right) / PATCH
    }

    pub fn patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    pub fn tokens_per_patch(&self) -> usize {
        PATCH * PATCH * self.channels
    }

    pub fn total_tokens(&self) -> usize {
        self.patches() * self.tokens_per_patch()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (self.channels == 1 || self.channels == 3)
            && self.pad_bottom < PATCH
            && self.pad_right < PATCH
            && (self.height + self.pad_bottom).is_multiple_of(PATCH)
            && (self.width + self.pad_right).is_multiple_of(PATCH)
            && self.pad_bottom == (PATCH - self.height % PATCH) % PATCH
            && self.pad_right == (PATCH - self.width % PATCH) % PATCH;
        if ok {
            Ok(())
        } else {
            Err(Error::Corruption(format!("inconsistent patch geometry {self:?}")))
        }
    }
}

/// Edge-pads to whole patches and emits sub-pixels patch by patch.
pub fn patchify(img: &PixelGrid) -> (Vec<u8>, PatchGeometry) {
    let geom = PatchGeometry::for_image(img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(geom.total_tokens());
    for pr in 0..geom.patch_rows() {
        for pc in 0..geom.patch_cols() {
            for dy in 0..PATCH {
                let y = (pr * PATCH + dy).min(img.height - 1);
                for dx in 0..PATCH {
                    let x = (pc * PATCH + dx).min(img.width - 1);
                    out.extend_from_slice(img.pixel(y, x));
                }
            }
        }
    }
    (out, geom)
}

/// Inverse of [`patchify`]; padding is dropped.
pub fn depatchify(tokens: &[u8], geom: &PatchGeometry) -> Result<PixelGrid> {
    geom.validate()?;
    if tokens.len() != geom.total_tokens() {
        return Err(Error::Corruption(format!(
            "geometry implies {} sub-pixel tokens, got {}",
            geom.total_tokens(),
            tokens.len()
        )));
    }
    let c = geom.channels;
    let mut data = vec![0u8; geom.width * geom.height * c];
    let per_patch = geom.tokens_per_patch();
    for (p, patch) in tokens.chunks_exact(per_patch.max(1)).enumerate() {
        let (pr, pc) = (p / geom.patch_cols(), p % geom.patch_cols());
        for dy in 0..PATCH {
            let y = pr * PATCH + dy;
            if y >= geom.height {
                break;
            }
            for dx in 0..PATCH {
                let x = pc * PATCH + dx;
                if x >= geom.width {
                    break;
                }
                let src = (dy * PATCH + dx) * c;
                let dst = (y * geom.width + x) * c;
                data[dst..dst + c].copy_from_slice(&patch[src..src + c]);
            }
        }
    }
    PixelGrid::new(geom.width, geom.height, c, data)
}
