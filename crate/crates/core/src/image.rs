//! Image preprocessing: resize → center crop → per-channel normalization →
//! patch sequence. Nothing here is random.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero-sized image {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Decodes PNG or JPEG. Grayscale is replicated and alpha dropped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ::image::open(path).map_err(|e| Error::input(path, e))?;
        Self::from_dynamic(img).map_err(|e| Error::input(path, e))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = ::image::load_from_memory(bytes)
            .map_err(|e| Error::InvalidArgument(format!("image decode: {e}")))?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: ::image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(h as usize, w as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ::image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::input(path, e))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Channels-first 3×H×W float image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::InvalidArgument(format!(
                "3x{height}x{width} image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }
}

/// Bilinear resize to `height×width` with half-pixel centers, scaling values
/// to `[0, 1]`. The aspect ratio is not preserved.
pub fn resize(img: &RawImage, height: usize, width: usize) -> Result<FloatImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "zero-sized resize target {height}x{width}"
        )));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(height, img.height);
    let cols = taps(width, img.width);

    let mut data = vec![0f32; 3 * height * width];
    for c in 0..3 {
        let at = |r: usize, col: usize| img.pixels[(r * img.width + col) * 3 + c] as f64;
        for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * fx;
                let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * fx;
                let v = top + (bottom - top) * fy;
                data[(c * height + y) * width + x] = (v / 255.0) as f32;
            }
        }
    }
    FloatImage::new(height, width, data)
}

/// Offset of a centered window of `size` inside `extent`.
pub fn crop_offset(extent: usize, size: usize) -> usize {
    (extent - size) / 2
}

/// Centered square crop; the offset is `floor((side - size) / 2)` per axis.
pub fn center_crop(img: &FloatImage, size: usize) -> Result<FloatImage> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::InvalidArgument(format!(
            "crop {size} does not fit {}x{}",
            img.height, img.width
        )));
    }
    let top = crop_offset(img.height, size);
    let left = crop_offset(img.width, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for r in top..top + size {
            let start = (c * img.height + r) * img.width + left;
            data.extend_from_slice(&img.data[start..start + size]);
        }
    }
    FloatImage::new(size, size, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationSpec {
    /// ImageNet channel statistics.
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        for (c, s) in self.std.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "normalization std for channel {c} must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Standardized image, `(x - mean[c]) / std[c]` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage(FloatImage);

impl NormalizedImage {
    pub fn image(&self) -> &FloatImage {
        &self.0
    }

    pub fn side(&self) -> usize {
        self.0.height
    }
}

pub fn normalize(img: &FloatImage, spec: &NormalizationSpec) -> Result<NormalizedImage> {
    spec.validate()?;
    let plane = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v - spec.mean[c]) / spec.std[c]
        })
        .collect();
    Ok(NormalizedImage(FloatImage::new(img.height, img.width, data)?))
}

pub fn denormalize(img: &NormalizedImage, spec: &NormalizationSpec) -> FloatImage {
    let inner = &img.0;
    let plane = inner.height * inner.width;
    let data = inner
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            v * spec.std[c] + spec.mean[c]
        })
        .collect();
    FloatImage::new(inner.height, inner.width, data).expect("same geometry")
}

/// Non-overlapping P×P patches in row-major grid order.
///
/// Each row of `patches` flattens one block as `[row][col][channel]`,
/// giving `3·P²` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    grid: usize,
    patches: Tensor<f32>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// `[N × 3P²]`.
    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }
}

pub fn patchify(img: &NormalizedImage, patch_size: usize) -> Result<PatchGrid> {
    let img = &img.0;
    if img.height != img.width {
        return Err(Error::InvalidArgument(format!(
            "patchify needs a square image, got {}x{}",
            img.height, img.width
        )));
    }
    let side = img.height;
    if patch_size == 0 || side % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not divide image side {side}"
        )));
    }
    let grid = side / patch_size;
    let dim = 3 * patch_size * patch_size;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..3 {
                        data.push(img.at(c, gy * patch_size + py, gx * patch_size + px));
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid,
        patches: Tensor::new([grid * grid, dim], data)?,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> FloatImage {
    let p = grid.patch_size;
    let side = grid.grid * p;
    let mut data = vec![0f32; 3 * side * side];
    let mut values = grid.patches.data().iter();
    for gy in 0..grid.grid {
        for gx in 0..grid.grid {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        let (r, col) = (gy * p + py, gx * p + px);
                        data[(c * side + r) * side + col] = *values.next().expect("patch data");
                    }
                }
            }
        }
    }
    FloatImage::new(side, side, data).expect("square geometry")
}

/// Geometry and statistics of the preprocessing chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePipelineConfig {
    pub resize: usize,
    pub crop: usize,
    pub normalization: NormalizationSpec,
}

impl Default for ImagePipelineConfig {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
            normalization: NormalizationSpec::IMAGENET,
        }
    }
}

impl ImagePipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config(
                "image.crop",
                format!("crop {} must be in 1..={}", self.crop, self.resize),
            ));
        }
        self.normalization
            .validate()
            .map_err(|e| Error::config("image.std", e.to_string()))
    }

    /// resize → center crop → normalize.
    pub fn process(&self, img: &RawImage) -> Result<NormalizedImage> {
        let resized = resize(img, self.resize, self.resize)?;
        let cropped = center_crop(&resized, self.crop)?;
        normalize(&cropped, &self.normalization)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(h: usize, w: usize, rgb: [u8; 3]) -> RawImage {
        RawImage::new(h, w, rgb.iter().copied().cycle().take(h * w * 3).collect()).unwrap()
    }

    #[test]
    fn resize_same_size_is_identity() {
        let pixels: Vec<u8> = (0..4 * 5 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let img = RawImage::new(4, 5, pixels.clone()).unwrap();
        let out = resize(&img, 4, 5).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                for ch in 0..3 {
                    let expect = pixels[(r * 5 + c) * 3 + ch] as f64 / 255.0;
                    assert_eq!(out.at(ch, r, c), expect as f32);
                }
            }
        }
    }

    #[test]
    fn resize_preserves_constant_color() {
        let out = resize(&solid(512, 512, [10, 200, 77]), 256, 256).unwrap();
        for (c, v) in [10u8, 200, 77].iter().enumerate() {
            let expect = (*v as f64 / 255.0) as f32;
            for r in 0..256 {
                for col in 0..256 {
                    assert_eq!(out.at(c, r, col), expect);
                }
            }
        }
    }

    #[test]
    fn resize_checkerboard_matches_hand_evaluation() {
        // [[0, 255], [255, 0]] upsampled 2x. With half-pixel centers the source
        // coordinates are clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1, so the
        // per-axis weights on (pixel 0, pixel 1) are (1,0) (.75,.25) (.25,.75) (0,1).
        let img = RawImage::new(
            2,
            2,
            vec![0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0],
        )
        .unwrap();
        let out = resize(&img, 4, 4).unwrap();
        #[rustfmt::skip]
        let expect = [
            [0.0,  0.25,  0.75,  1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0,  0.75,  0.25,  0.0],
        ];
        for c in 0..3 {
            for r in 0..4 {
                for col in 0..4 {
                    assert!((out.at(c, r, col) - expect[r][col]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        assert!(resize(&solid(2, 2, [0; 3]), 0, 4).is_err());
        assert!(RawImage::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn center_crop_window() {
        assert_eq!(crop_offset(256, 224), 16);
        let data: Vec<f32> = (0..3 * 256 * 256).map(|v| v as f32).collect();
        let img = FloatImage::new(256, 256, data).unwrap();
        let out = center_crop(&img, 224).unwrap();
        assert_eq!(out.at(0, 0, 0), img.at(0, 16, 16));
        assert_eq!(out.at(2, 223, 223), img.at(2, 239, 239));

        assert_eq!(center_crop(&img, 256).unwrap(), img);
        assert!(center_crop(&img, 300).is_err());
    }

    #[test]
    fn normalize_examples() {
        let img = FloatImage::new(1, 1, vec![0.485, 1.0, 0.5]).unwrap();
        let out = normalize(&img, &NormalizationSpec::IMAGENET).unwrap();
        assert_eq!(out.image().at(0, 0, 0), 0.0);
        assert!((out.image().at(1, 0, 0) - (1.0 - 0.456) / 0.224).abs() < 1e-6);
        assert!((out.image().at(1, 0, 0) - 2.428_571_4).abs() < 1e-5);

        let same = normalize(&img, &NormalizationSpec::IDENTITY).unwrap();
        assert_eq!(same.image(), &img);

        let bad = NormalizationSpec {
            mean: [0.0; 3],
            std: [1.0, 0.0, 1.0],
        };
        assert!(normalize(&img, &bad).is_err());
    }

    #[test]
    fn patchify_counts() {
        let blank = |side| NormalizedImage(FloatImage::new(side, side, vec![0.0; 3 * side * side]).unwrap());
        let g = patchify(&blank(224), 16).unwrap();
        assert_eq!((g.num_patches(), g.patch_dim()), (196, 768));
        assert_eq!(g.patches().shape(), &[196, 768]);
        assert_eq!(patchify(&blank(32), 16).unwrap().num_patches(), 4);
        assert!(patchify(&blank(224), 15).is_err());
    }

    #[test]
    fn patch_rows_flatten_row_col_channel() {
        let side = 4;
        let data: Vec<f32> = (0..3 * side * side).map(|v| v as f32).collect();
        let img = NormalizedImage(FloatImage::new(side, side, data).unwrap());
        let g = patchify(&img, 2).unwrap();
        // Patch 1 is grid (0, 1): pixels (0,2),(0,3),(1,2),(1,3).
        let row = g.patches().row(1).unwrap();
        let expect: Vec<f32> = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .flat_map(|&(r, c)| {
                let img = &img;
                (0..3).map(move |ch| img.image().at(ch, r, c))
            })
            .collect();
        assert_eq!(row.data(), &expect[..]);
    }

    #[test]
    fn pipeline_shape_is_fixed() {
        let cfg = ImagePipelineConfig::default();
        for (h, w) in [(1, 1), (300, 97), (256, 256), (64, 640)] {
            let out = cfg.process(&solid(h, w, [1, 2, 3])).unwrap();
            assert_eq!(out.side(), 224);
            assert_eq!(out.image().data().len(), 3 * 224 * 224);
        }
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in 0u32..1000, p in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let side = 8;
            let data: Vec<f32> = (0..3 * side * side)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 7.0)
                .collect();
            let img = NormalizedImage(FloatImage::new(side, side, data).unwrap());
            let g = patchify(&img, p).unwrap();
            prop_assert_eq!(&unpatchify(&g), img.image());
        }

        #[test]
        fn denormalize_recovers_input(values in prop::collection::vec(0.0f32..=1.0, 12)) {
            let img = FloatImage::new(2, 2, values).unwrap();
            let spec = NormalizationSpec::IMAGENET;
            let back = denormalize(&normalize(&img, &spec).unwrap(), &spec);
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn pipeline_is_deterministic(h in 1usize..40, w in 1usize..40, seed in any::<u8>()) {
            let pixels: Vec<u8> = (0..h * w * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = RawImage::new(h, w, pixels).unwrap();
            let cfg = ImagePipelineConfig { resize: 20, crop: 16, normalization: NormalizationSpec::IMAGENET };
            prop_assert_eq!(cfg.process(&img).unwrap(), cfg.process(&img).unwrap());
        }
    }
}
