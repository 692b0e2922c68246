//! Pixel-space transforms on 8-bit RGB rasters: visible-to-grayscale
//! conversion, head-shoulder cropping, bilinear resizing and the two
//! training augmentations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use agm_autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgmError, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
    Grayscale,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
            Modality::Grayscale => "grayscale",
        })
    }
}

impl FromStr for Modality {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visible" | "rgb" => Ok(Modality::Visible),
            "infrared" | "ir" | "thermal" => Ok(Modality::Infrared),
            "grayscale" | "gray" => Ok(Modality::Grayscale),
            other => Err(AgmError::Data(format!("unknown modality {other:?}"))),
        }
    }
}

/// H×W×3 unsigned 8-bit raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    pub modality: Modality,
    pub identity: u32,
    pub camera: Option<u32>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        modality: Modality,
        identity: u32,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(AgmError::DegenerateSize(format!("{height}x{width} image")));
        }
        if pixels.len() != height * width * 3 {
            return Err(AgmError::InvalidImage(format!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if modality == Modality::Grayscale
            && pixels.chunks_exact(3).any(|p| p[0] != p[1] || p[1] != p[2])
        {
            return Err(AgmError::InvalidImage(
                "grayscale image with unequal channels".into(),
            ));
        }
        Ok(Image {
            height,
            width,
            pixels,
            modality,
            identity,
            camera: None,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3], modality: Modality) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image::new(height, width, pixels, modality, 0)
    }

    pub fn with_camera(mut self, camera: Option<u32>) -> Self {
        self.camera = camera;
        self
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

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Same labels, new raster.
    fn derive(&self, height: usize, width: usize, pixels: Vec<u8>, modality: Modality) -> Image {
        Image {
            height,
            width,
            pixels,
            modality,
            identity: self.identity,
            camera: self.camera,
        }
    }

    /// Mean over pixels of `max − min` across the three channels.
    pub fn channel_spread(&self) -> f64 {
        let total: u64 = self
            .pixels
            .chunks_exact(3)
            .map(|p| (p.iter().max().unwrap() - p.iter().min().unwrap()) as u64)
            .sum();
        total as f64 / (self.height * self.width) as f64
    }
}

/// Weights of the luminance combination `α1·R + α2·G + α3·B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayscaleCoeffs {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for GrayscaleCoeffs {
    fn default() -> Self {
        GrayscaleCoeffs {
            alpha1: 0.299,
            alpha2: 0.587,
            alpha3: 0.114,
        }
    }
}

/// Round half up, then clamp into the 8-bit range. The tiny bias absorbs
/// binary representation error of products that are exact halves in
/// decimal, e.g. `0.299·R + …` landing on `x.5`.
fn quantize(v: f64) -> u8 {
    (v + 0.5 + 1e-9).floor().clamp(0.0, 255.0) as u8
}

/// Converts a visible image to grayscale, replicating the luminance value
/// into all three channels.
pub fn to_grayscale(img: &Image, coeffs: &GrayscaleCoeffs) -> Result<Image> {
    if img.modality != Modality::Visible {
        return Err(AgmError::ModalityMismatch {
            expected: Modality::Visible,
            actual: img.modality,
        });
    }
    Ok(luminance_replicated(img, coeffs))
}

/// Luminance projection without the modality check, for generator outputs
/// that are RGB-shaped but destined for the grayscale domain.
pub(crate) fn luminance_replicated(img: &Image, coeffs: &GrayscaleCoeffs) -> Image {
    let mut out = Vec::with_capacity(img.pixels.len());
    for p in img.pixels.chunks_exact(3) {
        let g = quantize(
            coeffs.alpha1 * p[0] as f64 + coeffs.alpha2 * p[1] as f64 + coeffs.alpha3 * p[2] as f64,
        );
        out.extend_from_slice(&[g, g, g]);
    }
    img.derive(img.height, img.width, out, Modality::Grayscale)
}

/// Upper third of the image: rows `[0, floor(H/3))`, every column.
pub fn crop_head_shoulder(img: &Image) -> Result<Image> {
    if img.height < 3 {
        return Err(AgmError::DegenerateSize(format!(
            "head-shoulder crop needs height >= 3, got {}",
            img.height
        )));
    }
    let rows = img.height / 3;
    let pixels = img.pixels[..rows * img.width * 3].to_vec();
    Ok(img.derive(rows, img.width, pixels, img.modality))
}

/// Bilinear resize with half-pixel centres.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(AgmError::DegenerateSize(format!(
            "resize target {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, img.width, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, img.height, out_h);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img.pixels[(yy * img.width + xx) * 3 + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(quantize(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(img.derive(out_h, out_w, out, img.modality))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub crop_padding: usize,
    pub erase_probability: f64,
    /// Fraction of the image area covered by an erased rectangle.
    pub erase_area_range: (f64, f64),
    /// Height / width of an erased rectangle.
    pub erase_aspect_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_padding: 10,
            erase_probability: 0.5,
            erase_area_range: (0.02, 0.4),
            erase_aspect_range: (0.3, 3.3),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_padding: 0,
            erase_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo >= 0.0;
        if !(0.0..=1.0).contains(&self.erase_probability) {
            return Err(AgmError::Config(format!(
                "erase probability {} outside [0, 1]",
                self.erase_probability
            )));
        }
        if !ordered(self.erase_area_range) || self.erase_area_range.1 > 1.0 {
            return Err(AgmError::Config(format!(
                "erase area range {:?} must be ordered within [0, 1]",
                self.erase_area_range
            )));
        }
        if !ordered(self.erase_aspect_range) || self.erase_aspect_range.0 <= 0.0 {
            return Err(AgmError::Config(format!(
                "erase aspect range {:?} must be ordered and positive",
                self.erase_aspect_range
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugmentPolicy {
            seed,
            ..self.clone()
        }
    }
}

/// Rectangle chosen by random erasing: `(top, left, height, width)`.
pub type EraseRect = (usize, usize, usize, usize);

/// Samples an erase rectangle whose area fraction and aspect ratio both lie
/// inside the policy ranges, or `None` after 100 failed attempts.
pub fn sample_erase_rect(
    height: usize,
    width: usize,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Option<EraseRect> {
    let area = (height * width) as f64;
    let (a_lo, a_hi) = policy.erase_area_range;
    let (r_lo, r_hi) = policy.erase_aspect_range;
    for _ in 0..100 {
        let target = area * rng.gen_range(a_lo..=a_hi);
        let aspect = rng.gen_range(r_lo.ln()..=r_hi.ln()).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > height || w > width {
            continue;
        }
        let frac = (h * w) as f64 / area;
        let ratio = h as f64 / w as f64;
        if frac < a_lo || frac > a_hi || ratio < r_lo || ratio > r_hi {
            continue;
        }
        let top = rng.gen_range(0..=height - h);
        let left = rng.gen_range(0..=width - w);
        return Some((top, left, h, w));
    }
    None
}

/// Random crop (zero padding then crop back) followed by random erasing with
/// uniform noise. Deterministic given the image and `policy.seed`.
pub fn augment(img: &Image, policy: &AugmentPolicy) -> Result<Image> {
    policy.validate()?;
    let mut rng = seed::rng(policy.seed, &[seed::tag("augment")]);
    let (h, w) = (img.height, img.width);
    let mut pixels = img.pixels.clone();

    if policy.crop_padding > 0 {
        let p = policy.crop_padding;
        let oy = rng.gen_range(0..=2 * p);
        let ox = rng.gen_range(0..=2 * p);
        let mut cropped = vec![0u8; pixels.len()];
        for y in 0..h {
            let sy = (y + oy) as isize - p as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - p as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let s = (sy as usize * w + sx as usize) * 3;
                let d = (y * w + x) * 3;
                cropped[d..d + 3].copy_from_slice(&pixels[s..s + 3]);
            }
        }
        pixels = cropped;
    }

    if policy.erase_probability > 0.0 && rng.gen_bool(policy.erase_probability) {
        if let Some((top, left, eh, ew)) = sample_erase_rect(h, w, policy, &mut rng) {
            let gray = img.modality == Modality::Grayscale;
            for y in top..top + eh {
                for x in left..left + ew {
                    let d = (y * w + x) * 3;
                    if gray {
                        let v: u8 = rng.gen();
                        pixels[d..d + 3].copy_from_slice(&[v, v, v]);
                    } else {
                        for c in 0..3 {
                            pixels[d + c] = rng.gen();
                        }
                    }
                }
            }
        }
    }
    Ok(img.derive(h, w, pixels, img.modality))
}

/// Stacks images of equal size into an NCHW tensor scaled to `[-1, 1]`.
pub fn to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| AgmError::Precondition("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = vec![0.0; images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(AgmError::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        let base = n * 3 * h * w;
        for (i, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * h * w + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data))
}

/// Inverse of [`to_tensor`] for sample `n`, clamped into 8-bit range.
pub fn from_tensor(t: &Tensor, n: usize, template: &Image, modality: Modality) -> Result<Image> {
    let (_, c, h, w) = t.dims4();
    if c != 3 {
        return Err(AgmError::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let s = t.sample(n);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            pixels.push(quantize((s[ch * h * w + i] + 1.0) * 127.5));
        }
    }
    Ok(template.derive(h, w, pixels, modality))
}

pub fn read_png(path: &Path, modality: Modality, identity: u32) -> Result<Image> {
    if !path.exists() {
        return Err(AgmError::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)
        .map_err(|e| AgmError::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(h as usize, w as usize, rgb.into_raw(), modality, identity)
}

/// Writes a 3-channel PNG, creating parent directories.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AgmError::io(parent, e))?;
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| AgmError::InvalidImage("pixel buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AgmError::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Mean channel spread over a set of images.
pub fn mean_channel_spread(images: &[Image]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    images.iter().map(Image::channel_spread).sum::<f64>() / images.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn visible(h: usize, w: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&f(y, x));
            }
        }
        Image::new(h, w, px, Modality::Visible, 5).unwrap().with_camera(Some(2))
    }

    #[test]
    fn grayscale_examples() {
        let c = GrayscaleCoeffs::default();
        for (rgb, want) in [([255, 255, 255], 255), ([0, 0, 0], 0), ([255, 0, 0], 76)] {
            let img = Image::filled(1, 1, rgb, Modality::Visible).unwrap();
            let g = to_grayscale(&img, &c).unwrap();
            assert_eq!(g.pixel(0, 0), [want; 3]);
            assert_eq!(g.modality, Modality::Grayscale);
        }
    }

    #[test]
    fn grayscale_preserves_labels_and_rejects_other_modalities() {
        let img = visible(4, 2, |y, x| [(y * 40) as u8, (x * 90) as u8, 7]);
        let g = to_grayscale(&img, &GrayscaleCoeffs::default()).unwrap();
        assert_eq!((g.identity, g.camera), (5, Some(2)));
        let err = to_grayscale(&g, &GrayscaleCoeffs::default()).unwrap_err();
        assert!(matches!(err, AgmError::ModalityMismatch { .. }));
    }

    #[test]
    fn grayscale_modality_requires_equal_channels() {
        assert!(Image::new(1, 1, vec![1, 2, 3], Modality::Grayscale, 0).is_err());
    }

    #[test]
    fn head_shoulder_crop_sizes() {
        for (h, want) in [(288, 96), (3, 1), (299, 99)] {
            let img = visible(h, 4, |y, _| [y as u8, 0, 0]);
            let c = crop_head_shoulder(&img).unwrap();
            assert_eq!((c.height(), c.width()), (want, 4));
            assert_eq!(c.pixel(want - 1, 3), img.pixel(want - 1, 3));
        }
        let big = visible(288, 144, |_, _| [1, 2, 3]);
        let c = crop_head_shoulder(&big).unwrap();
        assert_eq!((c.height(), c.width()), (96, 144));
        let img = visible(2, 4, |_, _| [0, 0, 0]);
        assert!(matches!(
            crop_head_shoulder(&img),
            Err(AgmError::DegenerateSize(_))
        ));
    }

    #[test]
    fn resize_examples() {
        let img = visible(5, 3, |y, x| [(y * 50) as u8, (x * 80) as u8, 9]);
        assert_eq!(resize(&img, 5, 3).unwrap(), img);
        let constant = Image::filled(2, 2, [17, 200, 3], Modality::Visible).unwrap();
        for (h, w) in [(1, 1), (7, 3), (13, 29)] {
            let r = resize(&constant, h, w).unwrap();
            assert!(r.pixels().chunks(3).all(|p| p == [17, 200, 3]));
        }
        let crop = visible(96, 144, |y, x| [(y % 256) as u8, (x % 256) as u8, 0]);
        let r = resize(&crop, 128, 144).unwrap();
        assert_eq!((r.height(), r.width()), (128, 144));
        assert!(resize(&crop, 0, 3).is_err());
    }

    #[test]
    fn augment_identity_policy_is_noop() {
        let img = visible(12, 6, |y, x| [(y * 20) as u8, (x * 40) as u8, 3]);
        assert_eq!(augment(&img, &AugmentPolicy::identity()).unwrap(), img);
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = visible(24, 12, |y, x| [(y * 10) as u8, (x * 20) as u8, 99]);
        let p = AugmentPolicy {
            crop_padding: 3,
            erase_probability: 0.5,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(augment(&img, &p).unwrap(), augment(&img, &p).unwrap());
        let outs: Vec<_> = (0..8)
            .map(|s| augment(&img, &p.with_seed(s)).unwrap())
            .collect();
        assert!(outs.iter().any(|o| *o != outs[0]));
    }

    #[test]
    fn erasing_a_black_image_leaves_a_rectangle_inside_policy_bounds() {
        let img = Image::filled(40, 20, [0, 0, 0], Modality::Visible).unwrap();
        for s in 0..20 {
            let p = AugmentPolicy {
                crop_padding: 0,
                erase_probability: 1.0,
                seed: s,
                ..Default::default()
            };
            let out = augment(&img, &p).unwrap();
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            for y in 0..40 {
                for x in 0..20 {
                    if out.pixel(y, x) != [0, 0, 0] {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
            assert!(y0 != usize::MAX, "seed {s}: nothing erased");
            let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
            let area = (h * w) as f64 / 800.0;
            let aspect = h as f64 / w as f64;
            assert!((0.02..=0.4).contains(&area), "area {area}");
            assert!((0.3..=3.3).contains(&aspect), "aspect {aspect}");
        }
    }

    #[test]
    fn erasing_keeps_grayscale_images_gray() {
        let img = Image::filled(30, 15, [90, 90, 90], Modality::Grayscale).unwrap();
        let p = AugmentPolicy {
            erase_probability: 1.0,
            seed: 3,
            ..Default::default()
        };
        let out = augment(&img, &p).unwrap();
        assert_eq!(out.modality, Modality::Grayscale);
        assert!(out.pixels().chunks(3).all(|c| c[0] == c[1] && c[1] == c[2]));
    }

    #[test]
    fn invalid_policy_rejected() {
        let img = Image::filled(6, 6, [0, 0, 0], Modality::Visible).unwrap();
        let p = AugmentPolicy {
            erase_probability: 1.5,
            ..Default::default()
        };
        assert!(augment(&img, &p).is_err());
        let p = AugmentPolicy {
            erase_area_range: (0.5, 0.1),
            ..Default::default()
        };
        assert!(augment(&img, &p).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = visible(3, 4, |y, x| [(y * 80) as u8, (x * 60) as u8, 255]);
        let t = to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        let back = from_tensor(&t, 0, &img, Modality::Visible).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_round_trip_keeps_grayscale_three_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = visible(6, 4, |y, x| [(y * 30) as u8, (x * 50) as u8, 12]);
        let g = to_grayscale(&img, &GrayscaleCoeffs::default()).unwrap();
        let path = dir.path().join("g.png");
        write_png(&g, &path).unwrap();
        let back = read_png(&path, Modality::Grayscale, 5).unwrap();
        assert_eq!(back.pixels(), g.pixels());
        let missing = read_png(&dir.path().join("nope.png"), Modality::Visible, 0);
        assert!(matches!(missing, Err(AgmError::MissingFile(_))));
    }

    proptest! {
        #[test]
        fn grayscale_idempotent_and_exact_on_equal_channels(r: u8, g: u8, b: u8, v: u8) {
            let c = GrayscaleCoeffs::default();
            let img = Image::filled(1, 1, [r, g, b], Modality::Visible).unwrap();
            let once = to_grayscale(&img, &c).unwrap();
            let again_input = Image::new(1, 1, once.pixels().to_vec(), Modality::Visible, 0).unwrap();
            let twice = to_grayscale(&again_input, &c).unwrap();
            prop_assert_eq!(once.pixels(), twice.pixels());
            let flat = Image::filled(1, 1, [v, v, v], Modality::Visible).unwrap();
            prop_assert_eq!(to_grayscale(&flat, &c).unwrap().pixel(0, 0), [v, v, v]);
        }

        #[test]
        fn crop_height_is_floor_third(h in 3usize..400) {
            let img = Image::filled(h, 2, [1, 2, 3], Modality::Visible).unwrap();
            prop_assert_eq!(crop_head_shoulder(&img).unwrap().height(), h / 3);
        }

        #[test]
        fn augment_preserves_labels_and_size(seed: u64, pad in 0usize..5, prob in 0.0f64..=1.0) {
            let img = Image::filled(20, 10, [40, 80, 120], Modality::Infrared).unwrap().with_camera(Some(3));
            let p = AugmentPolicy { crop_padding: pad, erase_probability: prob, seed, ..Default::default() };
            let out = augment(&img, &p).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.identity, out.camera), (20, 10, 0, Some(3)));
            prop_assert_eq!(out.modality, Modality::Infrared);
        }
    }
}
