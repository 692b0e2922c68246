use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, DatasetIndex, Layout};
use crate::error::{AgmError, Result};
use crate::imaging::{self, Image, Modality};
use crate::kv::KeyValues;
use crate::seed;

/// How an infrared copy collapses the visible render to one intensity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Desaturation {
    /// Luma-weighted (0.299, 0.587, 0.114).
    #[default]
    Luma,
    /// Unweighted channel mean. An exact linear function of RGB that
    /// luminance cannot reproduce, so it favours colour inputs.
    ChannelMean,
}

impl Desaturation {
    fn weights(self) -> [f64; 3] {
        match self {
            Desaturation::Luma => [0.299, 0.587, 0.114],
            Desaturation::ChannelMean => [1.0 / 3.0; 3],
        }
    }
}

impl std::str::FromStr for Desaturation {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "luma" => Ok(Desaturation::Luma),
            "channel_mean" => Ok(Desaturation::ChannelMean),
            other => Err(AgmError::Config(format!("unknown desaturation {other:?}; expected luma or channel_mean"))),
        }
    }
}

/// Keys understood by [`SynthConfig::apply`].
pub const SYNTH_KEYS: &[&str] = &[
    "ids",
    "per_id",
    "height",
    "width",
    "luminance_min",
    "luminance_max",
    "desaturation",
    "pose_jitter_px",
    "pixel_noise",
    "background_variation",
    "id_offset",
    "seed",
];

/// Procedural two-modality person dataset. Infrared copies are the visible
/// render desaturated, scaled by a per-image luminance multiplier drawn from
/// `luminance_jitter`, and tinted per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    /// Images per identity in each modality.
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub luminance_jitter: (f64, f64),
    pub ir_tint: [f64; 3],
    #[serde(default)]
    pub desaturation: Desaturation,
    /// Maximum figure displacement in pixels, per axis.
    pub pose_jitter_px: usize,
    /// Half-width of the uniform additive pixel noise, in 8-bit units.
    pub pixel_noise: f64,
    /// Half-width of the per-image background level shift.
    pub background_variation: f64,
    pub visible_cameras: Vec<u32>,
    pub infrared_cameras: Vec<u32>,
    /// First identity number; lets disjoint splits share a seed.
    pub id_offset: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 20,
            images_per_identity: 10,
            height: 72,
            width: 36,
            luminance_jitter: (0.6, 1.4),
            ir_tint: [1.0, 0.92, 0.84],
            desaturation: Desaturation::Luma,
            pose_jitter_px: 2,
            pixel_noise: 6.0,
            background_variation: 20.0,
            visible_cameras: vec![1, 2],
            infrared_cameras: vec![3, 6],
            id_offset: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set(&mut self.num_identities, "ids")?;
        kv.set(&mut self.images_per_identity, "per_id")?;
        kv.set(&mut self.height, "height")?;
        kv.set(&mut self.width, "width")?;
        kv.set(&mut self.luminance_jitter.0, "luminance_min")?;
        kv.set(&mut self.luminance_jitter.1, "luminance_max")?;
        kv.set(&mut self.desaturation, "desaturation")?;
        kv.set(&mut self.pose_jitter_px, "pose_jitter_px")?;
        kv.set(&mut self.pixel_noise, "pixel_noise")?;
        kv.set(&mut self.background_variation, "background_variation")?;
        kv.set(&mut self.id_offset, "id_offset")?;
        kv.set(&mut self.seed, "seed")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 || self.images_per_identity < 2 {
            return Err(AgmError::Config(
                "synthetic data needs at least 2 identities and 2 images per identity".into(),
            ));
        }
        if self.height < 12 || self.width < 6 {
            return Err(AgmError::Config(format!(
                "synthetic images must be at least 12x6, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.luminance_jitter;
        if !(lo > 0.0 && lo <= hi) {
            return Err(AgmError::Config(format!("luminance jitter range ({lo}, {hi}) must be positive and ordered")));
        }
        if self.ir_tint.iter().any(|&t| !(t >= 0.0)) || self.pixel_noise < 0.0 || self.background_variation < 0.0 {
            return Err(AgmError::Config("tint, noise and background variation must be non-negative".into()));
        }
        if self.visible_cameras.is_empty() || self.infrared_cameras.is_empty() {
            return Err(AgmError::Config("each modality needs at least one camera".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    HStripes(usize),
    VStripes(usize),
    Checker(usize),
}

#[derive(Clone, Copy, Debug)]
enum Hat {
    None,
    Cap,
    Tall,
}

#[derive(Clone, Copy, Debug)]
enum Bag {
    None,
    Left,
    Right,
}

/// Appearance of one identity, fixed across images and modalities.
#[derive(Clone, Debug)]
struct Figure {
    skin: [u8; 3],
    hair: [u8; 3],
    hat: Hat,
    hat_color: [u8; 3],
    head_width: f64,
    shirt: [u8; 3],
    shirt_alt: [u8; 3],
    pattern: Pattern,
    torso_width: f64,
    pants: [u8; 3],
    leg_gap: f64,
    shoes: [u8; 3],
    bag: Bag,
    bag_color: [u8; 3],
}

fn color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl Figure {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.gen_range(90..230u8);
        Figure {
            skin: [tone, (tone as f64 * 0.82) as u8, (tone as f64 * 0.7) as u8],
            hair: color(rng),
            hat: [Hat::None, Hat::Cap, Hat::Tall][rng.gen_range(0..3)],
            hat_color: color(rng),
            head_width: rng.gen_range(0.26..0.42),
            shirt: color(rng),
            shirt_alt: color(rng),
            pattern: match rng.gen_range(0..4) {
                0 => Pattern::Solid,
                1 => Pattern::HStripes(rng.gen_range(2..6)),
                2 => Pattern::VStripes(rng.gen_range(2..5)),
                _ => Pattern::Checker(rng.gen_range(2..5)),
            },
            torso_width: rng.gen_range(0.5..0.8),
            pants: color(rng),
            leg_gap: rng.gen_range(0.03..0.14),
            shoes: color(rng),
            bag: [Bag::None, Bag::Left, Bag::Right][rng.gen_range(0..3)],
            bag_color: color(rng),
        }
    }

    /// Color at pixel `(y, x)` relative to a figure offset, or `None` for
    /// background.
    fn paint(&self, y: f64, x: f64, h: f64, w: f64) -> Option<[u8; 3]> {
        let (fy, fx) = (y / h, x / w);
        let cx = 0.5;
        let dxc = (fx - cx).abs();
        let head_half = self.head_width / 2.0;
        let torso_half = self.torso_width / 2.0;
        // hat
        let hat_top = match self.hat {
            Hat::None => 1.0,
            Hat::Cap => 0.035,
            Hat::Tall => 0.0,
        };
        if fy >= hat_top && fy < 0.075 && dxc < head_half * 1.1 {
            return Some(self.hat_color);
        }
        if matches!(self.hat, Hat::Cap) && (0.06..0.085).contains(&fy) && fx > cx && fx < cx + head_half * 1.8 {
            return Some(self.hat_color);
        }
        // head: hair on the upper part, face below
        let head_cy = 0.13;
        let ry = 0.075;
        let e = ((fy - head_cy) / ry).powi(2) + (dxc / head_half).powi(2);
        if e <= 1.0 {
            return Some(if fy < head_cy - 0.02 { self.hair } else { self.skin });
        }
        // neck
        if (0.2..0.23).contains(&fy) && dxc < head_half * 0.4 {
            return Some(self.skin);
        }
        // torso and sleeves
        if (0.23..0.58).contains(&fy) {
            let shoulder = torso_half + 0.08 * (1.0 - ((fy - 0.23) / 0.1).min(1.0));
            if dxc < torso_half.min(shoulder) {
                return Some(self.torso_color(fy, fx));
            }
            if dxc < shoulder + 0.1 && fy < 0.5 {
                return Some(self.shirt);
            }
            if dxc < torso_half + 0.1 && (0.5..0.55).contains(&fy) {
                return Some(self.skin);
            }
        }
        // bag hangs at hip height on one side
        let bag_side = match self.bag {
            Bag::None => None,
            Bag::Left => Some(-1.0),
            Bag::Right => Some(1.0),
        };
        if let Some(side) = bag_side {
            let bx = cx + side * (torso_half + 0.05);
            if (0.4..0.62).contains(&fy) && (fx - bx).abs() < 0.11 {
                return Some(self.bag_color);
            }
        }
        // legs and shoes
        if (0.58..0.98).contains(&fy) {
            let outer = torso_half * 0.85;
            if dxc >= self.leg_gap / 2.0 && dxc < outer {
                return Some(if fy >= 0.93 { self.shoes } else { self.pants });
            }
        }
        None
    }

    fn torso_color(&self, fy: f64, fx: f64) -> [u8; 3] {
        let cell = |v: f64, n: usize| ((v * 40.0) as usize / n) % 2 == 0;
        let primary = match self.pattern {
            Pattern::Solid => true,
            Pattern::HStripes(n) => cell(fy, n),
            Pattern::VStripes(n) => cell(fx * 0.5, n),
            Pattern::Checker(n) => cell(fy, n) ^ cell(fx * 0.5, n),
        };
        if primary {
            self.shirt
        } else {
            self.shirt_alt
        }
    }
}

struct Shot {
    dy: f64,
    dx: f64,
    background: [f64; 3],
}

fn render(fig: &Figure, cfg: &SynthConfig, shot: &Shot, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = fig.paint(y as f64 + 0.5 - shot.dy, x as f64 + 0.5 - shot.dx, h as f64, w as f64);
            for ch in 0..3 {
                let base = c.map_or(shot.background[ch], |c| c[ch] as f64);
                let noise = if cfg.pixel_noise > 0.0 {
                    rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise)
                } else {
                    0.0
                };
                px.push((base + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    px
}

fn to_infrared(px: &[u8], desaturation: Desaturation, multiplier: f64, tint: [f64; 3]) -> Vec<u8> {
    let w = desaturation.weights();
    let mut out = Vec::with_capacity(px.len());
    for p in px.chunks_exact(3) {
        let v = (w[0] * p[0] as f64 + w[1] * p[1] as f64 + w[2] * p[2] as f64) * multiplier;
        for t in tint {
            out.push((v * t).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn shot(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Shot {
    let j = cfg.pose_jitter_px as f64;
    let mut offset = || if j > 0.0 { rng.gen_range(-j..=j).round() } else { 0.0 };
    let (dy, dx) = (offset(), offset());
    let bv = cfg.background_variation;
    let shift = if bv > 0.0 { rng.gen_range(-bv..=bv) } else { 0.0 };
    Shot {
        dy,
        dx,
        background: [96.0 + shift, 104.0 + shift, 98.0 + shift],
    }
}

fn image_path(root: &Path, modality: Modality, id: u32, camera: u32, k: usize) -> PathBuf {
    root.join(modality.to_string())
        .join(format!("{id:04}"))
        .join(format!("c{camera}_{k:03}.png"))
}

/// Renders the dataset under `out_dir` in the identity-directory layout,
/// writes a matching manifest, and returns the index.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| AgmError::io(out_dir, e))?;
    for i in 0..cfg.num_identities {
        let id = cfg.id_offset + i as u32;
        let fig = Figure::sample(&mut seed::rng(cfg.seed, &[seed::tag("figure"), id as u64]));
        for k in 0..cfg.images_per_identity {
            let mut rng = seed::rng(cfg.seed, &[seed::tag("visible"), id as u64, k as u64]);
            let s = shot(cfg, &mut rng);
            let camera = cfg.visible_cameras[k % cfg.visible_cameras.len()];
            let px = render(&fig, cfg, &s, &mut rng);
            let img = Image::new(cfg.height, cfg.width, px, Modality::Visible, id)?;
            imaging::write_png(&img, &image_path(out_dir, Modality::Visible, id, camera, k))?;
        }
        for k in 0..cfg.images_per_identity {
            let mut rng = seed::rng(cfg.seed, &[seed::tag("infrared"), id as u64, k as u64]);
            let s = shot(cfg, &mut rng);
            let camera = cfg.infrared_cameras[k % cfg.infrared_cameras.len()];
            let (lo, hi) = cfg.luminance_jitter;
            let multiplier = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let px = to_infrared(&render(&fig, cfg, &s, &mut rng), cfg.desaturation, multiplier, cfg.ir_tint);
            let img = Image::new(cfg.height, cfg.width, px, Modality::Infrared, id)?;
            imaging::write_png(&img, &image_path(out_dir, Modality::Infrared, id, camera, k))?;
        }
    }
    let index = load_dataset(out_dir, Layout::IdDirs, true)?;
    index.write_manifest()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infrared_is_tinted_desaturation() {
        let out = to_infrared(&[30, 60, 90], Desaturation::ChannelMean, 1.0, [1.0, 0.5, 0.0]);
        assert_eq!(out, vec![60, 30, 0]);
        // 0.299*100 + 0.587*200 + 0.114*50 = 153.0
        let out = to_infrared(&[100, 200, 50], Desaturation::Luma, 1.0, [1.0, 1.0, 0.0]);
        assert_eq!(out, vec![153, 153, 0]);
        let out = to_infrared(&[200, 200, 200], Desaturation::Luma, 1.4, [1.0, 1.0, 1.0]);
        assert_eq!(out, vec![255, 255, 255]);
    }

    #[test]
    fn figures_differ_between_identities() {
        let cfg = SynthConfig {
            pixel_noise: 0.0,
            pose_jitter_px: 0,
            background_variation: 0.0,
            ..SynthConfig::default()
        };
        let s = Shot {
            dy: 0.0,
            dx: 0.0,
            background: [96.0, 104.0, 98.0],
        };
        let draw = |id: u64| {
            let fig = Figure::sample(&mut seed::rng(1, &[seed::tag("figure"), id]));
            render(&fig, &cfg, &s, &mut seed::rng(0, &[]))
        };
        assert_ne!(draw(0), draw(1));
        assert_eq!(draw(4), draw(4));
    }
}
