//! Synthetic place-recognition data.
//!
//! Each place owns a latent image. A view applies a photometric jitter and pixel noise that
//! both scale with `noise`, then overwrites a random subset of patches with faint noise
//! (the distractors: sky, road, and other uninformative regions).

use crate::encoder::{EncoderConfig, Image};
use crate::error::{domain, Result};
use crate::numerics::SeededRng;

/// Standard deviation of distractor pixels; latent pixels have unit variance.
pub const DISTRACTOR_STD: f64 = 0.1;
/// Jitter scale per unit of `noise`: gain `1 + J·noise·n₁`, offset `J·noise·n₂`.
pub const JITTER: f64 = 0.2;
/// Desk-scale benchmark: pixel noise and distractor fraction of the reference setting.
pub const BENCH_NOISE: f64 = 0.3;
pub const BENCH_DISTRACTOR_FRAC: f64 = 0.125;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub places: usize,
    pub views: usize,
    pub noise: f64,
    pub distractor_frac: f64,
    pub seed: u64,
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl SynthConfig {
    /// Geometry of the toy encoder.
    pub fn new(places: usize, views: usize, noise: f64, distractor_frac: f64, seed: u64) -> Self {
        let enc = EncoderConfig::toy();
        Self {
            places,
            views,
            noise,
            distractor_frac,
            seed,
            image_side: enc.image_side,
            patch_size: enc.patch_size,
            channels: enc.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.places == 0 || self.views == 0 {
            return domain("places and views must be at least 1");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return domain("noise must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.distractor_frac) {
            return domain("distractor fraction must lie in [0, 1]");
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return domain("image side must be a positive multiple of the patch size");
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// Place-major: image `place·views + view`.
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// Distractor patch positions of each image, ascending.
    pub distractors: Vec<Vec<usize>>,
}

pub fn make_synth_dataset(
    num_places: usize,
    views_per_place: usize,
    noise: f64,
    distractor_frac: f64,
    seed: u64,
) -> Result<Dataset> {
    make_synth_dataset_with(&SynthConfig::new(num_places, views_per_place, noise, distractor_frac, seed))
}

pub fn make_synth_dataset_with(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let (side, ch, p, g) = (cfg.image_side, cfg.channels, cfg.patch_size, cfg.grid());
    let n0 = g * g;
    let n_distract = (cfg.distractor_frac * n0 as f64).round() as usize;
    let mut images = Vec::with_capacity(cfg.places * cfg.views);
    let mut labels = Vec::with_capacity(cfg.places * cfg.views);
    let mut distractors = Vec::with_capacity(cfg.places * cfg.views);
    for place in 0..cfg.places {
        let mut lrng = root.split(2 * place as u64);
        let latent: Vec<f64> = (0..side * side * ch).map(|_| lrng.normal()).collect();
        let mut vrng = root.split(2 * place as u64 + 1);
        for _ in 0..cfg.views {
            let gain: Vec<f64> = (0..ch).map(|_| 1.0 + JITTER * cfg.noise * vrng.normal()).collect();
            let offset: Vec<f64> = (0..ch).map(|_| JITTER * cfg.noise * vrng.normal()).collect();
            let mut data: Vec<f64> = latent
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    let c = k % ch;
                    gain[c] * x + offset[c] + cfg.noise * vrng.normal()
                })
                .collect();
            let mut cells = vrng.sample_indices(n0, n_distract);
            cells.sort_unstable();
            for &cell in &cells {
                let (gy, gx) = (cell / g, cell % g);
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        for c in 0..ch {
                            data[(y * side + x) * ch + c] = DISTRACTOR_STD * vrng.normal();
                        }
                    }
                }
            }
            images.push(Image::new(side, ch, data)?);
            labels.push(place);
            distractors.push(cells);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        images,
        labels,
        distractors,
    })
}

/// Held-out evaluation protocol: the last places are never trained on; their first
/// `⌈views/2⌉` views form the reference database and the rest are queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train_places: Vec<usize>,
    pub eval_places: Vec<usize>,
    pub references: Vec<usize>,
    pub queries: Vec<usize>,
}

pub const HELD_OUT_FRACTION: f64 = 0.2;

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn places(&self) -> usize {
        self.config.places
    }

    pub fn views(&self) -> usize {
        self.config.views
    }

    pub fn index(&self, place: usize, view: usize) -> usize {
        place * self.config.views + view
    }

    /// FNV-1a over the bit patterns of every pixel and label.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (img, label) in self.images.iter().zip(&self.labels) {
            h.write_u64(*label as u64);
            for v in &img.data {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn split(&self, held_out_fraction: f64) -> Result<Split> {
        let places = self.places();
        let views = self.views();
        if places < 2 || views < 2 {
            return domain("evaluation needs at least 2 places and 2 views per place");
        }
        let held = ((held_out_fraction * places as f64).round() as usize).clamp(1, places - 1);
        let first_eval = places - held;
        let n_ref = views.div_ceil(2);
        let eval_places: Vec<usize> = (first_eval..places).collect();
        let mut references = Vec::new();
        let mut queries = Vec::new();
        for &pl in &eval_places {
            for v in 0..views {
                if v < n_ref {
                    references.push(self.index(pl, v));
                } else {
                    queries.push(self.index(pl, v));
                }
            }
        }
        Ok(Split {
            train_places: (0..first_eval).collect(),
            eval_places,
            references,
            queries,
        })
    }
}

/// 64-bit FNV-1a, used for reproducibility checksums.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_generator_repeats_views() {
        let d = make_synth_dataset(3, 4, 0.0, 0.0, 1).unwrap();
        for place in 0..3 {
            for v in 1..4 {
                assert_eq!(d.images[d.index(place, v)], d.images[d.index(place, 0)]);
            }
        }
        assert_ne!(d.images[0], d.images[4]);
    }

    #[test]
    fn seeded_and_counted() {
        let a = make_synth_dataset(50, 6, 0.5, 0.25, 7).unwrap();
        let b = make_synth_dataset(50, 6, 0.5, 0.25, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.len(), 300);
        for place in 0..50 {
            assert!(a.labels[place * 6..(place + 1) * 6].iter().all(|&l| l == place));
        }
        let c = make_synth_dataset(50, 6, 0.5, 0.25, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn distractors_are_faint_and_counted() {
        let d = make_synth_dataset(2, 3, 0.3, 0.25, 2).unwrap();
        let p = d.config.patch_size;
        for (img, cells) in d.images.iter().zip(&d.distractors) {
            assert_eq!(cells.len(), 4);
            for &cell in cells {
                let (gy, gx) = (cell / 4, cell % 4);
                let mut ss = 0.0;
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        for c in 0..3 {
                            ss += img.get(y, x, c).powi(2);
                        }
                    }
                }
                assert!((ss / (p * p * 3) as f64).sqrt() < 0.2);
            }
        }
    }

    #[test]
    fn held_out_split() {
        let d = make_synth_dataset(50, 6, 0.1, 0.0, 1).unwrap();
        let s = d.split(HELD_OUT_FRACTION).unwrap();
        assert_eq!(s.train_places, (0..40).collect::<Vec<_>>());
        assert_eq!(s.references.len(), 30);
        assert_eq!(s.queries.len(), 30);
        assert_eq!(s.references[..3], [240, 241, 242]);
        assert_eq!(s.queries[..3], [243, 244, 245]);
        assert!(make_synth_dataset(1, 6, 0.1, 0.0, 1).unwrap().split(0.2).is_err());
    }
}
