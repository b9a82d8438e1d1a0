use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{grid_coords, DataError, SlideBag};
use crate::seed::{derive_indexed, DEFAULT_SEED};

/// Planted-feature MIL generator settings.
///
/// Negative slides hold pure Gaussian noise. Positive slides mark
/// `ceil(pos_tile_fraction · T)` tiles positive and shift every planted
/// feature of those tiles by `signal_shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_slides: usize,
    pub tiles_per_slide: usize,
    pub dim: usize,
    pub planted_features: Vec<usize>,
    pub pos_tile_fraction: f64,
    pub signal_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        let seed = DEFAULT_SEED;
        Self {
            n_slides: 200,
            tiles_per_slide: 100,
            dim: 64,
            planted_features: choose_planted_features(64, 4, seed),
            pos_tile_fraction: 0.1,
            signal_shift: 2.0,
            noise_sigma: 1.0,
            seed,
        }
    }
}

/// `count` distinct feature indices in `[0, dim)`, sorted, drawn from `seed`.
pub fn choose_planted_features(dim: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "planted-features", 0));
    let mut f = sample(&mut rng, dim, count.min(dim)).into_vec();
    f.sort_unstable();
    f
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_slides < 2 {
            return bad("need at least two slides");
        }
        if self.tiles_per_slide == 0 || self.dim == 0 {
            return bad("tiles per slide and dimension must be positive");
        }
        if self.planted_features.is_empty() {
            return bad("no planted features");
        }
        if let Some(f) = self.planted_features.iter().find(|&&f| f >= self.dim) {
            return Err(DataError::InvalidConfig(format!(
                "planted feature {f} outside dimension {}",
                self.dim
            )));
        }
        let mut sorted = self.planted_features.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.planted_features.len() {
            return bad("planted features must be distinct");
        }
        if !(self.pos_tile_fraction > 0.0 && self.pos_tile_fraction <= 1.0) {
            return bad("pos_tile_fraction must lie in (0, 1]");
        }
        if !(self.signal_shift >= 0.0 && self.signal_shift.is_finite()) {
            return bad("signal_shift must be finite and non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn positive_tiles_per_slide(&self) -> usize {
        ((self.pos_tile_fraction * self.tiles_per_slide as f64) - 1e-9)
            .ceil()
            .max(1.0) as usize
    }
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:04}")
}

/// Generates the bags in slide order. Odd-indexed slides are positive
/// (label 1), even-indexed negative, so classes are balanced. Each slide
/// has its own RNG stream derived from the seed and its index.
pub fn generate_synthetic(cfg: &PlantedConfig) -> Result<Vec<SlideBag>, DataError> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let (t, p) = (cfg.tiles_per_slide, cfg.dim);
    let n_pos_tiles = cfg.positive_tiles_per_slide();
    (0..cfg.n_slides)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "slide", i as u64));
            let label = i % 2;
            let mut tiles: Vec<f64> = (0..t * p).map(|_| noise.sample(&mut rng)).collect();
            let mut tile_labels = vec![Some(0); t];
            if label == 1 {
                let mut positives = sample(&mut rng, t, n_pos_tiles).into_vec();
                positives.sort_unstable();
                for j in positives {
                    tile_labels[j] = Some(1);
                    for &f in &cfg.planted_features {
                        tiles[j * p + f] += cfg.signal_shift;
                    }
                }
            }
            SlideBag::new(slide_id(i), p, tiles, grid_coords(t), Some(label), tile_labels)
        })
        .collect()
}
