//! Deterministic synthetic canopy plots.
//!
//! Vegetation pixels follow a logistic LAI response: NIR rises and the
//! red/NIR ratio falls with LAI, flattening past LAI ≈ 2.5 so NDVI saturates.
//! A zero-mean structure field modulates the band ratios with a contrast that
//! grows with LAI, so within-plot spread keeps carrying LAI information after
//! the plot mean has plateaued. Chlorophyll (SPAD) lowers green and red-edge
//! reflectance. A soil mask, a shading field and Gaussian sensor noise
//! complete the scene, with per-plot illumination, soil brightness and planting
//! rows as nuisance factors.

use mcvi_numcore::init::{derive_seed, rng};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::partition::GrowthRecord;
use crate::spectral::BandStack;

pub const FULL_SIZE: usize = 192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub lai_true: f64,
    pub spad_true: f64,
    pub vh_true: f64,
    pub soil_fraction: f64,
    /// Lattice spacing of the structure noise, in pixels.
    pub texture_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub acquisition: Acquisition,
}

/// Plot-level nuisance factors unrelated to the growth traits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    /// Per-band illumination and sensor gain (R, G, B, RE, NIR).
    pub band_gain: [f64; 5],
    /// Soil reflectance multiplier; wet soil is darker.
    pub soil_brightness: f64,
    /// Planting-row period in pixels; rows pull soil gaps into stripes.
    pub row_period: f64,
    /// Row visibility in [0, 1].
    pub row_strength: f64,
    pub row_phase: f64,
    pub rows_vertical: bool,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self {
            band_gain: [1.0; 5],
            soil_brightness: 1.0,
            row_period: 8.0,
            row_strength: 0.0,
            row_phase: 0.0,
            rows_vertical: false,
        }
    }
}

impl Acquisition {
    fn validate(&self) -> Result<()> {
        let ok = self.band_gain.iter().all(|g| *g > 0.0 && g.is_finite())
            && self.soil_brightness > 0.0
            && self.row_period >= 2.0
            && (0.0..=1.0).contains(&self.row_strength);
        if ok {
            Ok(())
        } else {
            Err(invalid("acquisition gains must be positive, row period at least 2 px, row strength in [0, 1]"))
        }
    }

    /// Row profile in [0, 1], lowest between rows.
    fn row_profile(&self, x: usize, y: usize) -> f64 {
        let coord = if self.rows_vertical { x } else { y } as f64 + 0.5;
        0.5 + 0.5 * (std::f64::consts::TAU * (coord / self.row_period + self.row_phase)).cos()
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(invalid(what.to_string())) };
        check((0.0..=7.0).contains(&self.lai_true), "lai_true outside [0, 7]")?;
        check((30.0..=75.0).contains(&self.spad_true), "spad_true outside [30, 75]")?;
        check((20.0..=90.0).contains(&self.vh_true), "vh_true outside [20, 90]")?;
        check((0.0..=1.0).contains(&self.soil_fraction), "soil_fraction outside [0, 1]")?;
        check(self.texture_scale >= 1.0, "texture_scale below 1 px")?;
        check(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(), "negative noise_sigma")?;
        self.acquisition.validate()
    }
}

/// Fraction of the saturating response reached at a given LAI.
pub fn lai_response(lai: f64) -> f64 {
    1.0 / (1.0 + (-1.8 * (lai - 1.2)).exp())
}

/// Structure contrast. Grows with LAI, shrinks as canopy clumps get coarser,
/// and stays below 1 so band ratios stay positive.
pub fn structure_contrast(lai: f64, texture_scale: f64) -> f64 {
    let roughness = 1.6 / (1.0 + texture_scale / 8.0);
    ((0.1 + 0.1 * lai) * roughness).min(0.9)
}

fn hash_unit(seed: u64, x: i64, y: i64) -> f64 {
    let h = derive_seed(derive_seed(seed, x as u64), y as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise in [0, 1] with cells `scale` pixels wide.
pub fn value_noise(size: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(derive_seed(seed, 0xA11CE));
    let (ox, oy): (f64, f64) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let fx = (px as f64 + 0.5) / scale + ox;
            let fy = (py as f64 + 0.5) / scale + oy;
            let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
            let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
            let v00 = hash_unit(seed, ix, iy);
            let v10 = hash_unit(seed, ix + 1, iy);
            let v01 = hash_unit(seed, ix, iy + 1);
            let v11 = hash_unit(seed, ix + 1, iy + 1);
            let top = v00 + (v10 - v00) * tx;
            let bottom = v01 + (v11 - v01) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

struct Spectrum {
    r: f64,
    g: f64,
    b: f64,
    re: f64,
    nir: f64,
}

const SOIL: Spectrum = Spectrum {
    r: 0.20,
    g: 0.16,
    b: 0.12,
    re: 0.24,
    nir: 0.27,
};

fn vegetation(lai: f64, spad: f64) -> Spectrum {
    let g = lai_response(lai);
    let chl = ((spad - 30.0) / 45.0).clamp(0.0, 1.0);
    Spectrum {
        r: 0.09 - 0.06 * g,
        g: 0.075 + 0.055 * (1.0 - chl),
        b: 0.05 - 0.015 * g,
        re: 0.16 + 0.10 * g - 0.06 * chl,
        nir: 0.14 + 0.36 * g,
    }
}

/// Soil mask with exactly `round(fraction * n)` soil pixels, chosen by rank of
/// a noise field so gaps are spatially coherent.
fn soil_mask(field: &[f64], fraction: f64) -> Vec<bool> {
    let n = field.len();
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

pub fn generate_plot(params: &SceneParams, size: usize, plot_id: &str, stage: &str, date: &str) -> Result<(BandStack, GrowthRecord)> {
    params.validate()?;
    if size < 2 {
        return Err(invalid("plot size below 2 px"));
    }
    let n = size * size;
    let structure = value_noise(size, params.texture_scale, derive_seed(params.seed, 1));
    let shading = value_noise(size, params.texture_scale * 2.0, derive_seed(params.seed, 2));
    let acq = &params.acquisition;
    let row_weight = 0.6 * acq.row_strength;
    let gaps: Vec<f64> = value_noise(size, params.texture_scale * 1.5, derive_seed(params.seed, 3))
        .iter()
        .enumerate()
        .map(|(i, v)| (1.0 - row_weight) * v + row_weight * acq.row_profile(i % size, i / size))
        .collect();
    let soil = soil_mask(&gaps, params.soil_fraction);

    let veg_count = soil.iter().filter(|s| !**s).count().max(1);
    let veg_mean = structure
        .iter()
        .zip(&soil)
        .filter(|(_, s)| !**s)
        .map(|(v, _)| v)
        .sum::<f64>()
        / veg_count as f64;

    let spec = vegetation(params.lai_true, params.spad_true);
    let contrast = structure_contrast(params.lai_true, params.texture_scale);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut r = rng(derive_seed(params.seed, 4));
    let mut bands: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let shade = 0.85 + 0.3 * shading[i];
        let px = if soil[i] {
            [SOIL.r, SOIL.g, SOIL.b, SOIL.re, SOIL.nir].map(|v| v * shade * acq.soil_brightness)
        } else {
            // centered on vegetation pixels: ratio modulation has zero plot mean
            let s = (2.0 * (structure[i] - veg_mean)).clamp(-1.0, 1.0);
            let a = contrast * s;
            [
                spec.r * shade * (1.0 - a),
                spec.g * shade * (1.0 - 0.5 * a),
                spec.b * shade * (1.0 - a),
                spec.re * shade * (1.0 - 0.3 * a),
                spec.nir * shade,
            ]
        };
        for ((band, v), gain) in bands.iter_mut().zip(px).zip(acq.band_gain) {
            let v = v * gain;
            let noisy = if params.noise_sigma > 0.0 { v + noise.sample(&mut r) } else { v };
            band.push(noisy.clamp(1e-3, 1.5));
        }
    }
    let stack = BandStack::new(plot_id, date, size, size, bands)?;
    let record = GrowthRecord {
        plot_id: plot_id.to_string(),
        date: date.to_string(),
        stage: stage.to_string(),
        lai: params.lai_true,
        spad: params.spad_true,
        vh: params.vh_true,
    };
    Ok((stack, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub date: String,
    pub lai: (f64, f64),
    pub spad: (f64, f64),
    pub vh: (f64, f64),
}

/// Five growth stages with rising canopy height and an LAI peak at heading.
pub fn default_stages() -> Vec<StageSpec> {
    let s = |name: &str, date: &str, lai, spad, vh| StageSpec {
        name: name.into(),
        date: date.into(),
        lai,
        spad,
        vh,
    };
    vec![
        s("greening", "2024-03-08", (0.5, 2.0), (40.0, 50.0), (20.0, 34.0)),
        s("jointing", "2024-03-28", (1.5, 3.5), (44.0, 55.0), (35.0, 49.0)),
        s("booting", "2024-04-15", (3.0, 5.0), (47.0, 58.0), (50.0, 64.0)),
        s("heading", "2024-04-28", (4.0, 6.5), (50.0, 62.0), (65.0, 79.0)),
        s("filling", "2024-05-15", (3.5, 5.5), (42.0, 58.0), (80.0, 90.0)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Structure lattice spacing range as a fraction of the plot size.
    pub texture_scale_frac: (f64, f64),
    /// Label measurement noise (standard deviations).
    pub lai_label_noise: f64,
    pub spad_label_noise: f64,
    pub stages: Vec<StageSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_labeled: 330,
            n_unlabeled: 2700,
            size: FULL_SIZE,
            seed: 0,
            noise_sigma: 0.003,
            texture_scale_frac: (0.1, 0.2),
            lai_label_noise: 0.15,
            spad_label_noise: 1.0,
            stages: default_stages(),
        }
    }
}

impl DatasetConfig {
    /// Desk-scale corpus: 16 px plots.
    pub fn desk_scale() -> Self {
        Self {
            n_labeled: 40,
            n_unlabeled: 200,
            size: 16,
            ..Self::default()
        }
    }
}

/// One generated plot: bands, measured labels (None for unlabeled plots) and stage.
#[derive(Clone, Debug)]
pub struct SyntheticPlot {
    pub bands: BandStack,
    pub stage: String,
    pub truth: GrowthRecord,
    pub label: Option<GrowthRecord>,
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Scene parameters for plot `index` (labeled plots first, then unlabeled).
pub fn scene_for(cfg: &DatasetConfig, index: usize) -> (SceneParams, &StageSpec) {
    let stage = &cfg.stages[index % cfg.stages.len()];
    let mut r = rng(derive_seed(cfg.seed, index as u64));
    let lai = uniform(&mut r, stage.lai);
    let soil_jitter = r.gen_range(0.8..1.2);
    let scale_frac = uniform(&mut r, cfg.texture_scale_frac);
    let mut params = SceneParams {
        lai_true: lai,
        spad_true: uniform(&mut r, stage.spad),
        vh_true: uniform(&mut r, stage.vh),
        soil_fraction: (0.85 * (-0.9 * lai).exp() * soil_jitter).clamp(0.0, 1.0),
        texture_scale: (scale_frac * cfg.size as f64).max(1.0),
        noise_sigma: cfg.noise_sigma,
        seed: r.gen(),
        acquisition: Acquisition::default(),
    };
    let common = r.gen_range(0.9..1.1);
    params.acquisition = Acquisition {
        band_gain: std::array::from_fn(|_| common * r.gen_range(0.97..1.03)),
        soil_brightness: r.gen_range(0.75..1.25),
        row_period: (r.gen_range(0.12..0.3) * cfg.size as f64).max(2.0),
        row_strength: r.gen_range(0.0..1.0),
        row_phase: r.gen_range(0.0..1.0),
        rows_vertical: r.gen(),
    };
    (params, stage)
}

pub fn plot_id(index: usize, labeled: bool) -> String {
    if labeled {
        format!("L{index:04}")
    } else {
        format!("U{index:04}")
    }
}

/// Generate plot `index` of the corpus described by `cfg`.
pub fn generate_indexed(cfg: &DatasetConfig, index: usize) -> Result<SyntheticPlot> {
    let labeled = index < cfg.n_labeled;
    let id = if labeled {
        plot_id(index, true)
    } else {
        plot_id(index - cfg.n_labeled, false)
    };
    let (params, stage) = scene_for(cfg, index);
    let (bands, truth) = generate_plot(&params, cfg.size, &id, &stage.name, &stage.date)?;
    let label = labeled.then(|| {
        let mut r = rng(derive_seed(cfg.seed ^ 0x1ABE1, index as u64));
        let lai_noise = Normal::new(0.0, cfg.lai_label_noise.max(f64::MIN_POSITIVE)).expect("sigma");
        let spad_noise = Normal::new(0.0, cfg.spad_label_noise.max(f64::MIN_POSITIVE)).expect("sigma");
        let mut rec = truth.clone();
        if cfg.lai_label_noise > 0.0 {
            rec.lai = (rec.lai + lai_noise.sample(&mut r)).max(0.0);
        }
        if cfg.spad_label_noise > 0.0 {
            rec.spad = (rec.spad + spad_noise.sample(&mut r)).max(0.0);
        }
        rec
    });
    Ok(SyntheticPlot {
        bands,
        stage: stage.name.clone(),
        truth,
        label,
    })
}

/// All plots of a corpus, generated in parallel.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SyntheticPlot>> {
    use rayon::prelude::*;
    if cfg.stages.is_empty() {
        return Err(invalid("dataset needs at least one stage"));
    }
    (0..cfg.n_labeled + cfg.n_unlabeled)
        .into_par_iter()
        .map(|i| generate_indexed(cfg, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{compute_vi, VegIndex};

    fn params(lai: f64) -> SceneParams {
        SceneParams {
            lai_true: lai,
            spad_true: 50.0,
            vh_true: 50.0,
            soil_fraction: 0.0,
            texture_scale: 12.0,
            noise_sigma: 0.0,
            seed: 5,
            acquisition: Acquisition::default(),
        }
    }

    fn mean_ndvi(p: &SceneParams, size: usize) -> f64 {
        let (bands, _) = generate_plot(p, size, "p", "s", "d").unwrap();
        compute_vi(&bands, VegIndex::NDVI).mean()
    }

    #[test]
    fn bare_soil_has_low_ndvi() {
        let p = SceneParams {
            lai_true: 0.0,
            soil_fraction: 1.0,
            noise_sigma: 0.003,
            ..params(0.0)
        };
        assert!(mean_ndvi(&p, 64) < 0.2);
    }

    #[test]
    fn dense_canopy_saturates() {
        assert!(mean_ndvi(&params(6.0), 64) > 0.8);
    }

    #[test]
    fn same_params_same_rasters() {
        let p = SceneParams { noise_sigma: 0.01, ..params(3.0) };
        let a = generate_plot(&p, 32, "p", "s", "d").unwrap();
        let b = generate_plot(&p, 32, "p", "s", "d").unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        assert!(generate_plot(&params(7.5), 8, "p", "s", "d").is_err());
        let p = SceneParams { spad_true: 20.0, ..params(1.0) };
        assert!(generate_plot(&p, 8, "p", "s", "d").is_err());
    }

    #[test]
    fn mean_ndvi_is_monotone_in_lai() {
        for seed in [1, 2, 3] {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=28 {
                let lai = step as f64 * 0.25;
                let p = SceneParams { seed, soil_fraction: 0.1, ..params(lai) };
                let m = mean_ndvi(&p, 48);
                assert!(m >= prev - 1e-12, "seed {seed} lai {lai}: {m} < {prev}");
                prev = m;
            }
        }
    }

    #[test]
    fn value_noise_is_bounded() {
        let v = value_noise(20, 3.0, 9);
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[cfg(test)]
mod saturation {
    use super::*;
    use crate::spectral::{compute_vi, compute_vi_stack, saturation_report, texture_features, VegIndex, DEFAULT_BINS};

    #[test]
    fn saturated_mean_is_stable_while_std_tracks_texture() {
        for lai in [4.0, 5.0, 6.0] {
            let mut means = Vec::new();
            let mut stds = Vec::new();
            for scale in [3.0, 6.0, 12.0, 24.0, 48.0] {
                let p = SceneParams {
                    lai_true: lai,
                    spad_true: 50.0,
                    vh_true: 60.0,
                    soil_fraction: 0.0,
                    texture_scale: scale,
                    noise_sigma: 0.003,
                    seed: 17,
                    acquisition: Acquisition::default(),
                };
                let (bands, _) = generate_plot(&p, 96, "p", "s", "d").unwrap();
                let t = texture_features(&compute_vi(&bands, VegIndex::NDVI).data, DEFAULT_BINS).unwrap();
                means.push(t.mean);
                stds.push(t.std);
            }
            let spread = |v: &[f64]| {
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo) / lo
            };
            eprintln!("lai {lai} means {means:?} stds {stds:?}");
            assert!(spread(&means) < 0.05, "mean spread {}", spread(&means));
            assert!(spread(&stds) > 0.25, "std spread {}", spread(&stds));
        }
    }

    #[test]
    fn saturated_cohort_separates_by_std() {
        let mut stacks = Vec::new();
        for i in 0..40u64 {
            let mut r = rng(derive_seed(99, i));
            let p = SceneParams {
                lai_true: r.gen_range(4.0..6.0),
                spad_true: r.gen_range(45.0..60.0),
                vh_true: 70.0,
                soil_fraction: 0.85 * (-0.9 * 4.0f64).exp() * r.gen_range(0.0..1.2),
                texture_scale: r.gen_range(2.0..40.0),
                noise_sigma: 0.003,
                seed: i,
                acquisition: Acquisition::default(),
            };
            let (bands, _) = generate_plot(&p, 64, &format!("p{i}"), "s", "d").unwrap();
            stacks.push(compute_vi_stack(&bands));
        }
        let rep = saturation_report(&stacks, VegIndex::NDVI, 0.8).unwrap();
        eprintln!("{rep:?}");
        assert!(rep.cv_of_stds / rep.cv_of_means > 5.0);
    }
}
