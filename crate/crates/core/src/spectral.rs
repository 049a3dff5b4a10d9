//! Vegetation indices, per-plot VI means and histogram/moment texture features.

use std::fmt;
use std::str::FromStr;

use mcvi_numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Added (with the denominator's sign) to every index denominator.
pub const EPS_DIV: f64 = 1e-8;
/// Clip range for indices without an analytic bound.
pub const UNBOUNDED_CLIP: f64 = 10.0;
pub const DEFAULT_BINS: usize = 64;

/// A single-band H×W float raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    R,
    G,
    B,
    RE,
    NIR,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::R, Band::G, Band::B, Band::RE, Band::NIR];

    pub fn name(self) -> &'static str {
        match self {
            Band::R => "R",
            Band::G => "G",
            Band::B => "B",
            Band::RE => "RE",
            Band::NIR => "NIR",
        }
    }
}

/// Five co-registered reflectance bands of one plot.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStack {
    pub plot_id: String,
    pub date: String,
    pub height: usize,
    pub width: usize,
    /// Indexed in [`Band::ALL`] order.
    bands: [Vec<f64>; 5],
}

impl BandStack {
    pub fn new(
        plot_id: impl Into<String>,
        date: impl Into<String>,
        height: usize,
        width: usize,
        bands: [Vec<f64>; 5],
    ) -> Result<Self> {
        for (b, data) in Band::ALL.iter().zip(&bands) {
            if data.len() != height * width {
                return Err(invalid(format!(
                    "band {} has {} values, expected {height}x{width}",
                    b.name(),
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("band {} has non-finite values", b.name())));
            }
        }
        Ok(Self {
            plot_id: plot_id.into(),
            date: date.into(),
            height,
            width,
            bands,
        })
    }

    pub fn band(&self, b: Band) -> &[f64] {
        &self.bands[b as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VegIndex {
    CIgreen,
    DVI,
    EVI,
    GNDVI,
    MCARI,
    NDRE,
    NDVI,
    OSAVI,
    RVI,
    SAVI,
    VARI,
}

impl VegIndex {
    /// Channel order of a [`VIStack`].
    pub const ALL: [VegIndex; 11] = [
        VegIndex::CIgreen,
        VegIndex::DVI,
        VegIndex::EVI,
        VegIndex::GNDVI,
        VegIndex::MCARI,
        VegIndex::NDRE,
        VegIndex::NDVI,
        VegIndex::OSAVI,
        VegIndex::RVI,
        VegIndex::SAVI,
        VegIndex::VARI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VegIndex::CIgreen => "CIgreen",
            VegIndex::DVI => "DVI",
            VegIndex::EVI => "EVI",
            VegIndex::GNDVI => "GNDVI",
            VegIndex::MCARI => "MCARI",
            VegIndex::NDRE => "NDRE",
            VegIndex::NDVI => "NDVI",
            VegIndex::OSAVI => "OSAVI",
            VegIndex::RVI => "RVI",
            VegIndex::SAVI => "SAVI",
            VegIndex::VARI => "VARI",
        }
    }

    pub fn channel(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }

    /// Output clamp range.
    pub fn range(self) -> (f64, f64) {
        match self {
            VegIndex::NDVI | VegIndex::GNDVI | VegIndex::NDRE | VegIndex::VARI => (-1.0, 1.0),
            VegIndex::DVI | VegIndex::SAVI => (-1.5, 1.5),
            VegIndex::OSAVI => (-1.16, 1.16),
            VegIndex::CIgreen | VegIndex::EVI | VegIndex::MCARI | VegIndex::RVI => {
                (-UNBOUNDED_CLIP, UNBOUNDED_CLIP)
            }
        }
    }

    /// Per-pixel formula on reflectances.
    pub fn eval(self, r: f64, g: f64, b: f64, re: f64, nir: f64) -> f64 {
        let v = match self {
            VegIndex::CIgreen => nir / guard(g) - 1.0,
            VegIndex::DVI => nir - r,
            VegIndex::EVI => 2.5 * (nir - r) / guard(nir + 6.0 * r - 7.5 * b + 1.0),
            VegIndex::GNDVI => (nir - g) / guard(nir + g),
            VegIndex::MCARI => re * (re - r - 0.2 * (re - g)) / guard(r),
            VegIndex::NDRE => (nir - re) / guard(nir + re),
            VegIndex::NDVI => (nir - r) / guard(nir + r),
            VegIndex::OSAVI => 1.16 * (nir - r) / guard(nir + r + 0.16),
            VegIndex::RVI => nir / guard(r),
            VegIndex::SAVI => 1.5 * (nir - r) / guard(nir + r + 0.5),
            VegIndex::VARI => (g - r) / guard(g + r - b),
        };
        let (lo, hi) = self.range();
        v.clamp(lo, hi)
    }
}

/// Push the denominator `EPS_DIV` further from zero, keeping its sign.
fn guard(d: f64) -> f64 {
    if d >= 0.0 {
        d + EPS_DIV
    } else {
        d - EPS_DIV
    }
}

impl fmt::Display for VegIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VegIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VegIndex::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownIndex(s.to_string()))
    }
}

pub fn compute_vi(bands: &BandStack, index: VegIndex) -> Raster {
    let (r, g, b, re, nir) = (
        bands.band(Band::R),
        bands.band(Band::G),
        bands.band(Band::B),
        bands.band(Band::RE),
        bands.band(Band::NIR),
    );
    let data = (0..r.len())
        .map(|i| index.eval(r[i], g[i], b[i], re[i], nir[i]))
        .collect();
    Raster {
        height: bands.height,
        width: bands.width,
        data,
    }
}

/// Name-keyed variant of [`compute_vi`].
pub fn compute_vi_named(bands: &BandStack, name: &str) -> Result<Raster> {
    Ok(compute_vi(bands, name.parse()?))
}

/// The 11 index rasters of one plot in [`VegIndex::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct VIStack {
    pub plot_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Vec<f64>>,
}

impl VIStack {
    pub fn new(plot_id: impl Into<String>, height: usize, width: usize, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.len() != VegIndex::ALL.len() {
            return Err(invalid(format!("VI stack needs 11 channels, got {}", channels.len())));
        }
        if channels.iter().any(|c| c.len() != height * width) {
            return Err(invalid("VI channel size mismatch"));
        }
        Ok(Self {
            plot_id: plot_id.into(),
            height,
            width,
            channels,
        })
    }

    pub fn channel(&self, index: VegIndex) -> &[f64] {
        &self.channels[index.channel()]
    }

    pub fn raster(&self, index: VegIndex) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            data: self.channel(index).to_vec(),
        }
    }

    /// `[1, 11, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.channels.concat();
        Tensor::new(&[1, self.channels.len(), self.height, self.width], data).expect("sized")
    }
}

pub fn compute_vi_stack(bands: &BandStack) -> VIStack {
    let channels = VegIndex::ALL
        .iter()
        .map(|&vi| compute_vi(bands, vi).data)
        .collect();
    VIStack {
        plot_id: bands.plot_id.clone(),
        height: bands.height,
        width: bands.width,
        channels,
    }
}

pub fn plot_mean_vi(stack: &VIStack) -> [f64; 11] {
    let mut out = [0.0; 11];
    for (o, c) in out.iter_mut().zip(&stack.channels) {
        *o = c.iter().sum::<f64>() / c.len() as f64;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureFeatures {
    pub mean: f64,
    pub std: f64,
    pub smoothness: f64,
    pub third_moment: f64,
    pub uniformity: f64,
    pub entropy: f64,
}

/// Moments over all pixels and uniformity/entropy of a `bins`-bin histogram
/// spanning the raster's own [min, max].
pub fn texture_features(values: &[f64], bins: usize) -> Result<TextureFeatures> {
    if values.is_empty() {
        return Err(invalid("texture of an empty raster"));
    }
    if bins < 2 {
        return Err(invalid("texture histogram needs at least 2 bins"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("texture of a non-finite raster"));
    }
    let n = values.len() as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // summation rounding would otherwise leave a tiny spread on constant rasters
    let mean = if lo == hi { lo } else { values.iter().sum::<f64>() / n };
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let third_moment = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;

    let mut counts = vec![0usize; bins];
    let span = hi - lo;
    for &v in values {
        let k = if span > 0.0 {
            (((v - lo) / span) * bins as f64) as usize
        } else {
            0
        };
        counts[k.min(bins - 1)] += 1;
    }
    let (mut uniformity, mut entropy) = (0.0, 0.0);
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            uniformity += p * p;
            entropy -= p * p.ln();
        }
    }
    Ok(TextureFeatures {
        mean,
        std: var.sqrt(),
        smoothness: 1.0 - 1.0 / (1.0 + var),
        third_moment,
        uniformity,
        entropy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub selected: usize,
    pub fraction_above: f64,
    /// Percent.
    pub cv_of_means: f64,
    /// Percent.
    pub cv_of_stds: f64,
}

/// Population coefficient of variation in percent; 0 for a zero-mean sample.
fn cv_percent(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if mean == 0.0 {
        0.0
    } else {
        100.0 * std / mean.abs()
    }
}

/// Among plots whose `index` mean exceeds `threshold`, compare the spread of
/// plot means against the spread of plot standard deviations.
pub fn saturation_report(stacks: &[VIStack], index: VegIndex, threshold: f64) -> Result<SaturationReport> {
    if stacks.len() < 2 {
        return Err(invalid("saturation report needs at least 2 plots"));
    }
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for s in stacks {
        let ch = s.channel(index);
        let n = ch.len() as f64;
        let m = ch.iter().sum::<f64>() / n;
        if m > threshold {
            means.push(m);
            stds.push((ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt());
        }
    }
    if means.len() < 2 {
        return Err(Error::Degenerate(format!(
            "only {} plot(s) with {index} mean above {threshold}",
            means.len()
        )));
    }
    Ok(SaturationReport {
        selected: means.len(),
        fraction_above: means.len() as f64 / stacks.len() as f64,
        cv_of_means: cv_percent(&means),
        cv_of_stds: cv_percent(&stds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_stack(r: f64, g: f64, b: f64, re: f64, nir: f64, h: usize, w: usize) -> BandStack {
        let n = h * w;
        BandStack::new("p", "d", h, w, [vec![r; n], vec![g; n], vec![b; n], vec![re; n], vec![nir; n]]).unwrap()
    }

    #[test]
    fn ndvi_of_equal_bands_is_zero() {
        let s = uniform_stack(0.3, 0.2, 0.1, 0.25, 0.3, 3, 4);
        assert!(compute_vi(&s, VegIndex::NDVI).data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_indices() {
        let s = uniform_stack(0.1, 0.3, 0.05, 0.2, 0.5, 1, 1);
        assert!((compute_vi(&s, VegIndex::NDVI).data[0] - 0.4 / 0.6).abs() < 1e-7);
        let s = uniform_stack(0.2, 0.3, 0.05, 0.2, 0.6, 1, 1);
        assert!((compute_vi(&s, VegIndex::RVI).data[0] - 3.0).abs() < 1e-6);
        assert!((compute_vi(&s, VegIndex::CIgreen).data[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_denominators_stay_finite() {
        let s = uniform_stack(0.0, 0.0, 0.0, 0.0, 0.0, 2, 2);
        for vi in VegIndex::ALL {
            assert!(compute_vi(&s, vi).data.iter().all(|v| v.is_finite()), "{vi}");
        }
        // VARI denominator g + r - b == 0 exactly
        let s = uniform_stack(0.1, 0.2, 0.3, 0.2, 0.4, 1, 1);
        let v = compute_vi(&s, VegIndex::VARI).data[0];
        assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
    }

    #[test]
    fn unknown_index_name_is_an_error() {
        let s = uniform_stack(0.1, 0.1, 0.1, 0.1, 0.1, 1, 1);
        assert!(matches!(compute_vi_named(&s, "NDXI"), Err(Error::UnknownIndex(_))));
        assert_eq!(compute_vi_named(&s, "ndvi").unwrap(), compute_vi(&s, VegIndex::NDVI));
    }

    #[test]
    fn stack_has_eleven_channels_matching_single_index_rasters() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        let (h, w) = (5, 6);
        let bands: [Vec<f64>; 5] = std::array::from_fn(|_| (0..h * w).map(|_| next()).collect());
        let s = BandStack::new("p", "d", h, w, bands).unwrap();
        let stack = compute_vi_stack(&s);
        assert_eq!(stack.channels.len(), 11);
        for vi in VegIndex::ALL {
            assert_eq!(stack.channel(vi), compute_vi(&s, vi).data.as_slice());
            assert_eq!(stack.channel(vi).len(), h * w);
        }
        assert_eq!(stack, compute_vi_stack(&s));
    }

    #[test]
    fn plot_means() {
        let n = 8;
        let mut channels = vec![vec![0.25; n]; 11];
        channels[VegIndex::NDVI.channel()] = (0..n).map(|i| if i < n / 2 { 0.0 } else { 1.0 }).collect();
        let stack = VIStack::new("p", 2, 4, channels).unwrap();
        let m = plot_mean_vi(&stack);
        assert_eq!(m[VegIndex::NDVI.channel()], 0.5);
        assert_eq!(m[0], 0.25);
    }

    #[test]
    fn constant_raster_texture() {
        let t = texture_features(&[0.7; 20], DEFAULT_BINS).unwrap();
        assert_eq!(t.std, 0.0);
        assert_eq!(t.smoothness, 0.0);
        assert_eq!(t.third_moment, 0.0);
        assert_eq!(t.uniformity, 1.0);
        assert_eq!(t.entropy, 0.0);
    }

    #[test]
    fn two_value_raster_texture() {
        let v: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let t = texture_features(&v, 2).unwrap();
        assert!((t.uniformity - 0.5).abs() < 1e-15);
        assert!((t.entropy - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn texture_std_matches_brute_force() {
        let v: Vec<f64> = (0..64).map(|i| ((i * 29 % 17) as f64).sin()).collect();
        let mut sum = 0.0;
        for x in &v {
            sum += x;
        }
        let mu = sum / 64.0;
        let mut acc = 0.0;
        for x in &v {
            acc += (x - mu) * (x - mu);
        }
        let t = texture_features(&v, 64).unwrap();
        assert!((t.std - (acc / 64.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn texture_errors() {
        assert!(texture_features(&[], 4).is_err());
        assert!(texture_features(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn identical_plots_have_zero_cv() {
        let stack = VIStack::new("p", 2, 2, vec![vec![0.9, 0.85, 0.95, 0.9]; 11]).unwrap();
        let r = saturation_report(&[stack.clone(), stack.clone(), stack], VegIndex::NDVI, 0.8).unwrap();
        assert_eq!(r.selected, 3);
        assert_eq!(r.fraction_above, 1.0);
        assert_eq!(r.cv_of_means, 0.0);
        assert_eq!(r.cv_of_stds, 0.0);
    }

    #[test]
    fn saturation_report_needs_two_selected() {
        let hi = VIStack::new("a", 1, 2, vec![vec![0.9, 0.9]; 11]).unwrap();
        let lo = VIStack::new("b", 1, 2, vec![vec![0.1, 0.1]; 11]).unwrap();
        assert!(saturation_report(&[hi, lo], VegIndex::NDVI, 0.8).is_err());
    }

    proptest! {
        #[test]
        fn normalized_differences_bounded(vals in proptest::collection::vec(0.0f64..1.5, 5)) {
            for vi in [VegIndex::NDVI, VegIndex::GNDVI, VegIndex::NDRE] {
                let v = vi.eval(vals[0], vals[1], vals[2], vals[3], vals[4]);
                prop_assert!((-1.0..=1.0).contains(&v));
            }
            let dvi = VegIndex::DVI.eval(vals[0], vals[1], vals[2], vals[3], vals[4]);
            prop_assert!((-1.5..=1.5).contains(&dvi));
        }

        #[test]
        fn indices_are_pixelwise(vals in proptest::collection::vec(0.0f64..1.5, 30), rot in 0usize..6) {
            let bands: [Vec<f64>; 5] = std::array::from_fn(|b| vals[b * 6..(b + 1) * 6].to_vec());
            let mut rotated = bands.clone();
            for r in rotated.iter_mut() {
                r.rotate_left(rot);
            }
            let a = BandStack::new("p", "d", 2, 3, bands).unwrap();
            let b = BandStack::new("p", "d", 2, 3, rotated).unwrap();
            for vi in VegIndex::ALL {
                let mut x = compute_vi(&a, vi).data;
                x.rotate_left(rot);
                prop_assert_eq!(x, compute_vi(&b, vi).data);
            }
        }

        #[test]
        fn texture_is_permutation_invariant(mut v in proptest::collection::vec(-3.0f64..3.0, 2..50), k in 2usize..20) {
            let a = texture_features(&v, k).unwrap();
            v.reverse();
            let b = texture_features(&v, k).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            prop_assert!((a.std - b.std).abs() < 1e-12);
            prop_assert!((a.third_moment - b.third_moment).abs() < 1e-12);
            prop_assert_eq!(a.uniformity, b.uniformity);
            prop_assert!((a.entropy - b.entropy).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&a.smoothness));
            prop_assert!(a.uniformity > 0.0 && a.uniformity <= 1.0);
            prop_assert!(a.entropy >= -1e-15 && a.entropy <= (k as f64).ln() + 1e-12);
        }

        #[test]
        fn smoothness_increases_with_spread(scale in 0.1f64..5.0) {
            let base: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
            let wide: Vec<f64> = base.iter().map(|v| v * (1.0 + scale)).collect();
            let a = texture_features(&base, 8).unwrap();
            let b = texture_features(&wide, 8).unwrap();
            prop_assert!(b.smoothness > a.smoothness);
        }
    }

    #[test]
    fn uniform_histogram_has_max_entropy() {
        let v: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let t = texture_features(&v, 8).unwrap();
        assert!((t.entropy - 8f64.ln()).abs() < 1e-12);
        assert!((t.uniformity - 1.0 / 8.0).abs() < 1e-15);
    }
}
