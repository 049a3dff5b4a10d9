//! Grad-CAM heatmaps on the channel-expansion layer, per-index channel
//! weights, and PPM rendering.

use std::fs;
use std::io::Write;
use std::path::Path;

use mcvi_numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{ForwardMode, Model};
use crate::spectral::{Band, BandStack, Raster, VIStack, VegIndex};

/// A model that exposes a scalar output and the activation map to attribute.
pub trait CamModel {
    /// Returns `(prediction, activations)` for input `x: [1, C, H, W]`;
    /// activations are `[1, K, h, w]`.
    fn cam_forward(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)>;
}

impl CamModel for Model {
    fn cam_forward(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let mode = ForwardMode {
            retain_taps: true,
            ..ForwardMode::eval()
        };
        let (y, enc) = self.forward(g, x, mode)?;
        let act = enc.taps.ce_pre.expect("CE tap is always recorded");
        Ok((y, act))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Input-resolution heatmap in [0, 1].
    pub heatmap: Raster,
    /// Set when the gradient field or the weighted map carries no signal;
    /// the heatmap is then uniform.
    pub degenerate: bool,
}

/// Nearest-neighbour resize of a row-major `h × w` map.
pub fn upsample_nearest(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(src[sy * w + x * w / out_w]);
        }
    }
    out
}

pub fn gradcam<M: CamModel>(model: &mut M, x: &Tensor) -> Result<GradCam> {
    let (n, _, height, width) = x.dims4()?;
    if n != 1 {
        return Err(invalid("Grad-CAM takes a single sample"));
    }
    let mut g = Graph::new();
    let xv = g.input_with_grad(x.clone())?;
    let (pred, act) = model.cam_forward(&mut g, xv)?;
    g.retain_grad(act);
    let target = g.sum(pred)?;
    let grads = g.backward(target)?;
    let (_, k, h, w) = g.value(act).dims4()?;
    let uniform = || GradCam {
        heatmap: Raster::filled(height, width, 1.0),
        degenerate: true,
    };
    let Some(da) = grads.get(act) else {
        return Ok(uniform());
    };
    if da.data().iter().all(|&v| v == 0.0) {
        return Ok(uniform());
    }
    let a = g.value(act).data();
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for c in 0..k {
        let alpha = da.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (m, v) in cam.iter_mut().zip(&a[c * plane..(c + 1) * plane]) {
            *m += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = upsample_nearest(&cam, h, w, height, width);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo > 1e-12 * hi.abs().max(1e-300)) || hi <= 0.0 {
        return Ok(uniform());
    }
    let data = up.iter().map(|v| (v - lo) / (hi - lo)).collect();
    Ok(GradCam {
        heatmap: Raster::new(height, width, data)?,
        degenerate: false,
    })
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Heatmap-weighted mass of each min-max normalized index channel, normalized to sum to 1.
pub fn channel_weights(stack: &VIStack, heatmap: &Raster) -> Result<[f64; 11]> {
    if heatmap.height != stack.height || heatmap.width != stack.width {
        return Err(invalid(format!(
            "heatmap {}x{} does not match stack {}x{}",
            heatmap.height, heatmap.width, stack.height, stack.width
        )));
    }
    let mut scores = [0.0; 11];
    for (score, index) in scores.iter_mut().zip(VegIndex::ALL) {
        *score = min_max(stack.channel(index))
            .iter()
            .zip(&heatmap.data)
            .map(|(c, h)| c * h)
            .sum();
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("channel scores sum to zero".into()));
    }
    scores.iter_mut().for_each(|s| *s /= total);
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub plot_id: String,
    pub degenerate: bool,
    pub channel_weights: Vec<(String, f64)>,
}

/// Packed 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blue → green → red ramp; the red channel equals the input value.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [to_byte(v), to_byte(1.0 - (2.0 * v - 1.0).abs()), to_byte(1.0 - v)]
}

pub fn heatmap_image(heatmap: &Raster) -> RgbImage {
    RgbImage {
        width: heatmap.width,
        height: heatmap.height,
        pixels: heatmap.data.iter().flat_map(|&v| colormap(v)).collect(),
    }
}

/// True-colour composite from the R, G, B bands, scaled by their joint maximum.
pub fn rgb_composite(bands: &BandStack) -> RgbImage {
    let chans = [bands.band(Band::R), bands.band(Band::G), bands.band(Band::B)];
    let peak = chans
        .iter()
        .flat_map(|c| c.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = bands.height * bands.width;
    let pixels = (0..n)
        .flat_map(|i| chans.map(|c| to_byte(c[i] / peak)))
        .collect();
    RgbImage {
        width: bands.width,
        height: bands.height,
        pixels,
    }
}

/// `alpha * top + (1 - alpha) * base`, per byte.
pub fn blend(base: &RgbImage, top: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if base.width != top.width || base.height != top.height {
        return Err(invalid("blended images differ in size"));
    }
    let a = alpha.clamp(0.0, 1.0);
    let pixels = base
        .pixels
        .iter()
        .zip(&top.pixels)
        .map(|(&b, &t)| (a * t as f64 + (1.0 - a) * b as f64).round() as u8)
        .collect();
    Ok(RgbImage {
        width: base.width,
        height: base.height,
        pixels,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(invalid(format!("not a binary PPM (magic {})", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad PPM header field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(invalid("only 8-bit PPM is supported"));
    }
    let pixels = bytes
        .get(pos..pos + width * height * 3)
        .ok_or_else(|| invalid("truncated PPM data"))?
        .to_vec();
    Ok(RgbImage { width, height, pixels })
}

pub fn write_channel_weights(path: &Path, weights: &[f64; 11]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "index,weight")?;
    for (index, w) in VegIndex::ALL.iter().zip(weights) {
        writeln!(f, "{},{}", index.name(), w)?;
    }
    f.flush()?;
    Ok(())
}

/// Heatmap, overlay and channel-weight files for one plot.
pub fn render(dir: &Path, plot_id: &str, cam: &GradCam, weights: &[f64; 11], bands: Option<&BandStack>, alpha: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let heat = heatmap_image(&cam.heatmap);
    write_ppm(&dir.join(format!("heatmap_{plot_id}.ppm")), &heat)?;
    if let Some(b) = bands {
        let overlay = blend(&rgb_composite(b), &heat, alpha)?;
        write_ppm(&dir.join(format!("overlay_{plot_id}.ppm")), &overlay)?;
    }
    write_channel_weights(&dir.join(format!("channel_weights_{plot_id}.csv")), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::dihedral;
    use mcvi_numcore::init::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Symmetric depthwise blur followed by a pooled smooth readout: commutes
    /// with every dihedral transform of the input.
    struct Symmetric;

    impl CamModel for Symmetric {
        fn cam_forward(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
            let c = g.shape(x)[1];
            let k = [0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05];
            let w = g.constant(Tensor::from_fn(&[c, 1, 3, 3], |i| k[i % 9]))?;
            let act = g.depthwise_conv2d(x, w, None, 1, 1)?;
            let y = g.mish(act)?;
            let sq = g.square(y)?;
            Ok((g.sum(sq)?, act))
        }
    }

    struct Constant;

    impl CamModel for Constant {
        fn cam_forward(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
            let zero = g.scale(x, 0.0)?;
            let s = g.sum(zero)?;
            let y = g.add_scalar(s, 1.5)?;
            Ok((y, x))
        }
    }

    #[test]
    fn heatmap_is_normalized() {
        let cam = gradcam(&mut Symmetric, &random(&[1, 3, 8, 8], 1)).unwrap();
        assert!(!cam.degenerate);
        let (lo, hi) = cam.heatmap.data.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn constant_model_is_degenerate() {
        let cam = gradcam(&mut Constant, &random(&[1, 3, 4, 4], 2)).unwrap();
        assert!(cam.degenerate);
        assert!(cam.heatmap.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn heatmap_is_dihedral_equivariant() {
        let x = random(&[1, 2, 6, 6], 3);
        let base = gradcam(&mut Symmetric, &x).unwrap().heatmap;
        let base_t = Tensor::new(&[1, 1, 6, 6], base.data.clone()).unwrap();
        for k in 0..8 {
            let moved = gradcam(&mut Symmetric, &dihedral(&x, k).unwrap()).unwrap().heatmap;
            let expect = dihedral(&base_t, k).unwrap();
            for (a, b) in moved.data.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-9, "transform {k}");
            }
        }
    }

    #[test]
    fn nearest_upsampling_repeats_cells() {
        assert_eq!(upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4, 4)[..8], [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    fn stack_from(channels: Vec<Vec<f64>>, h: usize, w: usize) -> VIStack {
        VIStack::new("p", h, w, channels).unwrap()
    }

    #[test]
    fn identical_channels_and_uniform_heatmap_share_weight_equally() {
        let ch: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let stack = stack_from(vec![ch; 11], 4, 4);
        let w = channel_weights(&stack, &Raster::filled(4, 4, 1.0)).unwrap();
        for v in w {
            assert!((v - 1.0 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_match_brute_force_and_ignore_affine_rescaling() {
        let mut r = rng(4);
        let channels: Vec<Vec<f64>> = (0..11).map(|_| (0..64).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let heat = Raster::new(8, 8, (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let w = channel_weights(&stack_from(channels.clone(), 8, 8), &heat).unwrap();
        let mut scores = [0.0; 11];
        for (c, ch) in channels.iter().enumerate() {
            let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for y in 0..8 {
                for x in 0..8 {
                    scores[c] += (ch[y * 8 + x] - lo) / (hi - lo) * heat.data[y * 8 + x];
                }
            }
        }
        let total: f64 = scores.iter().sum();
        for c in 0..11 {
            assert!((w[c] - scores[c] / total).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut scaled = channels;
        scaled[3].iter_mut().for_each(|v| *v = 4.0 * *v + 2.0);
        let w2 = channel_weights(&stack_from(scaled, 8, 8), &heat).unwrap();
        for c in 0..11 {
            assert!((w[c] - w2[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heatmap_is_an_error() {
        let stack = stack_from(vec![(0..4).map(f64::from).collect(); 11], 2, 2);
        assert!(channel_weights(&stack, &Raster::filled(2, 2, 0.0)).is_err());
        assert!(channel_weights(&stack, &Raster::filled(3, 2, 1.0)).is_err());
    }

    #[test]
    fn ppm_round_trip_recovers_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let heat = Raster::new(3, 5, (0..15).map(|i| i as f64 / 14.0).collect()).unwrap();
        let path = dir.path().join("h.ppm");
        write_ppm(&path, &heatmap_image(&heat)).unwrap();
        assert_eq!(&fs::read(&path).unwrap()[..2], b"P6");
        let img = read_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (5, 3));
        for (i, v) in heat.data.iter().enumerate() {
            let back = img.pixels[i * 3] as f64 / 255.0;
            assert!((back - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn zero_alpha_blend_is_the_base() {
        let base = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![10, 20, 30, 40, 50, 60],
        };
        let top = RgbImage {
            pixels: vec![255; 6],
            ..base.clone()
        };
        assert_eq!(blend(&base, &top, 0.0).unwrap(), base);
        assert_eq!(blend(&base, &top, 1.0).unwrap(), top);
    }
}
