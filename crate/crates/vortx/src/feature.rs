//! Per-image feature pyramids.
//!
//! Each image is embedded at three strides by flattening non-overlapping
//! square patches and applying a trainable affine map per resolution. The
//! resulting maps are sampled bilinearly during backprojection. A heavy 2D
//! backbone can be swapped in externally via the pyramid archive format
//! without touching the rest of the pipeline.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Level;
use crate::nn::{LeafSet, ParamStore, Scalar, Tensor};

/// Patch stride in pixels for each pyramid level.
pub const STRIDES: [usize; 3] = [16, 8, 4];

/// Feature channel width for each pyramid level.
pub const CHANNELS: [usize; 3] = [32, 16, 8];

pub fn stride_at(level: Level) -> usize {
    STRIDES[level.index()]
}

pub fn channels_at(level: Level) -> usize {
    CHANNELS[level.index()]
}

/// Grayscale image with values in [0, 1], row major.
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Image { width, height, pixels }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image { width, height, pixels: vec![value; width * height] }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Mirror about the vertical center line; pairs with the camera-frame
    /// x flip of reflection augmentation.
    pub fn flip_horizontal(&self) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..(y + 1) * self.width];
            pixels.extend(row.iter().rev());
        }
        Image { width: self.width, height: self.height, pixels }
    }
}

/// One level of a pyramid: a (h*w, channels) feature tensor in row-major
/// map order.
#[derive(Clone)]
pub struct FeatureMap<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub features: Tensor<T>,
}

/// Feature maps at all three strides for one source image.
#[derive(Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub image_width: usize,
    pub image_height: usize,
    pub maps: [FeatureMap<T>; 3],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn map(&self, level: Level) -> &FeatureMap<T> {
        &self.maps[level.index()]
    }
}

/// Map dimension at a given stride: ceil division.
pub fn map_dim(image_dim: usize, stride: usize) -> usize {
    image_dim.div_ceil(stride).max(1)
}

/// Registers the per-level affine embeddings under `feat.`.
pub fn init_feature_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for level in Level::ALL {
        let s = stride_at(level);
        let c = channels_at(level);
        let prefix = format!("feat.{}", level.name());
        store.init_linear(&format!("{prefix}.w"), s * s, c, rng);
        store.init_zeros(&format!("{prefix}.b"), &[c]);
    }
}

/// Flattens the image into non-overlapping stride-sized patches, one row per
/// map cell. Patches overhanging the image boundary are zero padded.
fn patch_matrix(image: &Image, stride: usize) -> (Vec<f64>, usize, usize) {
    let mw = map_dim(image.width, stride);
    let mh = map_dim(image.height, stride);
    let mut data = vec![0.0; mw * mh * stride * stride];
    for my in 0..mh {
        for mx in 0..mw {
            let base = (my * mw + mx) * stride * stride;
            for py in 0..stride {
                let y = my * stride + py;
                if y >= image.height {
                    break;
                }
                for px in 0..stride {
                    let x = mx * stride + px;
                    if x >= image.width {
                        break;
                    }
                    data[base + py * stride + px] = image.at(x, y);
                }
            }
        }
    }
    (data, mw, mh)
}

/// Embeds one image into a three-level pyramid using the `feat.` parameters.
pub fn extract<T: Scalar>(leaves: &LeafSet<T>, image: &Image) -> FeaturePyramid<T> {
    let tape = leaves.tape();
    let maps = Level::ALL.map(|level| {
        let s = stride_at(level);
        let (patches, mw, mh) = patch_matrix(image, s);
        let input = tape.constant_f64(&patches, &[mw * mh, s * s]);
        let prefix = format!("feat.{}", level.name());
        let w = leaves.get(&format!("{prefix}.w"));
        let b = leaves.get(&format!("{prefix}.b"));
        FeatureMap { width: mw, height: mh, features: input.matmul(&w).add_row(&b) }
    });
    FeaturePyramid { image_width: image.width, image_height: image.height, maps }
}

/// Bilinear sample weights for one pixel query against a map level.
///
/// Returns the four corner row indices and weights, or None when (u, v)
/// falls outside the image. Map coordinates are clamped to the cell-center
/// lattice so boundary pixels still sample valid cells.
fn bilinear_taps(
    map_w: usize,
    map_h: usize,
    stride: usize,
    image_w: usize,
    image_h: usize,
    u: f64,
    v: f64,
) -> Option<([usize; 4], [f64; 4])> {
    if !(0.0..image_w as f64).contains(&u) || !(0.0..image_h as f64).contains(&v) {
        return None;
    }
    let x = (u / stride as f64 - 0.5).clamp(0.0, (map_w - 1) as f64);
    let y = (v / stride as f64 - 0.5).clamp(0.0, (map_h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(map_w - 1);
    let y1 = (y0 + 1).min(map_h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let rows = [y0 * map_w + x0, y0 * map_w + x1, y1 * map_w + x0, y1 * map_w + x1];
    let weights =
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    Some((rows, weights))
}

/// Samples the pyramid at a batch of pixel locations, differentiably.
///
/// Output row i holds the bilinear feature at queries[i]; rows whose query
/// is outside the image are zero and flagged false in the validity mask.
pub fn sample_features<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    level: Level,
    queries: &[(f64, f64)],
) -> (Tensor<T>, Vec<bool>) {
    let map = pyramid.map(level);
    let stride = stride_at(level);
    let q = queries.len();
    let mut corner_rows = [const { Vec::new() }; 4];
    let mut corner_weights = [const { Vec::new() }; 4];
    let mut valid = Vec::with_capacity(q);
    for &(u, v) in queries {
        match bilinear_taps(
            map.width,
            map.height,
            stride,
            pyramid.image_width,
            pyramid.image_height,
            u,
            v,
        ) {
            Some((rows, weights)) => {
                for k in 0..4 {
                    corner_rows[k].push(rows[k]);
                    corner_weights[k].push(weights[k]);
                }
                valid.push(true);
            }
            None => {
                for k in 0..4 {
                    corner_rows[k].push(0);
                    corner_weights[k].push(0.0);
                }
                valid.push(false);
            }
        }
    }
    let tape = map.features.tape();
    let mut acc: Option<Tensor<T>> = None;
    for k in 0..4 {
        let gathered = map.features.gather_rows(&corner_rows[k]);
        let w = tape.constant_f64(&corner_weights[k], &[q, 1]);
        let term = gathered.mul_col(&w);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    (acc.unwrap(), valid)
}

/// Convenience single-point sample, without tape plumbing. Returns None for
/// out-of-image queries.
pub fn sample_feature(
    values: &[f64],
    map_w: usize,
    map_h: usize,
    channels: usize,
    stride: usize,
    image_w: usize,
    image_h: usize,
    u: f64,
    v: f64,
) -> Option<Vec<f64>> {
    let (rows, weights) = bilinear_taps(map_w, map_h, stride, image_w, image_h, u, v)?;
    let mut out = vec![0.0; channels];
    for k in 0..4 {
        let base = rows[k] * channels;
        for c in 0..channels {
            out[c] += weights[k] * values[base + c];
        }
    }
    Some(out)
}

/// Raw, tape-free pyramid as stored in feature archives.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPyramid {
    pub image_width: usize,
    pub image_height: usize,
    /// Per level: (map width, map height, row-major features, h*w*channels).
    pub maps: [(usize, usize, Vec<f64>); 3],
}

impl RawPyramid {
    /// Lifts precomputed features onto a tape as constants, so external
    /// backbones drop into the same sampling path (not trainable).
    pub fn to_pyramid<T: Scalar>(&self, tape: &crate::nn::Tape<T>) -> FeaturePyramid<T> {
        let maps = Level::ALL.map(|level| {
            let (w, h, ref data) = self.maps[level.index()];
            let c = channels_at(level);
            FeatureMap {
                width: w,
                height: h,
                features: tape.constant_f64(data, &[w * h, c]),
            }
        });
        FeaturePyramid {
            image_width: self.image_width,
            image_height: self.image_height,
            maps,
        }
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"VXFT";

/// Writes a precomputed pyramid archive: magic, image dims, then per level
/// map dims plus f32 feature data.
pub fn save_pyramid(path: &Path, pyramid: &RawPyramid) -> Result<()> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    file.write_all(ARCHIVE_MAGIC).map_err(io)?;
    file.write_u64::<LittleEndian>(pyramid.image_width as u64).map_err(io)?;
    file.write_u64::<LittleEndian>(pyramid.image_height as u64).map_err(io)?;
    for level in Level::ALL {
        let (w, h, ref data) = pyramid.maps[level.index()];
        let c = channels_at(level);
        if data.len() != w * h * c {
            return Err(Error::Shape(format!(
                "{} map has {} values, expected {}x{}x{}",
                level.name(),
                data.len(),
                w,
                h,
                c
            )));
        }
        file.write_u64::<LittleEndian>(w as u64).map_err(io)?;
        file.write_u64::<LittleEndian>(h as u64).map_err(io)?;
        for &v in data {
            file.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load_pyramid(path: &Path) -> Result<RawPyramid> {
    let mut file =
        std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::parse(path, 0, "bad feature archive magic"));
    }
    let image_width = file.read_u64::<LittleEndian>().map_err(io)? as usize;
    let image_height = file.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut maps: [(usize, usize, Vec<f64>); 3] =
        [const { (0, 0, Vec::new()) }; 3];
    for level in Level::ALL {
        let w = file.read_u64::<LittleEndian>().map_err(io)? as usize;
        let h = file.read_u64::<LittleEndian>().map_err(io)? as usize;
        let c = channels_at(level);
        if w != map_dim(image_width, stride_at(level))
            || h != map_dim(image_height, stride_at(level))
        {
            return Err(Error::Shape(format!(
                "{} map is {}x{}, inconsistent with image {}x{}",
                level.name(),
                w,
                h,
                image_width,
                image_height
            )));
        }
        let mut data = vec![0.0f64; w * h * c];
        for v in data.iter_mut() {
            *v = file.read_f32::<LittleEndian>().map_err(io)? as f64;
        }
        maps[level.index()] = (w, h, data);
    }
    Ok(RawPyramid { image_width, image_height, maps })
}
