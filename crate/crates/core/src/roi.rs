//! Region feature extraction: continuous-coordinate RoIAlign followed by a
//! spatial mean over the pooled grid.
//!
//! Coordinates: after multiplying a box by `spatial_scale`, cell `(i, j)`
//! (row, column) has its center at `(j + 0.5, i + 0.5)` in `(u, v)` =
//! (horizontal, vertical). Samples outside the map interpolate against zeros.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{ensure, Error, Result};
use crate::geometry::BoundingBox;

/// A `C x H x W` feature map, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    spatial_scale: f64,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        spatial_scale: f64,
    ) -> Result<Self> {
        ensure(channels > 0 && height > 0 && width > 0, || {
            format!("feature map dims must be positive, got {channels}x{height}x{width}")
        })?;
        crate::error::ensure_dim("feature map data", channels * height * width, data.len())?;
        ensure(data.iter().all(|v| v.is_finite()), || {
            "feature map contains non-finite entries".into()
        })?;
        ensure(spatial_scale > 0.0 && spatial_scale.is_finite(), || {
            format!("spatial_scale must be positive, got {spatial_scale}")
        })?;
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
            spatial_scale,
        })
    }

    /// Fills every cell from a function of `(channel, cell center u, cell center v)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        spatial_scale: f64,
        mut f: impl FnMut(usize, f64, f64) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, j as f64 + 0.5, i as f64 + 0.5));
                }
            }
        }
        Self::new(channels, height, width, data, spatial_scale)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial_scale(&self) -> f64 {
        self.spatial_scale
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Returns a copy with `c` added to every entry.
    pub fn offset(&self, c: f64) -> Self {
        FeatureMap {
            data: self.data.iter().map(|v| v + c).collect(),
            ..self.clone()
        }
    }

    fn at(&self, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i as usize >= self.height || j as usize >= self.width {
            return 0.0;
        }
        self.data[(c * self.height + i as usize) * self.width + j as usize]
    }

    /// Bilinear value at continuous `(u, v)`, zero-padded outside the grid.
    pub fn bilinear(&self, c: usize, u: f64, v: f64) -> f64 {
        let gu = u - 0.5;
        let gv = v - 0.5;
        let j0 = gu.floor();
        let i0 = gv.floor();
        let fu = gu - j0;
        let fv = gv - i0;
        let (i0, j0) = (i0 as isize, j0 as isize);
        let top = self.at(c, i0, j0) * (1.0 - fu) + self.at(c, i0, j0 + 1) * fu;
        let bottom = self.at(c, i0 + 1, j0) * (1.0 - fu) + self.at(c, i0 + 1, j0 + 1) * fu;
        top * (1.0 - fv) + bottom * fv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = MapHeader {
            format: MAP_FORMAT.into(),
            version: MAP_VERSION,
            channels: self.channels,
            height: self.height,
            width: self.width,
            spatial_scale: self.spatial_scale,
        };
        let blob: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        container::encode(&header, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blob): (MapHeader, _) = container::split(MAP_FORMAT, bytes)?;
        container::check_kind(MAP_FORMAT, &h.format)?;
        container::check_version(MAP_FORMAT, h.version, MAP_VERSION)?;
        let data = container::decode_f32(MAP_FORMAT, blob, h.channels * h.height * h.width)?;
        Self::new(
            h.channels,
            h.height,
            h.width,
            data.into_iter().map(f64::from).collect(),
            h.spatial_scale,
        )
    }
}

const MAP_FORMAT: &str = "sia.feature_map";
const MAP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MapHeader {
    format: String,
    version: u32,
    channels: usize,
    height: usize,
    width: usize,
    spatial_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Output grid is `pool_size x pool_size`.
    pub pool_size: usize,
    /// Sampling points per axis inside each bin.
    pub samples_per_bin: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            pool_size: 7,
            samples_per_bin: 2,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.pool_size >= 1 && self.samples_per_bin >= 1, || {
            format!("invalid RoI config {self:?}")
        })
    }
}

/// A `C x P x P` pooled tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRegion {
    pub channels: usize,
    pub pool_size: usize,
    pub data: Vec<f64>,
}

impl AlignedRegion {
    pub fn get(&self, c: usize, py: usize, px: usize) -> f64 {
        self.data[(c * self.pool_size + py) * self.pool_size + px]
    }
}

/// Continuous sample coordinates `(u, v)` for bin `(py, px)`.
pub fn bin_sample_points(
    map: &FeatureMap,
    bbox: &BoundingBox,
    cfg: &RoiConfig,
    py: usize,
    px: usize,
) -> Vec<(f64, f64)> {
    let s = map.spatial_scale;
    let (x0, y0) = (bbox.x * s, bbox.y * s);
    let bin_w = bbox.w * s / cfg.pool_size as f64;
    let bin_h = bbox.h * s / cfg.pool_size as f64;
    let n = cfg.samples_per_bin;
    let mut pts = Vec::with_capacity(n * n);
    for iy in 0..n {
        let v = y0 + bin_h * (py as f64 + (iy as f64 + 0.5) / n as f64);
        for ix in 0..n {
            let u = x0 + bin_w * (px as f64 + (ix as f64 + 0.5) / n as f64);
            pts.push((u, v));
        }
    }
    pts
}

pub fn roi_align(map: &FeatureMap, bbox: &BoundingBox, cfg: &RoiConfig) -> Result<AlignedRegion> {
    bbox.validate()?;
    cfg.validate()?;
    let s = map.spatial_scale;
    let (x0, y0, x1, y1) = (
        bbox.x * s,
        bbox.y * s,
        (bbox.x + bbox.w) * s,
        (bbox.y + bbox.h) * s,
    );
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= map.width as f64 || y0 >= map.height as f64 {
        return Err(Error::Validation(format!(
            "box {bbox:?} lies entirely outside the {}x{} map",
            map.height, map.width
        )));
    }

    let p = cfg.pool_size;
    let norm = (cfg.samples_per_bin * cfg.samples_per_bin) as f64;
    let mut data = Vec::with_capacity(map.channels * p * p);
    for c in 0..map.channels {
        for py in 0..p {
            for px in 0..p {
                let sum: f64 = bin_sample_points(map, bbox, cfg, py, px)
                    .into_iter()
                    .map(|(u, v)| map.bilinear(c, u, v))
                    .sum();
                data.push(sum / norm);
            }
        }
    }
    Ok(AlignedRegion {
        channels: map.channels,
        pool_size: p,
        data,
    })
}

/// Channel-wise mean over the pooled grid.
pub fn pool_region_feature(aligned: &AlignedRegion) -> Result<Vec<f64>> {
    let cell = aligned.pool_size * aligned.pool_size;
    crate::error::ensure_dim("aligned region", aligned.channels * cell, aligned.data.len())?;
    ensure(aligned.data.iter().all(|v| v.is_finite()), || {
        "aligned region contains non-finite values".into()
    })?;
    Ok(aligned
        .data
        .chunks_exact(cell)
        .map(|ch| ch.iter().sum::<f64>() / cell as f64)
        .collect())
}

/// RoIAlign then mean pooling.
pub fn extract_region_feature(
    map: &FeatureMap,
    bbox: &BoundingBox,
    cfg: &RoiConfig,
) -> Result<Vec<f64>> {
    pool_region_feature(&roi_align(map, bbox, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_map(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, 1.0, |_, u, v| u + 2.0 * v).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let map = FeatureMap::new(2, 5, 6, vec![3.25; 60], 1.0).unwrap();
        let b = BoundingBox::new(0.7, 1.1, 3.3, 2.9).unwrap();
        let out = roi_align(&map, &b, &RoiConfig::default()).unwrap();
        assert!(out.data.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn ramp_matches_mean_of_sample_coordinates() {
        let map = ramp_map(10, 10);
        let b = BoundingBox::new(2.3, 3.1, 4.2, 3.7).unwrap();
        let cfg = RoiConfig { pool_size: 3, samples_per_bin: 2 };
        let out = roi_align(&map, &b, &cfg).unwrap();
        for py in 0..3 {
            for px in 0..3 {
                let pts = bin_sample_points(&map, &b, &cfg, py, px);
                let mu = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
                let mv = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
                assert!((out.get(0, py, px) - (mu + 2.0 * mv)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_sample_on_cell_center_reads_that_cell() {
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 1.5).collect();
        let map = FeatureMap::new(1, 4, 4, data, 1.0).unwrap();
        // centered on cell (row 2, col 1), whose center is (1.5, 2.5)
        let b = BoundingBox::new(1.0, 2.0, 1.0, 1.0).unwrap();
        let cfg = RoiConfig { pool_size: 1, samples_per_bin: 1 };
        let out = roi_align(&map, &b, &cfg).unwrap();
        assert_eq!(out.data, vec![(2 * 4 + 1) as f64 * 1.5]);
    }

    #[test]
    fn out_of_bounds_samples_see_zero_padding() {
        let map = FeatureMap::new(1, 2, 2, vec![1.0; 4], 1.0).unwrap();
        // single sample at u = -0.5 (one full cell left of the first center): weight 0 on data
        let b = BoundingBox::new(-1.0, 0.0, 1.0, 1.0).unwrap();
        let cfg = RoiConfig { pool_size: 1, samples_per_bin: 1 };
        let v = roi_align(&map, &b, &cfg);
        // box touches x = 0 only at its edge, so it is outside
        assert!(v.is_err());
        let b = BoundingBox::new(-0.5, 0.0, 1.0, 1.0).unwrap();
        let out = roi_align(&map, &b, &cfg).unwrap();
        assert_eq!(out.data, vec![0.5]);
    }

    #[test]
    fn outside_and_degenerate_boxes_error() {
        let map = ramp_map(4, 4);
        let cfg = RoiConfig::default();
        assert!(roi_align(&map, &BoundingBox { x: 10.0, y: 0.0, w: 1.0, h: 1.0 }, &cfg).is_err());
        assert!(roi_align(&map, &BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 }, &cfg).is_err());
        let bad = RoiConfig { pool_size: 0, samples_per_bin: 2 };
        assert!(roi_align(&map, &BoundingBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }, &bad).is_err());
    }

    #[test]
    fn spatial_scale_maps_image_units() {
        let map = FeatureMap::from_fn(1, 8, 8, 0.5, |_, u, v| u + 2.0 * v).unwrap();
        let b = BoundingBox::new(4.0, 4.0, 4.0, 4.0).unwrap();
        let cfg = RoiConfig { pool_size: 1, samples_per_bin: 1 };
        // scaled box is (2, 2, 2, 2) with its single sample at (3, 3)
        let out = roi_align(&map, &b, &cfg).unwrap();
        assert!((out.data[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn sample_count_irrelevant_on_constant_map() {
        let map = FeatureMap::new(1, 6, 6, vec![-0.75; 36], 1.0).unwrap();
        let b = BoundingBox::new(1.2, 0.9, 3.1, 4.4).unwrap();
        let four = roi_align(&map, &b, &RoiConfig { pool_size: 7, samples_per_bin: 4 }).unwrap();
        let two = roi_align(&map, &b, &RoiConfig { pool_size: 7, samples_per_bin: 2 }).unwrap();
        assert_eq!(four, two);
    }

    #[test]
    fn pool_examples() {
        let one = AlignedRegion { channels: 1, pool_size: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        assert_eq!(pool_region_feature(&one).unwrap(), vec![2.5]);
        let two = AlignedRegion {
            channels: 2,
            pool_size: 2,
            data: vec![-1.0, 1.0, 0.5, -0.5, 1.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(pool_region_feature(&two).unwrap(), vec![0.0, 1.0]);
        let c = AlignedRegion { channels: 3, pool_size: 3, data: vec![0.125; 27] };
        assert_eq!(pool_region_feature(&c).unwrap(), vec![0.125; 3]);
    }

    #[test]
    fn map_container_roundtrip() {
        let data: Vec<f64> = (0..24).map(|v| f64::from(v as f32 * 0.37f32)).collect();
        let map = FeatureMap::new(2, 3, 4, data, 0.0625).unwrap();
        assert_eq!(FeatureMap::from_bytes(&map.to_bytes()).unwrap(), map);
    }
}
