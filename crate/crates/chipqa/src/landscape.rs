//! Spatial pseudo-images of per-probe weights and residuals on the chip
//! grid. A landscape is the data (one optional value per grid cell); render
//! turns it into a PNG, one pixel per cell (optionally upscaled).
//!
//! Color code: red ramp for positive residuals, blue for negative, green
//! for weights with darker meaning lower weight. Gray rendering keeps only
//! magnitude, so signed residuals must be split into the pos/neg channels
//! first.

use std::io::Cursor;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::ingest::ChipLayout;
use crate::plm::PlmResult;
use crate::stats;

/// Shading below this residual magnitude is indistinguishable from f64
/// rounding dust; the clamp never drops under it.
const MIN_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Weights,
    ResidualsPos,
    ResidualsNeg,
    ResidualsSigned,
}

impl Channel {
    pub fn label(&self) -> &'static str {
        match self {
            Channel::Weights => "weights",
            Channel::ResidualsPos => "pos",
            Channel::ResidualsNeg => "neg",
            Channel::ResidualsSigned => "signed",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Channel::Weights),
            "pos" => Ok(Channel::ResidualsPos),
            "neg" => Ok(Channel::ResidualsNeg),
            "signed" => Ok(Channel::ResidualsSigned),
            other => Err(Error::Config(format!(
                "unknown landscape channel {other:?}; expected weights, pos, neg, or signed"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    Color,
    Gray,
}

impl std::str::FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Palette::Color),
            "gray" => Ok(Palette::Gray),
            other => Err(Error::Config(format!(
                "unknown palette {other:?}; expected color or gray"
            ))),
        }
    }
}

/// One chip's per-cell values for one channel. Cells without a layout probe
/// are `None`.
#[derive(Debug, Clone)]
pub struct Landscape {
    pub chip_name: String,
    pub channel: Channel,
    rows: usize,
    cols: usize,
    grid: Vec<Option<f64>>,
    /// Positive shade-scaling bound; values at or beyond it render darkest.
    pub clamp: f64,
}

impl Landscape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.grid[y * self.cols + x]
    }

    /// Populated cells with their values, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.grid.iter().enumerate().filter_map(move |(i, v)| {
            v.map(|v| (i % self.cols, i / self.cols, v))
        })
    }
}

/// Place one chip's per-probe weights or residuals onto the grid.
pub fn build_landscape(
    result: &PlmResult,
    layout: &ChipLayout,
    chip: &str,
    channel: Channel,
) -> Result<Landscape> {
    let chip_idx = result
        .chip_names
        .iter()
        .position(|n| n == chip)
        .ok_or_else(|| Error::UnknownChip(chip.to_string()))?;

    let mut grid = vec![None; layout.rows() * layout.cols()];
    let mut abs_residuals = Vec::with_capacity(layout.n_probes());

    for ((id, span), fit) in layout.probesets().iter().zip(&result.fits) {
        debug_assert_eq!(*id, fit.probeset_id, "fit order mirrors layout order");
        for (local, col) in span.clone().enumerate() {
            let probe = &layout.probes()[col];
            let r = fit.residuals[[chip_idx, local]];
            let value = match channel {
                Channel::Weights => fit.weights[[chip_idx, local]],
                Channel::ResidualsPos => r.max(0.0),
                Channel::ResidualsNeg => (-r).max(0.0),
                Channel::ResidualsSigned => r,
            };
            grid[probe.y * layout.cols() + probe.x] = Some(value);
            abs_residuals.push(r.abs());
        }
    }

    let clamp = match channel {
        Channel::Weights => 1.0,
        _ => {
            let p98 = stats::quantile(&abs_residuals, 0.98);
            let max = abs_residuals.iter().cloned().fold(0.0f64, f64::max);
            if p98 > MIN_CLAMP {
                p98
            } else if max > MIN_CLAMP {
                max
            } else {
                MIN_CLAMP
            }
        }
    };

    Ok(Landscape {
        chip_name: chip.to_string(),
        channel,
        rows: layout.rows(),
        cols: layout.cols(),
        grid,
        clamp,
    })
}

/// Darkness fraction in [0, 1] for a cell value.
fn darkness(channel: Channel, value: f64, clamp: f64) -> f64 {
    let t = match channel {
        Channel::Weights => 1.0 - value.clamp(0.0, 1.0),
        _ => (value.abs() / clamp).clamp(0.0, 1.0),
    };
    debug_assert!((0.0..=1.0).contains(&t));
    t
}

fn ramp(dark: [u8; 3], t: f64) -> Rgb<u8> {
    let ch = |d: u8| (255.0 + (d as f64 - 255.0) * t).round() as u8;
    Rgb([ch(dark[0]), ch(dark[1]), ch(dark[2])])
}

const DARK_RED: [u8; 3] = [139, 0, 0];
const DARK_BLUE: [u8; 3] = [0, 0, 139];
const DARK_GREEN: [u8; 3] = [0, 100, 0];

/// Encode a landscape as PNG bytes, `scale` pixels per grid cell.
/// Absent cells render white. Output is byte-deterministic.
pub fn render(landscape: &Landscape, palette: Palette, scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    if palette == Palette::Gray && landscape.channel == Channel::ResidualsSigned {
        // Gray shades would collapse the sign.
        return Err(Error::Palette);
    }
    let w = (landscape.cols * scale) as u32;
    let h = (landscape.rows * scale) as u32;

    let mut png = Vec::new();
    match palette {
        Palette::Gray => {
            let mut img = GrayImage::from_pixel(w, h, Luma([255]));
            for (x, y, v) in landscape.cells() {
                let t = darkness(landscape.channel, v, landscape.clamp);
                let shade = (255.0 * (1.0 - t)).round() as u8;
                fill_cell(&mut img, x, y, scale, Luma([shade]));
            }
            image::DynamicImage::ImageLuma8(img)
                .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
        }
        Palette::Color => {
            let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
            for (x, y, v) in landscape.cells() {
                let t = darkness(landscape.channel, v, landscape.clamp);
                let color = match landscape.channel {
                    Channel::Weights => ramp(DARK_GREEN, t),
                    Channel::ResidualsPos => ramp(DARK_RED, t),
                    Channel::ResidualsNeg => ramp(DARK_BLUE, t),
                    Channel::ResidualsSigned => {
                        if v >= 0.0 {
                            ramp(DARK_RED, t)
                        } else {
                            ramp(DARK_BLUE, t)
                        }
                    }
                };
                fill_cell(&mut img, x, y, scale, color);
            }
            image::DynamicImage::ImageRgb8(img)
                .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
        }
    }
    Ok(png)
}

fn fill_cell<P: image::Pixel + 'static>(
    img: &mut image::ImageBuffer<P, Vec<P::Subpixel>>,
    x: usize,
    y: usize,
    scale: usize,
    pixel: P,
) {
    for dy in 0..scale {
        for dx in 0..scale {
            img.put_pixel((x * scale + dx) as u32, (y * scale + dy) as u32, pixel);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Probe;
    use crate::plm::ProbesetFit;
    use ndarray::Array2;

    /// 2x2 layout, one probeset, hand-built fit with residuals
    /// [r00, r10, r01, r11] on the single chip of interest.
    fn fixture(residuals: [f64; 4]) -> (PlmResult, ChipLayout) {
        let probes = (0..4)
            .map(|j| Probe {
                probeset_id: "PS".into(),
                probe_rank: j,
                x: j % 2,
                y: j / 2,
            })
            .collect();
        let layout = ChipLayout::new(2, 2, probes).unwrap();
        let mut res = Array2::zeros((2, 4));
        let mut weights = Array2::from_elem((2, 4), 1.0);
        for (j, r) in residuals.iter().enumerate() {
            res[[0, j]] = *r;
            weights[[0, j]] = 1.0 / (1.0 + r.abs());
        }
        let fit = ProbesetFit {
            probeset_id: "PS".into(),
            mu: vec![5.0, 5.0],
            alpha: vec![0.0; 4],
            residuals: res,
            weights,
            total_weight: vec![4.0, 4.0],
            sigma: 0.1,
            iterations: 1,
            converged: true,
        };
        (
            PlmResult {
                chip_names: vec!["a".into(), "b".into()],
                fits: vec![fit],
            },
            layout,
        )
    }

    #[test]
    fn sign_split_between_pos_and_neg() {
        let (result, layout) = fixture([0.7, -0.3, 0.0, 0.0]);
        let pos = build_landscape(&result, &layout, "a", Channel::ResidualsPos).unwrap();
        let neg = build_landscape(&result, &layout, "a", Channel::ResidualsNeg).unwrap();
        assert_eq!(pos.get(0, 0), Some(0.7));
        assert_eq!(neg.get(0, 0), Some(0.0));
        assert_eq!(pos.get(1, 0), Some(0.0));
        assert_eq!(neg.get(1, 0), Some(0.3));
    }

    #[test]
    fn signed_reconstructs_from_pos_minus_neg() {
        let (result, layout) = fixture([0.7, -0.3, 0.2, -0.9]);
        let pos = build_landscape(&result, &layout, "a", Channel::ResidualsPos).unwrap();
        let neg = build_landscape(&result, &layout, "a", Channel::ResidualsNeg).unwrap();
        let signed = build_landscape(&result, &layout, "a", Channel::ResidualsSigned).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let s = signed.get(x, y).unwrap();
                assert_eq!(pos.get(x, y).unwrap() - neg.get(x, y).unwrap(), s);
            }
        }
    }

    #[test]
    fn populated_cells_match_layout_probes_exactly() {
        let (result, layout) = fixture([0.1, 0.2, 0.3, 0.4]);
        let l = build_landscape(&result, &layout, "a", Channel::Weights).unwrap();
        let mut cells: Vec<(usize, usize)> = l.cells().map(|(x, y, _)| (x, y)).collect();
        cells.sort_unstable();
        let mut probe_coords: Vec<(usize, usize)> =
            layout.probes().iter().map(|p| (p.x, p.y)).collect();
        probe_coords.sort_unstable();
        assert_eq!(cells, probe_coords);
    }

    #[test]
    fn unknown_chip_rejected() {
        let (result, layout) = fixture([0.0; 4]);
        assert!(matches!(
            build_landscape(&result, &layout, "nope", Channel::Weights),
            Err(Error::UnknownChip(_))
        ));
    }

    #[test]
    fn gray_signed_is_palette_error() {
        let (result, layout) = fixture([0.1, -0.1, 0.2, -0.2]);
        let l = build_landscape(&result, &layout, "a", Channel::ResidualsSigned).unwrap();
        assert!(matches!(render(&l, Palette::Gray, 1), Err(Error::Palette)));
    }

    #[test]
    fn zero_value_renders_lightest_and_clamped_darkest() {
        let (result, layout) = fixture([0.0, 5.0, 0.0, 0.0]);
        let l = build_landscape(&result, &layout, "a", Channel::ResidualsPos).unwrap();
        let png = render(&l, Palette::Gray, 1).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 255, "zero cell is lightest");
        assert_eq!(img.get_pixel(1, 0).0[0], 0, "cell at clamp is darkest");
    }

    #[test]
    fn shade_is_monotone_in_magnitude() {
        let (result, layout) = fixture([0.1, 0.4, 0.8, 1.6]);
        let l = build_landscape(&result, &layout, "a", Channel::ResidualsPos).unwrap();
        let png = render(&l, Palette::Gray, 1).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        let shades = [
            img.get_pixel(0, 0).0[0],
            img.get_pixel(1, 0).0[0],
            img.get_pixel(0, 1).0[0],
            img.get_pixel(1, 1).0[0],
        ];
        for pair in shades.windows(2) {
            assert!(pair[0] >= pair[1], "larger residual rendered lighter: {shades:?}");
        }
    }

    #[test]
    fn render_is_byte_deterministic() {
        let (result, layout) = fixture([0.3, -0.4, 0.9, -0.1]);
        let l = build_landscape(&result, &layout, "a", Channel::ResidualsSigned).unwrap();
        let a = render(&l, Palette::Color, 3).unwrap();
        let b = render(&l, Palette::Color, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upscaling_repeats_cells() {
        let (result, layout) = fixture([0.0, 5.0, 0.0, 0.0]);
        let l = build_landscape(&result, &layout, "a", Channel::ResidualsPos).unwrap();
        let png = render(&l, Palette::Gray, 4).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.width(), 8);
        assert_eq!(img.height(), 8);
        for dy in 0..4 {
            for dx in 0..4 {
                assert_eq!(img.get_pixel(4 + dx, dy).0[0], 0);
            }
        }
    }
}
