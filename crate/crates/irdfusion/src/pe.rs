//! Feature-map ⇄ token-sequence plumbing with fixed positional encoding.
//!
//! Spatial maps are C×H×W; token sequences are (H·W)×C with rows in raster
//! scan order (row `y·W + x` is the channel vector at cell `(y, x)`). The
//! optional encoding is the standard non-learned 2-D sinusoid: the first
//! half of the channels encodes x, the second half y, each half interleaving
//! sin/cos at geometric wavelengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Positional-encoding choice for `flatten_pe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    None,
    Sinusoidal2d,
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeKind::None => write!(f, "none"),
            PeKind::Sinusoidal2d => write!(f, "sinusoidal2d"),
        }
    }
}

impl std::str::FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PeKind> {
        match s {
            "none" => Ok(PeKind::None),
            "sinusoidal2d" => Ok(PeKind::Sinusoidal2d),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Fixed 2-D sinusoidal table of shape (h·w)×d, in the same raster order as
/// `flatten_pe`. Channels [0, d/2) encode x, channels [d/2, d) encode y;
/// within each half, channel pair 2j holds sin and 2j+1 holds cos of
/// `pos / 10000^(2j / (d/2))`.
pub fn pe_table(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::invalid(
            "d",
            format!("sinusoidal 2-D encoding needs d divisible by 4 (even sin/cos pairs per axis), got {d}"),
        ));
    }
    let half = d / 2;
    let mut out = Tensor::zeros(&[h * w, d]);
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for j in 0..half / 2 {
                let div = 10000f64.powf(2.0 * j as f64 / half as f64);
                let (sx, cx) = (x as f64 / div).sin_cos();
                let (sy, cy) = (y as f64 / div).sin_cos();
                out.set2(row, 2 * j, sx);
                out.set2(row, 2 * j + 1, cx);
                out.set2(row, half + 2 * j, sy);
                out.set2(row, half + 2 * j + 1, cy);
            }
        }
    }
    Ok(out)
}

/// Flattens a C×H×W map into an (H·W)×C token sequence, adding the fixed
/// positional encoding when `pe` asks for it. `d` is the configured model
/// width; the map's channel count must match it.
pub fn flatten_pe(map: &Tensor, pe: PeKind, d: usize) -> Result<Tensor> {
    if map.ndim() != 3 {
        return Err(Error::invalid(
            "map",
            format!("expected a C×H×W tensor, got shape {:?}", map.shape()),
        ));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if c != d {
        return Err(Error::invalid(
            "map",
            format!("channel count {c} does not match the configured width {d}"),
        ));
    }
    let n = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set2(y * w + x, ch, map.data()[ch * h * w + y * w + x]);
            }
        }
    }
    if pe == PeKind::Sinusoidal2d {
        let table = pe_table(h, w, d)?;
        out.add_assign(&table)?;
    }
    Ok(out)
}

/// Exact inverse of `flatten_pe` with `pe = none`: rebuilds the C×H×W map
/// from an (H·W)×C sequence.
pub fn reshape_map(seq: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if seq.ndim() != 2 || seq.rows() != h * w {
        return Err(Error::invalid(
            "seq",
            format!("expected {}×C rows for a {h}×{w} map, got shape {:?}", h * w, seq.shape()),
        ));
    }
    let c = seq.cols();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[ch * h * w + y * w + x] = seq.at2(y * w + x, ch);
            }
        }
    }
    Ok(out)
}
