//! Binary 8-bit PGM (P5) output for eyeballing feature maps, plus a small
//! reader so tests and tools can parse the files back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `t` as a binary PGM. 2-D tensors map directly to pixels; C×H×W
/// tensors are first mean-pooled over channels. Values are min-max
/// normalized to 0..=255, with a constant map rendering mid-gray (128) by
/// convention. The comment line records the tool version and `note`, which
/// callers use to embed the resolved run configuration.
pub fn emit_heatmap(t: &Tensor, path: &Path, note: &str) -> Result<()> {
    let pooled;
    let plane = match t.ndim() {
        2 => t,
        3 => {
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut data = vec![0.0; h * w];
            for ch in 0..c {
                for (cell, out) in data.iter_mut().enumerate() {
                    *out += t.data()[ch * h * w + cell];
                }
            }
            for v in data.iter_mut() {
                *v /= c as f64;
            }
            pooled = Tensor::from_vec(vec![h, w], data)?;
            &pooled
        }
        _ => {
            return Err(Error::invalid(
                "emit_heatmap",
                format!("needs an H×W or C×H×W tensor, got shape {:?}", t.shape()),
            ))
        }
    };
    if !plane.is_finite() {
        return Err(Error::NonFinite { op: "emit_heatmap" });
    }

    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in plane.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let pixels: Vec<u8> = plane
        .data()
        .iter()
        .map(|&v| {
            if span == 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round() as u8
            }
        })
        .collect();

    let mut bytes = Vec::with_capacity(64 + note.len() + pixels.len());
    bytes.extend_from_slice(b"P5\n");
    let comment = if note.is_empty() {
        format!("# irdfusion {}\n", env!("CARGO_PKG_VERSION"))
    } else {
        format!("# irdfusion {} {}\n", env!("CARGO_PKG_VERSION"), note)
    };
    bytes.extend_from_slice(comment.as_bytes());
    bytes.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A parsed PGM: dimensions, the concatenated comment lines (without the
/// leading `# ` or trailing newline), and row-major pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub comment: String,
    pub pixels: Vec<u8>,
}

/// Reads a binary PGM written by `emit_heatmap` (or any 8-bit P5 file).
pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason.to_string());

    let mut pos = 0usize;
    let mut comment = String::new();
    let token = |pos: &mut usize, comment: &mut String| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                let start = *pos + 1;
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                let line = String::from_utf8_lossy(&bytes[start..*pos]);
                if !comment.is_empty() {
                    comment.push('\n');
                }
                comment.push_str(line.trim());
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(path, "truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos, &mut comment)? != "P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let width: usize = token(&mut pos, &mut comment)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&mut pos, &mut comment)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&mut pos, &mut comment)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only 8-bit PGM (maxval 255) is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() - pos != n {
        return Err(bad("raster size does not match dimensions"));
    }
    Ok(Pgm {
        width,
        height,
        comment,
        pixels: bytes[pos..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_renders_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        emit_heatmap(&Tensor::full(&[3, 5], 42.0), &path, "").unwrap();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!((pgm.width, pgm.height), (5, 3));
        assert!(pgm.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn min_max_endpoints_hit_zero_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checker.pgm");
        let t = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        emit_heatmap(&t, &path, "").unwrap();
        assert_eq!(read_pgm(&path).unwrap().pixels, vec![0, 255, 255, 0]);
    }

    #[test]
    fn written_file_round_trips_to_the_same_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen::<f64>() * 7.0 - 3.0).collect();
        let t = Tensor::from_vec(vec![4, 6], data.clone()).unwrap();
        emit_heatmap(&t, &path, "").unwrap();

        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expect: Vec<u8> = data.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!((pgm.width, pgm.height), (6, 4));
        assert_eq!(pgm.pixels, expect);
    }

    #[test]
    fn channel_input_mean_pools_before_normalizing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pooled.pgm");
        // Channel means: 1, 2, 3, 4 over a 2×2 plane.
        let t = Tensor::from_vec(
            vec![2, 2, 2],
            vec![0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        emit_heatmap(&t, &path, "").unwrap();
        assert_eq!(read_pgm(&path).unwrap().pixels, vec![0, 85, 170, 255]);
    }

    #[test]
    fn comment_line_carries_version_and_note() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tagged.pgm");
        emit_heatmap(&Tensor::zeros(&[2, 2]), &path, "{\"K\":4}").unwrap();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!(pgm.comment, format!("irdfusion {} {{\"K\":4}}", env!("CARGO_PKG_VERSION")));
    }

    #[test]
    fn wrong_rank_and_non_finite_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        let vector = Tensor::zeros(&[4]);
        assert!(emit_heatmap(&vector, &path, "").is_err());
        let nan = Tensor::from_vec(vec![1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(emit_heatmap(&nan, &path, ""), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reads_reject_truncated_rasters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
