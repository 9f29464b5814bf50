//! Grayscale heatmaps (PGM) and CSV dumps of 2D fields.
//!
//! Images put the first index along the horizontal axis and the second index
//! upwards, so row 0 of the picture is `j = n − 1` (the lid of a cavity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgmFormat {
    /// Plain-text `P2`.
    P2,
    /// Binary `P5`.
    P5,
}

/// Sidecar metadata: the value range mapped onto gray levels 0–255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub format: PgmFormat,
}

fn check_2d(f: &Field) -> Result<(usize, usize)> {
    match f.shape() {
        [w, h] => Ok((*w, *h)),
        s => Err(Error::shape(
            "render",
            format!(
                "field has shape {s:?}; only 2D fields render, select one with --slice <index> \
                 (e.g. --slice 0 for channel 0 of a [C, n, n] field)"
            ),
        )),
    }
}

/// Selects `f[k, …]` from a field with a leading axis.
pub fn slice_leading(f: &Field, k: usize) -> Result<Field> {
    if f.ndim() < 2 {
        return Err(Error::shape("slice", "need at least two axes"));
    }
    f.channel(k)
}

fn gray(v: f64, min: f64, max: f64) -> u8 {
    if max > min && v.is_finite() {
        (((v - min) / (max - min)) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        128
    }
}

/// Min–max normalized 8-bit PGM. A constant field renders uniformly gray.
pub fn render_pgm(f: &Field, format: PgmFormat) -> Result<(Vec<u8>, RenderMeta)> {
    let (w, h) = check_2d(f)?;
    let finite = f.data().iter().copied().filter(|v| v.is_finite());
    let (min, max) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let pixels: Vec<u8> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, h - 1 - r)))
        .map(|(i, j)| gray(f.get(&[i, j]), min, max))
        .collect();
    let mut out = match format {
        PgmFormat::P2 => format!("P2\n{w} {h}\n255\n").into_bytes(),
        PgmFormat::P5 => format!("P5\n{w} {h}\n255\n").into_bytes(),
    };
    match format {
        PgmFormat::P2 => {
            for row in pixels.chunks(w.max(1)) {
                let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        PgmFormat::P5 => out.extend_from_slice(&pixels),
    }
    Ok((
        out,
        RenderMeta {
            width: w,
            height: h,
            min,
            max,
            format,
        },
    ))
}

/// `i,j,value` rows with shortest round-trip formatting.
pub fn render_csv(f: &Field) -> Result<String> {
    let (w, h) = check_2d(f)?;
    let mut s = String::from("i,j,value\n");
    for i in 0..w {
        for j in 0..h {
            s.push_str(&format!("{i},{j},{}\n", f.get(&[i, j])));
        }
    }
    Ok(s)
}

/// Inverse of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Field> {
    let bad = |d: String| Error::Format {
        path: "<csv>".into(),
        detail: d,
    };
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad(format!("line {}: expected 3 columns", k + 1)));
        }
        let i: usize = parts[0].parse().map_err(|_| bad(format!("line {}: bad i", k + 1)))?;
        let j: usize = parts[1].parse().map_err(|_| bad(format!("line {}: bad j", k + 1)))?;
        let v: f64 = parts[2].parse().map_err(|_| bad(format!("line {}: bad value", k + 1)))?;
        rows.push((i, j, v));
    }
    let w = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let h = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != w * h {
        return Err(bad(format!("{} rows for a {w}×{h} grid", rows.len())));
    }
    let mut f = Field::zeros(&[w, h]);
    for (i, j, v) in rows {
        f.set(&[i, j], v);
    }
    Ok(f)
}

/// Parses a PGM produced by [`render_pgm`] into `(width, height, pixels)`, rows top first.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::Format {
        path: "<pgm>".into(),
        detail: d.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let px = match fields[0].as_str() {
        "P5" => bytes.get(pos + 1..).ok_or_else(|| bad("payload"))?.to_vec(),
        "P2" => std::str::from_utf8(&bytes[pos..])
            .map_err(|_| bad("payload"))?
            .split_ascii_whitespace()
            .map(|t| t.parse::<u8>().map_err(|_| bad("pixel")))
            .collect::<Result<Vec<u8>>>()?,
        _ => return Err(bad("unknown magic")),
    };
    if px.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_uniform_gray() {
        for fmt in [PgmFormat::P2, PgmFormat::P5] {
            let (img, meta) = render_pgm(&Field::filled(&[5, 3], 2.5), fmt).unwrap();
            let (w, h, px) = parse_pgm(&img).unwrap();
            assert_eq!((w, h), (5, 3));
            assert!(px.iter().all(|&p| p == 128));
            assert_eq!((meta.min, meta.max), (2.5, 2.5));
        }
    }

    #[test]
    fn orientation_and_range() {
        let f = Field::from_fn(&[4, 4], |ix| (ix[0] + 10 * ix[1]) as f64);
        let (img, meta) = render_pgm(&f, PgmFormat::P5).unwrap();
        let (_, _, px) = parse_pgm(&img).unwrap();
        assert_eq!((meta.min, meta.max), (0.0, 33.0));
        // top-left pixel is i = 0, j = 3; bottom-left is the minimum
        assert_eq!(px[0], gray(30.0, 0.0, 33.0));
        assert_eq!(px[12], 0);
        assert_eq!(px[3], 255);
        let (p2, _) = render_pgm(&f, PgmFormat::P2).unwrap();
        assert_eq!(parse_pgm(&p2).unwrap().2, px);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let f = Field::from_fn(&[3, 5], |ix| (ix[0] as f64 + 0.1).powf(ix[1] as f64 - 2.3) / 7.0);
        assert_eq!(parse_csv(&render_csv(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn non_2d_input_suggests_slicing() {
        let e = render_pgm(&Field::zeros(&[2, 3, 3]), PgmFormat::P2).unwrap_err();
        assert!(e.to_string().contains("--slice"));
        let s = slice_leading(&Field::zeros(&[2, 3, 3]), 1).unwrap();
        assert!(render_pgm(&s, PgmFormat::P2).is_ok());
    }
}
