//! `.flo`, PFM, OBJ and calibration files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4};

use super::{FlowResult, StereoRig};
use crate::domain::Vec2;
use crate::error::{Error, Result};

const FLO_MAGIC: f32 = 202021.25;

/// Writes a Middlebury `.flo` file (little endian, magic "PIEH").
pub fn write_flo(path: impl AsRef<Path>, width: usize, height: usize, flow: &[Vec2]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(flow.len(), width * height);
    let mut buf = Vec::with_capacity(12 + 8 * flow.len());
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(width as i32).to_le_bytes());
    buf.extend_from_slice(&(height as i32).to_le_bytes());
    for v in flow {
        buf.extend_from_slice(&(v.x as f32).to_le_bytes());
        buf.extend_from_slice(&(v.y as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<Vec2>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::format(path, "truncated .flo file"))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let flow = (0..w * h)
        .map(|i| {
            let x = f32::from_le_bytes(word(3 + 2 * i).unwrap());
            let y = f32::from_le_bytes(word(4 + 2 * i).unwrap());
            Vec2::new(x as f64, y as f64)
        })
        .collect();
    Ok((w, h, flow))
}

/// Writes a single-channel little-endian PFM; rows go bottom to top.
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), width * height);
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    // three whitespace-terminated header tokens
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if tokens.len() == 4 {
            break;
        }
    }
    pos += 1;
    if tokens.len() < 4 || tokens[0] != "Pf" {
        return Err(Error::format(path, "not a grayscale PFM file"));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad header value `{s}`")));
    let (w, h, scale) = (parse(&tokens[1])? as usize, parse(&tokens[2])? as usize, parse(&tokens[3])?);
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 4 * w * h {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let mut data = vec![0.0; w * h];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Ok((w, h, data))
}

/// Writes the result as a triangle mesh over the pixel lattice. Vertices are
/// triangulated points, or `(x, y, disparity)` without projection matrices;
/// occluded or invalid vertices are dropped with their triangles.
pub fn write_obj(path: impl AsRef<Path>, result: &FlowResult) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = (result.width, result.height);
    let mut index = vec![0usize; w * h];
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    let mut vertices = 0;
    for i in 0..w * h {
        if !result.visible[i] {
            continue;
        }
        let v = match &result.points {
            Some(points) => match points[i] {
                Some(p) => p,
                None => continue,
            },
            None => nalgebra::Vector3::new((i % w) as f64, (i / w) as f64, result.disparity[i]),
        };
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            continue;
        }
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
        vertices += 1;
        index[i] = vertices;
    }
    let mut faces = 0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let (a, b, c, d) = (
                index[y * w + x],
                index[y * w + x + 1],
                index[(y + 1) * w + x],
                index[(y + 1) * w + x + 1],
            );
            for tri in [[a, c, b], [b, c, d]] {
                if tri.iter().all(|v| *v > 0) {
                    writeln!(out, "f {} {} {}", tri[0], tri[1], tri[2]).map_err(io)?;
                    faces += 1;
                }
            }
        }
    }
    out.flush().map_err(io)?;
    Ok((vertices, faces))
}

/// Parses 9 numbers (row-major F), optionally followed by 12 + 12 (P0, P1).
/// `#` starts a comment.
pub fn parse_calibration(text: &str) -> Result<StereoRig> {
    let numbers: Vec<f64> = text
        .lines()
        .map(|l| l.split('#').next().unwrap())
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Calibration(format!("`{t}` is not a number")))
        })
        .collect::<Result<_>>()?;
    let projections = match numbers.len() {
        9 => None,
        33 => {
            let p0 = Matrix3x4::from_row_slice(&numbers[9..21]);
            let p1 = Matrix3x4::from_row_slice(&numbers[21..33]);
            Some([p0, p1])
        }
        n => {
            return Err(Error::Calibration(format!(
                "expected 9 numbers (F) or 33 (F, P0, P1), found {n}"
            )))
        }
    };
    StereoRig::new(Matrix3::from_row_slice(&numbers[..9]), projections)
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<StereoRig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text).map_err(|e| match e {
        Error::Calibration(msg) => Error::Calibration(format!("{}: {msg}", path.display())),
        e => e,
    })
}

pub fn write_calibration(path: impl AsRef<Path>, rig: &StereoRig) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# F (row-major)\n");
    let row = |m: &[f64]| m.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ") + "\n";
    for r in 0..3 {
        text += &row(&[rig.f[(r, 0)], rig.f[(r, 1)], rig.f[(r, 2)]]);
    }
    if let Some(ps) = &rig.projections {
        for (i, p) in ps.iter().enumerate() {
            text += &format!("# P{i}\n");
            for r in 0..3 {
                text += &row(&[p[(r, 0)], p[(r, 1)], p[(r, 2)], p[(r, 3)]]);
            }
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
