//! File formats: PPM frames, PGM binary masks, and the little-endian
//! `LPRB` probability-mask and `LFLO` flow-field containers.
//!
//! `LPRB`/`LFLO` layout: 4-byte magic, `u32` width, `u32` height, `u32`
//! reserved (0), then row-major `f32` payload (`LFLO` stores `(u, v)` pairs).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FlowField, ProbMask, RgbImage};

const PROB_MAGIC: &[u8; 4] = b"LPRB";
const FLOW_MAGIC: &[u8; 4] = b"LFLO";
const HEADER_LEN: usize = 16;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_prob_mask(m: &ProbMask) -> Vec<u8> {
    let mut out = header(PROB_MAGIC, m.width(), m.height());
    for &v in m.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_prob_mask(bytes: &[u8], path: &Path) -> Result<ProbMask> {
    let (width, height) = parse_header(bytes, PROB_MAGIC, path)?;
    let floats = payload_f32(bytes, width * height, path)?;
    for (i, v) in floats.iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(format_err(
                path,
                HEADER_LEN + 4 * i,
                format!("probability {v} outside [0, 1]"),
            ));
        }
    }
    ProbMask::new(height, width, floats)
}

pub fn write_mask(path: impl AsRef<Path>, m: &ProbMask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_prob_mask(m))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ProbMask> {
    let path = path.as_ref();
    decode_prob_mask(&read_bytes(path)?, path)
}

pub fn encode_flow(f: &FlowField) -> Vec<u8> {
    let mut out = header(FLOW_MAGIC, f.width(), f.height());
    for (u, v) in f.u().iter().zip(f.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let (width, height) = parse_header(bytes, FLOW_MAGIC, path)?;
    let floats = payload_f32(bytes, 2 * width * height, path)?;
    if let Some(i) = floats.iter().position(|v| !v.is_finite()) {
        return Err(format_err(path, HEADER_LEN + 4 * i, "non-finite displacement"));
    }
    let u = floats.iter().step_by(2).copied().collect();
    let v = floats.iter().skip(1).step_by(2).copied().collect();
    FlowField::new(height, width, u, v)
}

pub fn write_flow(path: impl AsRef<Path>, f: &FlowField) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flow(f))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flow(&read_bytes(path)?, path)
}

pub fn encode_ppm(frame: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    for px in frame.pixels() {
        out.extend(px.iter().map(|&c| to_u8(c)));
    }
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (width, height, start) = parse_netpbm_header(bytes, b"P6", path)?;
    let need = 3 * width * height;
    if bytes.len() < start + need {
        return Err(format_err(path, bytes.len(), "truncated PPM payload"));
    }
    let pixels = bytes[start..start + need]
        .chunks_exact(3)
        .map(|c| [from_u8(c[0]), from_u8(c[1]), from_u8(c[2])])
        .collect();
    RgbImage::new(height, width, pixels)
}

pub fn write_frame(path: impl AsRef<Path>, frame: &RgbImage) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(frame))
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&read_bytes(path)?, path)
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.values().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (width, height, start) = parse_netpbm_header(bytes, b"P5", path)?;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(format_err(path, bytes.len(), "truncated PGM payload"));
    }
    let mut values = Vec::with_capacity(need);
    for (i, &b) in bytes[start..start + need].iter().enumerate() {
        match b {
            0 => values.push(false),
            255 => values.push(true),
            other => {
                return Err(format_err(
                    path,
                    start + i,
                    format!("binary mask value {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    BinaryMask::new(height, width, values)
}

pub fn write_binary_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(mask))
}

pub fn read_binary_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    decode_pgm(&read_bytes(path)?, path)
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(b: u8) -> f64 {
    f64::from(b) / 255.0
}

fn header(magic: &[u8; 4], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    if &bytes[..4] != magic {
        return Err(format_err(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let width = le_u32(bytes, 4) as usize;
    let height = le_u32(bytes, 8) as usize;
    if width == 0 || height == 0 {
        return Err(format_err(path, 4, "zero dimension"));
    }
    if le_u32(bytes, 12) != 0 {
        return Err(format_err(path, 12, "reserved field must be 0"));
    }
    Ok((width, height))
}

fn payload_f32(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<f64>> {
    let need = HEADER_LEN + 4 * count;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(format_err(path, need, "trailing bytes after payload"));
    }
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect())
}

/// Parses `magic width height maxval` followed by exactly one whitespace byte.
/// Returns `(width, height, payload_offset)`.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(path, 0, "bad netpbm magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(path, pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, start, "number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, pos, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, 2, "zero dimension"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, pos, "missing separator before payload"));
    }
    Ok((width, height, pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrong_magic_is_a_format_error() {
        let m = ProbMask::filled(2, 2, 0.25).unwrap();
        let mut bytes = encode_prob_mask(&m);
        bytes[0] = b'X';
        let err = decode_prob_mask(&bytes, Path::new("m.lprb")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        assert!(decode_flow(&bytes, Path::new("f.lflo")).is_err());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let m = ProbMask::filled(3, 3, 0.5).unwrap();
        let bytes = encode_prob_mask(&m);
        let err = decode_prob_mask(&bytes[..bytes.len() - 2], Path::new("m")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let m = ProbMask::filled(1, 2, 0.5).unwrap();
        let mut bytes = encode_prob_mask(&m);
        bytes[20..24].copy_from_slice(&1.5f32.to_le_bytes());
        match decode_prob_mask(&bytes, Path::new("m")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 20),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn constant_flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.lflo");
        let f = FlowField::constant(2, 3, 1.5, 0.0);
        write_flow(&path, &f).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        assert!(back.u().iter().all(|&u| u == 1.5));
        assert!(back.v().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_rejects_grey_values() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 128]);
        match decode_pgm(&bytes, Path::new("m.pgm")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ppm_header_accepts_comments() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255u8, 0, 51]);
        let img = decode_ppm(&bytes, Path::new("f.ppm")).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.2]);
    }

    fn f32_grid(len: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(lo..=hi, len).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn prob_mask_round_trips(
            (h, w, vals) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), f32_grid(h * w, 0.0, 1.0)))
        ) {
            let m = ProbMask::new(h, w, vals).unwrap();
            let back = decode_prob_mask(&encode_prob_mask(&m), Path::new("p")).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn flow_round_trips(
            (h, w, u, v) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), f32_grid(h * w, -50.0, 50.0), f32_grid(h * w, -50.0, 50.0))
            })
        ) {
            let f = FlowField::new(h, w, u, v).unwrap();
            let back = decode_flow(&encode_flow(&f), Path::new("f")).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn frames_and_masks_round_trip(
            (h, w, px, bits) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
                (Just(h), Just(w),
                 proptest::collection::vec(any::<[u8; 3]>(), h * w),
                 proptest::collection::vec(any::<bool>(), h * w))
            })
        ) {
            let frame = RgbImage::new(h, w, px.iter().map(|p| p.map(from_u8)).collect()).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&frame), Path::new("f")).unwrap(), frame.clone());
            let mask = BinaryMask::new(h, w, bits).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&mask), Path::new("m")).unwrap(), mask);
        }
    }
}
