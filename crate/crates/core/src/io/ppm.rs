//! Binary PPM (P6, 8-bit) frame sequences named `frame_%04d.ppm`.

use std::path::{Path, PathBuf};

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

/// `round(v * 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes one `[C, H, W]` frame; single-channel frames are replicated to RGB.
pub fn encode_frame(frame: &[f64], channels: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let src = if channels == 1 { 0 } else { c };
                out.push(quantize(frame[(src * h + y) * w + x]));
            }
        }
    }
    out
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let corrupt = |offset: usize, msg: &str| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(corrupt(0, "expected P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments between fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(pos, &format!("expected header field {}", ["width", "height", "maxval"][k])));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt(pos, "expected a single whitespace byte after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(corrupt(pos, &format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(corrupt(pos, "zero image extent"));
    }
    Ok(Header { width, height, data_start: pos + 1 })
}

/// Decodes a P6 image into `[3, H, W]` values `byte / 255`.
pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let hd = parse_header(bytes, path)?;
    let (h, w) = (hd.height, hd.width);
    let need = h * w * 3;
    if bytes.len() - hd.data_start < need {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("pixel data truncated: need {need} bytes after offset {}", hd.data_start),
        });
    }
    let px = &bytes[hd.data_start..hd.data_start + need];
    let mut out = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c * h + y) * w + x] = f64::from(px[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Ok((h, w, out))
}

pub fn write_frames(video: &Video, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = (video.channels(), video.height(), video.width());
    for f in 0..video.frames() {
        let p = dir.join(frame_name(f));
        std::fs::write(&p, encode_frame(video.frame(f), c, h, w)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads `frame_0000.ppm ..` from `dir`; indices must be contiguous from 0.
pub fn read_frames(dir: &Path) -> Result<Video> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing { what: "frame directory", path: dir.to_path_buf() }
        } else {
            Error::io(dir, e)
        }
    })?;
    let mut indices: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".ppm"))
            .filter(|s| s.len() == 4)
            .and_then(|s| s.parse::<usize>().ok())
        {
            indices.push((idx, entry.path()));
        }
    }
    indices.sort();
    if indices.is_empty() {
        return Err(Error::Missing { what: "frame_0000.ppm", path: dir.to_path_buf() });
    }
    for (expect, (idx, _)) in indices.iter().enumerate() {
        if *idx != expect {
            return Err(Error::invalid(
                "frame sequence",
                format!("{} is missing; frames must be contiguous from 0", dir.join(frame_name(expect)).display()),
            ));
        }
    }
    let mut data = Vec::new();
    let mut dims = None;
    for (_, p) in &indices {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let (h, w, px) = decode_frame(&bytes, p)?;
        if dims.is_some_and(|d| d != (h, w)) {
            return Err(Error::invalid("frame sequence", format!("{} has a different size", p.display())));
        }
        dims = Some((h, w));
        data.extend(px);
    }
    let (h, w) = dims.expect("at least one frame");
    Video::new(Tensor::new([indices.len(), 3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_quantizes_to_128() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
        let bytes = encode_frame(&[0.5, 0.5, 0.5], 3, 1, 1);
        let (_, _, px) = decode_frame(&bytes, Path::new("m")).unwrap();
        assert_eq!(px, vec![128.0 / 255.0; 3]);
    }

    #[test]
    fn representable_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video::from_fn(3, 3, 4, 5, |i| ((i * 37) % 256) as f64 / 255.0).unwrap();
        write_frames(&v, dir.path()).unwrap();
        assert!(dir.path().join("frame_0002.ppm").exists());
        assert_eq!(read_frames(dir.path()).unwrap(), v);
    }

    #[test]
    fn arbitrary_values_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video::from_fn(2, 3, 3, 3, |i| (i as f64 * 0.618).fract()).unwrap();
        write_frames(&v, dir.path()).unwrap();
        let back = read_frames(dir.path()).unwrap();
        assert!(back.tensor().max_abs_diff(v.tensor()) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn gray_frames_replicate() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video::from_fn(1, 1, 2, 2, |i| i as f64 / 255.0).unwrap();
        write_frames(&v, dir.path()).unwrap();
        let back = read_frames(dir.path()).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(&back.data()[4..8], v.data());
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let (h, w, px) = decode_frame(&bytes, Path::new("m")).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(px, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let cases: [(&[u8], u64); 4] = [
            (b"P5\n1 1\n255\n", 0),
            (b"P6\nx 1\n255\n", 3),
            (b"P6\n1 1\n65535\n", 12),
            (b"P6\n2 2\n255\n\x00\x00", 13),
        ];
        for (bytes, want) in cases {
            match decode_frame(bytes, Path::new("bad.ppm")) {
                Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, want, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn gap_in_sequence_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video::from_fn(3, 3, 2, 2, |_| 0.0).unwrap();
        write_frames(&v, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frame_0001.ppm")).unwrap();
        let err = read_frames(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_0001.ppm"), "{err}");
        assert!(matches!(read_frames(&dir.path().join("none")), Err(Error::Missing { .. })));
    }
}
