use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{ExposureStack, Image, Plane};
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Quantizes a value to a byte: clamp to [0, 1], then round(v * 255)
/// (half away from zero).
#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Loads an 8-bit RGB PNG or a binary PPM (P6, maxval 255). The format is
/// detected from the file contents, not the extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (w, h, raw) = if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(path, &bytes, png::ColorType::Rgb)?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)?
    } else {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "neither PNG nor binary PPM (P6)".into(),
        });
    };
    Image::new(w, h, raw.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Writes an image as 8-bit RGB. `.ppm` paths get binary PPM, everything
/// else PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        out.extend_from_slice(&bytes);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    } else {
        encode_png(
            path,
            img.width(),
            img.height(),
            png::ColorType::Rgb,
            &bytes,
        )
    }
}

/// Writes a plane as an 8-bit grayscale PNG (values clamped to [0, 1]).
pub fn save_plane(plane: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = plane.data().iter().map(|&v| quantize(v)).collect();
    encode_png(
        path.as_ref(),
        plane.width(),
        plane.height(),
        png::ColorType::Grayscale,
        &bytes,
    )
}

/// Writes a label map (one byte per pixel) as an 8-bit grayscale PNG.
pub fn save_labels(width: usize, height: usize, labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "label map {width}x{height} with {} entries",
            labels.len()
        )));
    }
    encode_png(path.as_ref(), width, height, png::ColorType::Grayscale, labels)
}

/// Reads an 8-bit grayscale PNG label map. Returns `(width, height, labels)`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if !bytes.starts_with(&PNG_SIGNATURE) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "label maps must be PNG".into(),
        });
    }
    decode_png(path, &bytes, png::ColorType::Grayscale)
}

fn decode_png(path: &Path, bytes: &[u8], want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let truncated = |e: png::DecodingError| Error::Truncated {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(truncated)?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight || color != want || info.palette.is_some() {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("expected 8-bit {want:?}, found {depth:?}-bit {color:?}"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(truncated)?;
    buf.truncate(frame.buffer_size());
    Ok((frame.width as usize, frame.height as usize, buf))
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let truncated = |detail: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // Header: "P6" then width, height, maxval separated by whitespace, with
    // '#' comments running to end of line, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(truncated("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: "malformed PPM header".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| truncated("header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PPM maxval {maxval}, only 255 is supported"),
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "zero-sized PPM".into(),
        });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(truncated("missing separator after header"));
    }
    pos += 1;
    let need = w * h * 3;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(truncated(&format!(
            "pixel data has {} of {need} bytes",
            body.len()
        )));
    }
    Ok((w, h, body[..need].to_vec()))
}

/// Reads a stack manifest: one `<relative-path> <exposure-seconds>` per line,
/// paths relative to the manifest's directory. Blank lines and `#` comments
/// are ignored.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ExposureStack> {
    let path = path.as_ref();
    let text = String::from_utf8(read_all(path)?).map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut images = Vec::new();
    let mut times = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, time) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| Error::InvalidArgument(format!(
                "{}:{}: expected `<path> <seconds>`",
                path.display(),
                lineno + 1
            )))?;
        let time: f64 = time.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!(
                "{}:{}: bad exposure time {time:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        images.push(load_image(base.join(file.trim()))?);
        times.push(time);
    }
    ExposureStack::new(images, times)
}

/// Writes a manifest listing `files` (relative names) with their times.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(PathBuf, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (file, t) in entries {
        writeln!(out, "{} {}", file.display(), t).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ppm_extremes_decode_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 255, 255, 0, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn byte_128_maps_to_128_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[128, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert!((img.data()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(img.data()[0], 128.0 / 255.0);
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(Error::MissingFile(_))
        ));

        let p = dir.path().join("t.ppm");
        std::fs::write(&p, b"P6 4 4 255\n\x01\x02\x03").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Truncated { .. })));

        std::fs::write(&p, b"P6 1 1 65535\n\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedFormat { .. })));

        // 8-bit grayscale PNG is not accepted as an RGB image.
        let g = dir.path().join("g.png");
        save_plane(&Plane::filled(2, 2, 0.5), &g).unwrap();
        assert!(matches!(load_image(&g), Err(Error::UnsupportedFormat { .. })));

        // Cut a valid PNG in half.
        let full = dir.path().join("full.png");
        save_image(&Image::filled(16, 16, [0.3, 0.6, 0.9]), &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.png");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (w, h) = (13, 7);
        let bytes: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
        ppm.extend_from_slice(&bytes);
        let src = dir.path().join("src.ppm");
        std::fs::write(&src, &ppm).unwrap();

        let img = load_image(&src).unwrap();
        let back = dir.path().join("back.ppm");
        save_image(&img, &back).unwrap();
        assert_eq!(std::fs::read(&back).unwrap(), ppm);

        let png_path = dir.path().join("back.png");
        save_image(&img, &png_path).unwrap();
        let again = load_image(&png_path).unwrap();
        assert_eq!(again, img);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::filled(4, 4, [0.1, 0.1, 0.1]);
        let b = Image::filled(4, 4, [0.8, 0.8, 0.8]);
        save_image(&a, dir.path().join("a.png")).unwrap();
        save_image(&b, dir.path().join("b.png")).unwrap();
        let m = dir.path().join("stack.txt");
        write_manifest(&m, &[("a.png".into(), 0.01), ("b.png".into(), 0.08)]).unwrap();
        let stack = load_manifest(&m).unwrap();
        assert_eq!(stack.len(), 2);
        assert_eq!(stack.times(), &[0.01, 0.08]);
    }
}
