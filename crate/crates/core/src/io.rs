//! Binary PPM (P6) images, PGM (P5) masks and atomic file writes.
//!
//! Images map bytes `0..=255` linearly onto `[-1, 1]`; masks map `{0, 255}`
//! onto `{0, 1}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::StateTensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 {
        return Err(Error::Format("file too short for a netpbm header".into()));
    }
    let magic = [buf[0], buf[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("expected a header number at byte {start}")));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("header number out of range".into()))?;
    }
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("invalid dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit maxval 255 is supported, got {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    debug_assert_eq!(h.maxval, 255);
    let need = h.width * h.height * channels;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(Error::Format(format!("truncated payload: {have} of {need} bytes")));
    }
    Ok(&buf[h.data_start..h.data_start + need])
}

pub fn decode_ppm(buf: &[u8]) -> Result<StateTensor> {
    let h = parse_header(buf)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let px = payload(buf, &h, 3)?;
    let hw = h.width * h.height;
    let mut data = vec![0.0; 3 * hw];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = rgb[c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    StateTensor::new(h.height, h.width, 3, data)
}

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &StateTensor) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::shape("3 channels", img.channels()));
    }
    let (h, w, _) = img.dims();
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push(to_byte(img.data()[c * hw + i]));
        }
    }
    Ok(out)
}

/// Reads a P6 image, optionally enforcing its dimensions.
pub fn read_image(path: impl AsRef<Path>, expect: Option<(usize, usize)>) -> Result<StateTensor> {
    let img = decode_ppm(&fs::read(path)?)?;
    if let Some((h, w)) = expect {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(
                format!("{h}x{w}"),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
    }
    Ok(img)
}

pub fn write_image(img: &StateTensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img)?)
}

/// One-channel `{0, 1}` mask as P5 `{0, 255}`; values are thresholded at 0.5.
pub fn encode_pgm_mask(mask: &StateTensor) -> Result<Vec<u8>> {
    if mask.channels() != 1 {
        return Err(Error::shape("1 channel", mask.channels()));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    Ok(out)
}

pub fn decode_pgm_mask(buf: &[u8]) -> Result<StateTensor> {
    let h = parse_header(buf)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let px = payload(buf, &h, 1)?;
    let data = px
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(Error::Format(format!("mask byte {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    StateTensor::new(h.height, h.width, 1, data)
}

pub fn write_mask(mask: &StateTensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm_mask(mask)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<StateTensor> {
    decode_pgm_mask(&fs::read(path)?)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ppm_round_trip_within_one_level(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..h * w * 3).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let img = StateTensor::new(h, w, 3, data).unwrap();
            let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            // bytes span 2/255 of the [-1,1] range, i.e. 1/255 of display range
            let err = back.max_abs_diff(&img).unwrap() / 2.0;
            prop_assert!(err <= 1.0 / 255.0 * 0.5 + 1e-12);
        }
    }

    #[test]
    fn header_with_comments() {
        let mut buf = b"P6\n# made by hand\n2 1\n# another\n255\n".to_vec();
        buf.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&buf).unwrap();
        assert_eq!(img.dims(), (1, 2, 3));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(2, 0, 0), -1.0);
        assert_eq!(img.get(2, 0, 1), 1.0);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err());
        assert!(decode_ppm(b"P6\nx 2\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
        assert!(decode_pgm_mask(b"P5\n1 1\n255\n\x07").is_err());
    }

    #[test]
    fn mask_round_trip_and_dims_check() {
        let m = StateTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(decode_pgm_mask(&encode_pgm_mask(&m).unwrap()).unwrap(), m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        write_image(&StateTensor::zeros(3, 4, 3), &p).unwrap();
        assert!(read_image(&p, Some((3, 4))).is_ok());
        assert!(read_image(&p, Some((4, 4))).is_err());
    }
}
