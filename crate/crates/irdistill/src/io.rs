//! Bit-exact file formats: 16-bit PGM for images, 8-bit PGM for masks, and
//! the `SSAM1` checkpoint container of named float blocks.

use std::fs;
use std::path::Path;

use crate::tensor::{Module, Real, Tensor};
use crate::{Error, Result};

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSAM1";

const IMAGE_MAXVAL: u32 = 65535;
const MASK_MAXVAL: u32 = 255;

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, msg: msg.into() })
}

/// Write a (H, W) image with values in [0, 1] as a binary PGM with 16-bit
/// big-endian samples; each pixel is stored as round(65535·v).
pub fn write_image_pgm<F: Real>(path: &Path, image: &Tensor<F>) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("write_image_pgm: {:?} is not (H, W)", s)));
    }
    let mut buf = format!("P5\n{} {}\n{IMAGE_MAXVAL}\n", s[1], s[0]).into_bytes();
    for v in image.data() {
        let q = (IMAGE_MAXVAL as f64 * v.as_f64().clamp(0.0, 1.0)).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Write a binary (H, W) mask as an 8-bit PGM holding 0 or 255.
pub fn write_mask_pgm<F: Real>(path: &Path, mask: &Tensor<F>) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("write_mask_pgm: {:?} is not (H, W)", s)));
    }
    let mut buf = format!("P5\n{} {}\n{MASK_MAXVAL}\n", s[1], s[0]).into_bytes();
    for v in mask.data() {
        let v = v.as_f64();
        if v != 0.0 && v != 1.0 {
            return Err(Error::Contract(format!("write_mask_pgm: value {v} is not 0 or 1")));
        }
        buf.push(if v == 1.0 { 255 } else { 0 });
    }
    fs::write(path, buf)?;
    Ok(())
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return format_err(0, "missing P5 magic");
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return format_err(pos, "truncated header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return format_err(pos, format!("expected digits for header field {i}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = match text.parse() {
            Ok(v) => v,
            Err(_) => return format_err(start, format!("header field {i} out of range")),
        };
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return format_err(pos, "expected whitespace after maxval"),
        None => return format_err(pos, "truncated header"),
    }
    if fields[0] == 0 || fields[1] == 0 {
        return format_err(2, "zero image dimension");
    }
    Ok(PgmHeader {
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval: fields[2] as u32,
        data_offset: pos,
    })
}

/// Read a 16-bit PGM written by [`write_image_pgm`] back into values in
/// [0, 1]; quantization bounds the roundtrip error by 1/65535 per pixel.
pub fn read_image_pgm<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path)?;
    let h = parse_pgm_header(&bytes)?;
    if h.maxval != IMAGE_MAXVAL {
        return format_err(h.data_offset, format!("image maxval {} is not {IMAGE_MAXVAL}", h.maxval));
    }
    let need = 2 * h.width * h.height;
    let data = &bytes[h.data_offset..];
    if data.len() != need {
        return format_err(
            h.data_offset + data.len().min(need),
            format!("pixel payload is {} bytes, expected {need}", data.len()),
        );
    }
    let t = Tensor::from_fn(&[h.height, h.width], |i| {
        let raw = u16::from_be_bytes([data[2 * i], data[2 * i + 1]]);
        F::f(raw as f64 / IMAGE_MAXVAL as f64)
    });
    Ok(t)
}

/// Read an 8-bit binary mask PGM back as exact 0/1 values.
pub fn read_mask_pgm<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path)?;
    let h = parse_pgm_header(&bytes)?;
    if h.maxval != MASK_MAXVAL {
        return format_err(h.data_offset, format!("mask maxval {} is not {MASK_MAXVAL}", h.maxval));
    }
    let need = h.width * h.height;
    let data = &bytes[h.data_offset..];
    if data.len() != need {
        return format_err(
            h.data_offset + data.len().min(need),
            format!("pixel payload is {} bytes, expected {need}", data.len()),
        );
    }
    let mut out = Tensor::zeros(&[h.height, h.width]);
    for (i, &b) in data.iter().enumerate() {
        out.data_mut()[i] = match b {
            0 => F::f(0.0),
            255 => F::f(1.0),
            other => return format_err(h.data_offset + i, format!("mask byte {other} is not 0 or 255")),
        };
    }
    Ok(out)
}

/// Ordered, named blocks of 32-bit floats; the on-disk form is the magic
/// followed by (name length, name, value count, little-endian values) per
/// block, and save→load→save reproduces the file byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: &str, values: Vec<f32>) -> Result<()> {
        if self.blocks.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("checkpoint: duplicate block {name}")));
        }
        self.blocks.push((name.to_string(), values));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn blocks(&self) -> &[(String, Vec<f32>)] {
        &self.blocks
    }

    pub fn push_tensor<F: Real>(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        self.push(name, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Overwrite a tensor in place from the block of the same name; the
    /// element count must match exactly.
    pub fn read_into<F: Real>(&self, name: &str, t: &mut Tensor<F>) -> Result<()> {
        let block = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint: missing block {name}")))?;
        if block.len() != t.numel() {
            return Err(Error::Contract(format!(
                "checkpoint: block {name} holds {} values, tensor wants {}",
                block.len(),
                t.numel()
            )));
        }
        for (dst, src) in t.data_mut().iter_mut().zip(block) {
            *dst = F::f(*src as f64);
        }
        Ok(())
    }

    /// Store every parameter of a module under `prefix.<param name>`.
    pub fn push_module<F: Real, M: Module<F>>(&mut self, prefix: &str, m: &M) -> Result<()> {
        for (name, t) in m.params() {
            self.push_tensor(&join(prefix, &name), t)?;
        }
        Ok(())
    }

    /// Restore every parameter of a module from `prefix.<param name>`.
    pub fn load_module<F: Real, M: Module<F>>(&self, prefix: &str, m: &mut M) -> Result<()> {
        for (name, t) in m.params_mut() {
            self.read_into(&join(prefix, &name), t)?;
        }
        Ok(())
    }

    /// Store a u64 as two float bit patterns (low word, high word).
    pub fn push_u64(&mut self, name: &str, v: u64) -> Result<()> {
        let lo = f32::from_bits(v as u32);
        let hi = f32::from_bits((v >> 32) as u32);
        self.push(name, vec![lo, hi])
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint: missing block {name}")))?;
        if b.len() != 2 {
            return Err(Error::Contract(format!("checkpoint: block {name} is not a u64")));
        }
        Ok(b[0].to_bits() as u64 | (b[1].to_bits() as u64) << 32)
    }

    /// Store raw bytes: one float carrying the length, then the payload
    /// packed four bytes per float bit pattern.
    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut values = vec![f32::from_bits(bytes.len() as u32)];
        for chunk in bytes.chunks(4) {
            let mut word = [0u8; 4];
            word[..chunk.len()].copy_from_slice(chunk);
            values.push(f32::from_bits(u32::from_le_bytes(word)));
        }
        self.push(name, values)
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let b = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint: missing block {name}")))?;
        if b.is_empty() {
            return Err(Error::Contract(format!("checkpoint: block {name} is not a byte blob")));
        }
        let len = b[0].to_bits() as usize;
        if b.len() != 1 + len.div_ceil(4) {
            return Err(Error::Contract(format!("checkpoint: block {name} length mismatch")));
        }
        let mut out = Vec::with_capacity(len);
        for word in &b[1..] {
            out.extend_from_slice(&word.to_bits().to_le_bytes());
        }
        out.truncate(len);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        for (name, values) in &self.blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
        {
            return format_err(0, "missing SSAM1 magic");
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let mut out = Checkpoint::new();
        let take_u32 = |pos: &mut usize, bytes: &[u8]| -> Result<u32> {
            let Some(raw) = bytes.get(*pos..*pos + 4) else {
                return format_err(*pos, "truncated block header");
            };
            *pos += 4;
            Ok(u32::from_le_bytes(raw.try_into().expect("4-byte slice")))
        };
        while pos < bytes.len() {
            let name_len = take_u32(&mut pos, &bytes)? as usize;
            let Some(name_raw) = bytes.get(pos..pos + name_len) else {
                return format_err(pos, "truncated block name");
            };
            let Ok(name) = std::str::from_utf8(name_raw) else {
                return format_err(pos, "block name is not UTF-8");
            };
            let name = name.to_string();
            pos += name_len;
            let count = take_u32(&mut pos, &bytes)? as usize;
            let Some(payload) = bytes.get(pos..pos + 4 * count) else {
                return format_err(pos, format!("truncated payload for block {name}"));
            };
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect();
            pos += 4 * count;
            if out.push(&name, values).is_err() {
                return format_err(pos, format!("duplicate block {name}"));
            }
        }
        Ok(out)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Router;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn constant_half_image_stores_the_midpoint_code() {
        let d = dir();
        let path = d.path().join("half.pgm");
        write_image_pgm(&path, &Tensor::full(&[4, 5], 0.5f64)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n5 4\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        for px in bytes[header.len()..].chunks(2) {
            assert_eq!(u16::from_be_bytes([px[0], px[1]]), 32768);
        }
    }

    #[test]
    fn image_roundtrip_stays_within_one_quantizer_step() {
        let d = dir();
        let path = d.path().join("img.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_fn(&[16, 16], |_| rng.gen_range(0.0..=1.0f64));
        write_image_pgm(&path, &img).unwrap();
        let back = read_image_pgm::<f64>(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let d = dir();
        let path = d.path().join("mask.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = Tensor::from_fn(&[9, 7], |_| if rng.gen_bool(0.3) { 1.0f64 } else { 0.0 });
        write_mask_pgm(&path, &mask).unwrap();
        let back = read_mask_pgm::<f64>(&path).unwrap();
        assert_eq!(back.shape(), mask.shape());
        assert_eq!(back.data(), mask.data());
    }

    #[test]
    fn non_binary_mask_values_are_rejected_on_write() {
        let d = dir();
        let err = write_mask_pgm(&d.path().join("bad.pgm"), &Tensor::full(&[2, 2], 0.5f64));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn stray_mask_bytes_are_rejected_on_read() {
        let d = dir();
        let path = d.path().join("gray.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 7]);
        std::fs::write(&path, bytes).unwrap();
        match read_mask_pgm::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_image_reports_the_byte_offset() {
        let d = dir();
        let path = d.path().join("short.pgm");
        write_image_pgm(&path, &Tensor::full(&[4, 4], 0.25f64)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_image_pgm::<f64>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn header_comments_and_padding_parse() {
        let d = dir();
        let path = d.path().join("weird.pgm");
        let mut bytes = b"P5 # a comment\n# another\n 2 2\n# last\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let mask = read_mask_pgm::<f64>(&path).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn wrong_magic_is_a_format_error_at_offset_zero() {
        let d = dir();
        let path = d.path().join("nope.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\n\0").unwrap();
        match read_mask_pgm::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let d = dir();
        let a = d.path().join("a.ckpt");
        let b = d.path().join("b.ckpt");
        let mut ck = Checkpoint::new();
        ck.push("w", vec![0.0, -0.0, 1.5e-38, f32::from_bits(0x7fc0_0001)]).unwrap();
        ck.push("meta.epoch", vec![42.0]).unwrap();
        ck.push_u64("meta.seed", 0xdead_beef_0077_5511u64).unwrap();
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.get_u64("meta.seed").unwrap(), 0xdead_beef_0077_5511u64);
    }

    #[test]
    fn checkpoint_preserves_block_order_and_uniqueness() {
        let mut ck = Checkpoint::new();
        ck.push("b", vec![1.0]).unwrap();
        ck.push("a", vec![2.0]).unwrap();
        let names: Vec<&str> = ck.blocks().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert!(matches!(ck.push("a", vec![3.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_byte_blobs_roundtrip() {
        let mut ck = Checkpoint::new();
        ck.push_bytes("meta.ids", b"scene-000001\nscene-000002").unwrap();
        ck.push_bytes("meta.empty", b"").unwrap();
        assert_eq!(ck.get_bytes("meta.ids").unwrap(), b"scene-000001\nscene-000002");
        assert_eq!(ck.get_bytes("meta.empty").unwrap(), b"");
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let d = dir();
        let path = d.path().join("trunc.ckpt");
        let mut ck = Checkpoint::new();
        ck.push("block", vec![1.0, 2.0, 3.0]).unwrap();
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"WRONG").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn modules_roundtrip_through_checkpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let router = Router::<f32>::new(8, &mut rng);
        let mut ck = Checkpoint::new();
        ck.push_module("layer3.router", &router).unwrap();
        let mut fresh = Router::<f32>::new(8, &mut ChaCha8Rng::seed_from_u64(99));
        ck.load_module("layer3.router", &mut fresh).unwrap();
        for ((_, a), (_, b)) in router.params().iter().zip(fresh.params()) {
            assert_eq!(a.data(), b.data());
        }
        let err = ck.load_module("missing", &mut fresh);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
