//! Binary PPM/PGM images and clip directories.
//!
//! A clip directory holds `frames.tsr`, `masks.tsr`, `flows_fwd.tsr`,
//! `flows_bwd.tsr` and a `manifest.txt` of `key=value` lines. Frames can also
//! be exported as `frame_NNN.ppm` and masks as `mask_NNN.pgm`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{FlowField, Motion};
use crate::numerics::{tsr1, Tensor};
use crate::synth::clip::{SyntheticClip, Texture};
use crate::synth::mask::{MaskKind, MaskSpec};

/// `[-1, 1]` to a byte.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Byte to `[-1, 1]`.
pub fn from_byte(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Encodes a `[3, H, W]` frame in `[-1, 1]` as binary PPM.
pub fn encode_ppm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

/// Encodes an `[H, W]` or `[1, H, W]` plane in `[0, 1]` as binary PGM.
pub fn encode_pgm(plane: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = plane.shape();
    let (h, w) = match *s {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(Error::shape("encode_pgm", format!("expected [H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.data().iter().map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("truncated {magic} header")));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ascii header".into()))?);
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found '{}'", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field '{s}'")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("only 8-bit images are supported, maxval {max}")));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Decodes binary PPM into `[3, H, W]` in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, body) = parse_header(bytes, "P6")?;
    if body.len() != 3 * h * w {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", body.len(), 3 * h * w)));
    }
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        from_byte(body[3 * p + c])
    }))
}

/// Decodes binary PGM into `[H, W]` in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, body) = parse_header(bytes, "P5")?;
    if body.len() != h * w {
        return Err(Error::Format(format!("PGM body has {} bytes, expected {}", body.len(), h * w)));
    }
    Ok(Tensor::from_fn([h, w], |i| body[i] as f32 / 255.0))
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A clip with its corruption masks: everything training and evaluation need.
#[derive(Debug, Clone)]
pub struct ClipBundle {
    pub clip: SyntheticClip,
    /// `[T, 1, H, W]`, 1 = valid.
    pub masks: Tensor<f32>,
    pub mask_spec: MaskSpec,
    pub mask_seed: u64,
}

fn stack_flows(flows: &[FlowField], h: usize, w: usize) -> Result<Tensor<f32>> {
    let data: Vec<f32> = flows.iter().flat_map(|f| f.tensor().data().iter().copied()).collect();
    Tensor::new([flows.len(), h, w, 2], data)
}

fn unstack_flows(t: &Tensor<f32>) -> Result<Vec<FlowField>> {
    if t.rank() != 4 || t.shape()[3] != 2 {
        return Err(Error::Format(format!("flow stack must be [N, H, W, 2], got {:?}", t.shape())));
    }
    (0..t.shape()[0]).map(|i| FlowField::new(t.index0(i)?)).collect()
}

/// Writes a bundle into `dir` (created if needed).
pub fn write_bundle(dir: &Path, b: &ClipBundle, export_images: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &b.clip;
    let (t, h, w) = (c.frames_len(), c.height(), c.width());
    tsr1::save(dir.join("frames.tsr"), &c.frames)?;
    tsr1::save(dir.join("masks.tsr"), &b.masks)?;
    tsr1::save(dir.join("flows_fwd.tsr"), &stack_flows(&c.flows_fwd, h, w)?)?;
    tsr1::save(dir.join("flows_bwd.tsr"), &stack_flows(&c.flows_bwd, h, w)?)?;
    let s = &b.mask_spec;
    let manifest = format!(
        "frames={t}\nheight={h}\nwidth={w}\nmotion={}\ntexture={}\nseed={}\nmask_kind={}\nmask_band={}\nmask_step_sigma={}\nmask_animate_prob={}\nmask_seed={}\n",
        c.motion, c.texture, c.seed, s.kind, s.band, s.step_sigma, s.animate_prob, b.mask_seed
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    if export_images {
        for i in 0..t {
            fs::write(dir.join(format!("frame_{i:03}.ppm")), encode_ppm(&c.frames.index0(i)?)?)?;
            fs::write(dir.join(format!("mask_{i:03}.pgm")), encode_pgm(&b.masks.index0(i)?)?)?;
        }
    }
    Ok(())
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<ClipBundle> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let kv: BTreeMap<String, String> = parse_key_values(&text)?.into_iter().collect();
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("manifest lacks '{k}'")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Format(format!("manifest '{k}' is not a number"))) };
    let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("manifest '{k}' is not an integer"))) };
    let frames: Tensor<f32> = tsr1::load_as(dir.join("frames.tsr"))?;
    let masks: Tensor<f32> = tsr1::load_as(dir.join("masks.tsr"))?;
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 || masks.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::Format(format!("frames {:?} and masks {:?} disagree", s, masks.shape())));
    }
    let clip = SyntheticClip {
        flows_fwd: unstack_flows(&tsr1::load_as(dir.join("flows_fwd.tsr"))?)?,
        flows_bwd: unstack_flows(&tsr1::load_as(dir.join("flows_bwd.tsr"))?)?,
        motion: get("motion")?.parse::<Motion>()?,
        texture: Texture::parse(get("texture")?)?,
        seed: int("seed")?,
        frames,
    };
    let mask_spec = MaskSpec {
        kind: MaskKind::parse(get("mask_kind")?)?,
        band: int("mask_band")? as u8,
        step_sigma: num("mask_step_sigma")?,
        animate_prob: num("mask_animate_prob")?,
    };
    Ok(ClipBundle { clip, masks, mask_spec, mask_seed: int("mask_seed")? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_bytes_round_trip() {
        let frame = Tensor::from_fn([3, 2, 3], |i| from_byte((i * 13) as u8));
        let bytes = encode_ppm(&frame).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn pgm_round_trip_and_white() {
        let bytes = encode_pgm(&Tensor::ones([2, 2])).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[255; 4]);
        assert_eq!(decode_pgm(&bytes).unwrap(), Tensor::ones([2, 2]));
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values("# header\na = 1\n\nb=x # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert!(parse_key_values("novalue").is_err());
    }
}
