//! Stream container and latent transport.
//!
//! Layout, all integers big-endian: `"PCIC"`, version `u8`, flags `u8`,
//! lambda index `u8`, original height `u16`, original width `u16`,
//! `z_len u32`, z payload, `y_len u32`, y payload.

use super::coder::{decode_value, encode_value, GaussianModel, RangeDecoder, RangeEncoder, TableModel};
use super::entropy::SIGMA_MIN;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCIC";
pub const VERSION: u8 = 1;
/// Bytes of a stream with both payloads empty.
pub const HEADER_BYTES: usize = 4 + 1 + 1 + 1 + 2 + 2 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub conditional: bool,
    pub zeros: bool,
    pub encoder_only: bool,
    pub decoder_only: bool,
}

impl Flags {
    pub fn to_byte(self) -> u8 {
        self.conditional as u8 | (self.zeros as u8) << 1 | (self.encoder_only as u8) << 2 | (self.decoder_only as u8) << 3
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        if b & 0xF0 != 0 {
            return Err(Error::MalformedBitstream(format!("reserved flag bits set: {b:#04x}")));
        }
        let f = Self {
            conditional: b & 1 != 0,
            zeros: b & 2 != 0,
            encoder_only: b & 4 != 0,
            decoder_only: b & 8 != 0,
        };
        if f.encoder_only && f.decoder_only {
            return Err(Error::MalformedBitstream("encoder-only and decoder-only both set".into()));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub flags: Flags,
    pub lambda_index: u8,
    pub height: u16,
    pub width: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    pub fn len(&self) -> usize {
        HEADER_BYTES + self.z_payload.len() + self.y_payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.header.flags.to_byte());
        out.push(self.header.lambda_index);
        out.extend_from_slice(&self.header.height.to_be_bytes());
        out.extend_from_slice(&self.header.width.to_be_bytes());
        for payload in [&self.z_payload, &self.y_payload] {
            out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedBitstream(m.to_string());
        if bytes.len() < HEADER_BYTES {
            return Err(bad("stream shorter than the header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::MalformedBitstream(format!("unsupported version {}", bytes[4])));
        }
        let flags = Flags::from_byte(bytes[5])?;
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let header = Header {
            flags,
            lambda_index: bytes[6],
            height: u16_at(7),
            width: u16_at(9),
        };
        let mut pos = 11;
        let mut payload = || -> Result<Vec<u8>> {
            let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated length"))?;
            let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 4;
            let data = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated payload"))?;
            pos += len;
            Ok(data.to_vec())
        };
        let z_payload = payload()?;
        let y_payload = payload()?;
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            header,
            z_payload,
            y_payload,
        })
    }
}

/// Quantized latents as integer symbols. `y` holds offsets from the
/// predicted mean, so `ŷ = y + μ`; `z` holds `ẑ` itself.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LatentPair {
    /// `[C, H, W]` of `y`.
    pub y_shape: [usize; 3],
    pub y: Vec<i32>,
    pub z_shape: [usize; 3],
    pub z: Vec<i32>,
}

/// Per-element Gaussian parameters of `ŷ`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntropyParameters {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// Scale handed to the coder: at least [`SIGMA_MIN`], always in `f64`.
pub fn coder_sigma(s: f32) -> f64 {
    (s as f64).max(SIGMA_MIN)
}

/// Per-channel tables of the factorized density.
pub type ZTables = [TableModel];

pub fn encode_z(z: &[i32], shape: [usize; 3], tables: &ZTables) -> Vec<u8> {
    let plane = shape[1] * shape[2];
    let mut enc = RangeEncoder::new();
    for (i, &v) in z.iter().enumerate() {
        encode_value(&mut enc, &tables[i / plane], v);
    }
    enc.finish()
}

pub fn decode_z(payload: &[u8], shape: [usize; 3], tables: &ZTables) -> Result<Vec<i32>> {
    let plane = shape[1] * shape[2];
    let mut dec = RangeDecoder::new(payload);
    let out = (0..shape.iter().product::<usize>())
        .map(|i| decode_value(&mut dec, &tables[i / plane]))
        .collect();
    check_overrun(&dec, "z")?;
    Ok(out)
}

pub fn encode_y(y: &[i32], sigma: &[f32]) -> Vec<u8> {
    assert_eq!(y.len(), sigma.len());
    let mut enc = RangeEncoder::new();
    for (&v, &s) in y.iter().zip(sigma) {
        encode_value(&mut enc, &GaussianModel::new(coder_sigma(s)), v);
    }
    enc.finish()
}

pub fn decode_y(payload: &[u8], sigma: &[f32]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload);
    let out = sigma
        .iter()
        .map(|&s| decode_value(&mut dec, &GaussianModel::new(coder_sigma(s))))
        .collect();
    check_overrun(&dec, "y")?;
    Ok(out)
}

fn check_overrun(dec: &RangeDecoder<'_>, which: &str) -> Result<()> {
    // A valid stream is flushed with enough bytes to never read past its
    // end by more than the decoder's lookahead.
    if dec.overrun() > 4 {
        return Err(Error::MalformedBitstream(format!("{which} payload ended early")));
    }
    Ok(())
}

/// Code both latents. `params` must be the ones derived from `pair.z`.
pub fn encode_bitstream(pair: &LatentPair, params: &EntropyParameters, tables: &ZTables, header: Header) -> Bitstream {
    Bitstream {
        header,
        z_payload: encode_z(&pair.z, pair.z_shape, tables),
        y_payload: encode_y(&pair.y, &params.sigma),
    }
}

/// Inverse of [`encode_bitstream`]; `params_from_z` recomputes the entropy
/// parameters from the decoded hyper-latents, as a real decoder must.
pub fn decode_bitstream(
    stream: &Bitstream,
    y_shape: [usize; 3],
    z_shape: [usize; 3],
    tables: &ZTables,
    params_from_z: impl FnOnce(&[i32]) -> Result<EntropyParameters>,
) -> Result<LatentPair> {
    let z = decode_z(&stream.z_payload, z_shape, tables)?;
    let params = params_from_z(&z)?;
    if params.sigma.len() != y_shape.iter().product::<usize>() {
        return Err(Error::Shape("entropy parameters do not match y".into()));
    }
    let y = decode_y(&stream.y_payload, &params.sigma)?;
    Ok(LatentPair { y_shape, y, z_shape, z })
}
