//! FIDS1 archives: a neutral container for factorized image datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)        magic  b"FIDS1\0\0\0"
//! [8..16)       u64    header length N
//! [16..16+N)    UTF-8 JSON header
//! [16+N..)      payload, count·height·width·channels bytes
//! ```
//!
//! Images are stored one after another by flat combination index; within an
//! image pixels are row-major with channels interleaved (`H × W × C`), each
//! pixel quantized as `round(255·p)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorspace::{FactorSpace, FactorSpec};
use crate::image::{quantize, ImageSet};

pub const MAGIC: &[u8; 8] = b"FIDS1\0\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidsHeader {
    pub magic: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub factors: Vec<FactorSpec>,
    pub count: usize,
}

pub fn encode_fids(images: &ImageSet, space: &FactorSpace) -> Result<Vec<u8>> {
    if images.len() != space.total() {
        return Err(Error::shape(format!(
            "{} images for a space of {} combinations",
            images.len(),
            space.total()
        )));
    }
    let header = FidsHeader {
        magic: "FIDS1".into(),
        height: images.height,
        width: images.width,
        channels: images.channels,
        dtype: "u8".into(),
        factors: space.factors().to_vec(),
        count: images.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let (c, h, w) = (images.channels, images.height, images.width);
    let mut out = Vec::with_capacity(16 + json.len() + images.len() * c * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for i in 0..images.len() {
        let px = images.pixels(i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(quantize(px[(ch * h + y) * w + x]));
                }
            }
        }
    }
    Ok(out)
}

pub fn write_fids(images: &ImageSet, space: &FactorSpace, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_fids(images, space)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn decode_fids(bytes: &[u8]) -> Result<(ImageSet, FactorSpace)> {
    if bytes.len() < 16 {
        return Err(Error::Header(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..8])
            .trim_end_matches('\0')
            .to_string();
        return Err(Error::Version {
            expected: "FIDS1".into(),
            found,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(Error::Header(format!(
            "header length {hlen} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let header: FidsHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Header(e.to_string()))?;
    if header.magic != "FIDS1" {
        return Err(Error::Version {
            expected: "FIDS1".into(),
            found: header.magic,
        });
    }
    if header.dtype != "u8" {
        return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
    }
    let space = FactorSpace::new(header.factors.clone()).map_err(|e| Error::Header(e.to_string()))?;
    if header.count != space.total() {
        return Err(Error::Header(format!(
            "count {} differs from the product of factor cardinalities {}",
            header.count,
            space.total()
        )));
    }
    let (c, h, w) = (header.channels, header.height, header.width);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Header("zero image dimension".into()));
    }
    let payload = &body[hlen..];
    let expected = header.count * c * h * w;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let mut data = vec![0.0; expected];
    let per = c * h * w;
    for (src, dst) in payload.chunks_exact(per).zip(data.chunks_exact_mut(per)) {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    dst[(ch * h + y) * w + x] = src[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
    }
    Ok((ImageSet::new(c, h, w, data)?, space))
}

pub fn read_fids(path: impl AsRef<Path>) -> Result<(ImageSet, FactorSpace)> {
    decode_fids(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_full, DatasetDef, RenderSpec};

    fn circles() -> (ImageSet, FactorSpace) {
        let def = DatasetDef::circles(8, 8).unwrap();
        let imgs = generate_full(&def, &RenderSpec::new(16, 1)).unwrap();
        (imgs, def.space)
    }

    #[test]
    fn round_trip_through_file() {
        let (imgs, space) = circles();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fids");
        write_fids(&imgs, &space, &path).unwrap();
        let (back, space2) = read_fids(&path).unwrap();
        assert_eq!(space2, space);
        assert_eq!(back, imgs.quantized());
        assert_eq!(back.len(), 64);
        let names: Vec<_> = space2.factors().iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["posX", "posY"]);
    }

    #[test]
    fn quantization_endpoints() {
        let space = FactorSpace::new(vec![FactorSpec::ordinal("a", 2)]).unwrap();
        let imgs = ImageSet::new(1, 1, 2, vec![1.0, 0.0, 0.5, 0.2]).unwrap();
        let bytes = encode_fids(&imgs, &space).unwrap();
        let payload = &bytes[bytes.len() - 4..];
        assert_eq!(payload, &[255, 0, 128, 51]);
        let (back, _) = decode_fids(&bytes).unwrap();
        assert_eq!(back.pixels(0), &[1.0, 0.0]);
    }

    #[test]
    fn color_layout_is_interleaved() {
        let space = FactorSpace::new(vec![FactorSpec::ordinal("a", 1)]).unwrap();
        // CHW: red plane then green then blue for a 1x2 image
        let imgs = ImageSet::new(3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_fids(&imgs, &space).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode_fids(&bytes).unwrap().0, imgs);
    }

    #[test]
    fn count_mismatch_rejected_on_write() {
        let (imgs, _) = circles();
        let space = FactorSpace::new(vec![FactorSpec::ordinal("a", 3)]).unwrap();
        assert!(matches!(encode_fids(&imgs, &space), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_payload() {
        let (imgs, space) = circles();
        let bytes = encode_fids(&imgs, &space).unwrap();
        let err = decode_fids(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::PayloadLength { expected, actual } => {
                assert_eq!(expected, 64 * 256);
                assert_eq!(actual, 64 * 256 - 10);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err_msg(&bytes[..bytes.len() - 10]).contains("payload length"));
    }

    fn err_msg(bytes: &[u8]) -> String {
        decode_fids(bytes).unwrap_err().to_string()
    }

    #[test]
    fn wrong_magic_is_version_error() {
        let (imgs, space) = circles();
        let mut bytes = encode_fids(&imgs, &space).unwrap();
        bytes[4] = b'2';
        assert!(matches!(
            decode_fids(&bytes),
            Err(Error::Version { found, .. }) if found == "FIDS2"
        ));
    }

    #[test]
    fn header_count_must_match_space() {
        let (imgs, space) = circles();
        let bytes = encode_fids(&imgs, &space).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: FidsHeader = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header.count = 63;
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[16 + hlen..]);
        assert!(matches!(decode_fids(&forged), Err(Error::Header(_))));
    }

    #[test]
    fn malformed_header() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&5u64.to_le_bytes());
        bytes.extend_from_slice(b"{oops");
        assert!(matches!(decode_fids(&bytes), Err(Error::Header(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (imgs, space) = circles();
        assert_eq!(encode_fids(&imgs, &space).unwrap(), encode_fids(&imgs, &space).unwrap());
    }
}
