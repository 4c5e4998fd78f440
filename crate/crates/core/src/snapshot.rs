//! Checksummed snapshot container.
//!
//! Layout: one header line `lexmoe-snapshot <version> <body length> <sha256>`
//! followed by the JSON body.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "lexmoe-snapshot";

pub fn encode<S: Serialize>(state: &S) -> Result<Vec<u8>> {
    encode_with_version(state, FORMAT_VERSION)
}

pub(crate) fn encode_with_version<S: Serialize>(state: &S, version: u32) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(state)?;
    let digest = hex::encode(Sha256::digest(&body));
    let mut out = format!("{MAGIC} {version} {} {digest}\n", body.len()).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode<D: DeserializeOwned>(bytes: &[u8]) -> Result<D> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checksum("missing snapshot header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Checksum("unreadable header".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    let [magic, version, len, digest] = parts[..] else {
        return Err(Error::Checksum(format!("malformed header {header:?}")));
    };
    if magic != MAGIC {
        return Err(Error::Checksum("not a snapshot file".into()));
    }
    let version: u32 = version
        .parse()
        .map_err(|_| Error::Checksum(format!("bad version field {version:?}")))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len: usize = len
        .parse()
        .map_err(|_| Error::Checksum(format!("bad length field {len:?}")))?;
    let body = &bytes[nl + 1..];
    if body.len() != len {
        return Err(Error::Checksum(format!(
            "body is {} bytes, header says {len}",
            body.len()
        )));
    }
    if hex::encode(Sha256::digest(body)) != digest {
        return Err(Error::Checksum("sha256 mismatch".into()));
    }
    Ok(serde_json::from_slice(body)?)
}

/// Writes to a sibling temp file and renames it into place.
pub fn save<S: Serialize>(state: &S, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<D: DeserializeOwned>(path: &Path) -> Result<D> {
    decode(&std::fs::read(path)?)
}
