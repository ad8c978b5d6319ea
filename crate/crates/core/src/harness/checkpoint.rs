//! Binary network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "GMCK"
//! version    u32       1
//! role       u8        1 victim policy, 2 victim value, 3 adversary mask, 4 adversary value
//! manifest   u32 len + UTF-8 text, one `key=value` per line
//! payload    u64 count + count × f32, row-major, layer order (W, b per layer, then log_std)
//! checksum   32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Parameters are narrowed to `f32` on save.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{Head, Layer, MlpParams};

pub const MAGIC: &[u8; 4] = b"GMCK";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    VictimPolicy,
    VictimValue,
    AdversaryMask,
    AdversaryValue,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::VictimPolicy => 1,
            Role::VictimValue => 2,
            Role::AdversaryMask => 3,
            Role::AdversaryValue => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        Some(match tag {
            1 => Role::VictimPolicy,
            2 => Role::VictimValue,
            3 => Role::AdversaryMask,
            4 => Role::AdversaryValue,
            _ => return None,
        })
    }

    pub fn head(self) -> Head {
        match self {
            Role::VictimPolicy => Head::GaussianPolicy,
            Role::VictimValue | Role::AdversaryValue => Head::ScalarValue,
            Role::AdversaryMask => Head::MaskProbability,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::VictimPolicy => "victim-policy",
            Role::VictimValue => "victim-value",
            Role::AdversaryMask => "adversary-mask",
            Role::AdversaryValue => "adversary-value",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Role::VictimPolicy,
            Role::VictimValue,
            Role::AdversaryMask,
            Role::AdversaryValue,
        ]
        .into_iter()
        .find(|r| r.to_string() == s)
        .ok_or_else(|| Error::config("role", format!("unknown role `{s}`")))
    }
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub params: MlpParams<f32>,
}

fn manifest(params: &MlpParams<f32>, role: Role) -> String {
    let mut m = format!("role={role}\n");
    for l in &params.layers {
        m.push_str(&format!(
            "layer={}x{}\n",
            l.weight.nrows(),
            l.weight.ncols()
        ));
    }
    if let Some(ls) = &params.log_std {
        m.push_str(&format!("log_std={}\n", ls.len()));
    }
    m
}

pub fn encode(role: Role, params: &MlpParams<f32>) -> Vec<u8> {
    let text = manifest(params, role);
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(64 + text.len() + 4 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(role.tag());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Layer shapes as (out, in) and the log-std length, if any.
type Architecture = (Vec<(usize, usize)>, Option<usize>);

fn parse_manifest(text: &str, role: Role) -> std::result::Result<Architecture, String> {
    let mut layers = Vec::new();
    let mut log_std = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("bad manifest line `{line}`"))?;
        match k {
            "role" => {
                if v != role.to_string() {
                    return Err(format!("manifest role `{v}` disagrees with tag `{role}`"));
                }
            }
            "layer" => {
                let (o, i) = v
                    .split_once('x')
                    .ok_or_else(|| format!("bad layer shape `{v}`"))?;
                let o = o.parse().map_err(|_| format!("bad layer shape `{v}`"))?;
                let i = i.parse().map_err(|_| format!("bad layer shape `{v}`"))?;
                layers.push((o, i));
            }
            "log_std" => log_std = Some(v.parse().map_err(|_| format!("bad log_std `{v}`"))?),
            other => return Err(format!("unknown manifest key `{other}`")),
        }
    }
    if layers.is_empty() {
        return Err("manifest lists no layers".into());
    }
    if layers.windows(2).any(|w| w[0].0 != w[1].1) {
        return Err("layer shapes do not chain".into());
    }
    if (role.head() == Head::GaussianPolicy) != log_std.is_some() {
        return Err("log_std presence does not match role".into());
    }
    Ok((layers, log_std))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
        return Err("file too short".into());
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if Sha256::digest(body).as_slice() != sum {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let tag = r.take(1)?[0];
    let role = Role::from_tag(tag).ok_or_else(|| format!("unknown role tag {tag}"))?;
    let mlen = r.u32()? as usize;
    let text =
        std::str::from_utf8(r.take(mlen)?).map_err(|_| "manifest is not UTF-8".to_string())?;
    let (shapes, log_std) = parse_manifest(text, role)?;
    let count = r.u64()? as usize;
    let expected: usize =
        shapes.iter().map(|&(o, i)| o * i + o).sum::<usize>() + log_std.unwrap_or(0);
    if count != expected {
        return Err(format!(
            "payload has {count} values, manifest implies {expected}"
        ));
    }
    let raw = r.take(count.checked_mul(4).ok_or("payload size overflow")?)?;
    if r.pos != body.len() {
        return Err("trailing bytes before checksum".into());
    }
    let mut vals = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut layers = Vec::with_capacity(shapes.len());
    for &(o, i) in &shapes {
        let w: Vec<f32> = vals.by_ref().take(o * i).collect();
        let b: Vec<f32> = vals.by_ref().take(o).collect();
        layers.push(Layer {
            weight: Array2::from_shape_vec((o, i), w).map_err(|e| e.to_string())?,
            bias: Array1::from(b),
        });
    }
    let log_std = log_std.map(|n| Array1::from_iter(vals.by_ref().take(n)));
    Ok(Checkpoint {
        role,
        params: MlpParams {
            layers,
            head: role.head(),
            log_std,
        },
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    decode_inner(bytes).map_err(|reason| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn save(path: &Path, role: Role, params: &MlpParams<f64>) -> Result<()> {
    let narrow = params.map(|v| v as f32);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(role, &narrow)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, widening to `f64`, and checks its role.
pub fn load(path: &Path, expected: Role) -> Result<MlpParams<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&bytes, path)?;
    if ck.role != expected {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected a {expected} checkpoint, found {}", ck.role),
        });
    }
    Ok(ck.params.map(|v| v as f64))
}

/// Git-style object hash of a file: hex SHA-256 over `blob <len>\0` followed
/// by the bytes, as `git hash-object` computes in a SHA-256 repository.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(blob_hash(&bytes))
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut framed = format!("blob {}\0", bytes.len()).into_bytes();
    framed.extend_from_slice(bytes);
    hex_digest(&framed)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, NetSpec};
    use crate::rng;

    #[test]
    fn blob_hash_matches_git_object_format() {
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    fn policy() -> MlpParams<f64> {
        let mut p = init_params::<f64, _>(&NetSpec::victim_policy(10, 2), &mut rng::seeded(3));
        p.log_std = Some(Array1::from(vec![-0.3, 0.1]));
        p
    }

    #[test]
    fn round_trip_is_exact_after_narrowing() {
        let p = policy();
        let narrow = p.map(|v| v as f32);
        let bytes = encode(Role::VictimPolicy, &narrow);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.role, Role::VictimPolicy);
        assert_eq!(back.params, narrow);
        // a second trip through the format is the identity
        assert_eq!(encode(Role::VictimPolicy, &back.params), bytes);
    }

    #[test]
    fn file_round_trip_and_role_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/victim.gmck");
        let p = policy();
        save(&path, Role::VictimPolicy, &p).unwrap();
        let loaded = load(&path, Role::VictimPolicy).unwrap();
        assert_eq!(loaded, p.map(|v| v as f32 as f64));
        save(&path, Role::VictimPolicy, &loaded).unwrap();
        assert_eq!(load(&path, Role::VictimPolicy).unwrap(), loaded);
        assert!(load(&path, Role::AdversaryMask).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(Role::VictimPolicy, &policy().map(|v| v as f32));
        let p = Path::new("x.gmck");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            decode(&flipped, p),
            Err(Error::CorruptCheckpoint { .. })
        ));
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic, p).is_err());
        assert!(decode(&[], p).is_err());
    }

    #[test]
    fn manifest_must_match_payload() {
        let mut p = policy().map(|v| v as f32);
        let good = encode(Role::VictimPolicy, &p);
        p.log_std = None;
        // policy role without log_std is rejected even with a valid checksum
        let bad = encode(Role::VictimPolicy, &p);
        assert!(decode(&bad, Path::new("y")).is_err());
        assert!(decode(&good, Path::new("y")).is_ok());
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = encode(
            Role::AdversaryMask,
            &init_params::<f32, _>(&NetSpec::adversary_mask(4), &mut rng::seeded(0)),
        );
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 3);
    }
}
