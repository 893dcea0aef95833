//! Checkpoint files and checkpoint averaging.
//!
//! A checkpoint is a text manifest followed by the raw parameter payload:
//!
//! ```text
//! natmtl-checkpoint 1
//! step 400
//! rng batching 1536
//! config model.d_model = 64
//! vocab w3 w0 w7 ...
//! param enc.0.self_attn.q.w 64,64 0 4096
//! ...
//! end
//! <little-endian f64 payload>
//! ```
//!
//! `param` lines give the name, shape, byte offset into the payload and
//! element count.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

const MAGIC: &str = "natmtl-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Named random-stream positions.
    pub rng_state: Vec<(String, u128)>,
    /// Flat `key = value` configuration snapshot.
    pub config: Vec<(String, String)>,
    /// Text tokens of the vocabulary, in id order after the reserved ones.
    pub vocab: Vec<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("step {}\n", self.step));
        for (name, pos) in &self.rng_state {
            head.push_str(&format!("rng {name} {pos}\n"));
        }
        for (k, v) in &self.config {
            head.push_str(&format!("config {k} = {v}\n"));
        }
        head.push_str("vocab");
        for t in &self.vocab {
            head.push(' ');
            head.push_str(t);
        }
        head.push('\n');
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!(
                "param {name} {} {offset} {}\n",
                shape.join(","),
                t.numel()
            ));
            offset += t.numel() * 8;
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest ends without `end`".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut ck = Checkpoint {
            step: 0,
            rng_state: Vec::new(),
            config: Vec::new(),
            vocab: Vec::new(),
            params: ModelParams::new(),
        };
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "step" => {
                    ck.step = rest
                        .parse()
                        .map_err(|_| bad(format!("bad step `{rest}`")))?
                }
                "rng" => {
                    let (name, p) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("bad rng line `{line}`")))?;
                    let p = p
                        .parse()
                        .map_err(|_| bad(format!("bad rng position `{p}`")))?;
                    ck.rng_state.push((name.to_string(), p));
                }
                "config" => {
                    let (k, v) = rest
                        .split_once(" = ")
                        .ok_or_else(|| bad(format!("bad config line `{line}`")))?;
                    ck.config.push((k.to_string(), v.to_string()));
                }
                "vocab" => ck.vocab = rest.split_whitespace().map(str::to_string).collect(),
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("bad param line `{line}`")));
                    }
                    let shape = f[1]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in `{line}`")))?;
                    let offset = f[2]
                        .parse()
                        .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                    let len = f[3]
                        .parse()
                        .map_err(|_| bad(format!("bad length in `{line}`")))?;
                    entries.push((f[0].to_string(), shape, offset, len));
                }
                other => return Err(bad(format!("unknown manifest entry `{other}`"))),
            }
        }
        let payload = &bytes[pos..];
        let mut expect_offset = 0;
        for (name, shape, offset, len) in entries {
            if offset != expect_offset || shape.iter().product::<usize>() != len {
                return Err(bad(format!("inconsistent layout for `{name}`")));
            }
            let end = offset + len * 8;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| bad(format!("payload truncated inside `{name}`")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ck.params.insert(name, Tensor::new(shape, data)?);
            expect_offset = end;
        }
        if expect_offset != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {expect_offset}",
                payload.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Elementwise mean of the parameters of checkpoints with identical
/// parameter manifests. Metadata comes from the last checkpoint.
///
/// The mean is accumulated as `x₀ + Σ(xᵢ - x₀)/k`, which is exact when all
/// inputs agree.
pub fn average_checkpoints(cks: &[Checkpoint]) -> Result<Checkpoint> {
    let (first, last) = match (cks.first(), cks.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::contract("averaging zero checkpoints")),
    };
    for ck in &cks[1..] {
        check_same_manifest(&first.params, &ck.params)?;
    }
    let k = cks.len() as f64;
    let mut params = first.params.clone();
    for (name, t) in params.iter_mut() {
        let base = first.params.get(name).expect("same manifest").data();
        let mut acc = vec![0.0; base.len()];
        for ck in &cks[1..] {
            for ((a, x), b) in acc
                .iter_mut()
                .zip(ck.params.get(name).expect("same manifest").data())
                .zip(base)
            {
                *a += x - b;
            }
        }
        for ((x, a), b) in t.data_mut().iter_mut().zip(&acc).zip(base) {
            // keeps the sign of a zero intact
            if *a != 0.0 {
                *x = b + a / k;
            }
        }
    }
    Ok(Checkpoint {
        params,
        ..last.clone()
    })
}

fn check_same_manifest(a: &ModelParams, b: &ModelParams) -> Result<()> {
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(Error::ManifestMismatch {
                name: na.to_string(),
                detail: format!("other checkpoint has `{nb}` in its place"),
            });
        }
        if ta.shape() != tb.shape() {
            return Err(Error::ManifestMismatch {
                name: na.to_string(),
                detail: format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
    }
    if a.len() != b.len() {
        let (longer, n) = if a.len() > b.len() {
            (a, b.len())
        } else {
            (b, a.len())
        };
        let name = longer.names().nth(n).unwrap_or_default().to_string();
        return Err(Error::ManifestMismatch {
            name,
            detail: "present in only one checkpoint".into(),
        });
    }
    Ok(())
}
