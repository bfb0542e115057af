//! Binary checkpoints with bit-exact parameter round trips.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NRFA"                        magic, 4 bytes
//! version                       u32, currently 1
//! config length                 u32, then that many bytes of config text
//! sections until end of file:
//!     name length               u32, then that many bytes of UTF-8 name
//!     element count             u64
//!     elements                  count x f64 bit patterns
//! ```
//!
//! Sections hold every model parameter under its canonical name, the
//! completed step count under `train.step`, and optionally the optimizer
//! state (`adam.steps`, then `adam.m.<name>` / `adam.v.<name>` per
//! parameter). Floats travel as raw bit patterns, so save/load round trips
//! are bitwise even for values Display would mangle.

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::io::config::RunConfig;
use crate::model::NerfaModel;
use crate::optim::{Adam, MomentSlot};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NRFA";
const VERSION: u32 = 1;
const STEP_SECTION: &str = "train.step";
const ADAM_STEPS_SECTION: &str = "adam.steps";

/// A fully loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: NerfaModel,
    /// Completed training steps.
    pub step: u64,
    pub adam: Option<Adam>,
}

/// Serializes and atomically writes a checkpoint. Pass the optimizer to
/// make the checkpoint resumable; the step count is taken from it (or 0).
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &NerfaModel,
    adam: Option<&Adam>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let config_text = config.to_text();
    push_u32(&mut buf, config_text.len() as u32);
    buf.extend_from_slice(config_text.as_bytes());

    model.visit_params(&mut |name, t| push_section(&mut buf, &name, t.values()));
    let step = adam.map_or(0, |a| a.steps());
    push_section(&mut buf, STEP_SECTION, &[step as f64]);
    if let Some(adam) = adam {
        push_section(&mut buf, ADAM_STEPS_SECTION, &[adam.steps() as f64]);
        for slot in adam.slots() {
            push_section(&mut buf, &format!("adam.m.{}", slot.name), &slot.m);
            push_section(&mut buf, &format!("adam.v.{}", slot.name), &slot.v);
        }
    }
    atomic_write(path, &buf)
}

/// Reads and validates a checkpoint. Magic, version, and every length are
/// checked before any model is constructed; the section set must match the
/// embedded config exactly.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, not a checkpoint",
            &magic[..4.min(magic.len())]
        )));
    }
    let version = r.take_u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.take_u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config text")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = RunConfig::parse(config_text)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;

    let mut sections: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    while !r.done() {
        let name_len = r.take_u32("section name length")? as usize;
        let name_bytes = r.take(name_len, "section name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let count = r.take_u64(&format!("element count of '{name}'"))? as usize;
        let byte_len = count.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("section '{name}' claims an impossible element count"))
        })?;
        let data = r.take(byte_len, &format!("elements of '{name}'"))?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if sections.insert(name.clone(), values).is_some() {
            return Err(Error::Format(format!("duplicate section '{name}'")));
        }
    }

    // The section set must be exactly the parameters plus the step, with
    // the optimizer block all-or-nothing.
    let mut model = NerfaModel::new(config.model_config())?;
    let mut expected: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, t| expected.push((name, t.len())));
    let has_adam = sections.contains_key(ADAM_STEPS_SECTION);
    let mut wanted: Vec<(String, usize)> = expected.clone();
    wanted.push((STEP_SECTION.into(), 1));
    if has_adam {
        wanted.push((ADAM_STEPS_SECTION.into(), 1));
        for (name, len) in &expected {
            wanted.push((format!("adam.m.{name}"), *len));
            wanted.push((format!("adam.v.{name}"), *len));
        }
    }
    for (name, len) in &wanted {
        match sections.get(name) {
            None => return Err(Error::Format(format!("missing section '{name}'"))),
            Some(values) if values.len() != *len => {
                return Err(Error::Format(format!(
                    "section '{name}' has {} elements, config implies {len}",
                    values.len()
                )))
            }
            Some(_) => {}
        }
    }
    if sections.len() != wanted.len() {
        let known: Vec<&String> = wanted.iter().map(|(n, _)| n).collect();
        let extra = sections
            .keys()
            .find(|k| !known.contains(k))
            .expect("count mismatch implies an extra section");
        return Err(Error::Format(format!("unexpected section '{extra}'")));
    }

    model.visit_params_mut(&mut |name, t| {
        t.values_mut().copy_from_slice(&sections[&name]);
    });
    let step = read_count(&sections[STEP_SECTION], STEP_SECTION)?;
    let adam = if has_adam {
        let steps = read_count(&sections[ADAM_STEPS_SECTION], ADAM_STEPS_SECTION)?;
        let slots: Vec<MomentSlot> = expected
            .iter()
            .map(|(name, _)| MomentSlot {
                name: name.clone(),
                m: sections[&format!("adam.m.{name}")].clone(),
                v: sections[&format!("adam.v.{name}")].clone(),
            })
            .collect();
        Some(Adam::from_state(steps, slots, &model)?)
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        model,
        step,
        adam,
    })
}

fn read_count(values: &[f64], name: &str) -> Result<u64> {
    let v = values[0];
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53)) {
        return Err(Error::Format(format!(
            "section '{name}' holds {v}, not a step count"
        )));
    }
    Ok(v as u64)
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_section(buf: &mut Vec<u8>, name: &str, values: &[f64]) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u64(buf, values.len() as u64);
    for v in values {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn take_u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
