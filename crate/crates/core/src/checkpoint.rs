//! Plain-text parameter checkpoints.
//!
//! ```text
//! METADAPT-CKPT v1
//! config_digest <hex>
//! tensor layer0.weight 1 32
//! 1.2345678901234567e-1
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::policy::{Manifest, PolicyParams};
use crate::{Error, Result};

pub const FORMAT_TAG: &str = "METADAPT-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub params: PolicyParams,
}

pub fn checkpoint_to_string(params: &PolicyParams, config_digest: &str) -> String {
    let mut out = format!("{FORMAT_TAG}\nconfig_digest {config_digest}\n");
    for (name, shape, values) in params.tensors() {
        out.push_str("tensor ");
        out.push_str(name);
        for d in shape {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        for v in values {
            writeln!(out, "{v:.16e}").unwrap();
        }
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, FORMAT_TAG)) => {}
        Some((_, tag)) if tag.starts_with("METADAPT-CKPT") => {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version `{tag}`")));
        }
        _ => return Err(Error::Checkpoint("missing `METADAPT-CKPT` header".into())),
    }
    let config_digest = match lines.next() {
        Some((_, line)) if line.starts_with("config_digest ") => line["config_digest ".len()..].to_string(),
        _ => return Err(Error::Checkpoint("line 2: expected `config_digest <hex>`".into())),
    };
    let mut entries = Vec::new();
    let mut values = Vec::new();
    while let Some((i, line)) = lines.next() {
        let mut fields = line.split(' ');
        if fields.next() != Some("tensor") {
            return Err(Error::Checkpoint(format!("line {}: expected a `tensor` block header", i + 1)));
        }
        let name = fields
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::Checkpoint(format!("line {}: tensor block without a name", i + 1)))?
            .to_string();
        let shape = fields
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("block `{name}`: malformed shape")))?;
        let count: usize = shape.iter().product();
        for k in 0..count {
            let (j, v) = match lines.peek() {
                Some((_, l)) if !l.starts_with("tensor ") => lines.next().unwrap(),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "block `{name}`: expected {count} values, found {k}"
                    )))
                }
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("block `{name}`, line {}: malformed number `{v}`", j + 1)))?;
            values.push(v);
        }
        entries.push((name, shape));
    }
    if entries.is_empty() {
        return Err(Error::Checkpoint("no tensor blocks".into()));
    }
    Ok(Checkpoint {
        config_digest,
        params: PolicyParams::unflatten(Manifest::new(entries), values)?,
    })
}

pub fn checkpoint_save(params: &PolicyParams, config_digest: &str, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params, config_digest)).map_err(|source| Error::Io {
        context: format!("writing checkpoint {}", path.display()),
        source,
    })
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: format!("reading checkpoint {}", path.display()),
        source,
    })?;
    parse_checkpoint(&text)
}
