//! Line-oriented checkpoint files.
//!
//! ```text
//! TEXTHEADS-CKPT v1
//! arch=<head>
//! <config key=value lines>
//! vocab=<hex code points of ids 3, 4, …>
//!
//! <param name>
//! <shape dims>
//! <values, 17 significant digits>
//! …
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::heads::HeadKind;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &str = "TEXTHEADS-CKPT";
pub const VERSION: &str = "v1";

pub fn render_checkpoint(model: &Model) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "arch={}", model.kind());
    for line in model.config.to_lines() {
        let _ = writeln!(s, "{line}");
    }
    let vocab: Vec<String> = model.vocab.chars().iter().map(|&c| format!("{:X}", c as u32)).collect();
    let _ = writeln!(s, "vocab={}", vocab.join(" "));
    let _ = writeln!(s);
    for (_, p) in model.params.iter() {
        let _ = writeln!(s, "{}", p.name);
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{}", dims.join(" "));
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    s
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    parse_checkpoint(&fs::read_to_string(path)?, None)
}

/// Like [`load_checkpoint`] but fails unless the file holds `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: HeadKind) -> Result<Model> {
    parse_checkpoint(&fs::read_to_string(path)?, Some(expected))
}

fn malformed(line: usize, msg: impl Into<String>) -> Error {
    CheckpointError::Malformed { line, msg: msg.into() }.into()
}

pub fn parse_checkpoint(content: &str, expected: Option<HeadKind>) -> Result<Model> {
    let mut lines = content.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, magic) = lines.next().ok_or_else(|| CheckpointError::Truncated("empty file".into()))?;
    match magic.split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, other)) => return Err(CheckpointError::Version(other.to_string()).into()),
        _ => return Err(CheckpointError::BadMagic(magic.to_string()).into()),
    }

    let mut arch = None;
    let mut vocab = None;
    let mut config_lines = Vec::new();
    loop {
        let (no, line) =
            lines.next().ok_or_else(|| CheckpointError::Truncated("header has no terminating blank line".into()))?;
        if line.is_empty() {
            break;
        }
        match line.split_once('=') {
            Some(("arch", v)) => arch = Some((no, v)),
            Some(("vocab", v)) => vocab = Some((no, v)),
            Some(_) => config_lines.push(line),
            None => return Err(malformed(no, format!("expected key=value, got {line:?}"))),
        }
    }
    let (arch_line, arch) = arch.ok_or_else(|| malformed(1, "missing arch"))?;
    let kind: HeadKind = arch.parse().map_err(|e: Error| malformed(arch_line, e.to_string()))?;
    if let Some(exp) = expected {
        if exp != kind {
            return Err(CheckpointError::KindMismatch { expected: exp.to_string(), found: kind.to_string() }.into());
        }
    }
    let config = TrainConfig::from_lines(config_lines).map_err(|e| malformed(1, e.to_string()))?;
    if config.head != kind {
        return Err(malformed(arch_line, format!("arch={kind} but head={}", config.head)));
    }
    let (vocab_line, vocab) = vocab.ok_or_else(|| malformed(1, "missing vocab"))?;
    let chars = vocab
        .split_whitespace()
        .map(|h| u32::from_str_radix(h, 16).ok().and_then(char::from_u32))
        .collect::<Option<Vec<char>>>()
        .ok_or_else(|| malformed(vocab_line, "bad code point in vocab"))?;
    let vocab = Vocabulary::from_chars(chars).map_err(|e| malformed(vocab_line, e.to_string()))?;

    let mut model = Model::skeleton(&config, vocab)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.param(id).name.clone();
        let expected_shape = model.params.get(id).shape().to_vec();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::from(CheckpointError::Truncated(format!("missing {what} of {name}"))))
        };
        let (no, found_name) = next("name")?;
        if found_name != name {
            return Err(malformed(no, format!("expected parameter {name}, found {found_name:?}")));
        }
        let (no, shape_line) = next("shape")?;
        let shape = shape_line
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| malformed(no, format!("bad shape {shape_line:?}")))?;
        if shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch { name, expected: expected_shape, found: shape }.into());
        }
        let (no, value_line) = next("values")?;
        let values = value_line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| malformed(no, format!("bad value in {name}")))?;
        let n: usize = shape.iter().product();
        if values.len() < n {
            return Err(CheckpointError::Truncated(format!("{name} has {} of {n} values", values.len())).into());
        }
        if values.len() > n {
            return Err(malformed(no, format!("{name} has {} values, expected {n}", values.len())));
        }
        *model.params.get_mut(id) = Tensor::new(&shape, values)?;
    }
    if let Some((no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(malformed(no, format!("unexpected trailing content {extra:?}")));
    }
    Ok(model)
}
