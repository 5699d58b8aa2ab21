//! Text checkpoints.
//!
//! ```text
//! exitwise-ckpt v1
//! input_dim 2
//! exit_count 4
//! hidden_width 16
//! disc_width 16
//! class_count 2
//! param trunk.1.weight 2 16
//! <2 lines of 16 space-separated values>
//! param trunk.1.bias 1 16
//! ...
//! end
//! ```
//!
//! Values use 17 significant digits, which round-trips every `f64` exactly.
//! Momentum buffers are not stored; a loaded network starts with zero
//! velocity.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{CascadeConfig, MultiExitNet};
use crate::error::{Error, Result};
use crate::numerics::{DenseLayer, Matrix};

pub const CHECKPOINT_HEADER: &str = "exitwise-ckpt v1";

fn layers(net: &MultiExitNet) -> Vec<(String, &DenseLayer)> {
    let mut out = Vec::new();
    for (i, l) in net.trunk.iter().enumerate() {
        out.push((format!("trunk.{}", i + 1), l));
    }
    for (i, l) in net.heads.iter().enumerate() {
        out.push((format!("head.{}", i + 1), l));
    }
    for (i, d) in net.discriminators.iter().enumerate() {
        out.push((format!("disc.{}.hidden", i + 1), &d.hidden));
        out.push((format!("disc.{}.output", i + 1), &d.output));
    }
    out
}

fn layers_mut(net: &mut MultiExitNet) -> Vec<&mut DenseLayer> {
    let mut out: Vec<&mut DenseLayer> = Vec::new();
    out.extend(net.trunk.iter_mut());
    out.extend(net.heads.iter_mut());
    for d in &mut net.discriminators {
        out.push(&mut d.hidden);
        out.push(&mut d.output);
    }
    out
}

fn write_block<W: Write>(out: &mut W, name: &str, rows: usize, cols: usize, values: &[f64]) -> io::Result<()> {
    writeln!(out, "param {name} {rows} {cols}")?;
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(net: &MultiExitNet, mut out: W) -> io::Result<()> {
    let c = &net.config;
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "input_dim {}", c.input_dim)?;
    writeln!(out, "exit_count {}", c.exit_count)?;
    writeln!(out, "hidden_width {}", c.hidden_width)?;
    writeln!(out, "disc_width {}", c.disc_width)?;
    writeln!(out, "class_count {}", c.class_count)?;
    for (name, layer) in layers(net) {
        let (r, cols) = layer.weights.shape();
        write_block(&mut out, &format!("{name}.weight"), r, cols, layer.weights.data())?;
        write_block(&mut out, &format!("{name}.bias"), 1, cols, &layer.bias)?;
    }
    writeln!(out, "end")
}

pub fn save_checkpoint(net: &MultiExitNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultiExitNet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                msg: "unexpected end of checkpoint".into(),
            }),
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn read_usize_field(lines: &mut Lines<'_>, key: &str) -> Result<usize> {
    let (n, line) = lines.next()?;
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(v), None) if k == key => v.parse().map_err(|_| parse_err(n, format!("bad value for {key}"))),
        _ => Err(parse_err(n, format!("expected `{key} <count>`"))),
    }
}

fn read_block(lines: &mut Lines<'_>, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let (n, line) = lines.next()?;
    let want = format!("param {name} {rows} {cols}");
    if line.trim_end() != want {
        return Err(parse_err(n, format!("expected `{want}`, found `{line}`")));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (n, line) = lines.next()?;
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| parse_err(n, format!("bad value `{tok}`")))?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(parse_err(n, format!("expected {cols} values in {name}")));
        }
    }
    Ok(values)
}

/// Parses a checkpoint; never returns a partially filled network.
pub fn read_checkpoint(text: &str) -> Result<MultiExitNet> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (_, header) = lines.next().map_err(|_| Error::Format("empty checkpoint".into()))?;
    let header = header.trim_end();
    if header != CHECKPOINT_HEADER {
        return Err(match header.strip_prefix("exitwise-ckpt ") {
            Some(v) => Error::Format(format!("unsupported checkpoint version `{v}`")),
            None => Error::Format("not an exitwise checkpoint".into()),
        });
    }
    let config = CascadeConfig {
        input_dim: read_usize_field(&mut lines, "input_dim")?,
        exit_count: read_usize_field(&mut lines, "exit_count")?,
        hidden_width: read_usize_field(&mut lines, "hidden_width")?,
        disc_width: read_usize_field(&mut lines, "disc_width")?,
        class_count: read_usize_field(&mut lines, "class_count")?,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut net = MultiExitNet::zeros(config)?;
    let names: Vec<String> = layers(&net).into_iter().map(|(n, _)| n).collect();
    for (name, layer) in names.iter().zip(layers_mut(&mut net)) {
        let (r, c) = layer.weights.shape();
        let w = read_block(&mut lines, &format!("{name}.weight"), r, c)?;
        let b = read_block(&mut lines, &format!("{name}.bias"), 1, c)?;
        *layer = DenseLayer::from_parts(Matrix::new(r, c, w)?, b)?;
    }
    let (n, end) = lines.next()?;
    if end.trim_end() != "end" {
        return Err(parse_err(n, "expected `end`"));
    }
    Ok(net)
}
