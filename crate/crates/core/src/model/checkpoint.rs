//! Text checkpoints: a header line, then one section per tensor.
//!
//! ```text
//! unida-checkpoint 1
//! @extractor.0.weight 64 16
//! <16 values>     (64 lines)
//! @extractor.0.bias 1 64
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Linear, ModelParams};
use crate::error::{Error, Result};
use crate::math::Tensor2;

const MAGIC: &str = "unida-checkpoint 1";

pub(crate) fn format_checkpoint(params: &ModelParams) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (name, t) in params.named_tensors() {
        let _ = writeln!(out, "@{name} {} {}", t.rows(), t.cols());
        for row in t.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&path.display().to_string(), &text)
}

pub(crate) fn parse_checkpoint(path: &str, text: &str) -> Result<ModelParams> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((n, l)) => return Err(err(n, format!("expected '{MAGIC}', got '{l}'"))),
        None => return Err(err(1, "empty checkpoint".into())),
    }

    let mut tensors: Vec<(String, Tensor2)> = Vec::new();
    while let Some((n, header)) = lines.next() {
        let Some(rest) = header.strip_prefix('@') else {
            return Err(err(
                n,
                format!("expected a '@name rows cols' section, got '{header}'"),
            ));
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(n, format!("malformed section header '{header}'")));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(n, format!("invalid dimension '{s}'")))
        };
        let (rows, cols) = (dim(fields[1])?, dim(fields[2])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, line) = match lines.peek() {
                Some(&(ln, l)) if !l.starts_with('@') => (ln, l),
                _ => return Err(err(n, format!("section {} ends early", fields[0]))),
            };
            lines.next();
            let before = data.len();
            for f in line.split_whitespace() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(ln, format!("non-numeric field '{f}'")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(err(
                    ln,
                    format!("expected {cols} values, found {}", data.len() - before),
                ));
            }
        }
        let t = Tensor2::from_vec(rows, cols, data).map_err(|e| err(n, e.to_string()))?;
        tensors.push((fields[0].to_string(), t));
    }

    let mut take = |name: String| -> Result<Tensor2> {
        let pos = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| err(0, format!("missing tensor '{name}'")))?;
        Ok(tensors.remove(pos).1)
    };
    let mut layer = |prefix: &str| -> Result<Linear> {
        Ok(Linear {
            weight: take(format!("{prefix}.weight"))?,
            bias: take(format!("{prefix}.bias"))?,
        })
    };

    let mut extractor = Vec::new();
    let mut i = 0;
    loop {
        let prefix = format!("extractor.{i}");
        match layer(&prefix) {
            Ok(l) => extractor.push(l),
            Err(_) if i > 0 => break,
            Err(e) => return Err(e),
        }
        i += 1;
    }
    let closed_head = layer("closed")?;
    let ova_bank = (0..closed_head.out_dim())
        .map(|k| layer(&format!("ova.{k}")))
        .collect::<Result<Vec<_>>>()?;
    if let Some((name, _)) = tensors.first() {
        return Err(err(0, format!("unexpected tensor '{name}'")));
    }
    let params = ModelParams {
        extractor,
        closed_head,
        ova_bank,
    };
    params.validate()?;
    Ok(params)
}
