//! Line-oriented text checkpoint.
//!
//! ```text
//! cofusion-checkpoint 1
//! strategy mcfm
//! dim 64
//! heads 8
//! mlp_hidden 64
//! dropout 0.5
//! depth 1
//! late_combine mean
//! freeze_encoders false
//! text_input features 768
//! image_input features 512
//! vocab 2
//! "<unk>"
//! "word"
//! params 1
//! param text.projection.weight 2 768 64
//! <one line per row, space-separated values>
//! end
//! ```
//!
//! `text_input` is `features <dim>` or `tokens <embed_dim> <max_tokens>`;
//! `image_input` is `features <dim>` or `patches <patch> <channels> <size>`.
//! The `vocab` section is present only for token input. Values use Rust's
//! shortest round-trip float formatting, so a save/load cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, ImageInputSpec, TextInputSpec};
use crate::tensor::Tensor;

const MAGIC: &str = "cofusion-checkpoint 1";

pub fn to_text(model: &FusionModel) -> String {
    let c = &model.config;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "strategy {}", c.strategy);
    let _ = writeln!(out, "dim {}", c.dim);
    let _ = writeln!(out, "heads {}", c.heads);
    let _ = writeln!(out, "mlp_hidden {}", c.mlp_hidden);
    let _ = writeln!(out, "dropout {}", c.dropout);
    let _ = writeln!(out, "depth {}", c.depth);
    let _ = writeln!(out, "late_combine {}", c.late_combine.as_str());
    let _ = writeln!(out, "freeze_encoders {}", c.freeze_encoders);
    match c.text_input {
        TextInputSpec::Features { dim } => {
            let _ = writeln!(out, "text_input features {dim}");
        }
        TextInputSpec::Tokens {
            embed_dim,
            max_tokens,
        } => {
            let _ = writeln!(out, "text_input tokens {embed_dim} {max_tokens}");
        }
    }
    match c.image_input {
        ImageInputSpec::Features { dim } => {
            let _ = writeln!(out, "image_input features {dim}");
        }
        ImageInputSpec::Patches {
            patch,
            channels,
            image_size,
        } => {
            let _ = writeln!(out, "image_input patches {patch} {channels} {image_size}");
        }
    }
    if let Some(v) = model.vocabulary() {
        let _ = writeln!(out, "vocab {}", v.len());
        for tok in v.tokens() {
            let _ = writeln!(out, "{}", serde_json::to_string(tok).expect("string serialises"));
        }
    }
    let _ = writeln!(out, "params {}", model.store.len());
    for (_, name, t) in model.store.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {name} {} {}", t.rank(), dims.join(" "));
        let cols = t.cols().max(1);
        for row in t.data().chunks(cols) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::Checkpoint("unexpected end of checkpoint".into())),
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line))
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(parts.collect())
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let parts = self.keyed(key)?;
        match parts.as_slice() {
            [v] => v.parse().map_err(|_| self.err(format!("bad value for `{key}`"))),
            _ => Err(self.err(format!("`{key}` takes one value"))),
        }
    }

    fn numbers(&self, parts: &[&str]) -> Result<Vec<usize>> {
        parts
            .iter()
            .map(|p| p.parse().map_err(|_| self.err(format!("bad integer `{p}`"))))
            .collect()
    }
}

pub fn from_text(text: &str) -> Result<FusionModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a cofusion checkpoint"));
    }
    let strategy = lines.value::<String>("strategy")?.parse()?;
    let dim = lines.value("dim")?;
    let heads = lines.value("heads")?;
    let mlp_hidden = lines.value("mlp_hidden")?;
    let dropout = lines.value("dropout")?;
    let depth = lines.value("depth")?;
    let late_combine = lines.value::<String>("late_combine")?.parse()?;
    let freeze_encoders = lines.value("freeze_encoders")?;

    let parts = lines.keyed("text_input")?;
    let text_input = match parts.split_first() {
        Some((&"features", rest)) => match lines.numbers(rest)?[..] {
            [dim] => TextInputSpec::Features { dim },
            _ => return Err(lines.err("text_input features takes one dim")),
        },
        Some((&"tokens", rest)) => match lines.numbers(rest)?[..] {
            [embed_dim, max_tokens] => TextInputSpec::Tokens {
                embed_dim,
                max_tokens,
            },
            _ => return Err(lines.err("text_input tokens takes embed_dim and max_tokens")),
        },
        _ => return Err(lines.err("unknown text_input kind")),
    };
    let parts = lines.keyed("image_input")?;
    let image_input = match parts.split_first() {
        Some((&"features", rest)) => match lines.numbers(rest)?[..] {
            [dim] => ImageInputSpec::Features { dim },
            _ => return Err(lines.err("image_input features takes one dim")),
        },
        Some((&"patches", rest)) => match lines.numbers(rest)?[..] {
            [patch, channels, image_size] => ImageInputSpec::Patches {
                patch,
                channels,
                image_size,
            },
            _ => return Err(lines.err("image_input patches takes patch, channels and size")),
        },
        _ => return Err(lines.err("unknown image_input kind")),
    };

    let config = FusionConfig {
        strategy,
        dim,
        heads,
        mlp_hidden,
        dropout,
        depth,
        late_combine,
        freeze_encoders,
        text_input,
        image_input,
    };

    let mut line = lines.next()?;
    let mut vocab = None;
    if let Some(n) = line.strip_prefix("vocab ") {
        let n: usize = n.trim().parse().map_err(|_| lines.err("bad vocab size"))?;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let l = lines.next()?;
            tokens.push(serde_json::from_str::<String>(l).map_err(|e| lines.err(e))?);
        }
        vocab = Some(Vocabulary::from_tokens(tokens));
        line = lines.next()?;
    }

    let mut model = FusionModel::new(config, vocab, 0)?;
    let n: usize = line
        .strip_prefix("params ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| lines.err("expected `params <count>`"))?;
    if n != model.store.len() {
        return Err(lines.err(format!(
            "checkpoint has {n} parameters, configuration implies {}",
            model.store.len()
        )));
    }
    for _ in 0..n {
        let parts = lines.keyed("param")?;
        let (name, rest) = parts
            .split_first()
            .ok_or_else(|| lines.err("param line needs a name"))?;
        let nums = lines.numbers(rest)?;
        let (rank, dims) = nums
            .split_first()
            .ok_or_else(|| lines.err("param line needs a rank"))?;
        if dims.len() != *rank {
            return Err(lines.err("rank does not match dims"));
        }
        let id = model
            .store
            .id_of(name)
            .ok_or_else(|| lines.err(format!("unknown parameter `{name}`")))?;
        if model.store.get(id).shape() != dims {
            return Err(lines.err(format!(
                "parameter `{name}` has shape {dims:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        let numel: usize = dims.iter().product();
        let cols = model.store.get(id).cols().max(1);
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel / cols {
            let l = lines.next()?;
            for v in l.split_whitespace() {
                let x: f64 = v.parse().map_err(|_| lines.err(format!("bad number `{v}`")))?;
                if !x.is_finite() {
                    return Err(lines.err("non-finite parameter value"));
                }
                data.push(x);
            }
        }
        if data.len() != numel {
            return Err(lines.err(format!("parameter `{name}` has wrong value count")));
        }
        let slot = model.store.get_mut(id);
        *slot = Tensor::new(dims.to_vec(), data)?.with_requires_grad(slot.requires_grad());
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(model)
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FusionModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
