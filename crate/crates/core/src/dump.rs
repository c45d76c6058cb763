//! Text dump of co-attention weights and spatial log maps.
//!
//! A dump is a sequence of blocks separated by blank lines. Each block is
//! a header line followed by `rows` lines of `cols` whitespace-separated
//! reals, laid out as the feature grid (row = y, column = x):
//!
//! ```text
//! layer=2 query=5 head=0 scale=1 kind=attn rows=4 cols=4
//! 0.01 0.02 0.01 0
//! ...
//! ```
//!
//! `kind` is `attn` (post-softmax weights) or `logmap`. Head-shared log
//! maps are written once with `head=0`. Reals use the shortest decimal
//! form that parses back to the same value, so dumps round-trip exactly.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tape::Graph;
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Attn,
    LogMap,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Attn => "attn",
            GridKind::LogMap => "logmap",
        })
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(GridKind::Attn),
            "logmap" => Ok(GridKind::LogMap),
            _ => Err(Error::format("grid dump", format!("unknown kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridBlock {
    pub layer: usize,
    pub query: usize,
    pub head: usize,
    pub scale: usize,
    pub kind: GridKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GridBlock {
    /// Normalized `(x, y)` of the highest-valued cell center.
    pub fn peak(&self) -> (f64, f64) {
        let k = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(k, _)| k);
        let (x, y) = (k % self.cols, k / self.cols);
        ((x as f64 + 0.5) / self.cols as f64, (y as f64 + 0.5) / self.rows as f64)
    }
}

pub fn write_grids(blocks: &[GridBlock], mut w: impl Write) -> Result<()> {
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        writeln!(
            w,
            "layer={} query={} head={} scale={} kind={} rows={} cols={}",
            b.layer, b.query, b.head, b.scale, b.kind, b.rows, b.cols
        )?;
        for row in b.values.chunks(b.cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn parse_grids(r: impl BufRead) -> Result<Vec<GridBlock>> {
    let bad = |msg: String| Error::format("grid dump", msg);
    let mut blocks = Vec::new();
    let mut lines = r.lines().enumerate();
    while let Some((n, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value, got {tok:?}", n + 1)))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| bad(format!("line {}: missing {k}", n + 1)))?
                .parse()
                .map_err(|_| bad(format!("line {}: bad {k}", n + 1)))
        };
        let kind: GridKind = fields
            .get("kind")
            .ok_or_else(|| bad(format!("line {}: missing kind", n + 1)))?
            .parse()?;
        let (rows, cols) = (num("rows")?, num("cols")?);
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (m, row) = lines.next().ok_or_else(|| bad("truncated block".into()))?;
            let row = row?;
            let before = values.len();
            for tok in row.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(format!("line {}: bad value {tok:?}", m + 1)))?,
                );
            }
            if values.len() - before != cols {
                return Err(bad(format!("line {}: expected {cols} values", m + 1)));
            }
        }
        blocks.push(GridBlock {
            layer: num("layer")?,
            query: num("query")?,
            head: num("head")?,
            scale: num("scale")?,
            kind,
            rows,
            cols,
            values,
        });
    }
    Ok(blocks)
}

/// Attention and log-map grids of every layer, query, head and scale for
/// one image.
pub fn dump_attention(network: &Network, store: &ParamStore, image: &[f64]) -> Result<Vec<GridBlock>> {
    let mut g = Graph::new();
    let out = network.forward(&mut g, store, &[image])?;
    let mut blocks = Vec::new();
    for (l, layer) in out.decoded.layers.iter().enumerate() {
        for (j, s) in out.memory.scales.iter().enumerate() {
            let (rows, cols) = (s.height, s.width);
            let mut push = |v: crate::tape::Var, kind: GridKind| {
                let shape = g.shape(v).to_vec();
                let (heads, queries) = (shape[1], shape[2]);
                let vals = g.value(v);
                for q in 0..queries {
                    for h in 0..heads {
                        let at = (h * queries + q) * rows * cols;
                        blocks.push(GridBlock {
                            layer: l,
                            query: q,
                            head: h,
                            scale: j,
                            kind,
                            rows,
                            cols,
                            values: vals[at..at + rows * cols].to_vec(),
                        });
                    }
                }
            };
            push(layer.cross_weights[j], GridKind::Attn);
            if let Some(m) = layer.log_maps[j] {
                push(m, GridKind::LogMap);
            }
        }
    }
    Ok(blocks)
}

/// Head-averaged attention grid of one query at one layer and scale.
pub fn mean_over_heads(blocks: &[GridBlock], layer: usize, query: usize, scale: usize) -> Option<GridBlock> {
    let sel: Vec<&GridBlock> = blocks
        .iter()
        .filter(|b| b.kind == GridKind::Attn && b.layer == layer && b.query == query && b.scale == scale)
        .collect();
    let first = *sel.first()?;
    let mut values = vec![0.0; first.values.len()];
    for b in &sel {
        for (acc, v) in values.iter_mut().zip(&b.values) {
            *acc += v / sel.len() as f64;
        }
    }
    Some(GridBlock {
        head: 0,
        values,
        ..first.clone()
    })
}
