//! Parameter storage, initialization and the binary weight container.
//!
//! Container layout (little-endian): the magic `NRDR1`, a `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, `u64` rows, `u64`
//! cols and `rows * cols` row-major `f64` values. A JSON sidecar records the
//! decoder configuration needed to rebuild the layout.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DecoderConfig, DecoderVariant, INITIAL_EXISTENCE, INITIAL_SCALE};
use crate::error::{Error, Result};
use crate::losses::logit;
use crate::rng::{seeded, standard_normal, SeededRng};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"NRDR1";

/// Gradients share the tensor order of [`DecoderWeights::tensors`].
pub type WeightGradients = Vec<DMatrix<f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    /// `out x in`
    pub w: usize,
    /// `1 x out`
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttentionBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Trunk {
    Tabular {
        logit: usize,
        offset: usize,
        log_scale: usize,
    },
    Mlp {
        l1: Linear,
        l2: Linear,
    },
    Encoder {
        blocks: Vec<AttentionBlock>,
        proj: Linear,
    },
    Query {
        queries: usize,
        blocks: Vec<AttentionBlock>,
        proj: Linear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Heads {
    pub confidence: Linear,
    pub offset: Linear,
    pub scale: Option<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub pos_embed: usize,
    pub trunk: Trunk,
    pub heads: Option<Heads>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    Const(f64),
    Normal(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, gain: f64, bias: Init) -> Linear {
        let std = gain / (inp as f64).sqrt();
        Linear {
            w: self.tensor(format!("{name}.weight"), out, inp, Init::Normal(std)),
            b: self.tensor(format!("{name}.bias"), 1, out, bias),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize) -> AttentionBlock {
        let std = 1.0 / (d as f64).sqrt();
        AttentionBlock {
            wq: self.tensor(format!("{name}.attn.q"), d, d, Init::Normal(std)),
            wk: self.tensor(format!("{name}.attn.k"), d, d, Init::Normal(std)),
            wv: self.tensor(format!("{name}.attn.v"), d, d, Init::Normal(std)),
            wo: self.linear(&format!("{name}.attn.out"), d, d, 0.5, Init::Zero),
            ff1: self.linear(&format!("{name}.ff1"), d, hidden, 1.0, Init::Zero),
            ff2: self.linear(&format!("{name}.ff2"), hidden, d, 0.5, Init::Zero),
        }
    }
}

type LayoutParts = (Layout, Vec<String>, Vec<(usize, usize)>, Vec<Init>);

fn build_layout(cfg: &DecoderConfig, num_rays: usize) -> LayoutParts {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let d = cfg.feature_dim;
    let h = cfg.hidden_dim;
    let pos_embed = b.tensor("pos_embed".into(), d, 3, Init::Normal(0.5 / 3f64.sqrt()));
    let logit0 = logit(INITIAL_EXISTENCE);
    let log_scale0 = INITIAL_SCALE.ln();
    let trunk = match cfg.variant {
        DecoderVariant::Tabular => Trunk::Tabular {
            logit: b.tensor("table.logit".into(), num_rays, 1, Init::Const(logit0)),
            offset: b.tensor("table.offset".into(), num_rays, 3, Init::Zero),
            log_scale: b.tensor("table.log_scale".into(), num_rays, 3, Init::Const(log_scale0)),
        },
        DecoderVariant::Mlp => Trunk::Mlp {
            l1: b.linear("mlp.l1", d, h, 1.0, Init::Zero),
            l2: b.linear("mlp.l2", h, h, 1.0, Init::Zero),
        },
        DecoderVariant::TransformerEncoder => {
            let blocks = (0..cfg.num_layers)
                .map(|k| b.block(&format!("encoder.{k}"), d, h))
                .collect();
            Trunk::Encoder {
                blocks,
                proj: b.linear("encoder.proj", d, h, 1.0, Init::Zero),
            }
        }
        DecoderVariant::NaiveQuery => {
            let queries = b.tensor("query.embed".into(), num_rays, d, Init::Normal(1.0));
            let blocks = (0..cfg.num_layers)
                .map(|k| b.block(&format!("query.{k}"), d, h))
                .collect();
            Trunk::Query {
                queries,
                blocks,
                proj: b.linear("query.proj", d, h, 1.0, Init::Zero),
            }
        }
    };
    let heads = match cfg.variant {
        DecoderVariant::Tabular => None,
        _ => Some(Heads {
            confidence: b.linear("head.confidence", h, 1, 0.1, Init::Const(logit0)),
            offset: b.linear("head.offset", h, 3, 0.1, Init::Zero),
            scale: cfg
                .probabilistic
                .then(|| b.linear("head.scale", h, 3, 0.1, Init::Const(log_scale0))),
        }),
    };
    (
        Layout {
            pos_embed,
            trunk,
            heads,
        },
        b.names,
        b.shapes,
        b.inits,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: DecoderConfig,
    /// Ray count (or query count) the weights were built for.
    pub num_rays: usize,
    /// Multiplier applied to return positions before the position embedding.
    pub position_scale: f64,
    pub seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<DMatrix<f64>>,
    pub(crate) layout: Layout,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    config: DecoderConfig,
    num_rays: usize,
    position_scale: f64,
    seed: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

impl DecoderWeights {
    /// Fresh weights for `num_rays` rays. `max_range` fixes the position
    /// normalization.
    pub fn init(cfg: &DecoderConfig, num_rays: usize, max_range: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_rays == 0 {
            return Err(Error::Config("decoder needs at least one ray".into()));
        }
        if !(max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        let (layout, names, shapes, inits) = build_layout(cfg, num_rays);
        let mut rng = seeded(seed);
        let tensors = shapes
            .iter()
            .zip(&inits)
            .map(|(&(r, c), init)| sample_tensor(&mut rng, r, c, *init))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            num_rays,
            position_scale: 1.0 / max_range,
            seed,
            names,
            tensors,
            layout,
        })
    }

    pub fn zeros_like(&self) -> WeightGradients {
        self.tensors
            .iter()
            .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let sidecar = Sidecar {
            format: String::from_utf8_lossy(WEIGHTS_MAGIC).into_owned(),
            config: self.config.clone(),
            num_rays: self.num_rays,
            position_scale: self.position_scale,
            seed: self.seed,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&sidecar)?)
    }

    pub fn from_parts(sidecar_json: &str, bytes: &[u8]) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(sidecar_json)?;
        if sidecar.format.as_bytes() != WEIGHTS_MAGIC {
            return Err(Error::InvalidInput(format!("unknown weight format `{}`", sidecar.format)));
        }
        sidecar.config.validate()?;
        let (layout, names, shapes, _) = build_layout(&sidecar.config, sidecar.num_rays);
        let expected: Vec<TensorInfo> = names
            .iter()
            .zip(&shapes)
            .map(|(n, &(rows, cols))| TensorInfo {
                name: n.clone(),
                rows,
                cols,
            })
            .collect();
        if expected != sidecar.tensors {
            return Err(Error::ShapeMismatch("sidecar tensors do not match the configured layout".into()));
        }

        let mut cur = std::io::Cursor::new(bytes);
        let bad = |m: &str| Error::InvalidInput(format!("weight container: {m}"));
        let mut magic = [0u8; 5];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let count = read_u32(&mut cur).ok_or_else(|| bad("truncated count"))? as usize;
        if count != names.len() {
            return Err(Error::ShapeMismatch(format!("{count} tensors, layout expects {}", names.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, &(rows, cols)) in names.iter().zip(&shapes) {
            let len = read_u32(&mut cur).ok_or_else(|| bad("truncated name"))? as usize;
            let mut buf = vec![0u8; len];
            cur.read_exact(&mut buf).map_err(|_| bad("truncated name"))?;
            if buf != name.as_bytes() {
                return Err(Error::ShapeMismatch(format!("expected tensor `{name}`")));
            }
            let r = read_u64(&mut cur).ok_or_else(|| bad("truncated shape"))? as usize;
            let c = read_u64(&mut cur).ok_or_else(|| bad("truncated shape"))? as usize;
            if (r, c) != (rows, cols) {
                return Err(Error::ShapeMismatch(format!("tensor `{name}` is {r}x{c}, expected {rows}x{cols}")));
            }
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                let mut b8 = [0u8; 8];
                cur.read_exact(&mut b8).map_err(|_| bad("truncated payload"))?;
                data.push(f64::from_le_bytes(b8));
            }
            tensors.push(DMatrix::from_row_slice(r, c, &data));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: sidecar.config,
            num_rays: sidecar.num_rays,
            position_scale: sidecar.position_scale,
            seed: sidecar.seed,
            names,
            tensors,
            layout,
        })
    }

    /// Writes `<stem>.nrdr` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("nrdr");
        let json = stem.with_extension("json");
        let mut f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&json, self.sidecar_json()?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("nrdr");
        let json = stem.with_extension("json");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        Self::from_parts(&text, &bytes)
    }
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Option<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut std::io::Cursor<&[u8]>) -> Option<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn sample_tensor(rng: &mut SeededRng, rows: usize, cols: usize, init: Init) -> DMatrix<f64> {
    match init {
        Init::Zero => DMatrix::zeros(rows, cols),
        Init::Const(v) => DMatrix::from_element(rows, cols, v),
        Init::Normal(std) => {
            // Row-major fill keeps the draw order independent of storage order.
            let data: Vec<f64> = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
            DMatrix::from_row_slice(rows, cols, &data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_bit_exactly() {
        for variant in [
            DecoderVariant::Tabular,
            DecoderVariant::Mlp,
            DecoderVariant::TransformerEncoder,
            DecoderVariant::NaiveQuery,
        ] {
            let cfg = DecoderConfig {
                variant,
                feature_dim: 8,
                hidden_dim: 6,
                ..DecoderConfig::default()
            };
            let w = DecoderWeights::init(&cfg, 12, 40.0, 3).unwrap();
            let back = DecoderWeights::from_parts(&w.sidecar_json().unwrap(), &w.to_bytes()).unwrap();
            assert_eq!(w.to_bytes(), back.to_bytes());
            assert_eq!(w, back);
        }
    }

    #[test]
    fn container_rejects_corruption() {
        let cfg = DecoderConfig {
            feature_dim: 4,
            hidden_dim: 4,
            ..DecoderConfig::default()
        };
        let w = DecoderWeights::init(&cfg, 5, 40.0, 1).unwrap();
        let side = w.sidecar_json().unwrap();
        let mut bytes = w.to_bytes();
        bytes[0] = b'X';
        assert!(DecoderWeights::from_parts(&side, &bytes).is_err());
        let bytes = w.to_bytes();
        assert!(DecoderWeights::from_parts(&side, &bytes[..bytes.len() - 3]).is_err());
        let other = DecoderWeights::init(&DecoderConfig { hidden_dim: 5, ..cfg }, 5, 40.0, 1).unwrap();
        assert!(DecoderWeights::from_parts(&other.sidecar_json().unwrap(), &w.to_bytes()).is_err());
    }

    #[test]
    fn header_starts_with_magic() {
        let w = DecoderWeights::init(&DecoderConfig::default(), 4, 40.0, 0).unwrap();
        assert_eq!(&w.to_bytes()[..5], b"NRDR1");
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DecoderConfig::default();
        let a = DecoderWeights::init(&cfg, 4, 40.0, 9).unwrap();
        let b = DecoderWeights::init(&cfg, 4, 40.0, 9).unwrap();
        let c = DecoderWeights::init(&cfg, 4, 40.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
    }
}
