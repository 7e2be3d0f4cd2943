//! Forward and reverse-mode passes of the decoder trunks and heads.
//!
//! Activations are row-per-ray matrices. Linear layers compute
//! `x * W^T + b` with `W` stored `out x in`.

use nalgebra::DMatrix;

use super::weights::{AttentionBlock, DecoderWeights, Heads, Linear, Trunk, WeightGradients};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::losses::{ParamGradient, PredictionParams};
use crate::rendering::RayRender;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Decoder input matrices for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInputs {
    /// `rays x feature_dim` rendered features.
    pub features: DMatrix<f64>,
    /// `rays x 3` sensor-frame ray return positions.
    pub positions: DMatrix<f64>,
}

impl DecoderInputs {
    pub fn from_renders(renders: &[RayRender]) -> Result<Self> {
        let first = renders
            .first()
            .ok_or_else(|| Error::InvalidInput("no rendered rays".into()))?;
        let d = first.feature.len();
        if renders.iter().any(|r| r.feature.len() != d) {
            return Err(Error::ShapeMismatch("rendered features differ in length".into()));
        }
        let n = renders.len();
        let features = DMatrix::from_fn(n, d, |i, k| renders[i].feature[k]);
        let positions = DMatrix::from_fn(n, 3, |i, k| renders[i].return_position[k]);
        Ok(Self {
            features,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn anchor(&self, i: usize) -> Vec3 {
        Vec3::new(self.positions[(i, 0)], self.positions[(i, 1)], self.positions[(i, 2)])
    }
}

fn linear(w: &[DMatrix<f64>], l: Linear, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x * w[l.w].transpose();
    let b = &w[l.b];
    for mut row in y.row_iter_mut() {
        row += b;
    }
    y
}

/// Accumulates parameter gradients of a linear layer and returns `dL/dx`.
fn linear_back(
    w: &[DMatrix<f64>],
    l: Linear,
    x: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    grads: &mut WeightGradients,
) -> DMatrix<f64> {
    grads[l.w] += dy.transpose() * x;
    grads[l.b] += dy.row_sum();
    dy * &w[l.w]
}

fn softmax_rows(s: &mut DMatrix<f64>) {
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    hq: DMatrix<f64>,
    hkv: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: Vec<DMatrix<f64>>,
    o: DMatrix<f64>,
    h1: DMatrix<f64>,
    u: DMatrix<f64>,
    g: DMatrix<f64>,
}

fn block_forward(
    w: &[DMatrix<f64>],
    blk: &AttentionBlock,
    heads: usize,
    hq: &DMatrix<f64>,
    hkv: &DMatrix<f64>,
) -> (DMatrix<f64>, BlockCache) {
    let d = hq.ncols();
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let q = hq * w[blk.wq].transpose();
    let k = hkv * w[blk.wk].transpose();
    let v = hkv * w[blk.wv].transpose();
    let mut o = DMatrix::zeros(hq.nrows(), d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let mut s = (qh * kh.transpose()) * inv;
        softmax_rows(&mut s);
        o.columns_mut(h * dh, dh).copy_from(&(&s * vh));
        attn.push(s);
    }
    let h1 = hq + linear(w, blk.wo, &o);
    let u = linear(w, blk.ff1, &h1);
    let g = u.map(gelu);
    let h2 = &h1 + linear(w, blk.ff2, &g);
    let cache = BlockCache {
        hq: hq.clone(),
        hkv: hkv.clone(),
        q,
        k,
        v,
        attn,
        o,
        h1,
        u,
        g,
    };
    (h2, cache)
}

/// Returns `(dL/dhq, dL/dhkv)`.
fn block_backward(
    w: &[DMatrix<f64>],
    blk: &AttentionBlock,
    heads: usize,
    c: &BlockCache,
    dh2: &DMatrix<f64>,
    grads: &mut WeightGradients,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = c.hq.ncols();
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();

    let dg = linear_back(w, blk.ff2, &c.g, dh2, grads);
    let du = dg.zip_map(&c.u, |a, x| a * gelu_grad(x));
    let dh1 = dh2 + linear_back(w, blk.ff1, &c.h1, &du, grads);
    let do_ = linear_back(w, blk.wo, &c.o, &dh1, grads);
    let mut dhq = dh1;

    let mut dq = DMatrix::zeros(c.q.nrows(), d);
    let mut dk = DMatrix::zeros(c.k.nrows(), d);
    let mut dv = DMatrix::zeros(c.v.nrows(), d);
    for h in 0..heads {
        let a = &c.attn[h];
        let doh = do_.columns(h * dh, dh);
        let qh = c.q.columns(h * dh, dh);
        let kh = c.k.columns(h * dh, dh);
        let vh = c.v.columns(h * dh, dh);
        let da = doh * vh.transpose();
        dv.columns_mut(h * dh, dh).copy_from(&(a.transpose() * doh));
        // Softmax Jacobian, row by row.
        let mut ds = a.component_mul(&da);
        for (i, mut row) in ds.row_iter_mut().enumerate() {
            let dot = row.sum();
            for (jj, v) in row.iter_mut().enumerate() {
                *v -= a[(i, jj)] * dot;
            }
        }
        ds *= inv;
        dq.columns_mut(h * dh, dh).copy_from(&(&ds * kh));
        dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * qh));
    }
    grads[blk.wq] += dq.transpose() * &c.hq;
    grads[blk.wk] += dk.transpose() * &c.hkv;
    grads[blk.wv] += dv.transpose() * &c.hkv;
    dhq += &dq * &w[blk.wq];
    let dhkv = &dk * &w[blk.wk] + &dv * &w[blk.wv];
    (dhq, dhkv)
}

#[derive(Debug, Clone)]
enum TrunkCache {
    Tabular,
    Mlp {
        u1: DMatrix<f64>,
        g1: DMatrix<f64>,
        u2: DMatrix<f64>,
    },
    Attention {
        blocks: Vec<BlockCache>,
        top: DMatrix<f64>,
        u: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
struct ForwardCache {
    scaled_positions: DMatrix<f64>,
    fused: DMatrix<f64>,
    trunk: TrunkCache,
    z: DMatrix<f64>,
    raw_offset: DMatrix<f64>,
    outputs: usize,
}

/// Ray features plus the learned embedding of each ray's return position.
pub fn embed_and_fuse(renders: &[RayRender], weights: &DecoderWeights) -> Result<Vec<Vec<f64>>> {
    let inputs = DecoderInputs::from_renders(renders)?;
    check_inputs(weights, &inputs)?;
    let fused = fuse(weights, &inputs).0;
    Ok(fused.row_iter().map(|r| r.iter().copied().collect()).collect())
}

fn fuse(weights: &DecoderWeights, inputs: &DecoderInputs) -> (DMatrix<f64>, DMatrix<f64>) {
    let scaled = &inputs.positions * weights.position_scale;
    let fused = &inputs.features + &scaled * weights.tensors[weights.layout.pos_embed].transpose();
    (fused, scaled)
}

fn check_inputs(weights: &DecoderWeights, inputs: &DecoderInputs) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no rendered rays".into()));
    }
    if inputs.features.ncols() != weights.config.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} channels, decoder expects {}",
            inputs.features.ncols(),
            weights.config.feature_dim
        )));
    }
    if matches!(weights.layout.trunk, Trunk::Tabular { .. }) && inputs.len() != weights.num_rays {
        return Err(Error::ShapeMismatch(format!(
            "{} rays, tabular decoder holds {}",
            inputs.len(),
            weights.num_rays
        )));
    }
    Ok(())
}

/// A decoder with the cache of its most recent forward pass.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub weights: DecoderWeights,
    cache: Option<ForwardCache>,
}

impl Decoder {
    pub fn new(weights: DecoderWeights) -> Self {
        Self {
            weights,
            cache: None,
        }
    }

    pub fn into_weights(self) -> DecoderWeights {
        self.weights
    }

    /// Decodes without keeping a cache.
    pub fn decode(&self, inputs: &DecoderInputs) -> Result<PredictionParams> {
        Ok(forward_impl(&self.weights, inputs)?.0)
    }

    pub fn decode_renders(&self, renders: &[RayRender]) -> Result<PredictionParams> {
        self.decode(&DecoderInputs::from_renders(renders)?)
    }

    /// Decodes and caches the intermediate activations for [`Self::backward`].
    pub fn forward(&mut self, inputs: &DecoderInputs) -> Result<PredictionParams> {
        let (params, cache) = forward_impl(&self.weights, inputs)?;
        self.cache = Some(cache);
        Ok(params)
    }

    /// Gradient of the loss with respect to every weight tensor, given the
    /// loss gradient with respect to the last forward pass's outputs.
    pub fn backward(&self, grad: &ParamGradient) -> Result<WeightGradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        backward_impl(&self.weights, cache, grad)
    }
}

/// Loss value and weight gradient for one scan, with the loss scaled by `weight`.
pub(crate) fn scan_loss_gradient(
    weights: &DecoderWeights,
    inputs: &DecoderInputs,
    truth: &crate::cloud::PointCloud,
    family: Option<crate::rfs::DensityFamily>,
    weight: f64,
) -> Result<(f64, WeightGradients)> {
    let (params, cache) = forward_impl(weights, inputs)?;
    let mut report = match family {
        Some(f) => crate::losses::probabilistic_loss(&params, truth, f)?,
        None => crate::losses::deterministic_loss(&params, truth)?,
    };
    report.gradient.scale(weight);
    let grads = backward_impl(weights, &cache, &report.gradient)?;
    Ok((weight * report.total, grads))
}

fn forward_impl(weights: &DecoderWeights, inputs: &DecoderInputs) -> Result<(PredictionParams, ForwardCache)> {
    check_inputs(weights, inputs)?;
    let cfg = &weights.config;
    let w = &weights.tensors;
    let (fused, scaled_positions) = fuse(weights, inputs);
    let n = inputs.len();

    let (trunk, z, outputs) = match &weights.layout.trunk {
        Trunk::Tabular { .. } => (TrunkCache::Tabular, DMatrix::zeros(n, 0), n),
        Trunk::Mlp { l1, l2 } => {
            let u1 = linear(w, *l1, &fused);
            let g1 = u1.map(gelu);
            let u2 = linear(w, *l2, &g1);
            let z = u2.map(gelu);
            (TrunkCache::Mlp { u1, g1, u2 }, z, n)
        }
        Trunk::Encoder { blocks, proj } => {
            let mut h = fused.clone();
            let mut caches = Vec::with_capacity(blocks.len());
            for blk in blocks {
                let (next, c) = block_forward(w, blk, cfg.num_heads, &h, &h);
                caches.push(c);
                h = next;
            }
            let u = linear(w, *proj, &h);
            let z = u.map(gelu);
            (
                TrunkCache::Attention {
                    blocks: caches,
                    top: h,
                    u,
                },
                z,
                n,
            )
        }
        Trunk::Query {
            queries,
            blocks,
            proj,
        } => {
            let mut h = w[*queries].clone();
            let mut caches = Vec::with_capacity(blocks.len());
            for blk in blocks {
                let (next, c) = block_forward(w, blk, cfg.num_heads, &h, &fused);
                caches.push(c);
                h = next;
            }
            let u = linear(w, *proj, &h);
            let z = u.map(gelu);
            let m = h.nrows();
            (
                TrunkCache::Attention {
                    blocks: caches,
                    top: h,
                    u,
                },
                z,
                m,
            )
        }
    };

    let (logits, raw_offset, log_scale) = match (&weights.layout.trunk, &weights.layout.heads) {
        (Trunk::Tabular { logit, offset, log_scale }, _) => {
            (w[*logit].clone(), w[*offset].clone(), w[*log_scale].clone())
        }
        (_, Some(heads)) => heads_forward(w, heads, &z),
        _ => unreachable!("non-tabular trunks always carry heads"),
    };

    let anchor_free = matches!(weights.layout.trunk, Trunk::Query { .. });
    let mut params = PredictionParams {
        anchors: Vec::with_capacity(outputs),
        offsets: Vec::with_capacity(outputs),
        logit_r: Vec::with_capacity(outputs),
        log_scale: Vec::with_capacity(outputs),
    };
    for i in 0..outputs {
        params.anchors.push(if anchor_free { Vec3::zeros() } else { inputs.anchor(i) });
        let raw = Vec3::new(raw_offset[(i, 0)], raw_offset[(i, 1)], raw_offset[(i, 2)]);
        params.offsets.push(offset_map(cfg, anchor_free, &raw));
        params.logit_r.push(logits[(i, 0)]);
        params.log_scale.push(Vec3::new(log_scale[(i, 0)], log_scale[(i, 1)], log_scale[(i, 2)]));
    }
    params.validate()?;
    Ok((
        params,
        ForwardCache {
            scaled_positions,
            fused,
            trunk,
            z,
            raw_offset,
            outputs,
        },
    ))
}

fn offset_map(cfg: &super::DecoderConfig, anchor_free: bool, raw: &Vec3) -> Vec3 {
    if cfg.baseline_zero_offset {
        Vec3::zeros()
    } else if anchor_free {
        raw * cfg.query_position_scale
    } else {
        raw.map(|v| cfg.max_offset * v.tanh())
    }
}

fn offset_map_grad(cfg: &super::DecoderConfig, anchor_free: bool, raw: f64) -> f64 {
    if cfg.baseline_zero_offset {
        0.0
    } else if anchor_free {
        cfg.query_position_scale
    } else {
        let t = raw.tanh();
        cfg.max_offset * (1.0 - t * t)
    }
}

fn heads_forward(
    w: &[DMatrix<f64>],
    heads: &Heads,
    z: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let logits = linear(w, heads.confidence, z);
    let raw = linear(w, heads.offset, z);
    let log_scale = match heads.scale {
        Some(l) => linear(w, l, z),
        None => DMatrix::from_element(z.nrows(), 3, super::INITIAL_SCALE.ln()),
    };
    (logits, raw, log_scale)
}

fn backward_impl(weights: &DecoderWeights, cache: &ForwardCache, grad: &ParamGradient) -> Result<WeightGradients> {
    if grad.len() != cache.outputs {
        return Err(Error::ShapeMismatch(format!(
            "gradient for {} outputs, forward produced {}",
            grad.len(),
            cache.outputs
        )));
    }
    let cfg = &weights.config;
    let w = &weights.tensors;
    let mut grads = weights.zeros_like();
    let m = cache.outputs;
    let anchor_free = matches!(weights.layout.trunk, Trunk::Query { .. });

    let d_logit = DMatrix::from_fn(m, 1, |i, _| grad.logit_r[i]);
    let d_raw = DMatrix::from_fn(m, 3, |i, a| {
        grad.offsets[i][a] * offset_map_grad(cfg, anchor_free, cache.raw_offset[(i, a)])
    });
    let d_log_scale = DMatrix::from_fn(m, 3, |i, a| grad.log_scale[i][a]);

    let heads = match (&weights.layout.trunk, &weights.layout.heads) {
        (Trunk::Tabular { logit, offset, log_scale }, _) => {
            grads[*logit] += d_logit;
            grads[*offset] += d_raw;
            grads[*log_scale] += d_log_scale;
            return Ok(grads);
        }
        (_, Some(h)) => h,
        _ => unreachable!("non-tabular trunks always carry heads"),
    };

    let mut dz = linear_back(w, heads.confidence, &cache.z, &d_logit, &mut grads);
    dz += linear_back(w, heads.offset, &cache.z, &d_raw, &mut grads);
    if let Some(l) = heads.scale {
        dz += linear_back(w, l, &cache.z, &d_log_scale, &mut grads);
    }

    let d_fused = match (&weights.layout.trunk, &cache.trunk) {
        (Trunk::Mlp { l1, l2 }, TrunkCache::Mlp { u1, g1, u2 }) => {
            let du2 = dz.zip_map(u2, |a, x| a * gelu_grad(x));
            let dg1 = linear_back(w, *l2, g1, &du2, &mut grads);
            let du1 = dg1.zip_map(u1, |a, x| a * gelu_grad(x));
            linear_back(w, *l1, &cache.fused, &du1, &mut grads)
        }
        (Trunk::Encoder { blocks, proj }, TrunkCache::Attention { blocks: caches, top, u }) => {
            let du = dz.zip_map(u, |a, x| a * gelu_grad(x));
            let mut dh = linear_back(w, *proj, top, &du, &mut grads);
            for (blk, c) in blocks.iter().zip(caches).rev() {
                let (dq, dkv) = block_backward(w, blk, cfg.num_heads, c, &dh, &mut grads);
                dh = dq + dkv;
            }
            dh
        }
        (
            Trunk::Query {
                queries,
                blocks,
                proj,
            },
            TrunkCache::Attention { blocks: caches, top, u },
        ) => {
            let du = dz.zip_map(u, |a, x| a * gelu_grad(x));
            let mut dh = linear_back(w, *proj, top, &du, &mut grads);
            let mut d_fused = DMatrix::zeros(cache.fused.nrows(), cache.fused.ncols());
            for (blk, c) in blocks.iter().zip(caches).rev() {
                let (dq, dkv) = block_backward(w, blk, cfg.num_heads, c, &dh, &mut grads);
                d_fused += dkv;
                dh = dq;
            }
            grads[*queries] += dh;
            d_fused
        }
        _ => unreachable!("trunk cache matches layout"),
    };
    // fused = features + scaled_positions * pos_embed^T
    grads[weights.layout.pos_embed] += d_fused.transpose() * &cache.scaled_positions;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::{DecoderConfig, DecoderVariant};
    use super::*;
    use crate::losses::{deterministic_loss, probabilistic_loss, ParamCoord};
    use crate::rfs::DensityFamily;
    use crate::PointCloud;
    use rand::Rng;

    fn random_inputs(rng: &mut crate::rng::SeededRng, n: usize, d: usize) -> DecoderInputs {
        DecoderInputs {
            features: DMatrix::from_fn(n, d, |_, _| rng.gen_range(-0.5..0.5)),
            positions: DMatrix::from_fn(n, 3, |_, k| match k {
                0 => rng.gen_range(5.0..30.0),
                1 => rng.gen_range(-8.0..8.0),
                _ => rng.gen_range(-1.0..2.0),
            }),
        }
    }

    fn small_cfg(variant: DecoderVariant, probabilistic: bool) -> DecoderConfig {
        DecoderConfig {
            variant,
            feature_dim: 8,
            hidden_dim: 6,
            num_heads: 2,
            num_layers: 2,
            probabilistic,
            ..DecoderConfig::default()
        }
    }

    const VARIANTS: [DecoderVariant; 4] = [
        DecoderVariant::Tabular,
        DecoderVariant::Mlp,
        DecoderVariant::TransformerEncoder,
        DecoderVariant::NaiveQuery,
    ];

    fn perturb_all(weights: &mut DecoderWeights, rng: &mut crate::rng::SeededRng) {
        for t in weights.tensors.iter_mut() {
            t.apply(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }

    #[test]
    fn zero_position_embedding_passes_features_through() {
        let mut rng = crate::rng::seeded(1);
        let inputs = random_inputs(&mut rng, 5, 8);
        let mut w = DecoderWeights::init(&small_cfg(DecoderVariant::Mlp, false), 5, 40.0, 2).unwrap();
        w.tensors[w.layout.pos_embed].fill(0.0);
        assert_eq!(fuse(&w, &inputs).0, inputs.features);

        let w = DecoderWeights::init(&small_cfg(DecoderVariant::Mlp, false), 5, 40.0, 2).unwrap();
        let zero_feat = DecoderInputs {
            features: DMatrix::zeros(5, 8),
            ..inputs.clone()
        };
        let pe = &inputs.positions * w.position_scale * w.tensors[w.layout.pos_embed].transpose();
        assert_eq!(fuse(&w, &zero_feat).0, pe);
        let residual = fuse(&w, &inputs).0 - &inputs.features - &pe;
        assert!(residual.amax() < 1e-15);
    }

    #[test]
    fn tabular_ignores_features() {
        let mut rng = crate::rng::seeded(2);
        let inputs = random_inputs(&mut rng, 6, 8);
        let mut w = DecoderWeights::init(&small_cfg(DecoderVariant::Tabular, true), 6, 40.0, 2).unwrap();
        perturb_all(&mut w, &mut rng);
        let dec = Decoder::new(w);
        let a = dec.decode(&inputs).unwrap();
        let other = DecoderInputs {
            features: inputs.features.map(|v| v * -3.0 + 1.0),
            ..inputs.clone()
        };
        let b = dec.decode(&other).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offsets_stay_below_max_offset() {
        let mut rng = crate::rng::seeded(3);
        let inputs = random_inputs(&mut rng, 7, 8);
        for variant in [DecoderVariant::Tabular, DecoderVariant::Mlp, DecoderVariant::TransformerEncoder] {
            let mut w = DecoderWeights::init(&small_cfg(variant, true), 7, 40.0, 4).unwrap();
            for t in w.tensors.iter_mut() {
                t.apply(|v| *v *= 1e3);
            }
            let p = Decoder::new(w).decode(&inputs).unwrap();
            for o in &p.offsets {
                assert!(o.iter().all(|v| v.abs() <= 1.5));
            }
        }
    }

    #[test]
    fn uniform_attention_matches_hand_rolled_oracle() {
        let mut rng = crate::rng::seeded(4);
        let n = 5;
        let inputs = random_inputs(&mut rng, n, 8);
        let cfg = DecoderConfig {
            num_layers: 1,
            ..small_cfg(DecoderVariant::TransformerEncoder, true)
        };
        let mut w = DecoderWeights::init(&cfg, n, 40.0, 5).unwrap();
        perturb_all(&mut w, &mut rng);
        w.tensor_mut("encoder.0.attn.q").unwrap().fill(0.0);
        w.tensor_mut("encoder.0.attn.k").unwrap().fill(0.0);
        let p = Decoder::new(w.clone()).decode(&inputs).unwrap();

        // Hand-rolled: plain loops over rows, no shared helpers.
        let t = |name: &str| w.tensor(name).unwrap().clone();
        let lin = |x: &[f64], wn: &str, bn: &str| -> Vec<f64> {
            let (wm, bm) = (t(wn), t(bn));
            (0..wm.nrows())
                .map(|o| bm[(0, o)] + (0..x.len()).map(|k| wm[(o, k)] * x[k]).sum::<f64>())
                .collect()
        };
        let gelu_ref = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let fused = fuse(&w, &inputs).0;
        let wv = t("encoder.0.attn.v");
        let mut vbar = vec![0.0; 8];
        for j in 0..n {
            for o in 0..8 {
                vbar[o] += (0..8).map(|k| wv[(o, k)] * fused[(j, k)]).sum::<f64>() / n as f64;
            }
        }
        let attn_out = lin(&vbar, "encoder.0.attn.out.weight", "encoder.0.attn.out.bias");
        for i in 0..n {
            let h1: Vec<f64> = (0..8).map(|k| fused[(i, k)] + attn_out[k]).collect();
            let ff: Vec<f64> = lin(&h1, "encoder.0.ff1.weight", "encoder.0.ff1.bias").into_iter().map(gelu_ref).collect();
            let ff2 = lin(&ff, "encoder.0.ff2.weight", "encoder.0.ff2.bias");
            let h2: Vec<f64> = h1.iter().zip(&ff2).map(|(a, b)| a + b).collect();
            let z: Vec<f64> = lin(&h2, "encoder.proj.weight", "encoder.proj.bias").into_iter().map(gelu_ref).collect();
            let logit = lin(&z, "head.confidence.weight", "head.confidence.bias")[0];
            let raw = lin(&z, "head.offset.weight", "head.offset.bias");
            let ls = lin(&z, "head.scale.weight", "head.scale.bias");
            assert!((p.logit_r[i] - logit).abs() < 1e-12);
            for a in 0..3 {
                assert!((p.offsets[i][a] - 1.5 * raw[a].tanh()).abs() < 1e-12);
                assert!((p.log_scale[i][a] - ls[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = crate::rng::seeded(6);
        let n = 9;
        let inputs = random_inputs(&mut rng, n, 8);
        let perm: Vec<usize> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let permuted = DecoderInputs {
            features: DMatrix::from_fn(n, 8, |i, k| inputs.features[(perm[i], k)]),
            positions: DMatrix::from_fn(n, 3, |i, k| inputs.positions[(perm[i], k)]),
        };
        for variant in [DecoderVariant::Mlp, DecoderVariant::TransformerEncoder] {
            let mut w = DecoderWeights::init(&small_cfg(variant, true), n, 40.0, 7).unwrap();
            perturb_all(&mut w, &mut rng);
            let dec = Decoder::new(w);
            let a = dec.decode(&inputs).unwrap();
            let b = dec.decode(&permuted).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                assert!((a.logit_r[src] - b.logit_r[i]).abs() < 1e-9);
                assert!((a.offsets[src] - b.offsets[i]).norm() < 1e-9);
                assert!((a.log_scale[src] - b.log_scale[i]).norm() < 1e-9);
                assert_eq!(a.anchors[src], b.anchors[i]);
            }
        }
    }

    #[test]
    fn backward_without_forward_fails() {
        let w = DecoderWeights::init(&small_cfg(DecoderVariant::Mlp, false), 4, 40.0, 1).unwrap();
        let dec = Decoder::new(w);
        assert!(matches!(dec.backward(&ParamGradient::zeros(4)), Err(Error::MissingForwardCache)));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_weight_gradient() {
        let mut rng = crate::rng::seeded(8);
        let inputs = random_inputs(&mut rng, 6, 8);
        for variant in VARIANTS {
            let w = DecoderWeights::init(&small_cfg(variant, true), 6, 40.0, 1).unwrap();
            let mut dec = Decoder::new(w);
            let p = dec.forward(&inputs).unwrap();
            let g = dec.backward(&ParamGradient::zeros(p.len())).unwrap();
            assert!(g.iter().all(|t| t.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn tabular_gradient_is_loss_gradient() {
        let mut rng = crate::rng::seeded(9);
        let inputs = random_inputs(&mut rng, 6, 8);
        let w = DecoderWeights::init(&small_cfg(DecoderVariant::Tabular, true), 6, 40.0, 1).unwrap();
        let mut dec = Decoder::new(w);
        let p = dec.forward(&inputs).unwrap();
        let truth = PointCloud::new(vec![inputs.anchor(2) + Vec3::new(0.3, 0.2, -0.1)]);
        let rep = probabilistic_loss(&p, &truth, DensityFamily::Laplace).unwrap();
        let g = dec.backward(&rep.gradient).unwrap();
        let wts = &dec.weights;
        let logit = &g[wts.index_of("table.logit").unwrap()];
        let ls = &g[wts.index_of("table.log_scale").unwrap()];
        let off = &g[wts.index_of("table.offset").unwrap()];
        for i in 0..6 {
            assert_eq!(logit[(i, 0)], rep.gradient.logit_r[i]);
            for a in 0..3 {
                assert_eq!(ls[(i, a)], rep.gradient.log_scale[i][a]);
                // Raw offsets start at zero where d tanh = 1.
                assert_eq!(off[(i, a)], rep.gradient.offsets[i][a] * 1.5);
            }
        }
    }

    /// Central-difference check of decoder weights through a loss with a
    /// frozen matching.
    pub(crate) fn weight_fd_error(
        dec: &mut Decoder,
        inputs: &DecoderInputs,
        truth: &PointCloud,
        probabilistic: bool,
        coords: usize,
        rng: &mut crate::rng::SeededRng,
    ) -> Option<f64> {
        let loss = |p: &PredictionParams| {
            if probabilistic {
                probabilistic_loss(p, truth, DensityFamily::Laplace)
            } else {
                deterministic_loss(p, truth)
            }
        };
        let p = dec.forward(inputs).unwrap();
        let rep = loss(&p).unwrap();
        let grads = dec.backward(&rep.gradient).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let t = rng.gen_range(0..dec.weights.tensors.len());
            let (r, c) = dec.weights.tensors[t].shape();
            let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
            let orig = dec.weights.tensors[t][(i, j)];
            let mut eval = |v: f64| {
                dec.weights.tensors[t][(i, j)] = v;
                let rep = loss(&dec.decode(inputs).unwrap()).unwrap();
                (rep.total, rep.assignment)
            };
            let (lp, ap) = eval(orig + h);
            let (lm, am) = eval(orig - h);
            dec.weights.tensors[t][(i, j)] = orig;
            if ap != rep.assignment || am != rep.assignment {
                return None;
            }
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(crate::losses::relative_error(grads[t][(i, j)], numeric));
        }
        Some(worst)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::seeded(10);
        for variant in VARIANTS {
            for probabilistic in [false, true] {
                let mut done = 0;
                let mut attempts = 0;
                while done < 3 {
                    attempts += 1;
                    assert!(attempts < 50, "too many matching switches");
                    let inputs = random_inputs(&mut rng, 6, 8);
                    let mut w = DecoderWeights::init(&small_cfg(variant, probabilistic), 6, 40.0, rng.gen()).unwrap();
                    perturb_all(&mut w, &mut rng);
                    let mut dec = Decoder::new(w);
                    let truth = PointCloud::new(
                        (0..2).map(|k| inputs.anchor(k) + Vec3::new(0.37, -0.21, 0.13)).collect(),
                    );
                    if let Some(err) = weight_fd_error(&mut dec, &inputs, &truth, probabilistic, 50, &mut rng) {
                        assert!(err < 1e-3, "{variant:?} prob={probabilistic}: {err}");
                        done += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn param_coords_cover_everything() {
        assert_eq!(ParamCoord::all(3).len(), 21);
    }
}
