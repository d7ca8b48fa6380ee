//! Forward pass of the toy transformer, with a trace rich enough to replay
//! gradients without re-encoding.

use crate::error::{Error, Result};
use crate::numkit::{matmul, normalize_in_place, Descriptor, ImageGrid, Tensor};

use super::{EncoderConfig, WeightStore, LN_EPS};

/// Per-layer post-softmax attention maps plus the cached activations needed
/// to form descriptor gradients with respect to those maps.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// One `[heads, n, n]` tensor per layer; every row sums to 1.
    pub maps: Vec<Tensor>,
    pub(crate) x0: Vec<f64>,
    pub(crate) patches: Vec<f64>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) x_final: Vec<f64>,
    pub(crate) final_ln: LnCache,
    pub(crate) w_norm: f64,
    pub(crate) descriptor: Vec<f64>,
    pub(crate) n: usize,
    pub(crate) d: usize,
    pub(crate) heads: usize,
}

impl AttentionTrace {
    pub fn n_tokens(&self) -> usize {
        self.n
    }

    pub fn matches(&self, config: &EncoderConfig) -> bool {
        self.n == config.n_tokens()
            && self.d == config.embed_dim
            && self.heads == config.heads
            && self.maps.len() == config.layers
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor::new(self.descriptor.clone())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    pub ln1_out: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn_concat: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub ln2: LnCache,
    pub ln2_out: Vec<f64>,
    pub mlp_pre: Vec<f64>,
    pub mlp_act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; rows * d];
    let mut x_hat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            x_hat[r * d + c] = h;
            out[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(x: &mut [f64], rows: usize, d: usize, bias: &[f64]) {
    for r in 0..rows {
        for c in 0..d {
            x[r * d + c] += bias[c];
        }
    }
}

/// Flatten the crop into per-patch pixel vectors, row-major over the patch
/// grid and within each patch.
pub(crate) fn patchify(config: &EncoderConfig, crop: &ImageGrid) -> Result<Vec<f64>> {
    if crop.height() != config.image_side
        || crop.width() != config.image_side
        || crop.channels() != config.channels
    {
        return Err(Error::ShapeMismatch(format!(
            "encode expects a {s}x{s}x{c} crop, got {h}x{w}x{cc}",
            s = config.image_side,
            c = config.channels,
            h = crop.height(),
            w = crop.width(),
            cc = crop.channels()
        )));
    }
    let g = config.grid_side();
    let p = config.patch_side;
    let pd = config.patch_dim();
    let mut out = vec![0.0; config.n_patches() * pd];
    for gr in 0..g {
        for gc in 0..g {
            let patch = &mut out[(gr * g + gc) * pd..(gr * g + gc + 1) * pd];
            let mut i = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let px = crop.pixel(gr * p + dy, gc * p + dx);
                    patch[i..i + config.channels].copy_from_slice(px);
                    i += config.channels;
                }
            }
        }
    }
    Ok(out)
}

fn embed_tokens(weights: &WeightStore, patches: &[f64]) -> Result<Vec<f64>> {
    let cfg = weights.config();
    let d = cfg.embed_dim;
    let n = cfg.n_tokens();
    let pd = cfg.patch_dim();
    let w = weights.tensor("patch_proj.w")?;
    let b = weights.tensor("patch_proj.b")?;
    let cls = weights.tensor("cls")?;
    let pos = weights.tensor("pos")?;

    let mut x0 = vec![0.0; n * d];
    x0[..d].copy_from_slice(cls.data());
    matmul(
        &mut x0[d..],
        patches,
        w.data(),
        cfg.n_patches(),
        pd,
        d,
    );
    add_bias(&mut x0[d..], cfg.n_patches(), d, b.data());
    for (xv, pv) in x0.iter_mut().zip(pos.data()) {
        *xv += pv;
    }
    Ok(x0)
}

/// Runs the transformer stack from embedded tokens. When `attn_override` is
/// given, those maps are used verbatim and the Q/K path is skipped.
fn forward_core(
    weights: &WeightStore,
    x0: Vec<f64>,
    patches: Vec<f64>,
    attn_override: Option<&[Tensor]>,
) -> Result<AttentionTrace> {
    let cfg = weights.config();
    let d = cfg.embed_dim;
    let n = cfg.n_tokens();
    let h = cfg.heads;
    let dh = cfg.head_dim();
    let m = cfg.mlp_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    if let Some(maps) = attn_override {
        if maps.len() != cfg.layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} attention maps, got {}",
                cfg.layers,
                maps.len()
            )));
        }
    }

    let mut maps: Vec<Tensor> = Vec::with_capacity(cfg.layers);
    let mut layers: Vec<LayerCache> = Vec::with_capacity(cfg.layers);
    let mut x = x0.clone();

    for l in 0..cfg.layers {
        let p = super::layer_prefix(l);
        let g1 = weights.tensor(&format!("{p}.ln1.g"))?;
        let b1 = weights.tensor(&format!("{p}.ln1.b"))?;
        let (ln1_out, ln1) = layer_norm(&x, n, d, g1.data(), b1.data());

        let wv = weights.effective_mat(&format!("{p}.attn.wv"))?;
        let bv = weights.tensor(&format!("{p}.attn.bv"))?;
        let mut v = vec![0.0; n * d];
        matmul(&mut v, &ln1_out, &wv, n, d, d);
        add_bias(&mut v, n, d, bv.data());

        let (q, k, a) = match attn_override {
            Some(maps_in) => {
                let a = maps_in[l].clone();
                if a.shape() != [h, n, n] {
                    return Err(Error::ShapeMismatch(format!(
                        "attention map {} has shape {:?}, expected [{h}, {n}, {n}]",
                        l,
                        a.shape()
                    )));
                }
                (Vec::new(), Vec::new(), a)
            }
            None => {
                let wq = weights.effective_mat(&format!("{p}.attn.wq"))?;
                let bq = weights.tensor(&format!("{p}.attn.bq"))?;
                let wk = weights.effective_mat(&format!("{p}.attn.wk"))?;
                let bk = weights.tensor(&format!("{p}.attn.bk"))?;
                let mut q = vec![0.0; n * d];
                matmul(&mut q, &ln1_out, &wq, n, d, d);
                add_bias(&mut q, n, d, bq.data());
                let mut k = vec![0.0; n * d];
                matmul(&mut k, &ln1_out, &wk, n, d, d);
                add_bias(&mut k, n, d, bk.data());

                let mut a = Tensor::zeros(&[h, n, n]);
                for hi in 0..h {
                    let off = hi * dh;
                    for i in 0..n {
                        let qi = &q[i * d + off..i * d + off + dh];
                        let row = &mut a.data_mut()[hi * n * n + i * n..hi * n * n + (i + 1) * n];
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..n {
                            let kj = &k[j * d + off..j * d + off + dh];
                            let s = crate::numkit::dot(qi, kj) * scale;
                            row[j] = s;
                            if s > mx {
                                mx = s;
                            }
                        }
                        let mut z = 0.0;
                        for rj in row.iter_mut() {
                            *rj = (*rj - mx).exp();
                            z += *rj;
                        }
                        for rj in row.iter_mut() {
                            *rj /= z;
                        }
                    }
                }
                (q, k, a)
            }
        };

        // attn_concat[i, off..off+dh] = sum_j A[hi,i,j] * v[j, off..off+dh]
        let mut attn_concat = vec![0.0; n * d];
        for hi in 0..h {
            let off = hi * dh;
            let a_h = &a.data()[hi * n * n..(hi + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    let w = a_h[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vr = &v[j * d + off..j * d + off + dh];
                    let or = &mut attn_concat[i * d + off..i * d + off + dh];
                    for (o, vv) in or.iter_mut().zip(vr) {
                        *o += w * vv;
                    }
                }
            }
        }

        let wo = weights.effective_mat(&format!("{p}.attn.wo"))?;
        let bo = weights.tensor(&format!("{p}.attn.bo"))?;
        let mut proj = vec![0.0; n * d];
        matmul(&mut proj, &attn_concat, &wo, n, d, d);
        add_bias(&mut proj, n, d, bo.data());
        let mut x_mid = x.clone();
        for (xm, pv) in x_mid.iter_mut().zip(&proj) {
            *xm += pv;
        }

        let g2 = weights.tensor(&format!("{p}.ln2.g"))?;
        let b2 = weights.tensor(&format!("{p}.ln2.b"))?;
        let (ln2_out, ln2) = layer_norm(&x_mid, n, d, g2.data(), b2.data());

        let w1 = weights.tensor(&format!("{p}.mlp.w1"))?;
        let bb1 = weights.tensor(&format!("{p}.mlp.b1"))?;
        let w2 = weights.tensor(&format!("{p}.mlp.w2"))?;
        let bb2 = weights.tensor(&format!("{p}.mlp.b2"))?;
        let mut mlp_pre = vec![0.0; n * m];
        matmul(&mut mlp_pre, &ln2_out, w1.data(), n, d, m);
        add_bias(&mut mlp_pre, n, m, bb1.data());
        let mlp_act: Vec<f64> = mlp_pre.iter().map(|&v| gelu(v)).collect();
        let mut mlp_out = vec![0.0; n * d];
        matmul(&mut mlp_out, &mlp_act, w2.data(), n, m, d);
        add_bias(&mut mlp_out, n, d, bb2.data());

        let mut x_out = x_mid.clone();
        for (xv, mv) in x_out.iter_mut().zip(&mlp_out) {
            *xv += mv;
        }

        maps.push(a);
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn_concat,
            x_mid,
            ln2,
            ln2_out,
            mlp_pre,
            mlp_act,
        });
    }

    let gf = weights.tensor("final_ln.g")?;
    let bf = weights.tensor("final_ln.b")?;
    let (lnf_out, final_ln) = layer_norm(&x, n, d, gf.data(), bf.data());
    let mut descriptor = lnf_out[..d].to_vec();
    let w_norm = normalize_in_place(&mut descriptor, "encode descriptor")?;

    Ok(AttentionTrace {
        maps,
        x0,
        patches,
        layers,
        x_final: x,
        final_ln,
        w_norm,
        descriptor,
        n,
        d,
        heads: h,
    })
}

/// Encodes one crop: the descriptor is the final-norm CLS output,
/// L2-normalized; the trace records every attention map and the activations
/// needed to differentiate through them later.
pub fn encode(weights: &WeightStore, crop: &ImageGrid) -> Result<(Descriptor, AttentionTrace)> {
    let patches = patchify(weights.config(), crop)?;
    let x0 = embed_tokens(weights, &patches)?;
    let trace = forward_core(weights, x0, patches, None)?;
    Ok((trace.descriptor(), trace))
}

/// Re-runs the forward pass of a traced crop with the given attention maps
/// substituted as inputs. This is the function whose exact gradients
/// [`attention_gradient`](super::attention_gradient) computes.
pub fn descriptor_from_attention(
    weights: &WeightStore,
    trace: &AttentionTrace,
    maps: &[Tensor],
) -> Result<Descriptor> {
    if !trace.matches(weights.config()) {
        return Err(Error::ShapeMismatch(
            "trace does not match encoder config".into(),
        ));
    }
    let out = forward_core(
        weights,
        trace.x0.clone(),
        trace.patches.clone(),
        Some(maps),
    )?;
    Ok(out.descriptor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_crop(cfg: &EncoderConfig, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = cfg.image_side * cfg.image_side * cfg.channels;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageGrid::from_vec(cfg.image_side, cfg.image_side, cfg.channels, data).unwrap()
    }

    #[test]
    fn descriptor_is_unit_norm() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let crop = random_crop(&cfg, 1);
        let (v, _) = encode(&store, &crop).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let crop = random_crop(&cfg, 2);
        let (a, _) = encode(&store, &crop).unwrap();
        let (b, _) = encode(&store, &crop).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let (_, trace) = encode(&store, &random_crop(&cfg, 3)).unwrap();
        let n = cfg.n_tokens();
        for map in &trace.maps {
            for hi in 0..cfg.heads {
                for i in 0..n {
                    let row = &map.data()[hi * n * n + i * n..hi * n * n + (i + 1) * n];
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn perturbing_one_patch_changes_descriptor() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let crop = random_crop(&cfg, 4);
        let (v0, _) = encode(&store, &crop).unwrap();
        let mut bumped = crop.clone();
        let mut px = bumped.pixel(3, 3).to_vec();
        px[0] = (px[0] + 0.5).min(1.0);
        bumped.set_pixel(3, 3, &px);
        let (v1, _) = encode(&store, &bumped).unwrap();
        let delta: f64 = v0
            .as_slice()
            .iter()
            .zip(v1.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 0.0);
    }

    #[test]
    fn shifting_content_changes_descriptor() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        // One bright block, then the same block shifted by a patch.
        let mut a = ImageGrid::new(cfg.image_side, cfg.image_side, cfg.channels);
        let mut b = ImageGrid::new(cfg.image_side, cfg.image_side, cfg.channels);
        for y in 0..8 {
            for x in 0..8 {
                a.set_pixel(y, x, &[1.0, 0.2, 0.2]);
                b.set_pixel(y + 8, x + 8, &[1.0, 0.2, 0.2]);
            }
        }
        let (va, _) = encode(&store, &a).unwrap();
        let (vb, _) = encode(&store, &b).unwrap();
        assert_ne!(va.as_slice(), vb.as_slice());
    }

    #[test]
    fn wrong_crop_size_rejected() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let crop = ImageGrid::new(16, 16, 3);
        assert!(encode(&store, &crop).is_err());
    }

    #[test]
    fn replay_with_traced_maps_reproduces_descriptor() {
        let cfg = EncoderConfig::default();
        let store = init_encoder(&cfg).unwrap();
        let (v, trace) = encode(&store, &random_crop(&cfg, 5)).unwrap();
        let replay = descriptor_from_attention(&store, &trace, &trace.maps).unwrap();
        for (a, b) in v.as_slice().iter().zip(replay.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
