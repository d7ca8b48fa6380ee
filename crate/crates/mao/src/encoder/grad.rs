//! Reverse-mode gradients through a traced forward pass.
//!
//! Two consumers, two paths:
//! - explainability and refinement differentiate the similarity score with
//!   respect to the attention maps, treating each map as an independent
//!   input (the Q/K softmax never enters the chain);
//! - training differentiates with respect to the parameters, which does go
//!   through softmax, layer norms and the patch embedding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::{
    dot, matmul_a_bt, matmul_acc, matmul_at_b_acc, Descriptor, Tensor,
};

use super::forward::{gelu_prime, AttentionTrace, LnCache};
use super::{layer_prefix, WeightStore};

/// Named gradient accumulator keyed like the weight store.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    map: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn accumulate(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        let entry = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape));
        debug_assert_eq!(entry.len(), values.len());
        for (e, v) in entry.data_mut().iter_mut().zip(values) {
            *e += v;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Merges another accumulator into this one.
    pub fn merge(&mut self, other: &GradStore) {
        for (name, t) in other.iter() {
            self.accumulate(name, t.shape(), t.data());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

fn ln_backward(
    cache: &LnCache,
    gamma: &[f64],
    dy: &[f64],
    rows: usize,
    d: usize,
    dx: &mut [f64],
    mut param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    for r in 0..rows {
        let x_hat = &cache.x_hat[r * d..(r + 1) * d];
        let dy_row = &dy[r * d..(r + 1) * d];
        let is = cache.inv_std[r];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..d {
            let g = gamma[c] * dy_row[c];
            mean_g += g;
            mean_gx += g * x_hat[c];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for c in 0..d {
            let g = gamma[c] * dy_row[c];
            dx[r * d + c] += is * (g - mean_g - x_hat[c] * mean_gx);
        }
        if let Some((dgamma, dbeta)) = param_grads.as_mut() {
            for c in 0..d {
                dgamma[c] += dy_row[c] * x_hat[c];
                dbeta[c] += dy_row[c];
            }
        }
    }
}

fn column_sums(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..rows {
        for c in 0..d {
            out[c] += x[r * d + c];
        }
    }
    out
}

struct SweepOutput {
    attention_bars: Vec<Tensor>,
    params: Option<GradStore>,
}

/// One reverse pass from a cotangent on the unit descriptor down to every
/// attention map (and optionally every parameter).
fn reverse_sweep(
    weights: &WeightStore,
    trace: &AttentionTrace,
    v_cotangent: &[f64],
    want_params: bool,
) -> Result<SweepOutput> {
    let cfg = weights.config();
    if !trace.matches(cfg) {
        return Err(Error::ShapeMismatch(
            "trace does not match encoder config".into(),
        ));
    }
    let n = trace.n;
    let d = trace.d;
    let h = trace.heads;
    let dh = cfg.head_dim();
    let m = cfg.mlp_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut params = want_params.then(GradStore::new);

    // v = w / |w|  =>  dw = (v_cot - (v . v_cot) v) / |w|
    let v = &trace.descriptor;
    let proj = dot(v, v_cotangent);
    let w_bar: Vec<f64> = v_cotangent
        .iter()
        .zip(v)
        .map(|(c, vi)| (c - proj * vi) / trace.w_norm)
        .collect();

    // Only the CLS row of the final norm carries gradient.
    let gf = weights.tensor("final_ln.g")?;
    let mut x_bar = vec![0.0; n * d];
    {
        let cls_cache = LnCache {
            x_hat: trace.final_ln.x_hat[..d].to_vec(),
            inv_std: vec![trace.final_ln.inv_std[0]],
        };
        let mut dgf = vec![0.0; d];
        let mut dbf = vec![0.0; d];
        ln_backward(
            &cls_cache,
            gf.data(),
            &w_bar,
            1,
            d,
            &mut x_bar[..d],
            params.as_mut().map(|_| (&mut dgf[..], &mut dbf[..])),
        );
        if let Some(p) = params.as_mut() {
            p.accumulate("final_ln.g", &[d], &dgf);
            p.accumulate("final_ln.b", &[d], &dbf);
        }
    }

    let mut attention_bars: Vec<Tensor> = (0..cfg.layers)
        .map(|_| Tensor::zeros(&[h, n, n]))
        .collect();

    for l in (0..cfg.layers).rev() {
        let p = layer_prefix(l);
        let cache = &trace.layers[l];
        let a_map = &trace.maps[l];

        // x_out = x_mid + gelu(ln2_out . w1 + b1) . w2 + b2
        let w1 = weights.tensor(&format!("{p}.mlp.w1"))?;
        let w2 = weights.tensor(&format!("{p}.mlp.w2"))?;
        let g2 = weights.tensor(&format!("{p}.ln2.g"))?;

        let mut act_bar = vec![0.0; n * m];
        matmul_a_bt(&mut act_bar, &x_bar, w2.data(), n, d, m);
        let mut pre_bar = act_bar;
        for (pb, pre) in pre_bar.iter_mut().zip(&cache.mlp_pre) {
            *pb *= gelu_prime(*pre);
        }
        let mut ln2_out_bar = vec![0.0; n * d];
        matmul_a_bt(&mut ln2_out_bar, &pre_bar, w1.data(), n, m, d);

        if let Some(pg) = params.as_mut() {
            let mut dw2 = vec![0.0; m * d];
            matmul_at_b_acc(&mut dw2, &cache.mlp_act, &x_bar, n, m, d);
            pg.accumulate(&format!("{p}.mlp.w2"), &[m, d], &dw2);
            pg.accumulate(&format!("{p}.mlp.b2"), &[d], &column_sums(&x_bar, n, d));
            let mut dw1 = vec![0.0; d * m];
            matmul_at_b_acc(&mut dw1, &cache.ln2_out, &pre_bar, n, d, m);
            pg.accumulate(&format!("{p}.mlp.w1"), &[d, m], &dw1);
            pg.accumulate(&format!("{p}.mlp.b1"), &[m], &column_sums(&pre_bar, n, m));
        }

        // x_mid_bar accumulates the residual and the LN2 path.
        let mut x_mid_bar = x_bar.clone();
        {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            ln_backward(
                &cache.ln2,
                g2.data(),
                &ln2_out_bar,
                n,
                d,
                &mut x_mid_bar,
                params.as_mut().map(|_| (&mut dg[..], &mut db[..])),
            );
            if let Some(pg) = params.as_mut() {
                pg.accumulate(&format!("{p}.ln2.g"), &[d], &dg);
                pg.accumulate(&format!("{p}.ln2.b"), &[d], &db);
            }
        }

        // x_mid = x_in + attn_concat . wo + bo
        let wo = weights.effective_mat(&format!("{p}.attn.wo"))?;
        let mut concat_bar = vec![0.0; n * d];
        matmul_a_bt(&mut concat_bar, &x_mid_bar, &wo, n, d, d);
        if let Some(pg) = params.as_mut() {
            let mut dwo = vec![0.0; d * d];
            matmul_at_b_acc(&mut dwo, &cache.attn_concat, &x_mid_bar, n, d, d);
            accumulate_projection(pg, weights, &format!("{p}.attn.wo"), d, &dwo)?;
            pg.accumulate(&format!("{p}.attn.bo"), &[d], &column_sums(&x_mid_bar, n, d));
        }

        // Per head: attention-map cotangent and the V path.
        let mut v_bar = vec![0.0; n * d];
        let a_bar_store = attention_bars[l].data_mut();
        let mut qk_bars = params.as_ref().map(|_| (vec![0.0; n * d], vec![0.0; n * d]));
        for hi in 0..h {
            let off = hi * dh;
            let a_h = &a_map.data()[hi * n * n..(hi + 1) * n * n];
            let a_bar_h = &mut a_bar_store[hi * n * n..(hi + 1) * n * n];
            for i in 0..n {
                let ob = &concat_bar[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let vj = &cache.v[j * d + off..j * d + off + dh];
                    a_bar_h[i * n + j] = dot(ob, vj);
                    let w = a_h[i * n + j];
                    if w != 0.0 {
                        let vb = &mut v_bar[j * d + off..j * d + off + dh];
                        for (vbv, obv) in vb.iter_mut().zip(ob) {
                            *vbv += w * obv;
                        }
                    }
                }
            }
            if let Some((q_bar, k_bar)) = qk_bars.as_mut() {
                // Softmax backward into the score matrix, then into Q and K.
                for i in 0..n {
                    let a_row = &a_h[i * n..(i + 1) * n];
                    let ab_row = &a_bar_h[i * n..(i + 1) * n];
                    let inner: f64 = a_row.iter().zip(ab_row).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let p_bar = a_row[j] * (ab_row[j] - inner) * scale;
                        if p_bar == 0.0 {
                            continue;
                        }
                        let kj = &cache.k[j * d + off..j * d + off + dh];
                        let qb = &mut q_bar[i * d + off..i * d + off + dh];
                        for (qv, kv) in qb.iter_mut().zip(kj) {
                            *qv += p_bar * kv;
                        }
                        let qi = &cache.q[i * d + off..i * d + off + dh];
                        let kb = &mut k_bar[j * d + off..j * d + off + dh];
                        for (kv, qv) in kb.iter_mut().zip(qi) {
                            *kv += p_bar * qv;
                        }
                    }
                }
            }
        }

        // ln1_out feeds V (always) and Q, K (parameter mode only).
        let wv = weights.effective_mat(&format!("{p}.attn.wv"))?;
        let mut ln1_out_bar = vec![0.0; n * d];
        matmul_a_bt(&mut ln1_out_bar, &v_bar, &wv, n, d, d);
        if let Some(pg) = params.as_mut() {
            let (q_bar, k_bar) = qk_bars.as_ref().expect("set in parameter mode");
            let wq = weights.effective_mat(&format!("{p}.attn.wq"))?;
            let wk = weights.effective_mat(&format!("{p}.attn.wk"))?;
            let mut tmp = vec![0.0; n * d];
            matmul_a_bt(&mut tmp, q_bar, &wq, n, d, d);
            for (o, t) in ln1_out_bar.iter_mut().zip(&tmp) {
                *o += t;
            }
            matmul_a_bt(&mut tmp, k_bar, &wk, n, d, d);
            for (o, t) in ln1_out_bar.iter_mut().zip(&tmp) {
                *o += t;
            }
            for (mat, bar) in [("wv", &v_bar), ("wq", q_bar), ("wk", k_bar)] {
                let mut dw = vec![0.0; d * d];
                matmul_at_b_acc(&mut dw, &cache.ln1_out, bar, n, d, d);
                accumulate_projection(pg, weights, &format!("{p}.attn.{mat}"), d, &dw)?;
                let bias = match mat {
                    "wv" => "bv",
                    "wq" => "bq",
                    _ => "bk",
                };
                pg.accumulate(&format!("{p}.attn.{bias}"), &[d], &column_sums(bar, n, d));
            }
        }

        let g1 = weights.tensor(&format!("{p}.ln1.g"))?;
        let mut x_in_bar = x_mid_bar;
        {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            ln_backward(
                &cache.ln1,
                g1.data(),
                &ln1_out_bar,
                n,
                d,
                &mut x_in_bar,
                params.as_mut().map(|_| (&mut dg[..], &mut db[..])),
            );
            if let Some(pg) = params.as_mut() {
                pg.accumulate(&format!("{p}.ln1.g"), &[d], &dg);
                pg.accumulate(&format!("{p}.ln1.b"), &[d], &db);
            }
        }
        x_bar = x_in_bar;
    }

    if let Some(pg) = params.as_mut() {
        // x0 = [cls; patches . w + b] + pos
        let np = cfg.n_patches();
        let pd = cfg.patch_dim();
        pg.accumulate("pos", &[n, d], &x_bar);
        pg.accumulate("cls", &[d], &x_bar[..d]);
        let mut dwp = vec![0.0; pd * d];
        matmul_at_b_acc(&mut dwp, &trace.patches, &x_bar[d..], np, pd, d);
        pg.accumulate("patch_proj.w", &[pd, d], &dwp);
        pg.accumulate("patch_proj.b", &[d], &column_sums(&x_bar[d..], np, d));
    }

    Ok(SweepOutput {
        attention_bars,
        params,
    })
}

/// Folds a gradient on an effective projection matrix into the base matrix
/// and, when adapters exist, into the low-rank pair.
fn accumulate_projection(
    grads: &mut GradStore,
    weights: &WeightStore,
    name: &str,
    d: usize,
    dw_eff: &[f64],
) -> Result<()> {
    grads.accumulate(name, &[d, d], dw_eff);
    if let (Some(a), Some(b)) = (
        weights.get(&format!("{name}.lora_a")),
        weights.get(&format!("{name}.lora_b")),
    ) {
        let rank = a.shape()[0];
        let mut db = vec![0.0; d * rank];
        matmul_a_bt(&mut db, dw_eff, a.data(), d, d, rank);
        grads.accumulate(&format!("{name}.lora_b"), &[d, rank], &db);
        let mut da = vec![0.0; rank * d];
        matmul_at_b_acc(&mut da, b.data(), dw_eff, d, rank, d);
        grads.accumulate(&format!("{name}.lora_a"), &[rank, d], &da);
    }
    Ok(())
}

/// Gradient of `s = cosine(direction, v)` with respect to every attention
/// map of the traced forward, each map treated as an independent leaf.
pub fn attention_gradient(
    weights: &WeightStore,
    trace: &AttentionTrace,
    direction: &Descriptor,
) -> Result<Vec<Tensor>> {
    if direction.dim() != trace.d {
        return Err(Error::ShapeMismatch(format!(
            "direction dim {} vs descriptor dim {}",
            direction.dim(),
            trace.d
        )));
    }
    let unit = direction.normalized().map_err(|_| Error::ZeroNorm("attention_gradient"))?;
    let out = reverse_sweep(weights, trace, unit.as_slice(), false)?;
    Ok(out.attention_bars)
}

/// Per-layer Jacobian of the unit descriptor with respect to the flattened
/// attention map, shape `[d, heads * n * n]`. For any unit direction `u`,
/// `u . J^l` equals the corresponding [`attention_gradient`] slice.
pub fn attention_jacobian(weights: &WeightStore, trace: &AttentionTrace) -> Result<Vec<Tensor>> {
    let d = trace.d;
    let n = trace.n;
    let h = trace.heads;
    let cols = h * n * n;
    let layers = weights.config().layers;
    let mut jac: Vec<Tensor> = (0..layers).map(|_| Tensor::zeros(&[d, cols])).collect();
    let mut seed = vec![0.0; d];
    for r in 0..d {
        seed[r] = 1.0;
        let out = reverse_sweep(weights, trace, &seed, false)?;
        seed[r] = 0.0;
        for (l, bars) in out.attention_bars.iter().enumerate() {
            jac[l].data_mut()[r * cols..(r + 1) * cols].copy_from_slice(bars.data());
        }
    }
    Ok(jac)
}

/// Full parameter gradients for a cotangent on the unit descriptor.
pub fn backward_to_params(
    weights: &WeightStore,
    trace: &AttentionTrace,
    v_cotangent: &[f64],
) -> Result<GradStore> {
    if v_cotangent.len() != trace.d {
        return Err(Error::ShapeMismatch(format!(
            "cotangent dim {} vs descriptor dim {}",
            v_cotangent.len(),
            trace.d
        )));
    }
    let out = reverse_sweep(weights, trace, v_cotangent, true)?;
    Ok(out.params.expect("parameter mode requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::forward::{descriptor_from_attention, encode};
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::numkit::{cosine_similarity, ImageGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            image_side: 16,
            patch_side: 8,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2.0,
            channels: 3,
            seed,
        }
    }

    fn random_crop(cfg: &EncoderConfig, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = cfg.image_side * cfg.image_side * cfg.channels;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageGrid::from_vec(cfg.image_side, cfg.image_side, cfg.channels, data).unwrap()
    }

    fn random_unit(dim: usize, seed: u64) -> Descriptor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Descriptor::new(v).normalized().unwrap()
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let cfg = tiny_config(seed + 10);
            let store = init_encoder(&cfg).unwrap();
            let crop = random_crop(&cfg, seed + 100);
            let (_, trace) = encode(&store, &crop).unwrap();
            let dir = random_unit(cfg.embed_dim, seed + 200);
            let grads = attention_gradient(&store, &trace, &dir).unwrap();

            let h = 1e-5;
            for l in 0..cfg.layers {
                for idx in 0..trace.maps[l].len() {
                    let mut maps_p = trace.maps.clone();
                    maps_p[l].data_mut()[idx] += h;
                    let vp = descriptor_from_attention(&store, &trace, &maps_p).unwrap();
                    let sp = cosine_similarity(&dir, &vp).unwrap();
                    maps_p[l].data_mut()[idx] -= 2.0 * h;
                    let vm = descriptor_from_attention(&store, &trace, &maps_p).unwrap();
                    let sm = cosine_similarity(&dir, &vm).unwrap();
                    let fd = (sp - sm) / (2.0 * h);
                    let an = grads[l].data()[idx];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "layer {l} idx {idx}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_unit_directions() {
        let cfg = tiny_config(3);
        let store = init_encoder(&cfg).unwrap();
        let (_, trace) = encode(&store, &random_crop(&cfg, 5)).unwrap();
        let u1 = random_unit(cfg.embed_dim, 1);
        let u2 = random_unit(cfg.embed_dim, 2);
        let sum = Descriptor::new(
            u1.as_slice()
                .iter()
                .zip(u2.as_slice())
                .map(|(a, b)| a + b)
                .collect(),
        );
        let norm = sum.norm();
        let g1 = attention_gradient(&store, &trace, &u1).unwrap();
        let g2 = attention_gradient(&store, &trace, &u2).unwrap();
        let gs = attention_gradient(&store, &trace, &sum).unwrap();
        for l in 0..cfg.layers {
            for i in 0..gs[l].len() {
                let expect = (g1[l].data()[i] + g2[l].data()[i]) / norm;
                assert!((gs[l].data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_direction_rejected() {
        let cfg = tiny_config(4);
        let store = init_encoder(&cfg).unwrap();
        let (_, trace) = encode(&store, &random_crop(&cfg, 6)).unwrap();
        let zero = Descriptor::new(vec![0.0; cfg.embed_dim]);
        assert!(attention_gradient(&store, &trace, &zero).is_err());
    }

    #[test]
    fn jacobian_factorization_matches_direct_gradient() {
        let cfg = tiny_config(7);
        let store = init_encoder(&cfg).unwrap();
        let (_, trace) = encode(&store, &random_crop(&cfg, 8)).unwrap();
        let jac = attention_jacobian(&store, &trace).unwrap();
        let n = cfg.n_tokens();
        let cols = cfg.heads * n * n;
        assert_eq!(jac[0].shape(), &[cfg.embed_dim, cols]);

        for seed in 0..3u64 {
            let u = random_unit(cfg.embed_dim, 40 + seed);
            let grads = attention_gradient(&store, &trace, &u).unwrap();
            for l in 0..cfg.layers {
                for c in 0..cols {
                    let mut ujl = 0.0;
                    for r in 0..cfg.embed_dim {
                        ujl += u.as_slice()[r] * jac[l].data()[r * cols + c];
                    }
                    assert!(
                        (ujl - grads[l].data()[c]).abs() < 1e-10,
                        "layer {l} col {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_shape_on_single_layer_single_head() {
        let cfg = EncoderConfig {
            image_side: 16,
            patch_side: 8,
            layers: 1,
            heads: 1,
            embed_dim: 8,
            mlp_ratio: 2.0,
            channels: 3,
            seed: 0,
        };
        let store = init_encoder(&cfg).unwrap();
        let (_, trace) = encode(&store, &random_crop(&cfg, 9)).unwrap();
        let jac = attention_jacobian(&store, &trace).unwrap();
        assert_eq!(jac.len(), 1);
        assert_eq!(jac[0].shape(), &[8, 25]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny_config(11);
        let mut store = init_encoder(&cfg).unwrap();
        store.add_adapters(2, 5).unwrap();
        // Move lora_b off zero so its gradient path is exercised.
        {
            let t = store.tensor_mut("layer00.attn.wq.lora_b").unwrap();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let crop = random_crop(&cfg, 12);
        let dir = random_unit(cfg.embed_dim, 13);
        let (_, trace) = encode(&store, &crop).unwrap();
        let grads = backward_to_params(&store, &trace, dir.as_slice()).unwrap();

        let score = |st: &super::WeightStore| -> f64 {
            let (v, _) = encode(st, &crop).unwrap();
            dot(dir.as_slice(), v.as_slice())
        };

        let h = 1e-6;
        let probes = [
            ("patch_proj.w", 5usize),
            ("cls", 2),
            ("pos", 9),
            ("layer00.attn.wq", 11),
            ("layer00.attn.wv", 3),
            ("layer00.attn.wo", 17),
            ("layer00.ln1.g", 4),
            ("layer00.mlp.w1", 8),
            ("layer01.mlp.w2", 6),
            ("layer01.attn.wk", 21),
            ("final_ln.g", 1),
            ("layer00.attn.wq.lora_a", 3),
            ("layer00.attn.wq.lora_b", 4),
        ];
        for (name, idx) in probes {
            let mut plus = store.clone();
            plus.tensor_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = store.clone();
            minus.tensor_mut(name).unwrap().data_mut()[idx] -= h;
            let fd = (score(&plus) - score(&minus)) / (2.0 * h);
            let an = grads.get(name).unwrap().data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-7);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{name}[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }
}
