//! ViT forward pass.
//!
//! The `*_graph` functions are generic over [`Graph`] and are shared by
//! eager inference and the autodiff tape. The plain functions wrap them
//! with [`Eager`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::tensor::{self, Scalar, Tensor};

use super::params::{layer_param, ModelParams, HEAD_BIAS, HEAD_WEIGHT};
use super::ViTConfig;

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Splits a C×H×W image into N = (H/P)·(W/P) flattened patches.
///
/// Patches are ordered row-major over the patch grid. Within a patch the
/// flattening order is (row, column, channel), i.e. the H×W×C layout.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "patchify",
                shape: s.to_vec(),
                reason: "expected C×H×W".into(),
            })
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: image.shape().to_vec(),
            reason: format!("H and W must be divisible by patch size {patch}"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (py * patch + dy, px * patch + dx);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

fn param<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    params: &'p ModelParams<T>,
    name: &str,
) -> Result<G::Var> {
    Ok(g.param(name, params.get(name)?))
}

fn linear<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    x: &G::Var,
    params: &'p ModelParams<T>,
    weight: &str,
    bias: &str,
) -> Result<G::Var> {
    let w = param(g, params, weight)?;
    let b = param(g, params, bias)?;
    let y = g.matmul(x, &w)?;
    g.add_bias(&y, &b)
}

/// Z₀ = [class token; patches·E + b] + E_pos.
pub fn embed_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    patches: &G::Var,
    params: &'p ModelParams<T>,
) -> Result<G::Var> {
    let proj = linear(g, patches, params, "embed.patch.weight", "embed.patch.bias")?;
    let cls = param(g, params, "embed.cls")?;
    let pos = param(g, params, "embed.pos")?;
    let tokens = g.concat_rows(&[cls, proj])?;
    g.add(&tokens, &pos)
}

/// softmax(Q·Kᵀ/√d_k)·V for one head.
pub fn attention_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    q: &G::Var,
    k: &G::Var,
    v: &G::Var,
) -> Result<G::Var> {
    let d_k = g.value(k).shape()[1];
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(&scores, T::one() / T::of(d_k as f64).sqrt())?;
    let weights = g.softmax_rows(&scores)?;
    g.matmul(&weights, v)
}

pub fn msa_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    x: &G::Var,
    params: &'p ModelParams<T>,
    layer: usize,
    num_heads: usize,
) -> Result<G::Var> {
    let p = |s: &str| layer_param(layer, s);
    let q = linear(g, x, params, &p("attn.w_q"), &p("attn.b_q"))?;
    let k = linear(g, x, params, &p("attn.w_k"), &p("attn.b_k"))?;
    let v = linear(g, x, params, &p("attn.w_v"), &p("attn.b_v"))?;
    let d = g.value(&q).shape()[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "hidden_dim {d} is not divisible by num_heads {num_heads}"
        )));
    }
    let d_k = d / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(&q, h * d_k, d_k)?;
        let kh = g.slice_cols(&k, h * d_k, d_k)?;
        let vh = g.slice_cols(&v, h * d_k, d_k)?;
        heads.push(attention_graph(g, &qh, &kh, &vh)?);
    }
    let joined = g.concat_cols(&heads)?;
    linear(g, &joined, params, &p("attn.w_o"), &p("attn.b_o"))
}

pub fn mlp_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    x: &G::Var,
    params: &'p ModelParams<T>,
    layer: usize,
) -> Result<G::Var> {
    let p = |s: &str| layer_param(layer, s);
    let hidden = linear(g, x, params, &p("mlp.w_1"), &p("mlp.b_1"))?;
    let hidden = g.gelu(&hidden)?;
    linear(g, &hidden, params, &p("mlp.w_2"), &p("mlp.b_2"))
}

fn norm<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    x: &G::Var,
    params: &'p ModelParams<T>,
    prefix: &str,
) -> Result<G::Var> {
    let scale = param(g, params, &format!("{prefix}.scale"))?;
    let shift = param(g, params, &format!("{prefix}.shift"))?;
    g.layer_norm(x, &scale, &shift, T::of(LN_EPS))
}

/// z' = MSA(LN₁(z)) + z; out = MLP(LN₂(z')) + z'.
pub fn encoder_block_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    z: &G::Var,
    params: &'p ModelParams<T>,
    layer: usize,
    num_heads: usize,
) -> Result<G::Var> {
    let h = norm(g, z, params, &layer_param(layer, "ln1"))?;
    let attn = msa_graph(g, &h, params, layer, num_heads)?;
    let z_mid = g.add(&attn, z)?;
    let h = norm(g, &z_mid, params, &layer_param(layer, "ln2"))?;
    let mlp = mlp_graph(g, &h, params, layer)?;
    g.add(&mlp, &z_mid)
}

/// Token representations after the last encoder block (before final norm).
pub fn encode_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    patches: &G::Var,
    params: &'p ModelParams<T>,
    config: &ViTConfig,
) -> Result<G::Var> {
    let mut z = embed_graph(g, patches, params)?;
    for layer in 0..config.num_layers {
        z = encoder_block_graph(g, &z, params, layer, config.num_heads)?;
    }
    Ok(z)
}

/// Final-norm class-token representation (1×D), the input to the head.
pub fn class_repr_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    patches: &G::Var,
    params: &'p ModelParams<T>,
    config: &ViTConfig,
) -> Result<G::Var> {
    let z = encode_graph(g, patches, params, config)?;
    let cls = g.row(&z, 0)?;
    norm(g, &cls, params, "final_norm")
}

/// 1×K logits for one patchified image.
pub fn logits_graph<'p, T: Scalar, G: Graph<'p, T>>(
    g: &mut G,
    patches: &G::Var,
    params: &'p ModelParams<T>,
    config: &ViTConfig,
) -> Result<G::Var> {
    let repr = class_repr_graph(g, patches, params, config)?;
    linear(g, &repr, params, HEAD_WEIGHT, HEAD_BIAS)
}

/// Eager embedding of an N×(P²·C) patch matrix into (N+1)×D tokens.
pub fn embed<T: Scalar>(patches: &Tensor<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut g = Eager::new();
    let x = g.input(patches.clone());
    Ok(embed_graph(&mut g, &x, params)?.into_owned())
}

/// Single attention head with explicit D×d_k projection slices.
pub fn attention_head<T: Scalar>(
    x: &Tensor<T>,
    w_q: &Tensor<T>,
    w_k: &Tensor<T>,
    w_v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let q = tensor::matmul(x, w_q)?;
    let k = tensor::matmul(x, w_k)?;
    let v = tensor::matmul(x, w_v)?;
    let mut g = Eager::new();
    let (q, k, v) = (g.input(q), g.input(k), g.input(v));
    Ok(attention_graph(&mut g, &q, &k, &v)?.into_owned())
}

pub fn multi_head_self_attention<T: Scalar>(
    z: &Tensor<T>,
    params: &ModelParams<T>,
    layer: usize,
    num_heads: usize,
) -> Result<Tensor<T>> {
    let mut g = Eager::new();
    let x = g.input(z.clone());
    Ok(msa_graph(&mut g, &x, params, layer, num_heads)?.into_owned())
}

pub fn encoder_block<T: Scalar>(
    z: &Tensor<T>,
    params: &ModelParams<T>,
    layer: usize,
    num_heads: usize,
) -> Result<Tensor<T>> {
    let mut g = Eager::new();
    let x = g.input(z.clone());
    Ok(encoder_block_graph(&mut g, &x, params, layer, num_heads)?.into_owned())
}

fn check_image<T: Scalar>(image: &Tensor<T>, config: &ViTConfig) -> Result<()> {
    let expected = [config.channels, config.image_size, config.image_size];
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

/// Encoder output tokens, (N+1)×D, for one C×H×W image.
pub fn encode<T: Scalar>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ViTConfig,
) -> Result<Tensor<T>> {
    check_image(image, config)?;
    let mut g = Eager::new();
    let x = g.input(patchify(image, config.patch_size)?);
    Ok(encode_graph(&mut g, &x, params, config)?.into_owned())
}

/// Class-token representation fed to the head, 1×D.
pub fn class_representation<T: Scalar>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ViTConfig,
) -> Result<Tensor<T>> {
    check_image(image, config)?;
    let mut g = Eager::new();
    let x = g.input(patchify(image, config.patch_size)?);
    Ok(class_repr_graph(&mut g, &x, params, config)?.into_owned())
}

/// 1×K logits for one C×H×W image.
pub fn forward_one<T: Scalar>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ViTConfig,
) -> Result<Tensor<T>> {
    check_image(image, config)?;
    let mut g = Eager::new();
    let x = g.input(patchify(image, config.patch_size)?);
    Ok(logits_graph(&mut g, &x, params, config)?.into_owned())
}

/// B×K logits for a B×C×H×W batch. Images are processed independently, so
/// each row depends only on its own image.
pub fn forward<T: Scalar>(
    images: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ViTConfig,
) -> Result<Tensor<T>> {
    if images.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "forward",
            shape: images.shape().to_vec(),
            reason: "expected B×C×H×W".into(),
        });
    }
    let rows = (0..images.shape()[0])
        .into_par_iter()
        .map(|b| {
            images
                .index_outer(b)
                .and_then(|img| forward_one(&img, params, config))
                .map_err(|e| e.at_sample(b))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    tensor::concat_rows(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::vit::params::count_parameters;

    fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.uniform())
    }

    fn tiny64(seed: u64) -> (ViTConfig, ModelParams<f64>) {
        let cfg = ViTConfig::tiny(3);
        let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::new(seed)).unwrap();
        // Non-zero head and biases so every path contributes.
        let mut rng = Rng::new(seed ^ 0xff);
        for (_, p) in params.iter_mut() {
            let shape = p.tensor.shape().to_vec();
            if p.tensor.data().iter().all(|&v| v == 0.0) {
                p.tensor = random(&mut rng, &shape, -0.1, 0.1);
            }
        }
        (cfg, params)
    }

    #[test]
    fn patchify_shapes() {
        let img = Tensor::<f32>::zeros(&[3, 224, 224]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        let img = Tensor::<f32>::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&img, 32).unwrap().shape(), &[1, 3072]);
        let img = Tensor::<f32>::zeros(&[3, 225, 224]);
        assert!(patchify(&img, 16).is_err());
    }

    #[test]
    fn patchify_ordering() {
        // 1 channel, 4×4, P=2: patch 1 is the top-right 2×2 block.
        let img = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(tensor::row(&p, 1).unwrap().data(), &[2.0, 3.0, 6.0, 7.0]);
        // 2 channels: channel varies fastest within a pixel.
        let img = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    }

    #[test]
    fn embed_examples() {
        let cfg = ViTConfig::tiny(2);
        let (n, d) = (cfg.num_patches(), cfg.hidden_dim);
        let mut params = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut rng = Rng::new(1);
        let bias = random(&mut rng, &[d], -1.0, 1.0);
        params.insert("embed.patch.bias", bias.clone());
        params.insert("embed.patch.weight", random(&mut rng, &[cfg.patch_dim(), d], -1.0, 1.0));
        let zeros = Tensor::zeros(&[n, cfg.patch_dim()]);

        let z = embed(&zeros, &params).unwrap();
        assert_eq!(z.shape(), &[n + 1, d]);
        assert!(z.data()[..d].iter().all(|&v| v == 0.0));
        for r in 1..=n {
            assert_eq!(tensor::row(&z, r).unwrap().data(), bias.data());
        }

        let pos = random(&mut rng, &[n + 1, d], -1.0, 1.0);
        params.insert("embed.pos", pos.clone());
        let z = embed(&zeros, &params).unwrap();
        let mut expected = tensor::add_row_broadcast(&pos, &bias).unwrap();
        expected.data_mut()[..d].copy_from_slice(&pos.data()[..d]);
        assert_eq!(z, expected);

        let cls = random(&mut rng, &[1, d], -1.0, 1.0);
        params.insert("embed.cls", cls.clone());
        let row0 = tensor::add(&cls, &tensor::row(&pos, 0).unwrap()).unwrap();
        for seed in 0..3 {
            let patches = random(&mut Rng::new(seed), &[n, cfg.patch_dim()], -3.0, 3.0);
            let z = embed(&patches, &params).unwrap();
            assert_eq!(tensor::row(&z, 0).unwrap(), row0);
        }
    }

    /// Three matmuls and an explicit exp-normalize, written without the
    /// library kernels.
    fn attention_oracle(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let dk = wq.shape()[1];
        let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..t)
                .map(|i| (0..dk).map(|j| (0..d).map(|s| x.get2(i, s) * w.get2(s, j)).sum()).collect())
                .collect()
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        (0..t)
            .map(|i| {
                let s: Vec<f64> = (0..t)
                    .map(|j| (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
                let z: f64 = e.iter().sum();
                (0..dk).map(|c| (0..t).map(|j| e[j] / z * v[j][c]).sum()).collect()
            })
            .collect()
    }

    #[test]
    fn attention_head_examples() {
        let mut rng = Rng::new(7);
        let (d, dk) = (8, 2);
        let wq = random(&mut rng, &[d, dk], -1.0, 1.0);
        let wk = random(&mut rng, &[d, dk], -1.0, 1.0);
        let wv = random(&mut rng, &[d, dk], -1.0, 1.0);

        let x1 = random(&mut rng, &[1, d], -1.0, 1.0);
        let out = attention_head(&x1, &wq, &wk, &wv).unwrap();
        assert_eq!(out, tensor::matmul(&x1, &wv).unwrap());

        let twin = tensor::concat_rows(&[&x1, &x1]).unwrap();
        let out = attention_head(&twin, &wq, &wk, &wv).unwrap();
        let v = tensor::matmul(&x1, &wv).unwrap();
        for r in 0..2 {
            assert!(tensor::row(&out, r).unwrap().max_abs_diff(&v) < 1e-15);
        }

        let x = random(&mut rng, &[4, d], -1.0, 1.0);
        let out = attention_head(&x, &wq, &wk, &wv).unwrap();
        let oracle = attention_oracle(&x, &wq, &wk, &wv);
        for i in 0..4 {
            for j in 0..dk {
                assert!((out.get2(i, j) - oracle[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_head_msa_is_attention_head_then_projection() {
        let mut cfg = ViTConfig::tiny(2);
        cfg.num_heads = 1;
        let mut rng = Rng::new(3);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let b_o = random(&mut rng, &[cfg.hidden_dim], -1.0, 1.0);
        params.insert(layer_param(0, "attn.b_o"), b_o.clone());
        let z = random(&mut rng, &[5, cfg.hidden_dim], -1.0, 1.0);
        let msa = multi_head_self_attention(&z, &params, 0, 1).unwrap();
        let t = |s: &str| params.tensor(&layer_param(0, s)).unwrap();
        let head = attention_head(&z, t("attn.w_q"), t("attn.w_k"), t("attn.w_v")).unwrap();
        let expected =
            tensor::add_row_broadcast(&tensor::matmul(&head, t("attn.w_o")).unwrap(), &b_o).unwrap();
        assert_eq!(msa, expected);
    }

    #[test]
    fn zeroed_second_head_yields_zero_block() {
        let mut cfg = ViTConfig::tiny(2);
        cfg.num_heads = 2;
        let d = cfg.hidden_dim;
        let dk = cfg.head_dim();
        let mut rng = Rng::new(4);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        params.insert(layer_param(0, "attn.w_o"), Tensor::identity(d));
        for w in ["attn.w_q", "attn.w_k", "attn.w_v"] {
            let name = layer_param(0, w);
            let mut t = params.tensor(&name).unwrap().clone();
            for r in 0..d {
                for c in dk..d {
                    t.data_mut()[r * d + c] = 0.0;
                }
            }
            params.insert(name, t);
        }
        let z = random(&mut rng, &[5, d], -1.0, 1.0);
        let out = multi_head_self_attention(&z, &params, 0, 2).unwrap();
        let block = tensor::slice_cols(&out, dk, d - dk).unwrap();
        assert!(block.data().iter().all(|&v| v == 0.0));
        let first = tensor::slice_cols(&out, 0, dk).unwrap();
        assert!(first.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn msa_is_equivariant_to_token_permutation() {
        let (cfg, params) = tiny64(8);
        let mut rng = Rng::new(9);
        let z = random(&mut rng, &[5, cfg.hidden_dim], -1.0, 1.0);
        let perm = [0usize, 3, 1, 4, 2];
        let permuted = Tensor::from_fn(z.shape(), |i| {
            let (r, c) = (i / cfg.hidden_dim, i % cfg.hidden_dim);
            z.get2(perm[r], c)
        });
        let a = multi_head_self_attention(&z, &params, 0, cfg.num_heads).unwrap();
        let b = multi_head_self_attention(&permuted, &params, 0, cfg.num_heads).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            let diff = tensor::row(&b, r).unwrap().max_abs_diff(&tensor::row(&a, src).unwrap());
            assert!(diff < 1e-12, "row {r}: {diff}");
        }
    }

    #[test]
    fn encoder_block_residual_identity() {
        let cfg = ViTConfig::tiny(2);
        let params = ModelParams::<f64>::zeros(&cfg).unwrap();
        let z = random(&mut Rng::new(1), &[5, cfg.hidden_dim], -2.0, 2.0);
        assert_eq!(encoder_block(&z, &params, 0, cfg.num_heads).unwrap(), z);
    }

    #[test]
    fn encoder_block_matches_hand_composition() {
        let (cfg, params) = tiny64(10);
        let z = random(&mut Rng::new(2), &[5, cfg.hidden_dim], -2.0, 2.0);
        let t = |s: &str| params.tensor(&layer_param(1, s)).unwrap();
        let eps = LN_EPS;
        let h = tensor::layer_norm(&z, t("ln1.scale"), t("ln1.shift"), eps).unwrap();
        let a = multi_head_self_attention(&h, &params, 1, cfg.num_heads).unwrap();
        let z1 = tensor::add(&a, &z).unwrap();
        let h2 = tensor::layer_norm(&z1, t("ln2.scale"), t("ln2.shift"), eps).unwrap();
        let m = tensor::add_row_broadcast(&tensor::matmul(&h2, t("mlp.w_1")).unwrap(), t("mlp.b_1")).unwrap();
        let m = tensor::gelu(&m).unwrap();
        let m = tensor::add_row_broadcast(&tensor::matmul(&m, t("mlp.w_2")).unwrap(), t("mlp.b_2")).unwrap();
        let expected = tensor::add(&m, &z1).unwrap();
        let got = encoder_block(&z, &params, 1, cfg.num_heads).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn encoder_block_is_not_homogeneous() {
        let (cfg, params) = tiny64(11);
        let z = random(&mut Rng::new(3), &[5, cfg.hidden_dim], -2.0, 2.0);
        let z2 = tensor::scale(&z, 2.0).unwrap();
        let out = encoder_block(&z, &params, 0, cfg.num_heads).unwrap();
        let out2 = encoder_block(&z2, &params, 0, cfg.num_heads).unwrap();
        assert!(out2.max_abs_diff(&tensor::scale(&out, 2.0).unwrap()) > 1e-3);
    }

    #[test]
    fn forward_batch_independence() {
        let (cfg, params) = tiny64(12);
        let mut rng = Rng::new(4);
        let a = random(&mut rng, &[3, 32, 32], -1.0, 1.0);
        let b = random(&mut rng, &[3, 32, 32], -1.0, 1.0);
        let ab = forward(&Tensor::stack(&[a.clone(), b.clone()]).unwrap(), &params, &cfg).unwrap();
        let fa = forward(&Tensor::stack(&[a.clone()]).unwrap(), &params, &cfg).unwrap();
        let fb = forward(&Tensor::stack(&[b.clone()]).unwrap(), &params, &cfg).unwrap();
        assert_eq!(ab, tensor::concat_rows(&[&fa, &fb]).unwrap());

        let twins = forward(&Tensor::stack(&[a.clone(), a]).unwrap(), &params, &cfg).unwrap();
        assert_eq!(tensor::row(&twins, 0).unwrap(), tensor::row(&twins, 1).unwrap());
        assert_eq!(twins.shape(), &[2, 3]);
    }

    #[test]
    fn forward_is_pure_and_finite() {
        let cfg = ViTConfig::tiny(4);
        let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(13)).unwrap();
        let mut rng = Rng::new(14);
        let imgs = Tensor::<f32>::from_fn(&[4, 3, 32, 32], |_| (rng.uniform() * 6.0 - 3.0) as f32);
        let a = forward(&imgs, &params, &cfg).unwrap();
        let b = forward(&imgs, &params, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_reports_offending_sample() {
        let cfg = ViTConfig::tiny(2);
        let params = ModelParams::<f32>::zeros(&cfg).unwrap();
        let imgs = Tensor::<f32>::zeros(&[2, 3, 16, 16]);
        match forward(&imgs, &params, &cfg) {
            Err(Error::Sample { index: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positional_embedding_breaks_permutation_equivariance() {
        let (cfg, params) = tiny64(15);
        let img = random(&mut Rng::new(5), &[3, 32, 32], -1.0, 1.0);
        let patches = patchify(&img, cfg.patch_size).unwrap();
        let perm = [1usize, 0, 3, 2];
        let permuted = Tensor::from_fn(patches.shape(), |i| {
            let (r, c) = (i / cfg.patch_dim(), i % cfg.patch_dim());
            patches.get2(perm[r], c)
        });
        let run = |p: &Tensor<f64>| {
            let mut g = Eager::new();
            let x = g.input(p.clone());
            encode_graph(&mut g, &x, &params, &cfg).unwrap().into_owned()
        };
        let (a, b) = (run(&patches), run(&permuted));
        let moved = tensor::row(&b, 1).unwrap().max_abs_diff(&tensor::row(&a, 2).unwrap());
        assert!(moved > 1e-6);
    }

    #[test]
    fn tiny_parameter_count_matches_layout() {
        let cfg = ViTConfig::tiny(2);
        let params = ModelParams::<f32>::zeros(&cfg).unwrap();
        let d = cfg.hidden_dim;
        let per_layer = 4 * (d * d + d) + 4 * d + 2 * d * cfg.mlp_dim + cfg.mlp_dim + d;
        let expected = cfg.patch_dim() * d + d + d + (cfg.num_patches() + 1) * d
            + cfg.num_layers * per_layer
            + 2 * d
            + d * 2
            + 2;
        assert_eq!(count_parameters(&params, false), expected);
    }
}
