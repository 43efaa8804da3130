#![allow(dead_code)]

use std::collections::BTreeMap;

use guidemt::adapters::{is_adapter_param, FreezePolicy};
use guidemt::data::{encoder_input, ImageFeatures, RESERVED_TOKENS};
use guidemt::guidance::{AlignmentRecord, GuidanceMatrix};
use guidemt::model::{Model, ModelConfig, MultimodalInput};
use guidemt::numerics::Tensor;
use guidemt::pipeline::ExperimentConfig;
use rand::Rng;

pub const DESK_TOML: &str = include_str!("../../../../configs/desk.toml");

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK_TOML).expect("configs/desk.toml parses")
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn p<'a>(m: &'a Model, name: &str) -> &'a Tensor {
    m.params.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|k| row[k] * w.get(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn linear(m: &Model, x: &Mat, prefix: &str) -> Mat {
    affine(x, p(m, &format!("{prefix}.w")), p(m, &format!("{prefix}.b")))
}

fn norm(m: &Model, x: &Mat, prefix: &str) -> Mat {
    let g = p(m, &format!("{prefix}.g")).data();
    let b = p(m, &format!("{prefix}.b")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + m.config.layer_norm_eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / s * g[j] + b[j]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn adapter(m: &Model, x: &Mat, prefix: &str) -> Mat {
    if !m.params.contains(&format!("{prefix}.down.w")) {
        return x.clone();
    }
    let h = linear(m, x, &format!("{prefix}.down"));
    let h: Mat = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    add(x, &linear(m, &h, &format!("{prefix}.up")))
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Attention where each query row attends to the keys allowed by `allow`.
fn attention(m: &Model, x: &Mat, prefix: &str, allow: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = affine(x, p(m, &format!("{prefix}.wq")), p(m, &format!("{prefix}.bq")));
    let k = affine(x, p(m, &format!("{prefix}.wk")), p(m, &format!("{prefix}.bk")));
    let v = affine(x, p(m, &format!("{prefix}.wv")), p(m, &format!("{prefix}.bv")));
    let (heads, d) = (m.config.n_heads, m.config.d_model);
    let dk = d / heads;
    let s = x.len();
    let mut cat = vec![vec![0.0; d]; s];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..s {
            let keys: Vec<usize> = (0..s).filter(|&j| allow(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&keys) {
                for c in cols.clone() {
                    cat[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    affine(&cat, p(m, &format!("{prefix}.wo")), p(m, &format!("{prefix}.bo")))
}

/// Straight-line encoder written independently of the tape. With
/// `guidance = None` every position attends to every other one.
pub fn reference_encode(m: &Model, input: &MultimodalInput, guidance: Option<&GuidanceMatrix>) -> Mat {
    let d = m.config.d_model;
    let emb = p(m, "embed.tokens");
    let mut x: Mat = input
        .text_ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|i| {
                    let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let pe = if i % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
                    emb.get(id, i) * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect();
    if input.local_features.rows() > 0 {
        x.extend(linear(m, &mat(&input.local_features), "visual.local"));
    }
    if let Some(g) = &input.global_feature {
        x.extend(linear(m, &vec![g.clone()], "visual.global"));
    }
    let allow = |i: usize, j: usize| guidance.map_or(true, |c| c.get(i, j));
    for l in 0..m.config.n_encoder_layers {
        let pre = format!("enc.{l}");
        let a = attention(m, &x, &format!("{pre}.attn"), &allow);
        let a = adapter(m, &a, &format!("{pre}.adapter_attn"));
        x = norm(m, &add(&x, &a), &format!("{pre}.ln1"));
        let h = affine(&x, p(m, &format!("{pre}.ffn.w1")), p(m, &format!("{pre}.ffn.b1")));
        let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let f = affine(&h, p(m, &format!("{pre}.ffn.w2")), p(m, &format!("{pre}.ffn.b2")));
        let f = adapter(m, &f, &format!("{pre}.adapter_ffn"));
        x = norm(m, &add(&x, &f), &format!("{pre}.ln2"));
    }
    x
}

/// Gives every adapter random non-zero weights so that it is not the
/// identity.
pub fn randomize_adapters(m: &mut Model, rng: &mut impl Rng) {
    perturb(m, rng, &|n| is_adapter_param(n), 0.5);
}

/// Adds uniform noise of half-width `scale` to every parameter selected by
/// `pick`, zero-initialized biases included.
pub fn perturb(m: &mut Model, rng: &mut impl Rng, pick: &dyn Fn(&str) -> bool, scale: f64) {
    let names: Vec<String> = m.params.names().filter(|n| pick(n)).map(str::to_string).collect();
    for n in names {
        let t = m.params.get(&n).unwrap().clone();
        let data = t.data().iter().map(|v| v + rng.gen_range(-scale..scale)).collect();
        m.params.overwrite(&n, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    }
}

pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let n_heads = rng.gen_range(1..=3);
    let d_model = n_heads * 4 * rng.gen_range(1..=2);
    ModelConfig {
        vocab_size: RESERVED_TOKENS + rng.gen_range(3..12),
        d_model,
        n_heads,
        n_encoder_layers: rng.gen_range(1..=2),
        n_decoder_layers: 1,
        d_ffn: rng.gen_range(4..16),
        max_text_len: 10,
        n_local_features: 3,
        d_local_in: rng.gen_range(1..6),
        d_global_in: rng.gen_range(1..6),
        adapter_reduction: 4,
        ..ModelConfig::default()
    }
}

pub fn random_model(rng: &mut impl Rng) -> Model {
    let cfg = random_config(rng);
    let mut m = Model::init(cfg, FreezePolicy::FrozenWithAdapters, rng).unwrap();
    perturb(&mut m, rng, &|_| true, 0.3);
    m
}

/// Random source sentence, features and alignments for `cfg`.
pub fn random_input(cfg: &ModelConfig, rng: &mut impl Rng) -> MultimodalInput {
    let len = rng.gen_range(1..cfg.max_text_len);
    let source: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED_TOKENS..cfg.vocab_size)).collect();
    let n = rng.gen_range(0..=cfg.n_local_features);
    let image = ImageFeatures {
        local: Tensor::matrix(n, cfg.d_local_in, (0..n * cfg.d_local_in).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap(),
        global: (0..cfg.d_global_in).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    };
    let mut align = Vec::new();
    if n > 0 {
        for _ in 0..rng.gen_range(0..3) {
            let s = rng.gen_range(0..len);
            let e = rng.gen_range(s + 1..=len);
            align.push(AlignmentRecord::new(s, e, rng.gen_range(0..n)));
        }
    }
    encoder_input(&source, &image, &align).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Worst relative error of `analytic` against central differences of
/// `loss` over every entry of every parameter in `analytic`, and the
/// parameter where it occurs.
pub fn finite_difference_check(
    model: &Model,
    analytic: &BTreeMap<String, Tensor>,
    loss: &dyn Fn(&Model) -> f64,
    h: f64,
) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0usize);
    let mut m = model.clone();
    for (name, g) in analytic {
        let base = model.params.get(name).unwrap().clone();
        for k in 0..base.numel() {
            let mut plus = base.data().to_vec();
            plus[k] += h;
            m.params.overwrite(name, Tensor::new(base.shape().to_vec(), plus).unwrap()).unwrap();
            let lp = loss(&m);
            let mut minus = base.data().to_vec();
            minus[k] -= h;
            m.params.overwrite(name, Tensor::new(base.shape().to_vec(), minus).unwrap()).unwrap();
            let lm = loss(&m);
            let numeric = (lp - lm) / (2.0 * h);
            let a = g.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, name.clone(), k);
            }
        }
        m.params.overwrite(name, base).unwrap();
    }
    worst
}
