use rand::Rng;

use crate::adapters::{BottleneckAdapter, ParameterRegistry};
use crate::error::Result;
use crate::numerics::Tensor;

use super::ModelConfig;

pub(crate) const ATTN_WEIGHTS: [&str; 4] = ["wq", "wk", "wv", "wo"];
pub(crate) const ATTN_BIASES: [&str; 4] = ["bq", "bk", "bv", "bo"];

pub(crate) fn enc_prefix(layer: usize) -> String {
    format!("enc.{layer}")
}

pub(crate) fn dec_prefix(layer: usize) -> String {
    format!("dec.{layer}")
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

fn attention(reg: &mut ParameterRegistry, rng: &mut impl Rng, prefix: &str, d: usize) {
    for (w, b) in ATTN_WEIGHTS.iter().zip(ATTN_BIASES) {
        reg.insert(format!("{prefix}.{w}"), xavier(rng, d, d), false);
        reg.insert(format!("{prefix}.{b}"), Tensor::zeros(&[d]), false);
    }
}

fn norm(reg: &mut ParameterRegistry, prefix: &str, d: usize) {
    reg.insert(format!("{prefix}.g"), Tensor::filled(&[d], 1.0), false);
    reg.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), false);
}

fn ffn(reg: &mut ParameterRegistry, rng: &mut impl Rng, prefix: &str, d: usize, f: usize) {
    reg.insert(format!("{prefix}.w1"), xavier(rng, d, f), false);
    reg.insert(format!("{prefix}.b1"), Tensor::zeros(&[f]), false);
    reg.insert(format!("{prefix}.w2"), xavier(rng, f, d), false);
    reg.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]), false);
}

fn adapter(
    reg: &mut ParameterRegistry,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<()> {
    BottleneckAdapter::init(cfg.d_model, cfg.adapter_reduction, rng)?.register(reg, prefix, false);
    Ok(())
}

/// Full parameter set: backbone, adapters and visual projections, all
/// marked trainable. Apply a freeze policy afterwards.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParameterRegistry> {
    cfg.validate()?;
    let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
    let mut reg = ParameterRegistry::default();

    let scale = 1.0 / (d as f64).sqrt();
    let emb = (0..v * d).map(|_| rng.gen_range(-scale..scale)).collect();
    reg.insert("embed.tokens", Tensor::matrix(v, d, emb)?, false);

    for l in 0..cfg.n_encoder_layers {
        let p = enc_prefix(l);
        attention(&mut reg, rng, &format!("{p}.attn"), d);
        norm(&mut reg, &format!("{p}.ln1"), d);
        ffn(&mut reg, rng, &format!("{p}.ffn"), d, f);
        norm(&mut reg, &format!("{p}.ln2"), d);
    }
    for l in 0..cfg.n_decoder_layers {
        let p = dec_prefix(l);
        attention(&mut reg, rng, &format!("{p}.self"), d);
        norm(&mut reg, &format!("{p}.ln1"), d);
        attention(&mut reg, rng, &format!("{p}.cross"), d);
        norm(&mut reg, &format!("{p}.ln2"), d);
        ffn(&mut reg, rng, &format!("{p}.ffn"), d, f);
        norm(&mut reg, &format!("{p}.ln3"), d);
    }
    reg.insert("dec.out.w", xavier(rng, d, v), false);
    reg.insert("dec.out.b", Tensor::zeros(&[v]), false);

    for l in 0..cfg.n_encoder_layers {
        let p = enc_prefix(l);
        adapter(&mut reg, rng, &format!("{p}.adapter_attn"), cfg)?;
        adapter(&mut reg, rng, &format!("{p}.adapter_ffn"), cfg)?;
    }
    if cfg.decoder_adapters {
        for l in 0..cfg.n_decoder_layers {
            let p = dec_prefix(l);
            for site in ["self", "cross", "ffn"] {
                adapter(&mut reg, rng, &format!("{p}.adapter_{site}"), cfg)?;
            }
        }
    }
    if cfg.separate_vmlm_head {
        reg.insert("vmlm.adapter_head.w", xavier(rng, d, v), false);
        reg.insert("vmlm.adapter_head.b", Tensor::zeros(&[v]), false);
    }
    reg.insert("visual.local.w", xavier(rng, cfg.d_local_in, d), false);
    reg.insert("visual.local.b", Tensor::zeros(&[d]), false);
    reg.insert("visual.global.w", xavier(rng, cfg.d_global_in, d), false);
    reg.insert("visual.global.b", Tensor::zeros(&[d]), false);
    Ok(reg)
}
