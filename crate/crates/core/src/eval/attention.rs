use crate::error::{Error, Result};
use crate::model::{Forward, LayerAttention, Model, MultimodalInput};
use crate::numerics::Tensor;

/// `S x S` matrix of `||a_ij v_j||`, averaged over heads and either taken
/// from one encoder layer or averaged over all of them. `recorded` is the
/// output of a forward pass run with recording enabled.
pub fn normalized_attention_scores(
    recorded: Option<&[LayerAttention]>,
    layer: Option<usize>,
) -> Result<Tensor> {
    let layers = recorded.ok_or_else(|| {
        Error::Contract("attention recording was not enabled for this forward pass".into())
    })?;
    if layers.is_empty() {
        return Err(Error::Contract("no encoder layers were recorded".into()));
    }
    let chosen: Vec<&LayerAttention> = match layer {
        Some(l) if l >= layers.len() => {
            return Err(Error::Index {
                what: "encoder layer",
                index: l,
                limit: layers.len(),
            })
        }
        Some(l) => vec![&layers[l]],
        None => layers.iter().collect(),
    };
    let s = chosen[0].weights[0].rows();
    let mut out = vec![0.0; s * s];
    let mut count = 0usize;
    for la in chosen {
        for (a, v) in la.weights.iter().zip(&la.values) {
            let norms: Vec<f64> = (0..s)
                .map(|j| v.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            for i in 0..s {
                for j in 0..s {
                    out[i * s + j] += a.get(i, j) * norms[j];
                }
            }
            count += 1;
        }
    }
    for o in &mut out {
        *o /= count as f64;
    }
    Tensor::matrix(s, s, out)
}

/// Runs the encoder with recording on and returns the score matrix.
pub fn attention_scores_for(
    model: &Model,
    input: &MultimodalInput,
    layer: Option<usize>,
) -> Result<Tensor> {
    let mut fwd = Forward::new(model).with_recording();
    fwd.encode(input)?;
    normalized_attention_scores(fwd.recorded(), layer)
}
