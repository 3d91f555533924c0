//! Non-local self-attention over the spatial positions of a feature map.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Query, key, value and output projections, each a `[C_out, C_in]` matrix
/// acting on the channel dimension.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
}

impl AttentionParams {
    /// Projections keep the channel count; `w_out` starts at zero so the block
    /// begins as the identity.
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            w_query: ps.he_uniform(&format!("{name}.query"), &[c, c], c)?.as_tensor().clone(),
            w_key: ps.he_uniform(&format!("{name}.key"), &[c, c], c)?.as_tensor().clone(),
            w_value: ps.he_uniform(&format!("{name}.value"), &[c, c], c)?.as_tensor().clone(),
            w_out: ps.constant(&format!("{name}.out"), &[c, c], 0.0)?.as_tensor().clone(),
        })
    }

    fn check(&self, c: usize) -> Result<()> {
        let (qo, qi) = self.w_query.dims2()?;
        let (ko, ki) = self.w_key.dims2()?;
        let (vo, vi) = self.w_value.dims2()?;
        let (oo, oi) = self.w_out.dims2()?;
        if qi != c || ki != c || vi != c || qo != ko || oi != vo || oo != c {
            return Err(Error::Shape(format!(
                "attention projections do not conform to {c} feature channels"
            )));
        }
        Ok(())
    }
}

/// `S = W_out G + F` with `G = softmax(psi(F)^T phi(F)) h(F)`; the softmax runs
/// over key positions for each query position. `[B, C, H, W] -> [B, C, H, W]`.
pub fn self_attention(features: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    params.check(c)?;
    let n = h * w;
    let f = features.reshape((b, c, n))?;
    let project = |m: &Tensor| -> Result<Tensor> { Ok(m.broadcast_left(b)?.matmul(&f)?) };
    let q = project(&params.w_query)?;
    let k = project(&params.w_key)?;
    let v = project(&params.w_value)?;
    let logits = q.transpose(1, 2)?.contiguous()?.matmul(&k)?;
    let attn = candle_nn::ops::softmax(&logits, 2)?;
    let g = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
    let out = (project_out(&params.w_out, &g, b)? + f)?;
    Ok(out.reshape((b, c, h, w))?)
}

fn project_out(w_out: &Tensor, g: &Tensor, b: usize) -> Result<Tensor> {
    Ok(w_out.broadcast_left(b)?.matmul(g)?)
}
