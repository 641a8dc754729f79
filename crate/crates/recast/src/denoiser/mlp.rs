//! Vector-data denoiser: a stack of swish blocks, each conditioned on a
//! projection of the sinusoidal time embedding.

use crate::autodiff::Tensor;
use crate::denoiser::{time_embedding, DenoiserConfig, Init, ModelView};
use crate::error::Result;

pub(crate) fn param_spec(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.data_shape[0];
    let e = cfg.time_embed_dim;
    let mut spec = Vec::new();
    let mut prev = d;
    for (i, &w) in cfg.hidden.iter().enumerate() {
        spec.push((format!("mlp.{}.weight", i), vec![prev, w], Init::FanIn(prev)));
        spec.push((format!("mlp.{}.bias", i), vec![w], Init::Zero));
        spec.push((format!("mlp.{}.temb.weight", i), vec![e, w], Init::FanIn(e)));
        spec.push((format!("mlp.{}.temb.bias", i), vec![w], Init::Zero));
        prev = w;
    }
    spec.push(("out.weight".into(), vec![prev, d], Init::FanIn(prev)));
    spec.push(("out.bias".into(), vec![d], Init::Zero));
    spec
}

pub(crate) fn forward(view: &ModelView, x: &Tensor, t: usize) -> Result<Tensor> {
    let cfg = view.config();
    let d = cfg.data_shape[0];
    let emb = time_embedding(t, cfg.time_embed_dim)?.reshape(&[1, cfg.time_embed_dim])?;

    let mut h = x.reshape(&[1, d])?;
    for i in 0..cfg.hidden.len() {
        let w = view.p(&format!("mlp.{}.weight", i))?;
        let b = view.p(&format!("mlp.{}.bias", i))?;
        let tw = view.p(&format!("mlp.{}.temb.weight", i))?;
        let tb = view.p(&format!("mlp.{}.temb.bias", i))?;
        let width = cfg.hidden[i];
        let lin = h.matmul(w)?.add(&b.reshape(&[1, width])?)?;
        let cond = emb.matmul(tw)?.add(&tb.reshape(&[1, width])?)?;
        h = lin.add(&cond)?.swish()?;
    }
    let w = view.p("out.weight")?;
    let b = view.p("out.bias")?;
    h.matmul(w)?.add(&b.reshape(&[1, d])?)?.reshape(&[d])
}
