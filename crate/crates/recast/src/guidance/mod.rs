//! The embedding abstraction standing in for a vision-language encoder pair,
//! and every loss the fine-tuner optimizes: global and directional embedding
//! losses, the identity penalty, the composed objective, and the base
//! noise-prediction training loss.

mod embedders;
mod recipe;

pub use embedders::{
    builtin_embedder, load_anchor_file, BuiltinEmbedder, ChannelStatsEmbedder,
    ClassifierEmbedder, LinearProbeEmbedder,
};
pub use recipe::{lr_at, EditRecipe, LrRamp, RampMode};

use crate::autodiff::Tensor;
use crate::denoiser::NoiseModel;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::Schedule;

/// Degenerate-direction threshold for the cosine losses.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Maps data tensors and named anchors ("text" stand-ins) into one
/// comparison space. Image embedding is differentiable; anchors are
/// constants. Implementations must be deterministic.
pub trait Embedder {
    fn dim(&self) -> usize;

    fn embed_image(&self, x: &Tensor) -> Result<Tensor>;

    fn embed_anchor(&self, name: &str) -> Result<Tensor>;
}

fn l2_norm_value(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Differentiable cosine between a (possibly graph-attached) vector and a
/// constant vector of the same dimension.
fn cosine_against_const(v: &Tensor, c: &Tensor) -> Result<Tensor> {
    let c_norm = l2_norm_value(c);
    let dot = v.mul(c)?.sum()?;
    let v_norm = v.mul(v)?.sum()?.sqrt()?;
    dot.div(&v_norm.mul_scalar(c_norm)?)
}

/// 1 - cos(E_I(x_gen), E_T(y_tar)), in [0, 2].
pub fn global_loss(e: &dyn Embedder, x_gen: &Tensor, y_tar: &str) -> Result<Tensor> {
    let img = e.embed_image(x_gen)?;
    let anchor = e.embed_anchor(y_tar)?;
    if l2_norm_value(&img) < DIRECTION_EPS || l2_norm_value(&anchor) < DIRECTION_EPS {
        return Err(Error::ZeroEmbedding);
    }
    cosine_against_const(&img, &anchor)?.scalar_sub(1.0)
}

/// The image-direction / anchor-direction cosine shared by the directional
/// loss and the directional-similarity metric.
pub fn directional_cosine(
    e: &dyn Embedder,
    x_gen: &Tensor,
    y_tar: &str,
    x_ref: &Tensor,
    y_ref: &str,
) -> Result<Tensor> {
    let delta_t = e.embed_anchor(y_tar)?.sub(&e.embed_anchor(y_ref)?)?.detached();
    if l2_norm_value(&delta_t) < DIRECTION_EPS {
        return Err(Error::DegenerateDirection { which: "anchor" });
    }
    let delta_i = e.embed_image(x_gen)?.sub(&e.embed_image(x_ref)?)?;
    if l2_norm_value(&delta_i) < DIRECTION_EPS {
        return Err(Error::DegenerateDirection { which: "image" });
    }
    cosine_against_const(&delta_i, &delta_t)
}

/// 1 - <dI, dT> / (|dI| |dT|), in [0, 2]; errors when either direction
/// degenerates (x_gen ~ x_ref or y_tar ~ y_ref).
pub fn directional_loss(
    e: &dyn Embedder,
    x_gen: &Tensor,
    y_tar: &str,
    x_ref: &Tensor,
    y_ref: &str,
) -> Result<Tensor> {
    directional_cosine(e, x_gen, y_tar, x_ref, y_ref)?.scalar_sub(1.0)
}

/// lambda_l1 * mean|x0 - x_hat| + lambda_id * (1 - cos of identity
/// embeddings); the second term is zero without an identity embedder.
pub fn identity_loss(
    x_hat: &Tensor,
    x0: &Tensor,
    lambda_l1: f64,
    lambda_id: f64,
    id_embedder: Option<&dyn Embedder>,
) -> Result<Tensor> {
    if x_hat.shape() != x0.shape() {
        return Err(Error::ShapeMismatch {
            op: "identity_loss",
            detail: format!("{:?} vs {:?}", x_hat.shape(), x0.shape()),
        });
    }
    let mut total = x0.sub(x_hat)?.abs()?.mean()?.mul_scalar(lambda_l1)?;
    if lambda_id != 0.0 {
        if let Some(e) = id_embedder {
            let emb_hat = e.embed_image(x_hat)?;
            let emb_ref = e.embed_image(x0)?.detached();
            if l2_norm_value(&emb_hat) < DIRECTION_EPS || l2_norm_value(&emb_ref) < DIRECTION_EPS {
                return Err(Error::ZeroEmbedding);
            }
            let id_term = cosine_against_const(&emb_hat, &emb_ref)?.scalar_sub(1.0)?;
            total = total.add(&id_term.mul_scalar(lambda_id)?)?;
        }
    }
    Ok(total)
}

/// Directional and identity terms of the fine-tuning objective. An exactly
/// unchanged output (degenerate image direction) contributes the maximal
/// directional value 2 instead of failing, so the total stays orderable
/// during optimization.
pub fn objective_parts(
    e: &dyn Embedder,
    x_hat: &Tensor,
    x0: &Tensor,
    recipe: &EditRecipe,
    id_embedder: Option<&dyn Embedder>,
) -> Result<(Tensor, Tensor)> {
    let dir = match directional_loss(e, x_hat, &recipe.y_tar, x0, &recipe.y_ref) {
        Ok(l) => l,
        Err(Error::DegenerateDirection { which: "image" }) => Tensor::scalar(2.0),
        Err(other) => return Err(other),
    };
    let id = identity_loss(x_hat, x0, recipe.lambda_l1, recipe.lambda_id, id_embedder)?;
    Ok((dir, id))
}

/// The composed fine-tuning objective: directional loss plus identity loss.
pub fn finetune_objective(
    e: &dyn Embedder,
    x_hat: &Tensor,
    x0: &Tensor,
    recipe: &EditRecipe,
    id_embedder: Option<&dyn Embedder>,
) -> Result<Tensor> {
    let (dir, id) = objective_parts(e, x_hat, x0, recipe, id_embedder)?;
    dir.add(&id)
}

/// Noise-prediction training loss with caller-supplied draw:
/// || w - eps(sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) w, t) ||^2.
pub fn l_simple_with<M: NoiseModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    t: usize,
    w: &Tensor,
    s: &Schedule,
) -> Result<Tensor> {
    let ab = s.alpha_bar(t)?;
    let x_t = x0
        .mul_scalar(ab.sqrt())?
        .add(&w.mul_scalar((1.0 - ab).sqrt())?)?;
    let eps = model.predict_noise(&x_t, t)?;
    let diff = w.sub(&eps)?;
    diff.mul(&diff)?.sum()
}

/// As [`l_simple_with`] with t uniform in 1..=T and w standard normal.
pub fn l_simple<M: NoiseModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    s: &Schedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let t = rng.int_in(1, s.t_max());
    let w = rng.normal_tensor(x0.shape());
    l_simple_with(model, x0, t, &w, s)
}
