//! Base-model training, latent precomputation, and the two fine-tuning
//! regimes: whole-chain back-propagation through the reverse traversal, and
//! per-step updates whose peak graph is a single model call.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor};
use crate::denoiser::{predict_x0_from, NoiseModel, ParamStore};
use crate::error::{Error, Result};
use crate::guidance::{l_simple, objective_parts, EditRecipe, Embedder};
use crate::rng::Rng;
use crate::sampler::{ddim_generate, ddim_invert};
use crate::schedule::{Schedule, TimestepGrid};

/// Precomputed (input, latent) pairs, pinned to the model that produced
/// them. Latents reproduce bitwise under re-inversion with that model.
pub struct LatentCache {
    entries: Vec<(Tensor, Tensor)>,
    grid: TimestepGrid,
    fingerprint: String,
}

impl LatentCache {
    pub fn entries(&self) -> &[(Tensor, Tensor)] {
        &self.entries
    }

    pub fn grid(&self) -> &TimestepGrid {
        &self.grid
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn check_model(&self, store: &ParamStore) -> Result<()> {
        if store.fingerprint() != self.fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }
}

/// Training record: one row per optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub iteration: usize,
    pub directional: f64,
    pub identity: f64,
    pub total: f64,
}

/// Fine-tuned model plus its loss history and the largest graph ever
/// recorded during updates.
pub struct FinetuneOutcome {
    pub store: ParamStore,
    pub history: Vec<LossRecord>,
    pub peak_graph_nodes: usize,
}

/// `iteration,directional,identity,total` rows.
pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,directional,identity,total")?;
    for r in history {
        writeln!(f, "{},{},{},{}", r.iteration, r.directional, r.identity, r.total)?;
    }
    Ok(())
}

/// Minimize the noise-prediction loss with Adam over minibatch means.
/// Returns the trained store and the per-step loss history.
pub fn train_base(
    store: &ParamStore,
    dataset: &[Tensor],
    s: &Schedule,
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<(ParamStore, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidRange("dataset must be non-empty".into()));
    }
    let batch = batch.max(1);
    let mut trained = store.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = Graph::new();
        let view = trained.watch(&g);
        let mut acc: Option<Tensor> = None;
        for _ in 0..batch {
            let i = rng.int_in(0, dataset.len() - 1);
            let term = l_simple(&view, &dataset[i], s, rng)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        let loss = acc.expect("batch >= 1").mul_scalar(1.0 / batch as f64)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = g.backward(&loss)?;
        trained.apply_adam(&view.collect_grads(&grads), lr)?;
        if !trained.all_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(value);
    }
    Ok((trained, losses))
}

/// Invert every image to its latent at the recipe's return step over the
/// forward grid; embarrassingly parallel across images.
pub fn precompute_latents(
    store: &ParamStore,
    images: &[Tensor],
    recipe: &EditRecipe,
    s: &Schedule,
) -> Result<LatentCache> {
    recipe.validate(s.t_max())?;
    let grid = TimestepGrid::new(recipe.t0, recipe.s_for)?;
    let view = store.view();
    let entries: Result<Vec<(Tensor, Tensor)>> = images
        .par_iter()
        .map(|x0| {
            let latent = ddim_invert(&view, x0, &grid, s)?;
            Ok((x0.clone(), latent))
        })
        .collect();
    Ok(LatentCache {
        entries: entries?,
        grid,
        fingerprint: store.fingerprint(),
    })
}

/// Whole-chain fine-tuning: clone the base, regenerate each latent over the
/// generation grid, and back-propagate the composed objective through every
/// step of the traversal. The base store is never touched.
pub fn finetune_full(
    base: &ParamStore,
    cache: &LatentCache,
    e: &dyn Embedder,
    recipe: &EditRecipe,
    s: &Schedule,
    id_embedder: Option<&dyn Embedder>,
) -> Result<FinetuneOutcome> {
    cache.check_model(base)?;
    recipe.validate(s.t_max())?;
    let grid = TimestepGrid::new(recipe.t0, recipe.s_gen)?;
    let mut tuned = base.clone();
    let mut history = Vec::new();
    let mut peak = 0usize;
    let mut iteration = 0usize;
    for _epoch in 0..recipe.epochs {
        for (x0, latent) in cache.entries() {
            let g = Graph::new();
            let view = tuned.watch(&g);
            let x_hat = ddim_generate(&view, latent, &grid, s)?;
            let (dir, id) = objective_parts(e, &x_hat, x0, recipe, id_embedder)?;
            let total = dir.add(&id)?;
            peak = peak.max(g.node_count());
            let record = LossRecord {
                iteration,
                directional: dir.item(),
                identity: id.item(),
                total: total.item(),
            };
            if !record.total.is_finite() {
                return Err(Error::Divergence { step: iteration });
            }
            let grads = g.backward(&total)?;
            tuned.apply_adam(&view.collect_grads(&grads), recipe.ramp.lr_at(iteration))?;
            if !tuned.all_finite() {
                return Err(Error::Divergence { step: iteration });
            }
            history.push(record);
            iteration += 1;
        }
    }
    Ok(FinetuneOutcome {
        store: tuned,
        history,
        peak_graph_nodes: peak,
    })
}

/// Per-step fine-tuning: at every grid hop the objective is evaluated on the
/// clean-signal prediction and a gradient step is taken immediately, so the
/// recorded graph never spans more than one model call.
pub fn finetune_stepwise(
    base: &ParamStore,
    cache: &LatentCache,
    e: &dyn Embedder,
    recipe: &EditRecipe,
    s: &Schedule,
    id_embedder: Option<&dyn Embedder>,
) -> Result<FinetuneOutcome> {
    cache.check_model(base)?;
    recipe.validate(s.t_max())?;
    let grid = TimestepGrid::new(recipe.t0, recipe.s_gen)?;
    let mut tuned = base.clone();
    let mut history = Vec::new();
    let mut peak = 0usize;
    let mut iteration = 0usize;
    for _epoch in 0..recipe.epochs {
        for (x0, latent) in cache.entries() {
            let mut x = latent.clone();
            for (from, to) in grid.hops_down() {
                let g = Graph::new();
                let view = tuned.watch(&g);
                let eps = view.predict_noise(&x, from)?;
                let f = predict_x0_from(&x, &eps, from, s)?;
                let (dir, id) = objective_parts(e, &f, x0, recipe, id_embedder)?;
                let total = dir.add(&id)?;
                peak = peak.max(g.node_count());
                let record = LossRecord {
                    iteration,
                    directional: dir.item(),
                    identity: id.item(),
                    total: total.item(),
                };
                if !record.total.is_finite() {
                    return Err(Error::Divergence { step: iteration });
                }
                // advance the state with the pre-update predictions, detached
                let ab_to = s.alpha_bar(to)?;
                x = f
                    .detached()
                    .mul_scalar(ab_to.sqrt())?
                    .add(&eps.detached().mul_scalar((1.0 - ab_to).sqrt())?)?;
                let grads = g.backward(&total)?;
                tuned.apply_adam(&view.collect_grads(&grads), recipe.ramp.lr_at(iteration))?;
                if !tuned.all_finite() {
                    return Err(Error::Divergence { step: iteration });
                }
                history.push(record);
                iteration += 1;
            }
        }
    }
    Ok(FinetuneOutcome {
        store: tuned,
        history,
        peak_graph_nodes: peak,
    })
}
