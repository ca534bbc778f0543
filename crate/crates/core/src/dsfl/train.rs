use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cost::{cost_discriminative, cost_shareable, full_objective, w_step_objective};
use super::greedy::greedy_select_alpha;
use super::triplet::{refresh_triplets, TripletCache};
use super::{FilterBank, LayerHyperparams, SelectionMask, TrainBatch};
use crate::error::{Error, Result};
use crate::mathkit::matrix::norm;
use crate::mathkit::{lbfgs_minimize, LbfgsParams, Matrix};

/// Random `d x d0` bank with Gaussian entries and unit-norm rows.
pub fn init_filter_bank(d: usize, d0: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut w = Matrix::zeros(d, d0);
    for i in 0..d {
        let row = w.row_mut(i);
        row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    w
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub w: Matrix,
    /// Accepted L-BFGS iterations.
    pub iters: usize,
    /// Rebuilt triplet sets that were adopted.
    pub refreshes: usize,
    /// Rebuilt triplet sets that would have raised the objective and were
    /// discarded.
    pub declined_refreshes: usize,
    pub degraded: bool,
    /// Objective before the step and after every accepted iteration.
    pub history: Vec<f64>,
}

/// Minimizes the filter objective with the selections fixed.
///
/// When a triplet cache is supplied and the discriminative weight is
/// nonzero, the cache is rebuilt every `nn_refresh_period` accepted
/// iterations. A rebuilt cache replaces the old one only if it does not
/// raise the objective at the current filters, so the objective never goes
/// up. `since_refresh` carries the iteration count across calls.
pub fn step_w(
    w: &Matrix,
    masks: &[SelectionMask],
    batch: &TrainBatch,
    mut cache: Option<&mut TripletCache>,
    hp: &LayerHyperparams,
    params: &LbfgsParams,
    since_refresh: &mut usize,
) -> Result<StepReport> {
    let (d, d0) = (w.rows(), w.cols());
    let refreshing = hp.eta != 0.0 && cache.is_some();
    let mut cur = w.clone();
    let mut report = StepReport {
        w: cur.clone(),
        iters: 0,
        refreshes: 0,
        declined_refreshes: 0,
        degraded: false,
        history: Vec::new(),
    };
    let mut remaining = params.max_iters;
    loop {
        let chunk = if refreshing {
            remaining.min(hp.nn_refresh_period.saturating_sub(*since_refresh).max(1))
        } else {
            remaining
        };
        let local = LbfgsParams {
            max_iters: chunk,
            ..params.clone()
        };
        let cache_ref = cache.as_deref();
        let res = lbfgs_minimize(
            |theta, grad| {
                let wm = Matrix::from_vec(d, d0, theta.to_vec()).expect("shape preserved");
                let (v, g) = w_step_objective(&wm, batch, masks, cache_ref, hp);
                grad.copy_from_slice(g.as_slice());
                v
            },
            cur.as_slice(),
            &local,
        );
        if !res.value.is_finite() || res.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("filter update produced non-finite values".into()));
        }
        if report.history.is_empty() {
            report.history.extend_from_slice(&res.history);
        } else {
            report.history.extend_from_slice(&res.history[1..]);
        }
        cur = Matrix::from_vec(d, d0, res.theta)?;
        report.iters += res.iters;
        report.degraded |= res.degraded;
        remaining -= chunk.min(remaining);
        *since_refresh += res.iters;
        let stalled = res.iters < chunk;
        if refreshing && *since_refresh >= hp.nn_refresh_period {
            let c = cache.as_deref_mut().expect("refreshing implies a cache");
            let fresh = refresh_triplets(&cur, masks, &batch.exemplars, &batch.ex_labels, hp.k)?;
            *since_refresh = 0;
            let before = *report.history.last().expect("history starts at the initial point");
            let (after, _) = w_step_objective(&cur, batch, masks, Some(&fresh), hp);
            if after <= before {
                *c = fresh;
                report.refreshes += 1;
                if remaining > 0 {
                    report.history.push(after);
                }
            } else {
                report.declined_refreshes += 1;
            }
        }
        if remaining == 0 || stalled {
            break;
        }
    }
    report.w = cur;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct LayerTraining {
    pub bank: FilterBank,
    pub masks: Vec<SelectionMask>,
    /// Full objective after each completed round.
    pub history: Vec<f64>,
    /// Masks after each completed round.
    pub mask_history: Vec<Vec<SelectionMask>>,
    pub rounds: usize,
    pub converged: bool,
    /// A round raised the objective (through a triplet refresh) and was undone.
    pub rolled_back: bool,
    pub degraded: bool,
    pub cache: TripletCache,
}

fn class_objective(
    w: &Matrix,
    batch: &TrainBatch,
    members: &[usize],
    mask: &SelectionMask,
    c: usize,
    cache: &TripletCache,
    hp: &LayerHyperparams,
) -> f64 {
    let xc = batch.exemplars.select_rows(members);
    let (sha, _) = cost_shareable(w, mask, &xc);
    let dis = if hp.eta != 0.0 {
        cost_discriminative(w, mask, c, &batch.exemplars, cache, hp).0
    } else {
        0.0
    };
    hp.gamma * (sha + hp.lambda2 * mask.active_count() as f64) + hp.eta * dis
}

/// Trains one layer: random start, unsupervised warm start, then
/// alternating selection and filter updates.
///
/// Every round's full objective is compared with the previous round's; a
/// round that raises it by more than `1e-8` is undone and training stops.
/// The loop also stops once the selections repeat and the objective moved
/// by less than `1e-4` relative. Returned filters are rounded to `f32`
/// precision.
pub fn train_layer(
    batch: &TrainBatch,
    hp: &LayerHyperparams,
    d: usize,
    layer_idx: usize,
    seed: u64,
) -> Result<LayerTraining> {
    hp.validate()?;
    if d == 0 {
        return Err(Error::Config("layer needs at least one filter".into()));
    }
    if batch.x_all.rows() == 0 {
        return Err(Error::invalid("no patches for the unsupervised term"));
    }
    let c_count = batch.num_classes;
    let members = batch.class_members();
    let params = LbfgsParams {
        max_iters: hp.w_iters,
        ..LbfgsParams::default()
    };

    let w0 = init_filter_bank(d, batch.input_dim(), seed);
    let warm_hp = LayerHyperparams {
        gamma: 0.0,
        eta: 0.0,
        ..hp.clone()
    };
    let warm_params = LbfgsParams {
        max_iters: hp.warm_iters,
        ..params.clone()
    };
    let mut counter = 0;
    let warm = step_w(&w0, &[], batch, None, &warm_hp, &warm_params, &mut counter)?;
    let mut w = warm.w;
    let mut degraded = warm.degraded;

    let use_cache = hp.eta != 0.0 && batch.exemplars.rows() > 0;
    let mut cache = if use_cache {
        refresh_triplets(&w, &vec![SelectionMask::full(d); c_count], &batch.exemplars, &batch.ex_labels, hp.k)?
    } else {
        TripletCache::unpaired(&batch.ex_labels)
    };
    let masks_inert = hp.gamma == 0.0 && hp.eta == 0.0;

    let mut masks = vec![SelectionMask::empty(d); c_count];
    let mut history: Vec<f64> = Vec::new();
    let mut mask_history = Vec::new();
    let mut converged = false;
    let mut rolled_back = false;
    let mut since_refresh = 0usize;

    for round in 0..hp.outer_rounds {
        let mut new_masks = masks.clone();
        for c in 0..c_count {
            if members[c].is_empty() {
                continue;
            }
            let cand = greedy_select_alpha(&w, c, &batch.exemplars, &cache, hp);
            if round == 0 || cand == masks[c] {
                new_masks[c] = cand;
                continue;
            }
            let old = class_objective(&w, batch, &members[c], &masks[c], c, &cache, hp);
            let new = class_objective(&w, batch, &members[c], &cand, c, &cache, hp);
            if new <= old {
                new_masks[c] = cand;
            }
        }

        let saved = (w.clone(), cache.clone());
        let step = step_w(
            &w,
            &new_masks,
            batch,
            use_cache.then_some(&mut cache),
            hp,
            &params,
            &mut since_refresh,
        )?;
        let total = full_objective(&step.w, batch, &new_masks, Some(&cache), hp).total(hp);
        if let Some(&prev) = history.last() {
            if total > prev + 1e-8 {
                log::info!("layer {layer_idx}: round {round} raised the objective ({prev} -> {total}); undone");
                (w, cache) = saved;
                rolled_back = true;
                break;
            }
        }
        degraded |= step.degraded;
        w = step.w;
        let masks_same = masks_inert || new_masks == masks;
        masks = new_masks;
        log::debug!(
            "layer {layer_idx}: round {round} objective {total:.6e}, active {:?}",
            masks.iter().map(SelectionMask::active_count).collect::<Vec<_>>()
        );
        let prev = history.last().copied();
        history.push(total);
        mask_history.push(masks.clone());
        if let Some(prev) = prev {
            let rel = (prev - total) / prev.abs().max(f64::MIN_POSITIVE);
            if masks_same && rel < 1e-4 {
                converged = true;
                break;
            }
        }
    }

    w.round_to_f32();
    Ok(LayerTraining {
        bank: FilterBank::new(w, layer_idx)?,
        masks,
        rounds: history.len(),
        history,
        mask_history,
        converged,
        rolled_back,
        degraded,
        cache,
    })
}
