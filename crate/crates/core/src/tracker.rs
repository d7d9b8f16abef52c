//! Per-frame camera pose optimization against the frozen scene: fresh pixel
//! batches each iteration, Adam on the quaternion and translation as separate
//! groups, and min-loss pose retention across iterations.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, AdamState, GradientBuffer, GroupId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::frame_io::{sample_pixels, Frame, Intrinsics};
use crate::objective::{build_loss_graph, ObjectiveWeights};
use crate::pose::{constant_velocity_init, quat_normalize, Pose};
use crate::real::Real;
use crate::renderer::{build_render_graph, frame_rays, SamplingConfig};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy)]
pub struct TrackingConfig<T> {
    pub iters: usize,
    pub pixels: usize,
    pub lr_rotation: T,
    pub lr_translation: T,
}

impl<T: Real> Default for TrackingConfig<T> {
    fn default() -> Self {
        Self {
            iters: 4,
            pixels: 1024,
            lr_rotation: crate::real::r(0.001),
            lr_translation: crate::real::r(0.002),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult<T> {
    /// Minimum recorded total loss; None when no iteration had usable rays.
    pub loss: Option<T>,
    /// Total loss recorded at the start of each evaluated iteration.
    pub losses: Vec<T>,
}

/// Initialization from the motion model over the most recent pose history.
pub fn motion_model_init<T: Real>(history: &[Pose<T>]) -> Pose<T> {
    match history {
        [] => Pose::identity(),
        [p] => *p,
        [.., p2, p1] => constant_velocity_init(p2, p1),
    }
}

/// Optimize the pose groups `qg`/`tg` for `frame` against the frozen scene,
/// starting from `init`. Each iteration samples a fresh pixel batch, records
/// the loss at the current pose, then steps; the pose written back is the
/// snapshot with the minimum recorded loss (never the un-evaluated last step).
#[allow(clippy::too_many_arguments)]
pub fn track_frame<T: Real>(
    store: &mut ParamStore<T>,
    scene: &Scene<T>,
    frame: &Frame<T>,
    k: &Intrinsics,
    qg: GroupId,
    tg: GroupId,
    init: &Pose<T>,
    cfg: &TrackingConfig<T>,
    sampling: &SamplingConfig<T>,
    weights: &ObjectiveWeights<T>,
    rng: &mut ChaCha8Rng,
) -> Result<TrackResult<T>> {
    if frame.valid_count() == 0 {
        return Err(Error::Dataset(format!(
            "frame {}: no valid-depth pixels to track",
            frame.index
        )));
    }
    store.values_mut(qg).copy_from_slice(&init.q);
    store.values_mut(tg).copy_from_slice(&init.t);

    let mut adam = AdamState::new(store);
    let mut best: Option<(T, [T; 4], [T; 3])> = None;
    let mut losses = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let batch = sample_pixels(frame, cfg.pixels, rng);
        let pixels: Vec<(f64, f64, [T; 3], T)> = batch
            .iter()
            .map(|s| (s.u as f64, s.v as f64, s.color, s.depth))
            .collect();
        let mut tape = Tape::new();
        let qn = tape.param_all(store, qg);
        let tn = tape.param_all(store, tg);
        let fr = frame_rays(qn, tn, &pixels, k, sampling, rng);
        let rg = build_render_graph(
            &mut tape,
            store,
            &scene.volume,
            &scene.planes,
            &scene.geometry,
            &scene.color,
            &[fr],
            sampling,
        );
        // a batch whose rays are all excluded contributes nothing
        let Some(lg) = build_loss_graph(&mut tape, &rg, weights, scene.tr) else {
            continue;
        };
        let loss = lg.values(&tape).total;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "tracking loss for frame {}",
                frame.index
            )));
        }
        losses.push(loss);
        let q_now: [T; 4] = store.values(qg).try_into().expect("quaternion group");
        let t_now: [T; 3] = store.values(tg).try_into().expect("translation group");
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, q_now, t_now));
        }

        let mut grads = GradientBuffer::new(store);
        tape.backward(lg.total, store, &mut grads);
        adam_step(
            store,
            &grads,
            &mut adam,
            &[(qg, cfg.lr_rotation), (tg, cfg.lr_translation)],
        )
        .map_err(Error::NonFinite)?;
        let qv = store.values_mut(qg);
        let qn = quat_normalize([qv[0], qv[1], qv[2], qv[3]]);
        qv.copy_from_slice(&qn);
    }

    let loss = best.map(|(l, q, t)| {
        store.values_mut(qg).copy_from_slice(&q);
        store.values_mut(tg).copy_from_slice(&t);
        l
    });
    Ok(TrackResult { loss, losses })
}
