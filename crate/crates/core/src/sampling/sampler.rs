use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::GuidanceConfig;
use super::em::em_refine_window;
use crate::data::RoutingMatrix;
use crate::denoiser::X0Model;
use crate::diffusion::{ddim_step, NoiseSchedule};
use crate::error::{ensure_shape, Error, Result};

/// Link loads per window: `loads[b]` is `L × w`, in the same units as the flows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkObservations {
    pub routing: RoutingMatrix,
    pub loads: Vec<Array2<f64>>,
}

/// Directly measured flows per window; unobserved entries of `known` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowObservations {
    pub known: Vec<Array2<f64>>,
    pub masks: Vec<Array2<f64>>,
}

/// Everything the sampler conditions on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub links: Option<LinkObservations>,
    pub flows: Option<FlowObservations>,
}

impl MeasurementSet {
    /// Checks shapes against the model and returns the number of windows described.
    fn validate(&self, n: usize, w: usize) -> Result<Option<usize>> {
        let mut count = None;
        if let Some(l) = &self.links {
            let a = &l.routing;
            ensure_shape(a.flow_count() == n, || format!("routing has {} flows, model has {n}", a.flow_count()))?;
            for y in &l.loads {
                ensure_shape(y.dim() == (a.link_count(), w), || {
                    format!("link-load window {:?}, expected {:?}", y.dim(), (a.link_count(), w))
                })?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("non-finite link load"));
                }
            }
            count = Some(l.loads.len());
        }
        if let Some(f) = &self.flows {
            ensure_shape(f.known.len() == f.masks.len(), || {
                format!("{} known windows but {} masks", f.known.len(), f.masks.len())
            })?;
            for (x, m) in f.known.iter().zip(&f.masks) {
                ensure_shape(x.dim() == (n, w) && m.dim() == (n, w), || {
                    format!("measured window {:?} / mask {:?}, expected {:?}", x.dim(), m.dim(), (n, w))
                })?;
                if m.iter().any(|&b| b != 0.0 && b != 1.0) {
                    return Err(Error::validation("mask entries must be 0 or 1"));
                }
            }
            if let Some(c) = count {
                ensure_shape(c == f.known.len(), || format!("{c} link-load windows but {} flow windows", f.known.len()))?;
            }
            count = Some(f.known.len());
        }
        Ok(count)
    }
}

/// Relative residuals of the clean-data estimate at one visited step, pooled over all windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResidual {
    pub t: usize,
    /// `‖Y − A x̂0‖ / ‖Y‖`.
    pub link: Option<f64>,
    /// `‖M ⊙ (X° − x̂0)‖ / ‖M ⊙ X°‖`.
    pub flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub windows: Vec<Array2<f64>>,
    pub trace: Vec<StepResidual>,
    /// Denoiser evaluations per window.
    pub denoiser_calls: usize,
}

fn standard_normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Overwrites observed entries of `x` with `√ᾱ_t·X° + √(1−ᾱ_t)·ε` (fresh ε per
/// observed entry, in row-major order), or with `X°` itself at `t = 0`.
pub fn replace_known(
    x: &mut Array2<f64>,
    known: &Array2<f64>,
    mask: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<()> {
    ensure_shape(x.dim() == known.dim() && x.dim() == mask.dim(), || {
        format!("state {:?}, measured {:?}, mask {:?}", x.dim(), known.dim(), mask.dim())
    })?;
    if t > schedule.steps() {
        return Err(Error::validation(format!("step {t} beyond T = {}", schedule.steps())));
    }
    if t == 0 {
        Zip::from(x).and(known).and(mask).for_each(|v, &k, &m| {
            if m == 1.0 {
                *v = k;
            }
        });
        return Ok(());
    }
    let (a, b) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
    Zip::from(x).and(known).and(mask).for_each(|v, &k, &m| {
        if m == 1.0 {
            let e: f64 = rng.sample(StandardNormal);
            *v = a * k + b * e;
        }
    });
    Ok(())
}

/// Sums of squares gathered for the residual trace: link residual, link norm, flow residual, flow norm.
type TraceSums = [f64; 4];

struct ChunkResult {
    windows: Vec<Array2<f64>>,
    sums: Vec<TraceSums>,
}

struct Job<'a, M: ?Sized> {
    model: &'a M,
    schedule: &'a NoiseSchedule,
    meas: &'a MeasurementSet,
    cfg: &'a GuidanceConfig,
    trajectory: Vec<usize>,
}

impl<M: X0Model + ?Sized> Job<'_, M> {
    fn residual_grad(&self, idx: usize, x0: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x0.dim());
        if let Some(l) = &self.meas.links {
            let a = l.routing.entries();
            let r = &l.loads[idx] - &a.dot(x0);
            g -= &(a.t().dot(&r) * 2.0);
        }
        if let Some(f) = &self.meas.flows {
            Zip::from(&mut g).and(&f.known[idx]).and(&f.masks[idx]).and(x0).for_each(|g, &k, &m, &p| {
                if m == 1.0 {
                    *g -= 2.0 * (k - p);
                }
            });
        }
        g
    }

    fn accumulate(&self, idx: usize, x0: &Array2<f64>, sums: &mut TraceSums) {
        if let Some(l) = &self.meas.links {
            let y = &l.loads[idx];
            let r = y - &l.routing.entries().dot(x0);
            sums[0] += r.mapv(|v| v * v).sum();
            sums[1] += y.mapv(|v| v * v).sum();
        }
        if let Some(f) = &self.meas.flows {
            Zip::from(&f.known[idx]).and(&f.masks[idx]).and(x0).for_each(|&k, &m, &p| {
                if m == 1.0 {
                    sums[2] += (k - p) * (k - p);
                    sums[3] += k * k;
                }
            });
        }
    }

    fn has_guidance_signal(&self, range: &std::ops::Range<usize>) -> bool {
        self.meas.links.is_some()
            || self
                .meas
                .flows
                .as_ref()
                .is_some_and(|f| range.clone().any(|i| f.masks[i].iter().any(|&m| m == 1.0)))
    }

    fn run_chunk(&self, range: std::ops::Range<usize>) -> Result<ChunkResult> {
        let (n, w) = (self.model.flow_count(), self.model.window_len());
        let s = self.schedule;
        let mut rngs: Vec<ChaCha8Rng> = range
            .clone()
            .map(|i| ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(i as u64)))
            .collect();
        let mut xs: Vec<Array2<f64>> = rngs.iter_mut().map(|r| standard_normal((n, w), r)).collect();
        let signal = self.has_guidance_signal(&range);
        let mut sums = Vec::with_capacity(self.trajectory.len());

        for (k, &t) in self.trajectory.iter().enumerate() {
            let next = self.trajectory.get(k + 1).copied().unwrap_or(0);
            let dt = t - next;
            let rho = self.cfg.rho(t, dt, s);
            let guided = signal && rho > 0.0;
            let (x0s, grads) = if guided {
                let seed = |b: usize, x0: &Array2<f64>| self.residual_grad(range.start + b, x0);
                let (p, g) = self.model.predict_with_input_grad(&xs, t, &seed)?;
                (p, Some(g))
            } else {
                (self.model.predict(&xs, t)?, None)
            };
            ensure_shape(x0s.len() == xs.len(), || "denoiser returned the wrong number of windows".into())?;

            let mut step_sums = [0.0; 4];
            for (b, x0) in x0s.iter().enumerate() {
                self.accumulate(range.start + b, x0, &mut step_sums);
            }
            sums.push(step_sums);

            for (b, ((x, x0), rng)) in xs.iter_mut().zip(&x0s).zip(&mut rngs).enumerate() {
                let z = standard_normal((n, w), rng);
                let mut next_x = ddim_step(x, x0, t, dt, &z, s)?;
                if let Some(g) = &grads {
                    next_x.scaled_add(-rho, &g[b]);
                }
                if next > 0 && self.cfg.replacement {
                    if let Some(f) = &self.meas.flows {
                        let i = range.start + b;
                        replace_known(&mut next_x, &f.known[i], &f.masks[i], next, s, rng)?;
                    }
                }
                if next_x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("sampler state became non-finite at step {t}")));
                }
                *x = next_x;
            }
        }

        for (b, x) in xs.iter_mut().enumerate() {
            let i = range.start + b;
            x.mapv_inplace(|v| v.clamp(0.0, 1.0));
            match (&self.meas.flows, &self.meas.links) {
                (Some(f), _) if self.cfg.replacement => {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    replace_known(x, &f.known[i], &f.masks[i], 0, s, &mut rng)?;
                }
                (None, Some(l)) if self.cfg.em_iters > 0 => {
                    *x = em_refine_window(x, &l.routing, &l.loads[i].mapv(|v| v.max(0.0)), self.cfg.em_iters)?;
                }
                _ => {}
            }
        }
        Ok(ChunkResult { windows: xs, sums })
    }
}

/// Reverse diffusion for `count` windows under the measurements in `meas`.
///
/// Window `i` draws all of its randomness from a ChaCha8 stream seeded with
/// `cfg.seed + i`, and windows are batched in fixed chunks of
/// `cfg.batch_size`, so the output does not depend on `cfg.jobs`.
pub fn sample_windows<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    meas: &MeasurementSet,
    count: usize,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    cfg.validate(schedule)?;
    let (n, w) = (model.flow_count(), model.window_len());
    if let Some(c) = meas.validate(n, w)? {
        ensure_shape(c == count, || format!("measurements describe {c} windows, {count} requested"))?;
    }
    if count == 0 {
        return Err(Error::validation("no windows requested"));
    }
    let job = Job {
        model,
        schedule,
        meas,
        cfg,
        trajectory: cfg.trajectory(schedule),
    };
    let chunks: Vec<std::ops::Range<usize>> = (0..count)
        .step_by(cfg.batch_size)
        .map(|s| s..(s + cfg.batch_size).min(count))
        .collect();

    let results: Vec<Result<ChunkResult>> = if cfg.jobs == 1 || chunks.len() == 1 {
        chunks.iter().map(|r| job.run_chunk(r.clone())).collect()
    } else {
        let slots: Mutex<Vec<Option<Result<ChunkResult>>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..cfg.jobs.min(chunks.len()) {
                scope.spawn(|| loop {
                    let c = next.fetch_add(1, Ordering::Relaxed);
                    if c >= chunks.len() {
                        break;
                    }
                    let r = job.run_chunk(chunks[c].clone());
                    slots.lock().expect("no panics while holding the lock")[c] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|r| r.expect("every chunk ran"))
            .collect()
    };

    let mut windows = Vec::with_capacity(count);
    let mut totals = vec![[0.0; 4]; job.trajectory.len()];
    for r in results {
        let r = r?;
        windows.extend(r.windows);
        for (tot, s) in totals.iter_mut().zip(&r.sums) {
            for k in 0..4 {
                tot[k] += s[k];
            }
        }
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    let trace = job
        .trajectory
        .iter()
        .zip(&totals)
        .map(|(&t, s)| StepResidual {
            t,
            link: meas.links.as_ref().map(|_| ratio(s[0], s[1])),
            flow: meas.flows.as_ref().map(|_| ratio(s[2], s[3])),
        })
        .collect();
    Ok(SampleOutput {
        windows,
        trace,
        denoiser_calls: job.trajectory.len(),
    })
}

/// Unconditional synthesis of `count` windows.
pub fn sample_unconditional<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    count: usize,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    sample_windows(model, schedule, &MeasurementSet::default(), count, cfg)
}

/// Flows from link loads: gradient guidance on `‖Y − A x̂0‖²`, then EM refinement.
pub fn sample_tomography<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    links: LinkObservations,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    let count = links.loads.len();
    let meas = MeasurementSet {
        links: Some(links),
        flows: None,
    };
    sample_windows(model, schedule, &meas, count, cfg)
}

/// Missing flows from observed ones, optionally also guided by link loads.
/// Observed entries of the output equal the measurements exactly.
pub fn sample_completion<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    flows: FlowObservations,
    links: Option<LinkObservations>,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    let count = flows.known.len();
    let meas = MeasurementSet {
        links,
        flows: Some(flows),
    };
    sample_windows(model, schedule, &meas, count, cfg)
}
