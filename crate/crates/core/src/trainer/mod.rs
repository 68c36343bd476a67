//! Two-stream optimization of canonical Gaussians, a shared deformation
//! field and the cross-temporal encoder.

mod ablate;
mod adam;
mod config;
mod sample;

use std::time::Instant;

use diffcore::{DTensor, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use ablate::{ablate, AblationGrid, AblationRow};
pub use adam::Adam;
pub use config::{InitConfig, LearningRates, Sampling, TrainConfig};
pub use sample::{sample_batch, sample_indices, TimeBatch};

use crate::deform::DeformMlp;
use crate::encoder::CrossTemporalEncoder;
use crate::error::{contract, Error, Result};
use crate::frames::FrameSet;
use crate::gaussian::{BoundGaussians, GaussianSet};
use crate::metrics::{psnr, ssim, FrameMetrics, MetricReport};
use crate::render::{render_on_tape, Camera, RenderedImage};

/// Losses of one step, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_c: f64,
    pub l_t: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_c: f64,
    /// Zero when the encoder is disabled.
    pub l_t: f64,
    pub total: f64,
    /// Seconds since the start of the run (not part of determinism).
    pub wall_time: f64,
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar = f64> {
    pub config: TrainConfig,
    pub gaussians: GaussianSet<T>,
    /// One field when weights are shared, two otherwise.
    pub fields: Vec<DeformMlp<T>>,
    /// Field used by the plain branch and by the encoder branch.
    pub branches: [usize; 2],
    pub encoder: Option<CrossTemporalEncoder<T>>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub history: Vec<LossRecord>,
    pub rng: ChaCha8Rng,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical Gaussians: ground-truth first-frame centers plus noise when
/// available, else uniform in a cube; isotropic scale, identity rotation,
/// uniform opacity and gray color.
pub fn initial_gaussians<T: Scalar>(set: &FrameSet, init: &InitConfig, rng: &mut impl Rng) -> Result<GaussianSet<T>> {
    let centers: Vec<[f64; 3]> = match &set.ground_truth {
        Some(gt) => {
            let noise = Normal::new(0.0, init.position_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
            let first = gt.state_at(set.timestamps[0])?;
            (0..first.len()).map(|i| first.position(i).map(|v| v + noise.sample(rng))).collect()
        }
        None => (0..init.gaussians)
            .map(|_| std::array::from_fn(|_| rng.random_range(-init.extent..init.extent)))
            .collect(),
    };
    let n = centers.len();
    if n == 0 {
        return contract("initialization produced no Gaussians");
    }
    let lit = |v: f64| T::lit(v);
    GaussianSet::new(
        DTensor::new(&[n, 3], centers.iter().flatten().map(|&v| lit(v)).collect())?,
        DTensor::from_fn(&[n, 4], |i| if i % 4 == 0 { T::one() } else { T::zero() }),
        DTensor::full(&[n, 3], lit(init.scale.ln())),
        DTensor::full(&[n], lit(logit(init.opacity))),
        DTensor::full(&[n, 3], lit(init.color)),
    )
}

impl<T: Scalar> TrainState<T> {
    pub fn new(set: &FrameSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        set.validate()?;
        let train = config.train_frames(set.frames());
        if config.batch > train.len() {
            return contract(format!("batch {} exceeds the {} training frames", config.batch, train.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gaussians = initial_gaussians(set, &config.init, &mut rng)?;
        let field = DeformMlp::new(config.deform, &mut rng)?;
        let (fields, branches) = if config.shared_weights || !config.encoder_enabled {
            (vec![field], [0, 0])
        } else {
            (vec![field.clone(), field], [0, 1])
        };
        let encoder = if config.encoder_enabled {
            Some(CrossTemporalEncoder::new(config.encoder, &mut rng)?)
        } else {
            None
        };
        let mut state = Self {
            config,
            gaussians,
            fields,
            branches,
            encoder,
            optimizer: Adam::new(&[]),
            step: 0,
            history: Vec::new(),
            rng,
        };
        let sizes: Vec<usize> = state.parameters().iter().map(|p| p.numel()).collect();
        state.optimizer = Adam::new(&sizes);
        Ok(state)
    }

    /// Gaussians, then every field, then the encoder.
    pub fn parameters(&self) -> Vec<&DTensor<T>> {
        let mut out: Vec<&DTensor<T>> = self.gaussians.parameters().into();
        for f in &self.fields {
            out.extend(f.parameters());
        }
        if let Some(e) = &self.encoder {
            out.extend(e.parameters());
        }
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut DTensor<T>> {
        let mut out: Vec<&mut DTensor<T>> = self.gaussians.parameters_mut().into();
        for f in &mut self.fields {
            out.extend(f.parameters_mut());
        }
        if let Some(e) = &mut self.encoder {
            out.extend(e.parameters_mut());
        }
        out
    }

    /// Learning rate of every parameter tensor at the current step.
    fn rates(&self) -> Vec<f64> {
        let lr = &self.config.lr;
        let progress = self.step as f64 / self.config.iterations.max(1) as f64;
        let decay = lr.final_ratio.powf(progress.min(1.0));
        let mut out = vec![lr.position, lr.rotation, lr.scale, lr.opacity, lr.color];
        for f in &self.fields {
            out.extend(std::iter::repeat_n(lr.deformation, f.parameters().len()));
        }
        if let Some(e) = &self.encoder {
            out.extend(std::iter::repeat_n(lr.encoder, e.parameters().len()));
        }
        out.into_iter().map(|r| r * decay).collect()
    }

    /// Deformation field of branch 0 (plain) or 1 (encoder).
    pub fn field(&self, branch: usize) -> &DeformMlp<T> {
        &self.fields[self.branches[branch]]
    }

    pub fn train_frames(&self, set: &FrameSet) -> Vec<usize> {
        self.config.train_frames(set.frames())
    }

    pub fn sample(&mut self, set: &FrameSet) -> Result<TimeBatch> {
        let pool = self.train_frames(set);
        sample_batch(set, &pool, self.config.batch, self.config.sampling, &mut self.rng)
    }
}

/// Tape handles of one forward pass.
pub struct Forward {
    pub losses: StepLosses,
    pub loss: Var,
    /// `[H, W, 3]` renders of the plain branch, one per batch entry.
    pub plain_renders: Vec<Var>,
    /// Renders of the encoder branch; empty when it is disabled.
    pub encoder_renders: Vec<Var>,
    pub gaussians: BoundGaussians,
    pub params: Vec<Var>,
}

fn l1<T: Scalar>(tape: &mut Tape<T>, img: Var, target: Var) -> Result<Var> {
    let d = tape.sub(img, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::lit(1.0 / terms.len() as f64)))
}

/// Records both branches for `batch` on `tape` without touching `state`
/// except for dropout draws.
pub fn forward<T: Scalar>(state: &mut TrainState<T>, set: &FrameSet, batch: &TimeBatch, tape: &mut Tape<T>) -> Result<Forward> {
    if batch.is_empty() {
        return contract("empty time batch");
    }
    let cfg = &state.config;
    let g = state.gaussians.bind(tape, true);
    let bound_fields: Vec<_> = state.fields.iter().map(|f| f.bind(tape, true)).collect();
    let bound_encoder = state.encoder.as_ref().map(|e| e.bind(tape, true));
    let mut params: Vec<Var> = g.vars().into();
    for f in &bound_fields {
        params.extend(f.vars());
    }
    if let Some(e) = &bound_encoder {
        params.extend(e.vars());
    }
    let ts: Vec<T> = batch.timestamps.iter().map(|&t| T::lit(t)).collect();
    let dropout = (cfg.encoder.dropout > 0.0).then_some(&mut state.rng);
    let offsets = match &bound_encoder {
        Some(e) => Some(e.offsets(tape, g.positions, &ts, dropout)?),
        None => None,
    };
    let plain = &bound_fields[state.branches[0]];
    let coupled = &bound_fields[state.branches[1]];
    let mut plain_losses = Vec::with_capacity(batch.len());
    let mut enc_losses = Vec::new();
    let mut plain_renders = Vec::with_capacity(batch.len());
    let mut encoder_renders = Vec::new();
    for i in 0..batch.len() {
        let cam = set.cameras.get(batch.cameras[i]).ok_or_else(|| Error::Contract(format!("camera {} out of range", batch.cameras[i])))?;
        let gt = set.image(batch.frames[i], batch.cameras[i]);
        if gt.width != cam.width || gt.height != cam.height {
            return contract(format!("ground-truth image of frame {} does not match its camera", batch.frames[i]));
        }
        let target = tape.constant(DTensor::new(&[gt.height, gt.width, 3], gt.to_scalars())?);

        let res = plain.deform(tape, g.positions, ts[i])?;
        let moved = g.apply_residual(tape, res.position, res.rotation, res.scale)?;
        let img = render_on_tape(tape, &moved, cam, &cfg.render)?;
        plain_losses.push(l1(tape, img, target)?);
        plain_renders.push(img);

        if let Some(o) = offsets {
            let oi = tape.select(o, i)?;
            let a = tape.add(g.positions, oi)?;
            let res = coupled.deform(tape, a, ts[i])?;
            let base = if cfg.offset_in_render { BoundGaussians { positions: a, ..g } } else { g };
            let moved = base.apply_residual(tape, res.position, res.rotation, res.scale)?;
            let img = render_on_tape(tape, &moved, cam, &cfg.render)?;
            enc_losses.push(l1(tape, img, target)?);
            encoder_renders.push(img);
        }
    }
    let l_c = mean_of(tape, &plain_losses)?;
    let weighted_c = tape.scale(l_c, T::lit(cfg.lambda_c));
    let (loss, l_t_value) = if enc_losses.is_empty() {
        (weighted_c, 0.0)
    } else {
        let l_t = mean_of(tape, &enc_losses)?;
        let weighted_t = tape.scale(l_t, T::lit(cfg.lambda_t));
        (tape.add(weighted_c, weighted_t)?, tape.value(l_t).item()?.as_f64())
    };
    Ok(Forward {
        losses: StepLosses {
            l_c: tape.value(l_c).item()?.as_f64(),
            l_t: l_t_value,
            total: tape.value(loss).item()?.as_f64(),
        },
        loss,
        plain_renders,
        encoder_renders,
        gaussians: g,
        params,
    })
}

/// One forward, one backward and one optimizer update of every group.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, set: &FrameSet, batch: &TimeBatch) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let fwd = forward(state, set, batch, &mut tape)?;
    if !fwd.losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {} at iteration {}", fwd.losses.total, state.step)));
    }
    tape.backward(fwd.loss)?;
    let grads: Vec<Vec<T>> = fwd.params.iter().map(|&v| tape.grad(v).expect("parameters are leaves").to_vec()).collect();
    if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient in parameter tensor {k} at iteration {}", state.step)));
    }
    let rates = state.rates();
    let mut opt = std::mem::replace(&mut state.optimizer, Adam::new(&[]));
    opt.step(&mut state.parameters_mut(), &grads, &rates);
    state.optimizer = opt;
    for c in state.gaussians.colors.data_mut() {
        *c = c.max(T::zero()).min(T::one());
    }
    state.step += 1;
    Ok(fwd.losses)
}

/// Trains until `state.step == until`, sampling batches from the state's
/// own generator.
pub fn train_until<T: Scalar>(state: &mut TrainState<T>, set: &FrameSet, until: usize) -> Result<()> {
    let start = Instant::now();
    let offset = state.history.last().map_or(0.0, |r| r.wall_time);
    while state.step < until {
        let batch = state.sample(set)?;
        let step = state.step;
        let l = train_step(state, set, &batch)?;
        state.history.push(LossRecord {
            step,
            l_c: l.l_c,
            l_t: l.l_t,
            total: l.total,
            wall_time: offset + start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Fresh state trained for `config.iterations` steps.
pub fn train<T: Scalar>(set: &FrameSet, config: TrainConfig) -> Result<TrainState<T>> {
    let iterations = config.iterations;
    let mut state = TrainState::new(set, config)?;
    train_until(&mut state, set, iterations)?;
    Ok(state)
}

/// Deformed Gaussians of the plain branch at time `t`, recorded on `tape`
/// as constants.
fn plain_branch<T: Scalar>(state: &TrainState<T>, tape: &mut Tape<T>, t: f64) -> Result<BoundGaussians> {
    let g = state.gaussians.bind(tape, false);
    let field = state.field(0).bind(tape, false);
    let res = field.deform(tape, g.positions, T::lit(t))?;
    g.apply_residual(tape, res.position, res.rotation, res.scale)
}

/// Render through the plain branch only; the encoder is never evaluated.
pub fn inference_render<T: Scalar>(state: &TrainState<T>, t: f64, cam: &Camera) -> Result<RenderedImage<T>> {
    let mut tape = Tape::new();
    let moved = plain_branch(state, &mut tape, t)?;
    let img = render_on_tape(&mut tape, &moved, cam, &state.config.render)?;
    Ok(RenderedImage {
        width: cam.width,
        height: cam.height,
        colors: tape.value(img).data().to_vec(),
        transmittance: Vec::new(),
    })
}

/// Plain-branch Gaussian set at time `t` and the position residual.
pub fn deformed_set<T: Scalar>(state: &TrainState<T>, t: f64) -> Result<(GaussianSet<T>, DTensor<T>)> {
    let mut tape = Tape::new();
    let moved = plain_branch(state, &mut tape, t)?;
    let set = GaussianSet::new(
        tape.value(moved.positions).clone(),
        tape.value(moved.rotations).clone(),
        tape.value(moved.log_scales).clone(),
        tape.value(moved.opacity_logits).clone(),
        tape.value(moved.colors).clone(),
    )?;
    let (dmu, _, _) = state.field(0).deform_values(&state.gaussians.positions, T::lit(t))?;
    Ok((set, dmu))
}

/// PSNR and SSIM of inference renders against `set`, per frame averaged
/// over cameras, for the listed frames.
pub fn evaluate<T: Scalar>(state: &TrainState<T>, set: &FrameSet, frames: &[usize]) -> Result<MetricReport> {
    let mut out = Vec::with_capacity(frames.len());
    for &f in frames {
        let (mut p, mut s) = (0.0, 0.0);
        for (k, cam) in set.cameras.iter().enumerate() {
            let img = inference_render(state, set.timestamps[f], cam)?;
            let a: Vec<f64> = img.colors.iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = set.image(f, k).to_scalars();
            p += psnr(&a, &b)?;
            s += ssim(&a, &b, cam.width, cam.height, 3)?;
        }
        let k = set.cameras.len() as f64;
        out.push(FrameMetrics {
            frame: f,
            timestamp: set.timestamps[f],
            psnr: p / k,
            ssim: s / k,
        });
    }
    Ok(MetricReport { frames: out })
}

/// Metrics for every frame of `set`.
pub fn per_frame_curve<T: Scalar>(state: &TrainState<T>, set: &FrameSet) -> Result<MetricReport> {
    evaluate(state, set, &(0..set.frames()).collect::<Vec<_>>())
}

/// Mean PSNR over the held-out frames.
pub fn held_out_psnr<T: Scalar>(state: &TrainState<T>, set: &FrameSet) -> Result<f64> {
    Ok(evaluate(state, set, &state.config.test_frames(set.frames()))?.mean_psnr())
}

/// Deformed Gaussians at `t` rendered with |Δμ| as color, normalized by
/// the frame's 99th percentile.
pub fn motion_heatmap<T: Scalar>(state: &TrainState<T>, t: f64, cam: &Camera) -> Result<RenderedImage<T>> {
    let (set, dmu) = deformed_set(state, t)?;
    crate::render::render_motion(&set, &dmu, cam, &state.config.render)
}
