//! End-to-end finite-difference suite over every differentiable piece:
//! tape primitives, the deformation field, one encoder layer, the full
//! encoder, the renderer and the complete two-stream loss.

use std::time::{Duration, Instant};

use diffcore::gradcheck::{compare, FdOptions};
use diffcore::{fd_check_with, DTensor, DiffError, Stencil, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{DeformConfig, DeformMlp, Linear};
use crate::encoder::{CrossTemporalEncoder, EncoderConfig};
use crate::error::Result;
use crate::gaussian::GaussianSet;
use crate::render::{render_on_tape, Camera, RenderConfig};
use crate::synth::{generate, standard_scene, TrajectoryMix};
use crate::trainer::{forward, TimeBatch, TrainConfig, TrainState};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODULE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub check: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// Worst relative error and tolerance per module, in suite order.
    pub fn by_module(&self) -> Vec<(&'static str, f64, f64)> {
        let mut out: Vec<(&'static str, f64, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|m| m.0 == c.module) {
                Some(m) => m.1 = m.1.max(c.max_rel_err),
                None => out.push((c.module, c.max_rel_err, c.tol)),
            }
        }
        out
    }
}

/// Two-point differences for primitives. Composed modules use the
/// fourth-order stencil: their positional encodings reach frequencies near
/// 100, so the two-point truncation error at this step is on the order of
/// the tolerance.
fn options(module: &str, tol: f64) -> FdOptions {
    let opts = FdOptions::new(STEP, tol);
    if module == "primitives" { opts } else { opts.with_stencil(Stencil::FivePoint) }
}

fn lift(e: crate::Error) -> DiffError {
    DiffError::Invalid { op: "model", msg: e.to_string() }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DTensor<f64> {
    DTensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(w * y)` with weights fixed by `seed`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> diffcore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Suite {
    rng: ChaCha8Rng,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn run<F>(&mut self, module: &'static str, check: &str, x: &DTensor<f64>, tol: f64, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> diffcore::Result<Var>,
    {
        let seed = self.rng.random();
        let report = fd_check_with(|t, v| f(t, v).and_then(|y| project(t, y, seed)), x, options(module, tol))?;
        self.checks.push(CheckResult {
            module,
            check: check.to_string(),
            max_rel_err: report.max_rel_err,
            tol,
        });
        Ok(())
    }

    fn input(&mut self, shape: &[usize]) -> DTensor<f64> {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    /// Values bounded away from zero, for the kink of `abs`.
    fn off_zero(&mut self, shape: &[usize]) -> DTensor<f64> {
        let rng = &mut self.rng;
        DTensor::from_fn(shape, |_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
    }

    fn primitives(&mut self) -> Result<()> {
        const M: &str = "primitives";
        let tol = PRIMITIVE_TOL;
        let x = self.input(&[3, 4]);
        self.run(M, "tanh", &x, tol, |t, v| Ok(t.tanh(v)))?;
        self.run(M, "exp", &x, tol, |t, v| Ok(t.exp(v)))?;
        self.run(M, "sigmoid", &x, tol, |t, v| Ok(t.sigmoid(v)))?;
        self.run(M, "neg", &x, tol, |t, v| Ok(t.neg(v)))?;
        self.run(M, "sin", &x, tol, |t, v| Ok(t.sin(v)))?;
        self.run(M, "cos", &x, tol, |t, v| Ok(t.cos(v)))?;
        self.run(M, "scale", &x, tol, |t, v| Ok(t.scale(v, -1.7)))?;
        let xa = self.off_zero(&[3, 4]);
        self.run(M, "abs", &xa, tol, |t, v| Ok(t.abs(v)))?;

        for (name, rhs_shape) in [("equal shapes", vec![2, 3, 4]), ("suffix broadcast", vec![4])] {
            let a = self.input(&[2, 3, 4]);
            let b = self.input(&rhs_shape);
            for (op, f) in [
                ("add", Tape::add as fn(&mut Tape<f64>, Var, Var) -> diffcore::Result<Var>),
                ("sub", Tape::sub),
                ("mul", Tape::mul),
            ] {
                let bc = b.clone();
                self.run(M, &format!("{op} lhs, {name}"), &a, tol, |t, v| {
                    let c = t.constant(bc.clone());
                    f(t, v, c)
                })?;
                let ac = a.clone();
                self.run(M, &format!("{op} rhs, {name}"), &b, tol, |t, v| {
                    let c = t.constant(ac.clone());
                    f(t, c, v)
                })?;
            }
        }

        for (name, sa, sb) in [
            ("plain", vec![3, 4], vec![4, 2]),
            ("paired", vec![2, 3, 4], vec![2, 4, 2]),
            ("shared rhs", vec![2, 3, 4], vec![4, 2]),
            ("shared lhs", vec![3, 4], vec![2, 4, 2]),
        ] {
            let a = self.input(&sa);
            let b = self.input(&sb);
            let bc = b.clone();
            self.run(M, &format!("matmul lhs, {name}"), &a, tol, |t, v| {
                let c = t.constant(bc.clone());
                t.matmul(v, c)
            })?;
            let ac = a.clone();
            self.run(M, &format!("matmul rhs, {name}"), &b, tol, |t, v| {
                let c = t.constant(ac.clone());
                t.matmul(c, v)
            })?;
        }

        let x = self.input(&[2, 3, 4]);
        for axis in 0..3 {
            self.run(M, &format!("softmax axis {axis}"), &x, tol, |t, v| t.softmax(v, axis))?;
            self.run(M, &format!("normalize axis {axis}"), &x, tol, |t, v| t.normalize(v, axis))?;
        }
        let (gain, bias) = (self.input(&[4]), self.input(&[4]));
        let (g2, b2) = (gain.clone(), bias.clone());
        self.run(M, "layer_norm input", &x, tol, move |t, v| {
            let (g, b) = (t.constant(g2.clone()), t.constant(b2.clone()));
            t.layer_norm(v, 2, g, b, 1e-5)
        })?;
        let (xc, b2) = (x.clone(), bias.clone());
        self.run(M, "layer_norm gain", &gain, tol, move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(b2.clone()));
            t.layer_norm(x, 2, v, b, 1e-5)
        })?;
        let (xc, g2) = (x.clone(), gain.clone());
        self.run(M, "layer_norm bias", &bias, tol, move |t, v| {
            let (x, g) = (t.constant(xc.clone()), t.constant(g2.clone()));
            t.layer_norm(x, 2, g, v, 1e-5)
        })?;

        self.run(M, "sum", &x, tol, |t, v| Ok(t.sum(v)))?;
        self.run(M, "mean", &x, tol, |t, v| Ok(t.mean(v)))?;
        self.run(M, "reshape", &x, tol, |t, v| t.reshape(v, &[6, 4]))?;
        self.run(M, "permute", &x, tol, |t, v| t.permute(v, &[2, 0, 1]))?;
        self.run(M, "transpose", &x, tol, |t, v| t.transpose(v))?;
        self.run(M, "select", &x, tol, |t, v| t.select(v, 1))?;
        let small = self.input(&[3, 1]);
        self.run(M, "expand", &small, tol, |t, v| t.expand(v, &[3, 5]))?;
        let other = self.input(&[2, 2, 4]);
        self.run(M, "concat", &x, tol, move |t, v| {
            let o = t.constant(other.clone());
            t.concat(&[o, v, o], 1)
        })?;
        Ok(())
    }

    fn live_field(&mut self, cfg: DeformConfig) -> Result<DeformMlp<f64>> {
        let mut mlp = DeformMlp::new(cfg, &mut self.rng)?;
        mlp.head_position = Linear::glorot(cfg.width, 3, &mut self.rng);
        mlp.head_rotation = Linear::glorot(cfg.width, 4, &mut self.rng);
        mlp.head_scale = Linear::glorot(cfg.width, 3, &mut self.rng);
        Ok(mlp)
    }

    fn deformation(&mut self) -> Result<()> {
        const M: &str = "deformation field";
        let mlp = self.live_field(DeformConfig::default())?;
        let mu = self.input(&[3, 3]);
        let t = self.rng.random_range(0.0..1.0);
        let residual = |tape: &mut Tape<f64>, b: &crate::deform::BoundMlp, m: Var| -> diffcore::Result<Var> {
            let r = b.deform(tape, m, t).map_err(lift)?;
            tape.concat(&[r.position, r.rotation, r.scale], 1)
        };
        self.run(M, "positions", &mu, MODULE_TOL, |tape, v| {
            let b = mlp.bind(tape, false);
            residual(tape, &b, v)
        })?;
        let first = mlp.trunk[0].weight.clone();
        self.run(M, "first trunk weight", &first, MODULE_TOL, |tape, v| {
            let mut b = mlp.bind(tape, false);
            b.trunk[0].weight = v;
            let m = tape.constant(mu.clone());
            residual(tape, &b, m)
        })?;
        let head = mlp.head_rotation.weight.clone();
        self.run(M, "rotation head weight", &head, MODULE_TOL, |tape, v| {
            let mut b = mlp.bind(tape, false);
            b.heads[1].weight = v;
            let m = tape.constant(mu.clone());
            residual(tape, &b, m)
        })?;
        Ok(())
    }

    fn encoder(&mut self) -> Result<()> {
        let cfg = EncoderConfig::default();
        let enc = CrossTemporalEncoder::with_random_head(cfg, &mut self.rng)?;
        let x = self.input(&[3, 2, cfg.d_model()]);
        self.run("encoder layer", "input tokens", &x, MODULE_TOL, |tape, v| {
            let layer = enc.layers[0].bind(tape, false);
            layer.forward(tape, v, &cfg, None).map_err(lift)
        })?;
        let q = enc.layers[0].query.weight.clone();
        self.run("encoder layer", "query weight", &q, MODULE_TOL, |tape, v| {
            let mut layer = enc.layers[0].bind(tape, false);
            layer.query.weight = v;
            let x = tape.constant(x.clone());
            layer.forward(tape, x, &cfg, None).map_err(lift)
        })?;

        let mu = self.input(&[2, 3]);
        let ts = [0.1, 0.45, 0.8];
        self.run("full encoder", "canonical positions", &mu, MODULE_TOL, |tape, v| {
            let b = enc.bind(tape, false);
            b.offsets(tape, v, &ts, None).map_err(lift)
        })?;
        let ff = enc.layers[cfg.layers - 1].ff_in.weight.clone();
        self.run("full encoder", "last feed-forward weight", &ff, MODULE_TOL, |tape, v| {
            let mut b = enc.bind(tape, false);
            b.layers[cfg.layers - 1].ff_in.weight = v;
            let m = tape.constant(mu.clone());
            b.offsets(tape, m, &ts, None).map_err(lift)
        })?;
        Ok(())
    }

    fn renderer(&mut self) -> Result<()> {
        const M: &str = "renderer";
        let n = 4;
        let rng = &mut self.rng;
        let set = GaussianSet::new(
            uniform(rng, &[n, 3], -0.6, 0.6),
            uniform(rng, &[n, 4], -1.0, 1.0),
            uniform(rng, &[n, 3], -1.8, -1.0),
            uniform(rng, &[n], -1.5, 1.0),
            uniform(rng, &[n, 3], 0.1, 0.9),
        )?;
        let cam = Camera::look_at([0.3, -0.4, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 14.0, 12, 12)?;
        let cfg = RenderConfig::exact();
        let names = ["positions", "rotations", "log-scales", "opacity logits", "colors"];
        for (k, name) in names.into_iter().enumerate() {
            let x = set.parameters()[k].clone();
            self.run(M, name, &x, MODULE_TOL, |tape, v| {
                let mut g = set.bind(tape, false);
                match k {
                    0 => g.positions = v,
                    1 => g.rotations = v,
                    2 => g.log_scales = v,
                    3 => g.opacity_logits = v,
                    _ => g.colors = v,
                }
                render_on_tape(tape, &g, &cam, &cfg).map_err(lift)
            })?;
        }
        Ok(())
    }

    /// Two Gaussians, two timestamps, one 8x8 camera; every parameter
    /// tensor of the trainer is probed at a few random coordinates.
    fn two_stream(&mut self) -> Result<()> {
        const M: &str = "two-stream loss";
        let mut spec = standard_scene();
        spec.mix = TrajectoryMix {
            static_count: 1,
            linear_count: 1,
            orbital_count: 0,
            sudden_count: 0,
        };
        spec.frames = 5;
        spec.cameras = 1;
        spec.width = 8;
        spec.height = 8;
        spec.focal = 9.0;
        let set = generate(&spec)?;
        let mut cfg = TrainConfig {
            batch: 2,
            render: RenderConfig::exact(),
            seed: self.rng.random(),
            ..TrainConfig::default()
        };
        cfg.init.scale = 0.3;
        let mut state = TrainState::<f64>::new(&set, cfg)?;
        for f in &mut state.fields {
            let w = f.config.width;
            f.head_position = scaled(Linear::glorot(w, 3, &mut self.rng), 0.1);
            f.head_rotation = scaled(Linear::glorot(w, 4, &mut self.rng), 0.1);
            f.head_scale = scaled(Linear::glorot(w, 3, &mut self.rng), 0.1);
        }
        if let Some(e) = &mut state.encoder {
            e.head = scaled(Linear::glorot(e.config.d_model(), 3, &mut self.rng), 0.1);
        }
        let batch = TimeBatch {
            frames: vec![0, 3],
            timestamps: vec![set.timestamps[0], set.timestamps[3]],
            cameras: vec![0, 0],
        };

        // Targets sit 0.05 above or below the plain-branch render at the
        // test point, so no L1 residual is near its kink during probing.
        let mut set = set;
        let mut tape = Tape::new();
        let fwd = forward(&mut state, &set, &batch, &mut tape)?;
        for (i, &r) in fwd.plain_renders.iter().enumerate() {
            let slot = batch.frames[i] * set.cameras.len() + batch.cameras[i];
            for (j, (dst, &v)) in set.images[slot].data.iter_mut().zip(tape.data(r)).enumerate() {
                *dst = (v + if j % 2 == 0 { 0.05 } else { -0.05 }) as f32;
            }
        }

        let mut tape = Tape::new();
        let fwd = forward(&mut state, &set, &batch, &mut tape)?;
        tape.backward(fwd.loss)?;
        let analytic: Vec<Vec<f64>> = fwd.params.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();
        drop(tape);

        let count = state.parameters().len();
        for k in 0..count {
            let numel = state.parameters()[k].numel();
            let probes: Vec<usize> = if numel <= 6 {
                (0..numel).collect()
            } else {
                rand::seq::index::sample(&mut self.rng, numel, 6).into_vec()
            };
            let mut numeric = Vec::with_capacity(probes.len());
            for &i in &probes {
                let mut eval = |delta: f64| -> Result<f64> {
                    let orig = state.parameters()[k].data()[i];
                    state.parameters_mut()[k].data_mut()[i] = orig + delta;
                    let mut tape = Tape::new();
                    let out = forward(&mut state, &set, &batch, &mut tape);
                    state.parameters_mut()[k].data_mut()[i] = orig;
                    Ok(out?.losses.total)
                };
                let mut acc = 0.0;
                for &(offset, weight) in Stencil::FivePoint.taps() {
                    acc += weight * eval(offset * STEP)?;
                }
                numeric.push(acc / STEP);
            }
            let a = probes.iter().map(|&i| analytic[k][i]).collect();
            let rep = compare(a, numeric, options(M, MODULE_TOL));
            self.checks.push(CheckResult {
                module: M,
                check: format!("parameter tensor {k}"),
                max_rel_err: rep.max_rel_err,
                tol: MODULE_TOL,
            });
        }
        Ok(())
    }
}

fn scaled(mut l: Linear<f64>, s: f64) -> Linear<f64> {
    l.weight.data_mut().iter_mut().for_each(|w| *w *= s);
    l
}

/// Runs every check in 64-bit precision.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        checks: Vec::new(),
    };
    suite.primitives()?;
    suite.deformation()?;
    suite.encoder()?;
    suite.renderer()?;
    suite.two_stream()?;
    Ok(SuiteReport {
        checks: suite.checks,
        elapsed: start.elapsed(),
    })
}
