//! Frequency encoding and the per-timestamp deformation MLP.

use diffcore::{DTensor, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Sinusoidal features `(sin(2^l pi p), cos(2^l pi p))` for `l < octaves`,
/// interleaved per input channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyEncoder {
    pub octaves: usize,
}

impl FrequencyEncoder {
    pub fn new(octaves: usize) -> Self {
        Self { octaves }
    }

    pub fn width(&self, channels: usize) -> usize {
        channels * 2 * self.octaves
    }

    fn frequencies<T: Scalar>(&self) -> Vec<T> {
        (0..self.octaves).map(|l| T::lit(2f64.powi(l as i32) * std::f64::consts::PI)).collect()
    }

    pub fn encode<T: Scalar>(&self, p: &[T]) -> Vec<T> {
        let freqs = self.frequencies::<T>();
        let mut out = Vec::with_capacity(self.width(p.len()));
        for &v in p {
            for &f in &freqs {
                out.push((f * v).sin());
                out.push((f * v).cos());
            }
        }
        out
    }

    /// Encodes the last axis of `x` (`[.., k]` to `[.., k * 2L]`) on the tape.
    pub fn encode_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let l = self.octaves;
        let mut wide = shape.clone();
        wide.push(1);
        let col = tape.reshape(x, &wide)?;
        *wide.last_mut().unwrap() = l;
        let spread = tape.expand(col, &wide)?;
        let freqs = tape.constant(DTensor::new(&[l], self.frequencies())?);
        let phase = tape.mul(spread, freqs)?;
        let (s, c) = (tape.sin(phase), tape.cos(phase));
        wide.push(1);
        let s = tape.reshape(s, &wide)?;
        let c = tape.reshape(c, &wide)?;
        let pairs = tape.concat(&[s, c], wide.len() - 1)?;
        let mut out = shape;
        let last = out.pop().unwrap_or(1);
        out.push(last * 2 * l);
        Ok(tape.reshape(pairs, &out)?)
    }
}

/// Dense layer `x W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f64> {
    pub weight: DTensor<T>,
    pub bias: DTensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: DTensor::from_fn(&[inputs, outputs], |_| T::lit(rng.random_range(-limit..limit))),
            bias: DTensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DTensor::zeros(&[inputs, outputs]),
            bias: DTensor::zeros(&[outputs]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLinear {
        let mut leaf = |t: &DTensor<T>| if trainable { tape.param(t.detached()) } else { tape.constant(t.detached()) };
        BoundLinear {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    /// Applies the layer to `[rows, in]` or `[.., rows, in]` input.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add(y, self.bias)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub octaves: usize,
    pub depth: usize,
    pub width: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            octaves: 6,
            depth: 6,
            width: 128,
        }
    }
}

impl DeformConfig {
    /// `3 * 2L` position features plus `2L` time features.
    pub fn input_width(&self) -> usize {
        8 * self.octaves
    }

    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.depth == 0 || self.width == 0 {
            return contract(format!("deformation config {self:?} has a zero dimension"));
        }
        Ok(())
    }
}

/// `D(mu, t) -> (d_mu, d_r, d_s)`: a tanh trunk with three linear heads that
/// start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformMlp<T: Scalar = f64> {
    pub config: DeformConfig,
    pub trunk: Vec<Linear<T>>,
    pub head_position: Linear<T>,
    pub head_rotation: Linear<T>,
    pub head_scale: Linear<T>,
}

impl<T: Scalar> DeformMlp<T> {
    pub fn new(config: DeformConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::with_capacity(config.depth);
        let mut inputs = config.input_width();
        for _ in 0..config.depth {
            trunk.push(Linear::glorot(inputs, config.width, rng));
            inputs = config.width;
        }
        Ok(Self {
            config,
            trunk,
            head_position: Linear::zeros(config.width, 3),
            head_rotation: Linear::zeros(config.width, 4),
            head_scale: Linear::zeros(config.width, 3),
        })
    }

    pub fn encoder(&self) -> FrequencyEncoder {
        FrequencyEncoder::new(self.config.octaves)
    }

    fn linears(&self) -> impl Iterator<Item = &Linear<T>> {
        self.trunk.iter().chain([&self.head_position, &self.head_rotation, &self.head_scale])
    }

    /// Weight and bias tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&DTensor<T>> {
        self.linears().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DTensor<T>> {
        self.trunk
            .iter_mut()
            .chain([&mut self.head_position, &mut self.head_rotation, &mut self.head_scale])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        BoundMlp {
            octaves: self.config.octaves,
            trunk: self.trunk.iter().map(|l| l.bind(tape, trainable)).collect(),
            heads: [
                self.head_position.bind(tape, trainable),
                self.head_rotation.bind(tape, trainable),
                self.head_scale.bind(tape, trainable),
            ],
        }
    }

    /// Residuals at time `t` for positions `[N, 3]`, evaluated on a scratch
    /// tape with exactly the training-path arithmetic.
    pub fn deform_values(&self, positions: &DTensor<T>, t: T) -> Result<(DTensor<T>, DTensor<T>, DTensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mu = tape.constant(positions.detached());
        let out = bound.deform(&mut tape, mu, t)?;
        Ok((tape.value(out.position).clone(), tape.value(out.rotation).clone(), tape.value(out.scale).clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundMlp {
    pub octaves: usize,
    pub trunk: Vec<BoundLinear>,
    pub heads: [BoundLinear; 3],
}

/// Tape handles of one deformation: `[N, 3]`, `[N, 4]`, `[N, 3]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Residual {
    pub position: Var,
    pub rotation: Var,
    pub scale: Var,
}

impl BoundMlp {
    pub fn vars(&self) -> Vec<Var> {
        self.trunk.iter().chain(&self.heads).flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Runs the trunk and heads on encoded features `[N, 8L]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, features: Var) -> Result<Residual> {
        let mut h = features;
        for layer in &self.trunk {
            let z = layer.forward(tape, h)?;
            h = tape.tanh(z);
        }
        Ok(Residual {
            position: self.heads[0].forward(tape, h)?,
            rotation: self.heads[1].forward(tape, h)?,
            scale: self.heads[2].forward(tape, h)?,
        })
    }

    /// `concat(gamma(mu), gamma(t))` for positions `[N, 3]`.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, positions: Var, t: T) -> Result<Var> {
        let n = match tape.shape(positions) {
            [n, 3] => *n,
            other => return contract(format!("positions have shape {other:?}, expected [N, 3]")),
        };
        if !(t >= T::zero() && t <= T::one()) {
            return contract(format!("timestamp {t} outside [0, 1]"));
        }
        let enc = FrequencyEncoder::new(self.octaves);
        let pe = enc.encode_on_tape(tape, positions)?;
        let time = DTensor::new(&[1, enc.width(1)], enc.encode(&[t]))?;
        let time = tape.constant(time);
        let time = tape.expand(time, &[n, enc.width(1)])?;
        Ok(tape.concat(&[pe, time], 1)?)
    }

    pub fn deform<T: Scalar>(&self, tape: &mut Tape<T>, positions: Var, t: T) -> Result<Residual> {
        let x = self.features(tape, positions, t)?;
        self.forward(tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_zero() {
        let e = FrequencyEncoder::new(3);
        assert_eq!(e.encode(&[0.0f64]), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_half() {
        let v = FrequencyEncoder::new(2).encode(&[0.5f64]);
        let want = [1.0, 0.0, 0.0, -1.0];
        assert!(v.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{v:?}");
    }

    #[test]
    fn tape_encoding_matches_plain() {
        let e = FrequencyEncoder::new(6);
        let x = DTensor::new(&[2, 3], vec![0.1, -0.7, 2.3, 0.0, 5.5, -1.25]).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let out = e.encode_on_tape(&mut tape, v).unwrap();
        assert_eq!(tape.shape(out), &[2, 36]);
        let plain: Vec<f64> = x.data().chunks(3).flat_map(|row| e.encode(row)).collect();
        assert_eq!(tape.data(out), plain.as_slice());
    }

    #[test]
    fn fresh_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = DeformMlp::<f64>::new(DeformConfig::default(), &mut rng).unwrap();
        let mu = DTensor::from_fn(&[5, 3], |i| i as f64 * 0.1 - 0.7);
        let (a, b, c) = mlp.deform_values(&mu, 0.3).unwrap();
        assert!(a.data().iter().chain(b.data()).chain(c.data()).all(|&v| v == 0.0));
        assert_eq!(a.shape(), &[5, 3]);
        assert_eq!(b.shape(), &[5, 4]);
    }

    #[test]
    fn input_width_is_eight_octaves() {
        assert_eq!(DeformConfig::default().input_width(), 48);
    }

    #[test]
    fn timestamp_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = DeformMlp::<f64>::new(DeformConfig::default(), &mut rng).unwrap();
        assert!(mlp.deform_values(&DTensor::zeros(&[1, 3]), 1.5).is_err());
    }
}
