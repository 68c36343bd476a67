//! Self-attention over a batch of timestamps, one sequence per Gaussian,
//! producing position offsets.

use std::cell::Cell;

use diffcore::{DTensor, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{BoundLinear, BoundMlp, FrequencyEncoder, Linear, Residual};
use crate::error::{contract, Error, Result};

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of encoder forward passes run on the current thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub octaves: usize,
    pub hidden: usize,
    /// Drop probability after attention and feed-forward; 0 disables it.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            octaves: 6,
            hidden: 192,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn d_model(&self) -> usize {
        8 * self.octaves
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.octaves == 0 || self.hidden == 0 {
            return contract(format!("encoder config {self:?} has a zero dimension"));
        }
        if !self.d_model().is_multiple_of(self.heads) {
            return contract(format!("d_model {} is not divisible by {} heads", self.d_model(), self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return contract(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Scalars the tape holds for one forward pass over `n` Gaussians and
    /// `b` timestamps. Per layer: scores, scaled scores and weights per head
    /// (`3 H B^2 N`), 25 token-sized tensors from projections, head
    /// reshapes, residuals and norms (`25 B N D`), and the feed-forward
    /// activations (`3 B N d_hidden`). Input assembly and the head add
    /// about `4 B N D`.
    pub fn activation_elements(&self, n: usize, b: usize) -> usize {
        let d = self.d_model();
        let per_layer = 3 * self.heads * b * b * n + 25 * b * n * d + 3 * b * n * self.hidden;
        self.layers * per_layer + 4 * b * n * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T: Scalar = f64> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm1_gain: DTensor<T>,
    pub norm1_bias: DTensor<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub norm2_gain: DTensor<T>,
    pub norm2_bias: DTensor<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::glorot(d, d, rng),
            key: Linear::glorot(d, d, rng),
            value: Linear::glorot(d, d, rng),
            output: Linear::glorot(d, d, rng),
            norm1_gain: DTensor::full(&[d], T::one()),
            norm1_bias: DTensor::zeros(&[d]),
            ff_in: Linear::glorot(d, hidden, rng),
            ff_out: Linear::glorot(hidden, d, rng),
            norm2_gain: DTensor::full(&[d], T::one()),
            norm2_bias: DTensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&DTensor<T>; 16] {
        [
            &self.query.weight,
            &self.query.bias,
            &self.key.weight,
            &self.key.bias,
            &self.value.weight,
            &self.value.bias,
            &self.output.weight,
            &self.output.bias,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.ff_in.weight,
            &self.ff_in.bias,
            &self.ff_out.weight,
            &self.ff_out.bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DTensor<T>; 16] {
        [
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.output.weight,
            &mut self.output.bias,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.ff_in.weight,
            &mut self.ff_in.bias,
            &mut self.ff_out.weight,
            &mut self.ff_out.bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLayer {
        let mut leaf = |t: &DTensor<T>| if trainable { tape.param(t.detached()) } else { tape.constant(t.detached()) };
        let mut lin = |l: &Linear<T>| BoundLinear {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let (query, key, value, output) = (lin(&self.query), lin(&self.key), lin(&self.value), lin(&self.output));
        let (ff_in, ff_out) = (lin(&self.ff_in), lin(&self.ff_out));
        let mut leaf = |t: &DTensor<T>| if trainable { tape.param(t.detached()) } else { tape.constant(t.detached()) };
        BoundLayer {
            query,
            key,
            value,
            output,
            ff_in,
            ff_out,
            norm1: [leaf(&self.norm1_gain), leaf(&self.norm1_bias)],
            norm2: [leaf(&self.norm2_gain), leaf(&self.norm2_bias)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundLayer {
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
    pub output: BoundLinear,
    pub ff_in: BoundLinear,
    pub ff_out: BoundLinear,
    pub norm1: [Var; 2],
    pub norm2: [Var; 2],
}

/// Dropout masks are drawn from this when training with dropout.
pub type DropoutRng<'a> = Option<&'a mut rand_chacha::ChaCha8Rng>;

impl BoundLayer {
    /// Post-norm layer on `[B, N, D]` tokens; attention runs along `B`
    /// independently for each of the `N` sequences.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, cfg: &EncoderConfig, mut dropout: DropoutRng<'_>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = cfg.d_model();
        let [b, n, width] = shape[..] else {
            return contract(format!("encoder input has shape {shape:?}, expected [B, N, D]"));
        };
        if width != d {
            return contract(format!("encoder tokens have width {width}, expected {d}"));
        }
        let h = cfg.heads;
        let dh = d / h;
        let rows = tape.reshape(x, &[b * n, d])?;
        let split = |tape: &mut Tape<T>, lin: &BoundLinear, axes: &[usize]| -> Result<Var> {
            let y = lin.forward(tape, rows)?;
            let y = tape.reshape(y, &[b, n, h, dh])?;
            Ok(tape.permute(y, axes)?)
        };
        let q = split(tape, &self.query, &[1, 2, 0, 3])?;
        let k = split(tape, &self.key, &[1, 2, 3, 0])?;
        let v = split(tape, &self.value, &[1, 2, 0, 3])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let weights = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[2, 0, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * n, d])?;
        let attn = self.output.forward(tape, ctx)?;
        let attn = drop(tape, attn, cfg.dropout, dropout.as_deref_mut())?;
        let res = tape.add(rows, attn)?;
        let h1 = tape.layer_norm(res, 1, self.norm1[0], self.norm1[1], T::lit(cfg.layer_norm_eps))?;
        let ff = self.ff_in.forward(tape, h1)?;
        let ff = tape.tanh(ff);
        let ff = self.ff_out.forward(tape, ff)?;
        let ff = drop(tape, ff, cfg.dropout, dropout)?;
        let res = tape.add(h1, ff)?;
        let out = tape.layer_norm(res, 1, self.norm2[0], self.norm2[1], T::lit(cfg.layer_norm_eps))?;
        Ok(tape.reshape(out, &[b, n, d])?)
    }
}

fn drop<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: DropoutRng<'_>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask = DTensor::from_fn(tape.shape(x), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
    let mask = tape.constant(mask);
    Ok(tape.mul(x, mask)?)
}

/// M encoder layers followed by a linear map to 3D offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossTemporalEncoder<T: Scalar = f64> {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> CrossTemporalEncoder<T> {
    /// Glorot-initialized layers with a zero offset head.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        Ok(Self {
            config,
            layers: (0..config.layers).map(|_| EncoderLayer::new(d, config.hidden, rng)).collect(),
            head: Linear::zeros(d, 3),
        })
    }

    /// Same as [`CrossTemporalEncoder::new`] but with a Glorot offset head,
    /// so offsets are nonzero from the start.
    pub fn with_random_head(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut enc = Self::new(config, rng)?;
        enc.head = Linear::glorot(config.d_model(), 3, rng);
        Ok(enc)
    }

    pub fn parameters(&self) -> Vec<&DTensor<T>> {
        let mut out: Vec<&DTensor<T>> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DTensor<T>> {
        let mut out: Vec<&mut DTensor<T>> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            config: self.config,
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Offsets `[B, N, 3]` as plain values.
    pub fn offsets_values(&self, positions: &DTensor<T>, timestamps: &[T]) -> Result<DTensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mu = tape.constant(positions.detached());
        let o = bound.offsets(&mut tape, mu, timestamps, None)?;
        Ok(tape.value(o).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub layers: Vec<BoundLayer>,
    pub head: BoundLinear,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            for lin in [l.query, l.key, l.value, l.output] {
                out.extend([lin.weight, lin.bias]);
            }
            out.extend(l.norm1);
            for lin in [l.ff_in, l.ff_out] {
                out.extend([lin.weight, lin.bias]);
            }
            out.extend(l.norm2);
        }
        out.extend([self.head.weight, self.head.bias]);
        out
    }

    /// Tokens `[B, N, 8L]`: row `(b, n)` is `concat(gamma(mu_n), gamma(t_b))`.
    pub fn build_input<T: Scalar>(&self, tape: &mut Tape<T>, positions: Var, timestamps: &[T]) -> Result<Var> {
        build_input(tape, positions, timestamps, self.config.octaves)
    }

    /// Runs every layer and the head on prepared tokens.
    pub fn forward_tokens<T: Scalar>(&self, tape: &mut Tape<T>, tokens: Var, mut dropout: DropoutRng<'_>) -> Result<Var> {
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        let shape = tape.shape(tokens).to_vec();
        let mut f = tokens;
        for (index, layer) in self.layers.iter().enumerate() {
            f = layer.forward(tape, f, &self.config, dropout.as_deref_mut())?;
            if let Some(bad) = tape.value(f).first_non_finite() {
                return Err(Error::Numeric(format!("encoder layer {index} produced a non-finite value at element {bad}")));
            }
        }
        let o = self.head.forward(tape, f)?;
        Ok(tape.reshape(o, &[shape[0], shape[1], 3])?)
    }

    /// `O = head(encoder(build_input(mu, T_s)))`, shape `[B, N, 3]`.
    pub fn offsets<T: Scalar>(&self, tape: &mut Tape<T>, positions: Var, timestamps: &[T], dropout: DropoutRng<'_>) -> Result<Var> {
        let tokens = self.build_input(tape, positions, timestamps)?;
        self.forward_tokens(tape, tokens, dropout)
    }
}

pub fn build_input<T: Scalar>(tape: &mut Tape<T>, positions: Var, timestamps: &[T], octaves: usize) -> Result<Var> {
    let n = match tape.shape(positions) {
        [n, 3] => *n,
        other => return contract(format!("positions have shape {other:?}, expected [N, 3]")),
    };
    let b = timestamps.len();
    if b == 0 || n == 0 {
        return contract(format!("encoder input needs B >= 1 and N >= 1, got B = {b}, N = {n}"));
    }
    if let Some(t) = timestamps.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
        return contract(format!("timestamp {t} outside [0, 1]"));
    }
    let enc = FrequencyEncoder::new(octaves);
    let (wp, wt) = (enc.width(3), enc.width(1));
    let pe = enc.encode_on_tape(tape, positions)?;
    let pe = tape.reshape(pe, &[1, n, wp])?;
    let pe = tape.expand(pe, &[b, n, wp])?;
    let te: Vec<T> = timestamps.iter().flat_map(|&t| enc.encode(&[t])).collect();
    let te = tape.constant(DTensor::new(&[b, 1, wt], te)?);
    let te = tape.expand(te, &[b, n, wt])?;
    Ok(tape.concat(&[pe, te], 2)?)
}

/// `d_mu_i = D(mu + O_i, t_i)` for every batch entry.
pub fn coupled_deform<T: Scalar>(tape: &mut Tape<T>, field: &BoundMlp, positions: Var, offsets: Var, timestamps: &[T]) -> Result<Vec<Residual>> {
    let mut out = Vec::with_capacity(timestamps.len());
    for (i, &t) in timestamps.iter().enumerate() {
        let o = tape.select(offsets, i)?;
        let a = tape.add(positions, o)?;
        out.push(field.deform(tape, a, t)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_is_plain_encoding() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(DTensor::zeros(&[1, 3]));
        let f = build_input(&mut tape, mu, &[0.0], 6).unwrap();
        assert_eq!(tape.shape(f), &[1, 1, 48]);
        let want: Vec<f64> = (0..24).flat_map(|_| [0.0, 1.0]).collect();
        assert_eq!(tape.data(f), want.as_slice());
    }

    #[test]
    fn zero_head_gives_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = CrossTemporalEncoder::<f64>::new(EncoderConfig::default(), &mut rng).unwrap();
        let mu = DTensor::from_fn(&[3, 3], |i| 0.1 * i as f64);
        let o = enc.offsets_values(&mu, &[0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(o.shape(), &[4, 3, 3]);
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_positions_identical_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = CrossTemporalEncoder::<f64>::with_random_head(EncoderConfig::default(), &mut rng).unwrap();
        let mu = DTensor::new(&[2, 3], vec![0.3, -0.2, 0.1, 0.3, -0.2, 0.1]).unwrap();
        let o = enc.offsets_values(&mu, &[0.1, 0.6]).unwrap();
        for b in 0..2 {
            let row = &o.data()[b * 6..b * 6 + 6];
            assert_eq!(row[..3], row[3..]);
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let cfg = EncoderConfig { heads: 5, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn counter_tracks_forward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = CrossTemporalEncoder::<f64>::new(EncoderConfig::default(), &mut rng).unwrap();
        let before = forward_calls();
        enc.offsets_values(&DTensor::zeros(&[1, 3]), &[0.0]).unwrap();
        assert_eq!(forward_calls(), before + 1);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(DTensor::zeros(&[1, 3]));
        assert!(build_input(&mut tape, mu, &[], 6).is_err());
    }
}
