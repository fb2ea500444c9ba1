//! Two-layer MLP encoder with an L2-normalized output, hand-written backward
//! pass and the exponential-moving-average update used for the momentum copy.
//!
//! ```text
//! a = W1·x + b1      h = relu(a)      z = W2·h + b2      e = z / ‖z‖
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::codec;
use crate::error::{FclError, Result};
use crate::tensor_math::{self, axpy, dot_unchecked, Mat64, Vec64};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCLP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl EncoderDims {
    pub fn new(input: usize, hidden: usize, embed: usize) -> Self {
        EncoderDims {
            input,
            hidden,
            embed,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.embed * self.hidden + self.embed
    }
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims::new(64, 128, 32)
    }
}

/// Weights of the encoder. The same type doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    w1: Mat64,
    b1: Vec<f64>,
    w2: Mat64,
    b2: Vec<f64>,
}

/// Intermediate values recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
    pre_norm: Vec<f64>,
    norm: f64,
}

impl ForwardTape {
    pub fn embedding(&self) -> Vec64 {
        Vec64::from_vec_unchecked(self.pre_norm.iter().map(|z| z / self.norm).collect())
    }

    pub fn pre_activation(&self) -> &[f64] {
        &self.pre_activation
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            dims,
            w1: Mat64::zeros(dims.hidden, dims.input),
            b1: vec![0.0; dims.hidden],
            w2: Mat64::zeros(dims.embed, dims.hidden),
            b2: vec![0.0; dims.embed],
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) for every weight and bias.
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let mut p = EncoderParams::zeros(dims);
        let l1 = 1.0 / (dims.input as f64).sqrt();
        let l2 = 1.0 / (dims.hidden as f64).sqrt();
        let u1 = Uniform::new_inclusive(-l1, l1).expect("finite bounds");
        let u2 = Uniform::new_inclusive(-l2, l2).expect("finite bounds");
        p.w1.data_mut().iter_mut().for_each(|v| *v = u1.sample(rng));
        p.b1.iter_mut().for_each(|v| *v = u1.sample(rng));
        p.w2.data_mut().iter_mut().for_each(|v| *v = u2.sample(rng));
        p.b2.iter_mut().for_each(|v| *v = u2.sample(rng));
        p
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn w1(&self) -> &Mat64 {
        &self.w1
    }

    pub fn w2(&self) -> &Mat64 {
        &self.w2
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        &mut self.b2
    }

    /// Parameters in checkpoint order: W1 (row-major), b1, W2 (row-major), b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn unflatten(dims: EncoderDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.param_count() {
            return Err(FclError::dim(
                "flat parameters",
                dims.param_count(),
                flat.len(),
            ));
        }
        let (w1, rest) = flat.split_at(dims.hidden * dims.input);
        let (b1, rest) = rest.split_at(dims.hidden);
        let (w2, b2) = rest.split_at(dims.embed * dims.hidden);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(FclError::Numeric("flat parameters".into()));
        }
        Ok(EncoderParams {
            dims,
            w1: Mat64::from_vec(dims.hidden, dims.input, w1.to_vec())?,
            b1: b1.to_vec(),
            w2: Mat64::from_vec(dims.embed, dims.hidden, w2.to_vec())?,
            b2: b2.to_vec(),
        })
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    fn check_same_shape(&self, other: &EncoderParams, context: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(FclError::dim(
                context,
                self.dims.param_count(),
                other.dims.param_count(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec64, ForwardTape)> {
        if x.len() != self.dims.input {
            return Err(FclError::dim("encoder input", self.dims.input, x.len()));
        }
        let mut pre_activation = self.w1.matvec(x)?;
        axpy(1.0, &self.b1, &mut pre_activation);
        let hidden: Vec<f64> = pre_activation.iter().map(|a| a.max(0.0)).collect();
        let mut pre_norm = self.w2.matvec(&hidden)?;
        axpy(1.0, &self.b2, &mut pre_norm);
        let norm = tensor_math::norm(&pre_norm);
        if !norm.is_finite() {
            return Err(FclError::Numeric("encoder output".into()));
        }
        if norm <= tensor_math::MIN_NORM {
            return Err(FclError::Degenerate(
                "encoder output is the zero vector".into(),
            ));
        }
        let tape = ForwardTape {
            input: x.to_vec(),
            pre_activation,
            hidden,
            pre_norm,
            norm,
        };
        Ok((tape.embedding(), tape))
    }

    /// Forward pass without recording a tape.
    pub fn embed(&self, x: &[f64]) -> Result<Vec64> {
        self.forward(x).map(|(e, _)| e)
    }

    /// Gradient of `grad_embedding · e(θ)` with respect to every parameter.
    pub fn backward(&self, tape: &ForwardTape, grad_embedding: &[f64]) -> Result<EncoderParams> {
        let d = self.dims;
        if tape.input.len() != d.input
            || tape.pre_activation.len() != d.hidden
            || tape.pre_norm.len() != d.embed
        {
            return Err(FclError::dim(
                "forward tape",
                d.param_count(),
                tape.input.len(),
            ));
        }
        if grad_embedding.len() != d.embed {
            return Err(FclError::dim(
                "embedding gradient",
                d.embed,
                grad_embedding.len(),
            ));
        }
        // d e / d z = (I − e eᵀ) / ‖z‖
        let e = tape.embedding();
        let radial = dot_unchecked(&e, grad_embedding);
        let grad_z: Vec<f64> = grad_embedding
            .iter()
            .zip(e.iter())
            .map(|(g, ei)| (g - ei * radial) / tape.norm)
            .collect();

        let mut grad = EncoderParams::zeros(d);
        grad.w2.add_outer(1.0, &grad_z, &tape.hidden)?;
        grad.b2.copy_from_slice(&grad_z);
        let grad_hidden = self.w2.matvec_transposed(&grad_z)?;
        let grad_pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&tape.pre_activation)
            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
            .collect();
        grad.w1.add_outer(1.0, &grad_pre, &tape.input)?;
        grad.b1.copy_from_slice(&grad_pre);
        Ok(grad)
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        self.check_same_shape(other, "parameter accumulation")?;
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(alpha, src, dst);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// θ ← θ − lr·grad
    pub fn sgd_step(&mut self, grad: &EncoderParams, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(FclError::Contract(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        self.check_same_shape(grad, "sgd gradient")?;
        if !grad.is_finite() {
            return Err(FclError::Numeric("sgd gradient".into()));
        }
        self.add_scaled(-lr, grad)
    }

    /// θ_self ← m·θ_self + (1−m)·θ_main
    pub fn momentum_update(&mut self, main: &EncoderParams, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(FclError::Contract(format!(
                "momentum must be in [0, 1], got {m}"
            )));
        }
        self.check_same_shape(main, "momentum update")?;
        // Branch on the endpoints so they are exact rather than merely close.
        if m == 1.0 {
            return Ok(());
        }
        if m == 0.0 {
            self.clone_from(main);
            return Ok(());
        }
        for (dst, src) in self.slices_mut().into_iter().zip(main.slices()) {
            for (t, s) in dst.iter_mut().zip(src) {
                *t = m * *t + (1.0 - m) * s;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &EncoderParams) -> Result<f64> {
        self.check_same_shape(other, "parameter comparison")?;
        Ok(self
            .slices()
            .iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        codec::write_u32(w, CHECKPOINT_VERSION)?;
        codec::write_u32(w, codec::to_u32(self.dims.input, "input dim")?)?;
        codec::write_u32(w, codec::to_u32(self.dims.hidden, "hidden dim")?)?;
        codec::write_u32(w, codec::to_u32(self.dims.embed, "embed dim")?)?;
        for v in self.flatten() {
            codec::write_f64(w, v)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        const KIND: &str = "checkpoint";
        codec::expect_magic(r, CHECKPOINT_MAGIC, KIND)?;
        codec::expect_version(r, CHECKPOINT_VERSION, KIND)?;
        let input = codec::read_u32(r, KIND)? as usize;
        let hidden = codec::read_u32(r, KIND)? as usize;
        let embed = codec::read_u32(r, KIND)? as usize;
        if input == 0 || hidden == 0 || embed == 0 {
            return Err(FclError::Format {
                kind: KIND,
                message: "zero dimension in header".into(),
            });
        }
        let dims = EncoderDims::new(input, hidden, embed);
        let flat = (0..dims.param_count())
            .map(|_| codec::read_f64(r, KIND))
            .collect::<Result<Vec<_>>>()?;
        codec::expect_eof(r, KIND)?;
        EncoderParams::unflatten(dims, &flat).map_err(|e| FclError::Format {
            kind: KIND,
            message: e.to_string(),
        })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + 8 * self.dims.param_count());
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> EncoderDims {
        EncoderDims::new(5, 7, 3)
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn bias_only_path() {
        let d = small();
        let mut p = EncoderParams::zeros(d);
        p.b2_mut()[0] = 1.0;
        let (e, _) = p.forward(&[0.3; 5]).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_output_is_degenerate() {
        let p = EncoderParams::zeros(small());
        assert!(matches!(p.forward(&[0.3; 5]), Err(FclError::Degenerate(_))));
        assert!(matches!(
            p.forward(&[0.3; 4]),
            Err(FclError::Dimension { .. })
        ));
    }

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(EncoderDims::default(), &mut rng);
        for _ in 0..20 {
            let x = random_input(&mut rng, 64);
            let (e, tape) = p.forward(&x).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-12);
            let (again, _) = p.forward(&x).unwrap();
            assert_eq!(e, again);
            assert_eq!(tape.embedding(), e);
        }
    }

    #[test]
    fn golden_forward_seed0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::init(small(), &mut rng);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let (e, _) = p.forward(&x).unwrap();
        let golden = GOLDEN_SEED0;
        for (got, want) in e.iter().zip(golden) {
            assert_eq!(got.to_bits(), want.to_bits(), "got {:?}", e.as_slice());
        }
    }

    const GOLDEN_SEED0: [f64; 3] = [
        -0.5474970741518566,
        -0.2785601291123371,
        -0.7890825104284561,
    ];

    #[test]
    fn backward_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = EncoderParams::init(small(), &mut rng);
        let x = random_input(&mut rng, 5);
        let (e, tape) = p.forward(&x).unwrap();
        let g = p.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        let radial: Vec<f64> = e.iter().map(|v| 2.5 * v).collect();
        let g = p.backward(&tape, &radial).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn backward_rejects_stale_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(small(), &mut rng);
        let other = EncoderParams::init(EncoderDims::new(4, 7, 3), &mut rng);
        let (_, tape) = other.forward(&[0.5; 4]).unwrap();
        assert!(matches!(
            p.backward(&tape, &[1.0, 0.0, 0.0]),
            Err(FclError::Dimension { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = small();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 100 {
            let p = EncoderParams::init(d, &mut rng);
            let x = random_input(&mut rng, d.input);
            let up: Vec<f64> = (0..d.embed).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, tape) = p.forward(&x).unwrap();
            // Skip instances with a pre-activation within reach of the ReLU kink.
            if tape.pre_activation().iter().any(|a| a.abs() < 1e-3) {
                continue;
            }
            let analytic = p.backward(&tape, &up).unwrap().flatten();
            let f = |flat: &[f64]| {
                let q = EncoderParams::unflatten(d, flat).unwrap();
                dot_unchecked(&q.embed(&x).unwrap(), &up)
            };
            let fd = tensor_math::finite_difference_gradient(f, &p.flatten(), 1e-5).unwrap();
            let scale = fd
                .iter()
                .chain(&analytic)
                .fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, n) in analytic.iter().zip(&fd) {
                worst = worst.max((a - n).abs() / scale.max(1e-12));
            }
            checked += 1;
        }
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn sgd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::init(small(), &mut rng);
        let mut q = p.clone();
        q.sgd_step(&EncoderParams::zeros(small()), 0.1).unwrap();
        assert_eq!(q, p);
        let mut q = p.clone();
        q.sgd_step(&p, 1.0).unwrap();
        assert!(q.flatten().iter().all(|v| *v == 0.0));
        let g = EncoderParams::init(small(), &mut rng);
        let mut full = p.clone();
        full.sgd_step(&g, 0.5).unwrap();
        let mut halves = p.clone();
        halves.sgd_step(&g, 0.25).unwrap();
        halves.sgd_step(&g, 0.25).unwrap();
        assert!(full.max_abs_diff(&halves).unwrap() < 1e-15);
        assert!(p.clone().sgd_step(&g, 0.0).is_err());
        let mut bad = g.clone();
        bad.b1[0] = f64::NAN;
        assert!(matches!(
            p.clone().sgd_step(&bad, 0.1),
            Err(FclError::Numeric(_))
        ));
    }

    #[test]
    fn momentum_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let main = EncoderParams::init(small(), &mut rng);
        let start = EncoderParams::init(small(), &mut rng);
        let mut m1 = start.clone();
        m1.momentum_update(&main, 1.0).unwrap();
        assert_eq!(m1, start);
        let mut m0 = start.clone();
        m0.momentum_update(&main, 0.0).unwrap();
        assert_eq!(m0, main);

        let mut two = EncoderParams::zeros(small());
        two.b1.iter_mut().for_each(|v| *v = 2.0);
        two.momentum_update(&EncoderParams::zeros(small()), 0.5)
            .unwrap();
        assert!(two.b1.iter().all(|v| *v == 1.0));

        assert!(m1.momentum_update(&main, 1.5).is_err());
        let other = EncoderParams::zeros(EncoderDims::new(5, 6, 3));
        assert!(matches!(
            m1.momentum_update(&other, 0.5),
            Err(FclError::Dimension { .. })
        ));
    }

    #[test]
    fn momentum_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let main = EncoderParams::init(small(), &mut rng);
        let mut mom = EncoderParams::init(small(), &mut rng);
        let norm = |a: &EncoderParams| {
            let mut d = a.clone();
            d.add_scaled(-1.0, &main).unwrap();
            tensor_math::norm(&d.flatten())
        };
        let m = 0.999;
        let mut prev = norm(&mom);
        for _ in 0..500 {
            mom.momentum_update(&main, m).unwrap();
            let cur = norm(&mom);
            assert!((cur - m * prev).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = EncoderParams::init(small(), &mut rng);
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"FCLP");
        assert_eq!(bytes.len(), 4 + 4 + 12 + 8 * small().param_count());
        let back = EncoderParams::read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, p);
        assert_eq!(EncoderParams::unflatten(small(), &p.flatten()).unwrap(), p);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            EncoderParams::read_checkpoint(&mut corrupt.as_slice()),
            Err(FclError::Format { .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(EncoderParams::read_checkpoint(&mut &truncated[..]).is_err());
    }
}
