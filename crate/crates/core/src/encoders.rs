//! Frozen per-frame affine encoders for motion and video, and the motion
//! estimator used when only video is available.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_FPS: f64 = 20.0;

/// `T × D_m` joint features sampled at `fps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub values: Matrix,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(values: Matrix, fps: f64) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Domain("motion sequence needs at least one frame".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Domain(format!("fps must be positive, got {fps}")));
        }
        if !values.is_finite() {
            return Err(Error::Domain("motion values must be finite".into()));
        }
        Ok(MotionSequence { values, fps })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// `T × D_v` precomputed per-frame video features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatureSequence {
    pub values: Matrix,
}

impl VideoFeatureSequence {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_motion: usize,
    pub d_video: usize,
    pub hidden: usize,
    pub frozen: bool,
}

/// Motion encoder `f_m` and video encoder `f_v`, each a per-frame affine map
/// into the shared `H`-dimensional feature space.
#[derive(Clone, Copy, Debug)]
pub struct Encoders {
    pub motion: Linear,
    pub video: Linear,
    pub config: EncoderConfig,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Domain("hidden width must be at least 1".into()));
        }
        let motion = Linear::new(store, "encoder.motion", config.d_motion, config.hidden, true, rng);
        let video = Linear::new(store, "encoder.video", config.d_video, config.hidden, true, rng);
        let enc = Encoders { motion, video, config };
        if config.frozen {
            for id in enc.params() {
                store.set_frozen(id, true);
            }
        }
        Ok(enc)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.motion.params();
        v.extend(self.video.params());
        v
    }

    pub fn encode_motion(&self, tape: &mut Tape, store: &ParamStore, m: &MotionSequence) -> Result<Var> {
        if m.dim() != self.config.d_motion {
            return Err(Error::dim(
                "encode_motion",
                format!(
                    "motion has {} channels, encoder expects {}",
                    m.dim(),
                    self.config.d_motion
                ),
            ));
        }
        let x = tape.constant(m.values.clone());
        self.motion.forward(tape, store, x)
    }

    pub fn encode_video(&self, tape: &mut Tape, store: &ParamStore, v: &VideoFeatureSequence) -> Result<Var> {
        if v.dim() != self.config.d_video {
            return Err(Error::dim(
                "encode_video",
                format!(
                    "video has {} channels, encoder expects {}",
                    v.dim(),
                    self.config.d_video
                ),
            ));
        }
        let x = tape.constant(v.values.clone());
        self.video.forward(tape, store, x)
    }
}

/// Per-frame affine map from video features to motion features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimator {
    pub weight: Matrix,
    pub bias: Matrix,
    pub fps: f64,
    trained: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct EstimatorTraining {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for EstimatorTraining {
    fn default() -> Self {
        EstimatorTraining {
            max_iters: 50_000,
            tolerance: 1e-14,
        }
    }
}

impl MotionEstimator {
    pub fn untrained(d_video: usize, d_motion: usize) -> Self {
        MotionEstimator {
            weight: Matrix::zeros(d_video, d_motion),
            bias: Matrix::zeros(1, d_motion),
            fps: DEFAULT_FPS,
            trained: false,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_weights(Matrix::identity(d), Matrix::zeros(1, d)).expect("square identity")
    }

    pub fn from_weights(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::dim(
                "MotionEstimator",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(MotionEstimator {
            weight,
            bias,
            fps: DEFAULT_FPS,
            trained: true,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn estimate(&self, v: &VideoFeatureSequence) -> Result<MotionSequence> {
        if !self.trained {
            return Err(Error::State("motion estimator has not been trained".into()));
        }
        if v.dim() != self.weight.rows() {
            return Err(Error::dim(
                "estimate_motion",
                format!(
                    "video has {} channels, estimator expects {}",
                    v.dim(),
                    self.weight.rows()
                ),
            ));
        }
        let values = v.values.matmul(&self.weight)?.add_row(&self.bias)?;
        MotionSequence::new(values, self.fps)
    }

    /// Fits the affine map by full-batch gradient descent on the mean
    /// squared error over all frames of all pairs. Returns the estimator and
    /// its final MSE.
    pub fn train(pairs: &[(VideoFeatureSequence, MotionSequence)], opts: EstimatorTraining) -> Result<(Self, f64)> {
        let (first_v, first_m) = pairs
            .first()
            .ok_or_else(|| Error::Domain("estimator training needs at least one pair".into()))?;
        let (dv, dm) = (first_v.dim(), first_m.dim());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, (v, m)) in pairs.iter().enumerate() {
            if v.dim() != dv || m.dim() != dm || v.frames() != m.frames() {
                return Err(Error::dim(
                    "train_estimator",
                    format!(
                        "pair {i}: video {:?}, motion {:?}, expected (T, {dv}) / (T, {dm})",
                        v.values.shape(),
                        m.values.shape()
                    ),
                ));
            }
            for r in 0..v.frames() {
                xs.extend_from_slice(v.values.row(r));
                xs.push(1.0);
                ys.extend_from_slice(m.values.row(r));
            }
        }
        let n = xs.len() / (dv + 1);
        let x = Matrix::new(n, dv + 1, xs)?;
        let y = Matrix::new(n, dm, ys)?;
        let count = (n * dm) as f64;

        // Step 1/L with L the Lipschitz constant of the MSE gradient.
        let gram = x.matmul_tn(&x)?;
        let lambda = largest_eigenvalue(&gram);
        let lipschitz = 2.0 * lambda / count;
        let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };
        let xty = x.matmul_tn(&y)?;

        let mut w = Matrix::zeros(dv + 1, dm);
        let mut mse = mse_of(&x, &w, &y)?;
        for _ in 0..opts.max_iters {
            if mse < opts.tolerance {
                break;
            }
            // grad = 2/count · (XᵀX W − XᵀY)
            let grad = gram.matmul(&w)?.sub(&xty)?.scale(2.0 / count);
            w = w.sub(&grad.scale(step))?;
            mse = mse_of(&x, &w, &y)?;
        }
        let weight = w.slice_rows(0..dv)?;
        let bias = w.slice_rows(dv..dv + 1)?;
        let mut est = Self::from_weights(weight, bias)?;
        est.fps = first_m.fps;
        Ok((est, mse))
    }
}

fn mse_of(x: &Matrix, w: &Matrix, y: &Matrix) -> Result<f64> {
    let r = x.matmul(w)?.sub(y)?;
    Ok(r.frobenius_norm_sq() / (r.rows() * r.cols()) as f64)
}

fn largest_eigenvalue(sym: &Matrix) -> f64 {
    let n = sym.rows();
    let mut v = Matrix::filled(n, 1, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = sym.matmul(&v).expect("square");
        let norm = w.frobenius_norm_sq().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.scale(1.0 / norm);
    }
    // Power iteration approaches from below; a small margin keeps the step stable.
    lambda * 1.05
}
