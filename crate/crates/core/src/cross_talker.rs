//! Language-guided viewpoint-frame selection, adaptive local/global context
//! aggregation, and bidirectional text-motion fusion.
//!
//! The composition in [`CrossTalker::cross_talk`]:
//!
//! 1. Text tokens attend over enhanced motion frames; the per-frame score is
//!    the column maximum of the attention matrix.
//! 2. The `K` highest-scoring frames become viewpoint frames (ties to the
//!    earlier frame, emitted in temporal order).
//! 3. Each viewpoint regresses a receptive field from the unselected frames,
//!    attends inside its window, then attends over segment means. The local
//!    and global rows are concatenated and projected back to `H`.
//! 4. Viewpoint rows are scaled by their renormalized scores, so the
//!    relevance projections receive gradient through the hard selection.
//! 5. Text and viewpoints cross-attend in both directions (each side reads
//!    the other's pre-update rows), pass through residual FFNs, and are
//!    stacked as `[text; viewpoints]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot, zero_params, AttentionBlock, FeedForward, Linear};
use crate::metrics::attention_macs;
use crate::numerics::{scaled_dot_attention, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TalkerConfig {
    /// Number of viewpoint frames.
    pub k: usize,
    /// Segment size in frames for global pooling.
    pub segment_size: usize,
    pub hidden: usize,
    /// Width of the relevance query/key projections.
    pub d: usize,
}

impl TalkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("talker k must be at least 1".into()));
        }
        if self.segment_size == 0 {
            return Err(Error::Config("segment size must be at least 1".into()));
        }
        if self.hidden == 0 || self.d == 0 {
            return Err(Error::Config("talker widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSelection {
    /// Selected frames, strictly increasing.
    pub indices: Vec<usize>,
    /// Relevance score of each selected frame.
    pub scores: Vec<f64>,
    pub k: usize,
    /// True when the requested `K` exceeded the frame count.
    pub clamped: bool,
}

/// Top-`K` frames by score, ties to the lower index, returned in temporal
/// order. `K` larger than the sequence is clamped.
pub fn select_viewpoints(scores: &[f64], k: usize) -> ViewpointSelection {
    let t = scores.len();
    let clamped = k > t;
    if clamped {
        log::warn!("requested {k} viewpoint frames from a {t}-frame sequence; using all frames");
    }
    let k = k.min(t);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut indices: Vec<usize> = order.into_iter().take(k).collect();
    indices.sort_unstable();
    ViewpointSelection {
        scores: indices.iter().map(|&i| scores[i]).collect(),
        indices,
        k,
        clamped,
    }
}

/// `{ j in [0, T) : |j − k| ≤ floor(r·T) }`.
pub fn local_window(k: usize, r: f64, t: usize) -> Vec<usize> {
    let radius = (r * t as f64).floor().max(0.0) as usize;
    let lo = k.saturating_sub(radius);
    let hi = (k + radius).min(t.saturating_sub(1));
    (lo..=hi).collect()
}

/// Row ranges of the segments of size `segment_size` (last may be shorter).
pub fn segment_ranges(t: usize, segment_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..t.div_ceil(segment_size))
        .map(|n| n * segment_size..((n + 1) * segment_size).min(t))
        .collect()
}

/// Segment-mean pooling on the tape: `ceil(T / S_n) × H`.
pub fn pool_segments(tape: &mut Tape, motion: Var, segment_size: usize) -> Result<Var> {
    if segment_size == 0 {
        return Err(Error::Domain("segment size must be at least 1".into()));
    }
    let t = tape.value(motion).rows();
    let rows = segment_ranges(t, segment_size)
        .into_iter()
        .map(|r| tape.mean_rows(motion, r))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Relevance attention `A` (`L_T × T`) and per-frame scores `s` (`1 × T`).
#[derive(Clone, Copy, Debug)]
pub struct Relevance {
    pub attention: Var,
    pub scores: Var,
}

/// Receptive-field regression head.
#[derive(Clone, Copy, Debug)]
pub struct ReceptiveFieldHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub readout: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopSummary {
    pub fused_len: usize,
    pub baseline_len: usize,
    pub fused_macs: u64,
    pub baseline_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TalkDiagnostics {
    pub relevance: Matrix,
    pub scores: Vec<f64>,
    pub receptive_fields: Vec<f64>,
    pub windows: Vec<Vec<usize>>,
    pub segments: usize,
    pub flops: FlopSummary,
}

/// `[text; viewpoints]` prefix rows on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FusedSequence {
    pub values: Var,
    pub text_len: usize,
    pub motion_len: usize,
}

#[derive(Clone, Debug)]
pub struct TalkOutput {
    pub fused: FusedSequence,
    pub selection: ViewpointSelection,
    pub diagnostics: TalkDiagnostics,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossTalker {
    pub relevance_q: Linear,
    pub relevance_k: Linear,
    pub receptive: ReceptiveFieldHead,
    pub local: AttentionBlock,
    pub global: AttentionBlock,
    pub assemble: Linear,
    pub fuse_motion: AttentionBlock,
    pub fuse_text: AttentionBlock,
    pub ffn_motion: FeedForward,
    pub ffn_text: FeedForward,
    pub config: TalkerConfig,
}

impl CrossTalker {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TalkerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let rel = |store: &mut ParamStore, name: &str, rng: &mut R| Linear {
            weight: store.add(name, glorot(h, config.d, rng)),
            bias: None,
            adapter: None,
        };
        let relevance_q = rel(store, "talker.relevance.wq.w", rng);
        let relevance_k = rel(store, "talker.relevance.wk.w", rng);
        let receptive = ReceptiveFieldHead {
            wq: Linear::projection(store, "talker.receptive.wq", h, false, rng),
            wk: Linear::projection(store, "talker.receptive.wk", h, false, rng),
            wv: Linear::projection(store, "talker.receptive.wv", h, false, rng),
            readout: Linear::new(store, "talker.receptive.readout", h, 1, true, rng),
        };
        Ok(CrossTalker {
            relevance_q,
            relevance_k,
            receptive,
            local: AttentionBlock::new(store, "talker.local", h, rng),
            global: AttentionBlock::new(store, "talker.global", h, rng),
            assemble: Linear::new(store, "talker.assemble", 2 * h, h, true, rng),
            fuse_motion: AttentionBlock::new(store, "talker.fuse_motion", h, rng),
            fuse_text: AttentionBlock::new(store, "talker.fuse_text", h, rng),
            ffn_motion: FeedForward::new(store, "talker.ffn_motion", h, rng),
            ffn_text: FeedForward::new(store, "talker.ffn_text", h, rng),
            config,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.relevance_q.params();
        v.extend(self.relevance_k.params());
        for l in [
            self.receptive.wq,
            self.receptive.wk,
            self.receptive.wv,
            self.receptive.readout,
        ] {
            v.extend(l.params());
        }
        v.extend(self.local.params());
        v.extend(self.global.params());
        v.extend(self.assemble.params());
        v.extend(self.fuse_motion.params());
        v.extend(self.fuse_text.params());
        v.extend(self.ffn_motion.params());
        v.extend(self.ffn_text.params());
        v
    }

    /// Output projections of every residual attention block and the second
    /// layers of both fusion FFNs.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in [self.local, self.global, self.fuse_motion, self.fuse_text] {
            v.extend(b.wo.params());
        }
        v.extend(self.ffn_motion.output_params());
        v.extend(self.ffn_text.output_params());
        v
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        zero_params(store, &self.output_params());
    }

    fn check_width(&self, tape: &Tape, x: Var, op: &'static str) -> Result<()> {
        let h = tape.value(x).cols();
        if h != self.config.hidden {
            return Err(Error::dim(op, format!("width {h}, expected {}", self.config.hidden)));
        }
        Ok(())
    }

    pub fn compute_relevance(&self, tape: &mut Tape, store: &ParamStore, text: Var, motion: Var) -> Result<Relevance> {
        self.check_width(tape, text, "compute_relevance")?;
        self.check_width(tape, motion, "compute_relevance")?;
        let q = self.relevance_q.forward(tape, store, text)?;
        let k = self.relevance_k.forward(tape, store, motion)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (self.config.d as f64).sqrt());
        let attention = tape.row_softmax(logits);
        let scores = tape.col_max(attention)?;
        Ok(Relevance { attention, scores })
    }

    /// Receptive-field fraction for one viewpoint row. `None` for an empty
    /// unselected set gives `r = 0`.
    pub fn regress_receptive_field(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        viewpoint: Var,
        unselected: Option<Var>,
    ) -> Result<f64> {
        let Some(rest) = unselected else {
            return Ok(0.0);
        };
        let head = &self.receptive;
        let q = head.wq.forward(tape, store, viewpoint)?;
        let k = head.wk.forward(tape, store, rest)?;
        let v = head.wv.forward(tape, store, rest)?;
        let (att, _) = scaled_dot_attention(tape, q, k, v, self.config.hidden)?;
        let logit = head.readout.forward(tape, store, att)?;
        let r = tape.sigmoid(logit);
        Ok(tape.scalar(r))
    }

    /// `F_local(k) = F̃_M(k) + out(attn(F̃_M(k), F̃_M(W_k)))`.
    pub fn aggregate_local(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k: usize,
        window: &[usize],
        motion: Var,
    ) -> Result<Var> {
        if !window.contains(&k) {
            return Err(Error::Domain(format!("window does not contain its centre frame {k}")));
        }
        let centre = tape.slice_rows(motion, k..k + 1)?;
        let ctx = tape.gather_rows(motion, window)?;
        self.local.residual(tape, store, centre, ctx)
    }

    /// `F_global(k) = F_local(k) + out(attn(F_local(k), F_M^seg))`.
    pub fn aggregate_global(&self, tape: &mut Tape, store: &ParamStore, local: Var, segments: Var) -> Result<Var> {
        self.global.residual(tape, store, local, segments)
    }

    /// `[F_local ; F_global] · W_p + b_p`.
    pub fn assemble_viewpoint(&self, tape: &mut Tape, store: &ParamStore, local: Var, global: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[local, global])?;
        self.assemble.forward(tape, store, cat)
    }

    /// Symmetric cross-attention plus residual FFNs; rows `[text; motion]`.
    pub fn fuse_bidirectional(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: Var,
        viewpoints: Var,
    ) -> Result<FusedSequence> {
        self.check_width(tape, text, "fuse_bidirectional")?;
        self.check_width(tape, viewpoints, "fuse_bidirectional")?;
        let m1 = self.fuse_motion.residual(tape, store, viewpoints, text)?;
        let t1 = self.fuse_text.residual(tape, store, text, viewpoints)?;
        let m2 = self.ffn_motion.residual(tape, store, m1)?;
        let t2 = self.ffn_text.residual(tape, store, t1)?;
        let values = tape.concat_rows(&[t2, m2])?;
        Ok(FusedSequence {
            values,
            text_len: tape.value(text).rows(),
            motion_len: tape.value(viewpoints).rows(),
        })
    }

    /// Full cross-talk with the configured `K`.
    pub fn cross_talk(&self, tape: &mut Tape, store: &ParamStore, text: Var, motion: Var) -> Result<TalkOutput> {
        self.cross_talk_with_k(tape, store, text, motion, self.config.k)
    }

    pub fn cross_talk_with_k(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: Var,
        motion: Var,
        k: usize,
    ) -> Result<TalkOutput> {
        if k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        let rel = self.compute_relevance(tape, store, text, motion)?;
        let scores = tape.value(rel.scores).data().to_vec();
        let t = scores.len();
        let selection = select_viewpoints(&scores, k);

        let unselected_idx: Vec<usize> = (0..t).filter(|j| !selection.indices.contains(j)).collect();
        let unselected = if unselected_idx.is_empty() {
            None
        } else {
            Some(tape.gather_rows(motion, &unselected_idx)?)
        };
        let segments = pool_segments(tape, motion, self.config.segment_size)?;
        let n_segments = tape.value(segments).rows();

        let mut rows = Vec::with_capacity(selection.indices.len());
        let mut receptive_fields = Vec::with_capacity(selection.indices.len());
        let mut windows = Vec::with_capacity(selection.indices.len());
        for &frame in &selection.indices {
            let vp = tape.slice_rows(motion, frame..frame + 1)?;
            let r = self.regress_receptive_field(tape, store, vp, unselected)?;
            let window = local_window(frame, r, t);
            let local = self.aggregate_local(tape, store, frame, &window, motion)?;
            let global = self.aggregate_global(tape, store, local, segments)?;
            rows.push(self.assemble_viewpoint(tape, store, local, global)?);
            receptive_fields.push(r);
            windows.push(window);
        }
        let stacked = tape.concat_rows(&rows)?;

        let picked = tape.gather_cols(rel.scores, &selection.indices)?;
        let total = tape.sum_all(picked);
        let weights = tape.div_scalar(picked, total)?;
        let weights = tape.transpose(weights);
        let viewpoints = tape.row_scale(stacked, weights)?;

        let fused = self.fuse_bidirectional(tape, store, text, viewpoints)?;

        let h = self.config.hidden;
        let l_t = fused.text_len;
        let flops = FlopSummary {
            fused_len: l_t + selection.indices.len(),
            baseline_len: l_t + t,
            fused_macs: attention_macs(l_t + selection.indices.len(), h),
            baseline_macs: attention_macs(l_t + t, h),
        };
        let diagnostics = TalkDiagnostics {
            relevance: tape.value(rel.attention).clone(),
            scores,
            receptive_fields,
            windows,
            segments: n_segments,
            flops,
        };
        Ok(TalkOutput {
            fused,
            selection,
            diagnostics,
        })
    }
}
