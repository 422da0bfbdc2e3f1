//! Feature enhancer: per-modality self-attention, motion-queried
//! cross-attention over video, and a residual feed-forward block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{zero_params, AttentionBlock, FeedForward};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct Enhancer {
    pub video_self: AttentionBlock,
    pub motion_self: AttentionBlock,
    pub cross: AttentionBlock,
    pub ffn: FeedForward,
    pub hidden: usize,
}

impl Enhancer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Enhancer {
            video_self: AttentionBlock::new(store, "enhancer.video_self", hidden, rng),
            motion_self: AttentionBlock::new(store, "enhancer.motion_self", hidden, rng),
            cross: AttentionBlock::new(store, "enhancer.cross", hidden, rng),
            ffn: FeedForward::new(store, "enhancer.ffn", hidden, rng),
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.video_self.params();
        v.extend(self.motion_self.params());
        v.extend(self.cross.params());
        v.extend(self.ffn.params());
        v
    }

    /// Output projections and the FFN's second layer.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = self.video_self.wo.params();
        v.extend(self.motion_self.wo.params());
        v.extend(self.cross.wo.params());
        v.extend(self.ffn.output_params());
        v
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        zero_params(store, &self.output_params());
    }

    fn check(&self, tape: &Tape, x: Var, what: &str) -> Result<usize> {
        let (t, h) = tape.value(x).shape();
        if h != self.hidden {
            return Err(Error::dim(
                "enhance",
                format!("{what} width {h}, expected {}", self.hidden),
            ));
        }
        Ok(t)
    }

    /// `F̃_M` from video features `F_V` and motion features `F_M` (both `T×H`).
    pub fn enhance(&self, tape: &mut Tape, store: &ParamStore, video: Var, motion: Var) -> Result<Var> {
        let tv = self.check(tape, video, "video")?;
        let tm = self.check(tape, motion, "motion")?;
        if tv != tm {
            return Err(Error::dim("enhance", format!("video has {tv} frames, motion has {tm}")));
        }
        let video_aug = self.video_self.residual(tape, store, video, video)?;
        let motion_aug = self.motion_self.residual(tape, store, motion, motion)?;
        let c = self.cross.residual(tape, store, motion_aug, video_aug)?;
        self.ffn.residual(tape, store, c)
    }

    /// Motion-only variant: the video cross-attention term is skipped.
    pub fn enhance_motion_only(&self, tape: &mut Tape, store: &ParamStore, motion: Var) -> Result<Var> {
        self.check(tape, motion, "motion")?;
        let motion_aug = self.motion_self.residual(tape, store, motion, motion)?;
        self.ffn.residual(tape, store, motion_aug)
    }
}
