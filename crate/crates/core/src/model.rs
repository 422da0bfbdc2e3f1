//! The full pipeline as one trainable model: frozen encoders, enhancer,
//! cross talker, and decoder over a shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cross_talker::{CrossTalker, TalkDiagnostics, TalkOutput, TalkerConfig, ViewpointSelection};
use crate::data::{normalize, MotionSample, Tokenizer};
use crate::encoders::{EncoderConfig, Encoders};
use crate::enhancer::Enhancer;
use crate::error::{Error, Result};
use crate::generator::{nll_loss, teacher_forcing, Decoder, DecoderConfig, Vocabulary};
use crate::metrics::{summarize, EvalSummary, SampleOutcome};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// Input widths the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_motion: usize,
    pub d_video: usize,
}

impl ModelDims {
    /// Widths of the first sample; `d_video` falls back to 1 when the data
    /// carries no video.
    pub fn of(samples: &[MotionSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Domain("dataset is empty".into()))?;
        Ok(ModelDims {
            d_motion: first.motion.dim(),
            d_video: first.video.as_ref().map_or(1, |v| v.dim()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Enhancer and cross talker only.
    Alignment,
    /// Adds the decoder adapters (or the adapted decoder projections
    /// themselves when adapters are disabled).
    Instruct,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Alignment),
            2 => Ok(Stage::Instruct),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Alignment => 1,
            Stage::Instruct => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoders: Encoders,
    pub enhancer: Enhancer,
    pub talker: CrossTalker,
    pub decoder: Decoder,
    pub tokenizer: Tokenizer,
    pub dims: ModelDims,
    pub config: RunConfig,
}

/// Seed stream for adapter initialization, separate from the base weights.
const ADAPTER_STREAM: u64 = 0x5eed_ada9;

impl Model {
    pub fn new(config: &RunConfig, dims: ModelDims, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if dims.d_motion == 0 || dims.d_video == 0 {
            return Err(Error::Config("input widths must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let encoders = Encoders::new(
            &mut store,
            EncoderConfig {
                d_motion: dims.d_motion,
                d_video: dims.d_video,
                hidden: h,
                frozen: true,
            },
            &mut rng,
        )?;
        let enhancer = Enhancer::new(&mut store, h, &mut rng);
        let talker = CrossTalker::new(
            &mut store,
            TalkerConfig {
                k: config.k,
                segment_size: config.segment_size,
                hidden: h,
                d: config.relevance_dim,
            },
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            DecoderConfig {
                vocab: vocab.len(),
                hidden: h,
                max_tokens: config.max_tokens,
                max_prefix: config.max_prefix,
            },
            &mut rng,
        );
        Ok(Model {
            store,
            encoders,
            enhancer,
            talker,
            decoder,
            tokenizer: Tokenizer::new(vocab),
            dims,
            config: config.clone(),
        })
    }

    /// Adopts `config` for further training or evaluation. Shape-defining
    /// keys must match; `k`, `segment_size`, and optimizer settings may
    /// change.
    pub fn reconfigure(&mut self, config: &RunConfig) -> Result<()> {
        config.validate()?;
        if let Some(key) = self.config.architecture_mismatch(config) {
            return Err(Error::Config(format!("{key} differs from the checkpoint")));
        }
        self.talker.config.k = config.k;
        self.talker.config.segment_size = config.segment_size;
        self.config = config.clone();
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        !self.decoder.adapter_params().is_empty()
    }

    /// Attaches zero-initialized adapters to the decoder (no-op when
    /// already attached). The model output is unchanged.
    pub fn attach_adapters(&mut self) -> Result<Vec<ParamId>> {
        if self.has_adapters() {
            return Ok(self.decoder.adapter_params());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ADAPTER_STREAM);
        let ids =
            self.decoder
                .attach_adapters(&mut self.store, self.config.lora_rank, self.config.lora_alpha, &mut rng)?;
        Ok(ids)
    }

    /// Sets the frozen flags for `stage`: everything frozen except the
    /// enhancer and cross talker, plus the decoder adapters in stage 2.
    pub fn configure_stage(&mut self, stage: Stage) -> Result<()> {
        self.store.freeze_all(true);
        for id in self.enhancer.params().into_iter().chain(self.talker.params()) {
            self.store.set_frozen(id, false);
        }
        if stage == Stage::Instruct {
            if self.config.lora_enabled {
                for id in self.attach_adapters()? {
                    self.store.set_frozen(id, false);
                }
            } else {
                let bases: Vec<ParamId> = self.decoder.adapted().iter().map(|l| l.weight).collect();
                for id in bases {
                    self.store.set_frozen(id, false);
                }
            }
        }
        Ok(())
    }

    fn query_tokens(&self, sample: &MotionSample) -> Result<Vec<usize>> {
        let ids = self.tokenizer.tokenize(&sample.query);
        if ids.is_empty() {
            return Err(Error::Domain(format!("sample {} has an empty query", sample.id)));
        }
        Ok(ids)
    }

    /// Encodes, enhances, and cross-talks one sample with `k` viewpoints
    /// (the configured `K` when `None`).
    pub fn fuse(&self, tape: &mut Tape, sample: &MotionSample, k: Option<usize>) -> Result<TalkOutput> {
        let motion = self.encoders.encode_motion(tape, &self.store, &sample.motion)?;
        let enhanced = match (&sample.video, self.config.use_video) {
            (Some(video), true) => {
                let v = self.encoders.encode_video(tape, &self.store, video)?;
                self.enhancer.enhance(tape, &self.store, v, motion)?
            }
            _ => self.enhancer.enhance_motion_only(tape, &self.store, motion)?,
        };
        let query = self.query_tokens(sample)?;
        let text = self.decoder.embed_text(tape, &self.store, &query)?;
        self.talker
            .cross_talk_with_k(tape, &self.store, text, enhanced, k.unwrap_or(self.config.k))
    }

    /// Teacher-forced answer NLL for one sample.
    pub fn loss(&self, tape: &mut Tape, sample: &MotionSample) -> Result<Var> {
        let out = self.fuse(tape, sample, None)?;
        let answer = self.tokenizer.tokenize(&sample.answer);
        let (input, targets) = teacher_forcing(&answer);
        let logits = self
            .decoder
            .decode_forward(tape, &self.store, out.fused.values, &input)?;
        nll_loss(tape, logits, &targets)
    }

    pub fn sample_loss(&self, sample: &MotionSample) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, sample)?;
        Ok(tape.scalar(loss))
    }

    pub fn mean_loss(&self, samples: &[MotionSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Domain("dataset is empty".into()));
        }
        let mut total = 0.0;
        for s in samples {
            total += self.sample_loss(s)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Greedy-decoded answer text.
    pub fn generate(&self, sample: &MotionSample) -> Result<String> {
        let mut tape = Tape::new();
        let out = self.fuse(&mut tape, sample, None)?;
        let prefix = tape.value(out.fused.values).clone();
        let ids = self
            .decoder
            .generate_greedy(&self.store, &prefix, self.config.max_answer_len)?;
        Ok(self.tokenizer.detokenize(&ids))
    }

    /// Scores every sample: teacher-forced NLL, greedy answer, and a
    /// selection with `K` equal to the sample's repetition count.
    pub fn evaluate(&self, samples: &[MotionSample], tolerance: usize) -> Result<EvalSummary> {
        let outcomes = samples.iter().map(|s| self.outcome(s)).collect::<Result<Vec<_>>>()?;
        summarize(&outcomes, tolerance)
    }

    pub fn outcome(&self, sample: &MotionSample) -> Result<SampleOutcome> {
        let count = sample.labels.rep_count;
        let is_count = normalize(&sample.answer) == format!("{count} repetitions");
        let (selection, _) = self.select(sample, Some(count.max(1)))?;
        Ok(SampleOutcome {
            id: sample.id.clone(),
            generated: self.generate(sample)?,
            answer: sample.answer.clone(),
            count_truth: is_count.then_some(count),
            frames: sample.motion.frames(),
            selected: selection.indices,
            key_frames: sample.labels.key_frames.clone(),
            nll: self.sample_loss(sample)?,
        })
    }

    pub fn select(&self, sample: &MotionSample, k: Option<usize>) -> Result<(ViewpointSelection, TalkDiagnostics)> {
        let mut tape = Tape::new();
        let out = self.fuse(&mut tape, sample, k)?;
        Ok((out.selection, out.diagnostics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, generate_dataset, DatasetParams};

    fn small() -> (RunConfig, Vec<MotionSample>) {
        let cfg = RunConfig {
            hidden: 8,
            relevance_dim: 8,
            ..Default::default()
        };
        let data = generate_dataset(&DatasetParams {
            samples: 4,
            frames: 16,
            ..Default::default()
        })
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn stage_freezing_sets() {
        let (cfg, data) = small();
        let mut m = Model::new(&cfg, ModelDims::of(&data).unwrap(), build_vocabulary(&data)).unwrap();
        m.configure_stage(Stage::Alignment).unwrap();
        for (_, p) in m.store.iter() {
            let trainable = p.name.starts_with("enhancer.") || p.name.starts_with("talker.");
            assert_eq!(!p.frozen, trainable, "{}", p.name);
        }
        m.configure_stage(Stage::Instruct).unwrap();
        for (_, p) in m.store.iter() {
            let trainable =
                p.name.starts_with("enhancer.") || p.name.starts_with("talker.") || p.name.starts_with("decoder.lora.");
            assert_eq!(!p.frozen, trainable, "{}", p.name);
        }
    }

    #[test]
    fn adapters_leave_loss_unchanged() {
        let (cfg, data) = small();
        let mut m = Model::new(&cfg, ModelDims::of(&data).unwrap(), build_vocabulary(&data)).unwrap();
        let before = m.sample_loss(&data[0]).unwrap();
        m.attach_adapters().unwrap();
        assert_eq!(m.sample_loss(&data[0]).unwrap(), before);
    }

    #[test]
    fn generation_and_selection_run() {
        let (cfg, data) = small();
        let m = Model::new(&cfg, ModelDims::of(&data).unwrap(), build_vocabulary(&data)).unwrap();
        m.generate(&data[0]).unwrap();
        let (sel, diag) = m.select(&data[1], Some(100)).unwrap();
        assert_eq!(sel.indices, (0..16).collect::<Vec<_>>());
        assert_eq!(diag.scores.len(), 16);
    }
}
