//! Fixtures shared by the benchmarks: a randomly initialized cross talker
//! and decoder with random text and motion inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motalk::cross_talker::{CrossTalker, TalkerConfig};
use motalk::generator::{Decoder, DecoderConfig};
use motalk::{Matrix, ParamStore, Result, Tape};

/// Answer tokens fed to the decoder in every benchmark (BOS plus three).
pub const ANSWER: [usize; 4] = [1, 4, 5, 6];

pub struct Fixture {
    pub store: ParamStore,
    pub talker: CrossTalker,
    pub decoder: Decoder,
    pub text: Matrix,
    pub motion: Matrix,
}

impl Fixture {
    /// `text_len` query rows and `frames` motion rows of width `hidden`,
    /// selecting `k` viewpoints.
    pub fn new(text_len: usize, frames: usize, k: usize, hidden: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let talker = CrossTalker::new(
            &mut store,
            TalkerConfig {
                k,
                segment_size: 8,
                hidden,
                d: hidden,
            },
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            DecoderConfig {
                vocab: 16,
                hidden,
                max_tokens: ANSWER.len(),
                max_prefix: text_len + frames,
            },
            &mut rng,
        );
        Ok(Fixture {
            store,
            talker,
            decoder,
            text: Matrix::random_normal(text_len, hidden, 1.0, &mut rng),
            motion: Matrix::random_normal(frames, hidden, 1.0, &mut rng),
        })
    }

    /// Decoder forward over `[text; motion]`, the prefix without selection.
    pub fn decode_full(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let prefix = tape.constant(Matrix::concat_rows(&[&self.text, &self.motion])?);
        let logits = self.decoder.decode_forward(&mut tape, &self.store, prefix, &ANSWER)?;
        Ok(tape.value(logits).clone())
    }

    /// Cross talk followed by the decoder over the fused `L_T + K` prefix.
    pub fn talk_and_decode(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let text = tape.constant(self.text.clone());
        let motion = tape.constant(self.motion.clone());
        let out = self.talker.cross_talk(&mut tape, &self.store, text, motion)?;
        let logits = self
            .decoder
            .decode_forward(&mut tape, &self.store, out.fused.values, &ANSWER)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward and backward of the cross-talk path with a summed-logit loss.
    pub fn talk_and_decode_backward(&mut self) -> Result<()> {
        let mut tape = Tape::new();
        let text = tape.constant(self.text.clone());
        let motion = tape.constant(self.motion.clone());
        let out = self.talker.cross_talk(&mut tape, &self.store, text, motion)?;
        let logits = self
            .decoder
            .decode_forward(&mut tape, &self.store, out.fused.values, &ANSWER)?;
        let loss = tape.sum_all(logits);
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_runs_every_path() {
        let mut f = Fixture::new(4, 12, 3, 8).unwrap();
        assert_eq!(f.decode_full().unwrap().rows(), ANSWER.len());
        assert_eq!(f.talk_and_decode().unwrap().rows(), ANSWER.len());
        f.talk_and_decode_backward().unwrap();
    }
}
