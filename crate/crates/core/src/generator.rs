//! Vocabulary and the single-block causal decoder that turns the fused
//! prefix into next-token distributions.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot, Adapter, AttentionBlock, FeedForward, Linear};
use crate::metrics::{attention_macs, FlopReport};
use crate::numerics::{flops, masked_attention, Matrix, ParamId, ParamStore, Tape, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Output projection init gain over Glorot; sharper initial logits let the
/// frozen decoder separate answer tokens within a short training budget.
const OUT_INIT_GAIN: f64 = 3.0;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token ↔ id mapping with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds a vocabulary from its token list; the first four entries
    /// must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Parse(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub hidden: usize,
    /// Maximum token positions (input length including BOS).
    pub max_tokens: usize,
    pub max_prefix: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub positions: ParamId,
    pub attn: AttentionBlock,
    pub ffn: FeedForward,
    pub out: Linear,
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let embed = store.add("decoder.embed", Matrix::random_normal(config.vocab, h, 1.0, rng));
        let positions = store.add(
            "decoder.positions",
            Matrix::random_normal(config.max_tokens, h, 0.5, rng),
        );
        let attn = AttentionBlock::new(store, "decoder.attn", h, rng);
        let ffn = FeedForward::new(store, "decoder.ffn", h, rng);
        let out = Linear {
            weight: store.add("decoder.out.w", glorot(h, config.vocab, rng).scale(OUT_INIT_GAIN)),
            bias: None,
            adapter: None,
        };
        Decoder {
            embed,
            positions,
            attn,
            ffn,
            out,
            config,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed, self.positions];
        v.extend(self.attn.params());
        v.extend(self.ffn.params());
        v.extend(self.out.params());
        v
    }

    /// Adapter-wrapped projections: the four attention projections and `W_o`.
    pub fn adapted_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
            &mut self.out,
        ]
    }

    pub fn adapted(&self) -> [&Linear; 5] {
        [&self.attn.wq, &self.attn.wk, &self.attn.wv, &self.attn.wo, &self.out]
    }

    /// Attaches zero-initialized low-rank adapters to the attention
    /// projections and the output projection.
    pub fn attach_adapters<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Vec<ParamId>> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let mut ids = Vec::new();
        for lin in self.adapted_mut() {
            if lin.adapter.is_some() {
                return Err(Error::State("adapters already attached".into()));
            }
            let (m, n) = store.value(lin.weight).shape();
            let base = store.get(lin.weight).name.trim_end_matches(".w").to_string();
            let a = store.add(
                format!("decoder.lora.{}.a", &base["decoder.".len()..]),
                glorot(rank, n, rng),
            );
            let b = store.add(
                format!("decoder.lora.{}.b", &base["decoder.".len()..]),
                Matrix::zeros(m, rank),
            );
            lin.adapter = Some(Adapter {
                a,
                b,
                scaling: alpha / rank as f64,
            });
            ids.push(a);
            ids.push(b);
        }
        Ok(ids)
    }

    /// Re-binds adapters from parameters already present in `store` (used
    /// when loading a checkpoint).
    pub fn bind_adapters(&mut self, store: &ParamStore, rank: usize, alpha: f64) -> Result<()> {
        for lin in self.adapted_mut() {
            let base = store.get(lin.weight).name.trim_end_matches(".w").to_string();
            let suffix = &base["decoder.".len()..];
            let a = store.id(&format!("decoder.lora.{suffix}.a"));
            let b = store.id(&format!("decoder.lora.{suffix}.b"));
            match (a, b) {
                (Some(a), Some(b)) => {
                    lin.adapter = Some(Adapter {
                        a,
                        b,
                        scaling: alpha / rank as f64,
                    })
                }
                _ => return Err(Error::State(format!("missing adapter parameters for {base}"))),
            }
        }
        Ok(())
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapted()
            .iter()
            .filter_map(|l| l.adapter)
            .flat_map(|a| [a.a, a.b])
            .collect()
    }

    /// Visibility mask over `prefix_len + n_tokens` positions: every
    /// position sees the whole prefix, token positions additionally see
    /// tokens at or before themselves.
    pub fn causal_mask(prefix_len: usize, n_tokens: usize) -> Vec<bool> {
        let l = prefix_len + n_tokens;
        let mut mask = vec![false; l * l];
        for i in 0..l {
            for j in 0..l {
                mask[i * l + j] = j < prefix_len || (i >= prefix_len && j <= i);
            }
        }
        mask
    }

    fn embed_tokens(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Domain("token sequence is empty (expected at least BOS)".into()));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::Domain(format!(
                "{} tokens exceed the {} supported positions",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Domain(format!(
                "token id {bad} overflows vocabulary of {}",
                self.config.vocab
            )));
        }
        let table = tape.param(store, self.embed);
        let emb = tape.gather_rows(table, tokens)?;
        let pos_table = tape.param(store, self.positions);
        let pos = tape.slice_rows(pos_table, 0..tokens.len())?;
        tape.add(emb, pos)
    }

    /// Embeds text tokens without positions (rows for the text side of the
    /// cross talker).
    pub fn embed_text(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Domain("text query has no tokens".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Domain(format!(
                "token id {bad} overflows vocabulary of {}",
                self.config.vocab
            )));
        }
        let table = tape.param(store, self.embed);
        tape.gather_rows(table, tokens)
    }

    /// Logits (`tokens × vocab`) for every token position.
    pub fn decode_forward(&self, tape: &mut Tape, store: &ParamStore, prefix: Var, tokens: &[usize]) -> Result<Var> {
        let (p, h) = tape.value(prefix).shape();
        if h != self.config.hidden {
            return Err(Error::dim(
                "decode_forward",
                format!("prefix width {h}, expected {}", self.config.hidden),
            ));
        }
        if p > self.config.max_prefix {
            return Err(Error::Domain(format!(
                "prefix of {p} rows exceeds the configured {}",
                self.config.max_prefix
            )));
        }
        let emb = self.embed_tokens(tape, store, tokens)?;
        let x = tape.concat_rows(&[prefix, emb])?;
        let mask = Self::causal_mask(p, tokens.len());
        let att = self.attn.forward_masked(tape, store, x, x, &mask)?;
        let x = tape.add(x, att)?;
        let x = self.ffn.residual(tape, store, x)?;
        let hidden = tape.slice_rows(x, p..p + tokens.len())?;
        self.out.forward(tape, store, hidden)
    }

    /// Greedy decoding from BOS; ties resolve to the lowest id. The result
    /// excludes BOS and the terminating EOS.
    pub fn generate_greedy(&self, store: &ParamStore, prefix: &Matrix, max_len: usize) -> Result<Vec<usize>> {
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            if tokens.len() > self.config.max_tokens {
                break;
            }
            let mut tape = Tape::new();
            let p = tape.constant(prefix.clone());
            let logits = self.decode_forward(&mut tape, store, p, &tokens)?;
            let lm = tape.value(logits);
            let last = lm.row(lm.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            tokens.push(best);
        }
        Ok(out)
    }

    /// Multiply-accumulates spent in this decoder's attention core (scores,
    /// softmax, value mixing) over `rows` treated as a prefix-only sequence.
    pub fn attention_core_macs(&self, store: &ParamStore, rows: &Matrix) -> Result<u64> {
        let mut tape = Tape::new();
        let x = tape.constant(rows.clone());
        let q = self.attn.wq.forward(&mut tape, store, x)?;
        let k = self.attn.wk.forward(&mut tape, store, x)?;
        let v = self.attn.wv.forward(&mut tape, store, x)?;
        let mask = Self::causal_mask(rows.rows(), 0);
        let scope = flops::MacScope::begin();
        masked_attention(&mut tape, q, k, v, self.config.hidden, &mask)?;
        Ok(scope.count())
    }
}

/// Analytic and instrumented decoder-attention MACs for a fused prefix of
/// `text_len + k` rows against the unselected `text_len + frames` rows.
pub fn flop_report(text_len: usize, frames: usize, k: usize, hidden: usize, seed: u64) -> Result<FlopReport> {
    if hidden == 0 || text_len + k == 0 || text_len + frames == 0 {
        return Err(Error::Domain(
            "flop report needs a positive width and sequence length".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let decoder = Decoder::new(
        &mut store,
        DecoderConfig {
            vocab: RESERVED.len(),
            hidden,
            max_tokens: 2,
            max_prefix: text_len + frames.max(k),
        },
        &mut rng,
    );
    let mut measure =
        |len: usize| decoder.attention_core_macs(&store, &Matrix::random_normal(len, hidden, 1.0, &mut rng));
    let fused_measured = measure(text_len + k)?;
    let baseline_measured = measure(text_len + frames)?;
    let fused_analytic = attention_macs(text_len + k, hidden);
    let baseline_analytic = attention_macs(text_len + frames, hidden);
    Ok(FlopReport {
        text_len,
        frames,
        k,
        hidden,
        fused_analytic,
        fused_measured,
        baseline_analytic,
        baseline_measured,
        analytic_ratio: fused_analytic as f64 / baseline_analytic as f64,
        measured_ratio: fused_measured as f64 / baseline_measured as f64,
    })
}

/// Mean token NLL over non-PAD targets.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    tape.nll(logits, &t)
}

/// Teacher-forcing pair for an answer: input `[BOS, y_1..y_n]`, targets
/// `[y_1..y_n, EOS]`.
pub fn teacher_forcing(answer: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(answer.len() + 1);
    input.push(BOS);
    input.extend_from_slice(answer);
    let mut targets = answer.to_vec();
    targets.push(EOS);
    (input, targets)
}
