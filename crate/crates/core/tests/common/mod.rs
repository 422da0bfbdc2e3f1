//! Straight-line reference implementations over `Vec<Vec<f64>>`, written
//! independently of the library's matrix and tape code.

#![allow(dead_code)]

use motalk::cross_talker::{CrossTalker, TalkOutput, TalkerConfig};
use motalk::enhancer::Enhancer;
use motalk::generator::{nll_loss, teacher_forcing, Decoder, DecoderConfig};
use motalk::{Matrix, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn from(m: &Matrix) -> M {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> M {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    from(store.value(id))
}

pub fn max_diff(a: &M, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.shape(), "shape");
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

pub fn mm(a: &M, b: &M) -> M {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn tr(a: &M) -> M {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &M, c: f64) -> M {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

pub fn add_bias(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn rows(a: &M, idx: &[usize]) -> M {
    idx.iter().map(|&i| a[i].clone()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `softmax(q kᵀ / √d) v`, optionally masked (`mask[i][j]` visible).
pub fn attention(q: &M, k: &M, v: &M, d: usize, mask: Option<&dyn Fn(usize, usize) -> bool>) -> M {
    let s = 1.0 / (d as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * s)
                .collect();
            let visible: Vec<usize> = (0..k.len()).filter(|&j| mask.is_none_or(|m| m(i, j))).collect();
            let w = softmax_row(&visible.iter().map(|&j| logits[j]).collect::<Vec<_>>());
            let mut out = vec![0.0; v[0].len()];
            for (wj, &j) in w.iter().zip(&visible) {
                for (o, x) in out.iter_mut().zip(&v[j]) {
                    *o += wj * x;
                }
            }
            out
        })
        .collect()
}

/// `query + wo(attn(wq·query, wk·ctx, wv·ctx))` for the block `name`.
pub fn attn_block(store: &ParamStore, name: &str, query: &M, ctx: &M) -> M {
    let q = mm(query, &param(store, &format!("{name}.wq.w")));
    let k = mm(ctx, &param(store, &format!("{name}.wk.w")));
    let v = mm(ctx, &param(store, &format!("{name}.wv.w")));
    let a = attention(&q, &k, &v, q[0].len(), None);
    add(query, &mm(&a, &param(store, &format!("{name}.wo.w"))))
}

pub fn linear(store: &ParamStore, name: &str, x: &M) -> M {
    let y = mm(x, &param(store, &format!("{name}.w")));
    match store.id(&format!("{name}.b")) {
        Some(_) => add_bias(&y, &param(store, &format!("{name}.b"))),
        None => y,
    }
}

/// `x + down(gelu(up(x)))`.
pub fn ffn_block(store: &ParamStore, name: &str, x: &M) -> M {
    let u = linear(store, &format!("{name}.up"), x);
    let g: M = u.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add(x, &linear(store, &format!("{name}.down"), &g))
}

pub fn enhance(store: &ParamStore, video: &M, motion: &M) -> M {
    let v1 = attn_block(store, "enhancer.video_self", video, video);
    let m1 = attn_block(store, "enhancer.motion_self", motion, motion);
    let c = attn_block(store, "enhancer.cross", &m1, &v1);
    ffn_block(store, "enhancer.ffn", &c)
}

/// Relevance attention and per-frame column maxima.
pub fn relevance(store: &ParamStore, text: &M, motion: &M) -> (M, Vec<f64>) {
    let q = mm(text, &param(store, "talker.relevance.wq.w"));
    let k = mm(motion, &param(store, "talker.relevance.wk.w"));
    let d = q[0].len() as f64;
    let a: M = q
        .iter()
        .map(|qi| {
            softmax_row(
                &k.iter()
                    .map(|kj| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let s = (0..motion.len())
        .map(|j| a.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    (a, s)
}

/// Frame `i` is selected iff fewer than `k` frames outrank it (higher
/// score, or equal score at an earlier index).
pub fn select(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let outranked = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            outranked < k
        })
        .collect()
}

pub fn window(k: usize, r: f64, t: usize) -> Vec<usize> {
    let radius = (r * t as f64).floor() as i64;
    (0..t).filter(|&j| (j as i64 - k as i64).abs() <= radius).collect()
}

pub fn pool(motion: &M, seg: usize) -> M {
    let mut out = Vec::new();
    let mut start = 0;
    while start < motion.len() {
        let end = (start + seg).min(motion.len());
        let n = (end - start) as f64;
        let mut mean = vec![0.0; motion[0].len()];
        for row in &motion[start..end] {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / n;
            }
        }
        out.push(mean);
        start = end;
    }
    out
}

pub fn receptive_field(store: &ParamStore, vp: &M, unselected: &M) -> f64 {
    if unselected.is_empty() {
        return 0.0;
    }
    let q = mm(vp, &param(store, "talker.receptive.wq.w"));
    let k = mm(unselected, &param(store, "talker.receptive.wk.w"));
    let v = mm(unselected, &param(store, "talker.receptive.wv.w"));
    let a = attention(&q, &k, &v, q[0].len(), None);
    sigmoid(linear(store, "talker.receptive.readout", &a)[0][0])
}

pub fn aggregate_local(store: &ParamStore, k: usize, win: &[usize], motion: &M) -> M {
    attn_block(store, "talker.local", &rows(motion, &[k]), &rows(motion, win))
}

pub fn aggregate_global(store: &ParamStore, local: &M, segments: &M) -> M {
    attn_block(store, "talker.global", local, segments)
}

pub fn fuse(store: &ParamStore, text: &M, viewpoints: &M) -> M {
    let m1 = attn_block(store, "talker.fuse_motion", viewpoints, text);
    let t1 = attn_block(store, "talker.fuse_text", text, viewpoints);
    let mut out = ffn_block(store, "talker.ffn_text", &t1);
    out.extend(ffn_block(store, "talker.ffn_motion", &m1));
    out
}

pub struct TalkOracle {
    pub fused: M,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub fields: Vec<f64>,
}

/// The whole cross-talk composition in one pass.
pub fn cross_talk(store: &ParamStore, text: &M, motion: &M, k: usize, seg: usize) -> TalkOracle {
    let t = motion.len();
    let (_, scores) = relevance(store, text, motion);
    let selected = select(&scores, k);
    let unselected: Vec<usize> = (0..t).filter(|j| !selected.contains(j)).collect();
    let rest = rows(motion, &unselected);
    let segments = pool(motion, seg);
    let total: f64 = selected.iter().map(|&i| scores[i]).sum();
    let mut viewpoints = Vec::new();
    let mut fields = Vec::new();
    for &f in &selected {
        let r = receptive_field(store, &rows(motion, &[f]), &rest);
        let local = aggregate_local(store, f, &window(f, r, t), motion);
        let global = aggregate_global(store, &local, &segments);
        let cat: M = vec![[local[0].clone(), global[0].clone()].concat()];
        let row = linear(store, "talker.assemble", &cat);
        viewpoints.push(row[0].iter().map(|x| x * scores[f] / total).collect::<Vec<f64>>());
        fields.push(r);
    }
    TalkOracle {
        fused: fuse(store, text, &viewpoints),
        selected,
        scores,
        fields,
    }
}

/// Decoder logits for `tokens` given a prefix, without adapters.
pub fn decode(store: &ParamStore, prefix: &M, tokens: &[usize]) -> M {
    let embed = param(store, "decoder.embed");
    let pos = param(store, "decoder.positions");
    let p = prefix.len();
    let mut x = prefix.clone();
    for (i, &t) in tokens.iter().enumerate() {
        x.push(embed[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect());
    }
    let q = mm(&x, &param(store, "decoder.attn.wq.w"));
    let k = mm(&x, &param(store, "decoder.attn.wk.w"));
    let v = mm(&x, &param(store, "decoder.attn.wv.w"));
    let visible = |i: usize, j: usize| j < p || (i >= p && j <= i);
    let a = attention(&q, &k, &v, q[0].len(), Some(&visible));
    let h = add(&x, &mm(&a, &param(store, "decoder.attn.wo.w")));
    let h = ffn_block(store, "decoder.ffn", &h);
    mm(&h[p..].to_vec(), &param(store, "decoder.out.w"))
}

/// Mean token NLL ignoring PAD (id 0) targets.
pub fn nll(logits: &M, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == 0 {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    total / n as f64
}

/// Shapes of a small end-to-end graph.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub t: usize,
    pub h: usize,
    pub lt: usize,
    pub k: usize,
    pub seg: usize,
}

/// Enhancer, cross talker, and decoder over one store, with random inputs.
pub struct Rig {
    pub store: ParamStore,
    pub enhancer: Enhancer,
    pub talker: CrossTalker,
    pub decoder: Decoder,
    pub video: Matrix,
    pub motion: Matrix,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub shape: Shape,
}

pub const RIG_VOCAB: usize = 9;

impl Rig {
    pub fn new(seed: u64, shape: Shape) -> Rig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = shape.h;
        let enhancer = Enhancer::new(&mut store, h, &mut rng);
        let talker = CrossTalker::new(
            &mut store,
            TalkerConfig {
                k: shape.k,
                segment_size: shape.seg,
                hidden: h,
                d: h,
            },
            &mut rng,
        )
        .unwrap();
        let decoder = Decoder::new(
            &mut store,
            DecoderConfig {
                vocab: RIG_VOCAB,
                hidden: h,
                max_tokens: 6,
                max_prefix: 64,
            },
            &mut rng,
        );
        let video = Matrix::random_normal(shape.t, h, 1.0, &mut rng);
        let motion = Matrix::random_normal(shape.t, h, 1.0, &mut rng);
        let query = (0..shape.lt).map(|_| rng.random_range(4..RIG_VOCAB)).collect();
        let answer = (0..3).map(|_| rng.random_range(4..RIG_VOCAB)).collect();
        Rig {
            store,
            enhancer,
            talker,
            decoder,
            video,
            motion,
            query,
            answer,
            shape,
        }
    }

    /// enhance → cross_talk → decode_forward → nll_loss.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> motalk::Result<(Var, TalkOutput)> {
        let v = tape.constant(self.video.clone());
        let m = tape.constant(self.motion.clone());
        let enhanced = self.enhancer.enhance(tape, store, v, m)?;
        let text = self.decoder.embed_text(tape, store, &self.query)?;
        let out = self.talker.cross_talk(tape, store, text, enhanced)?;
        let (input, targets) = teacher_forcing(&self.answer);
        let logits = self.decoder.decode_forward(tape, store, out.fused.values, &input)?;
        Ok((nll_loss(tape, logits, &targets)?, out))
    }

    pub fn text_rows(&self) -> M {
        rows(&param(&self.store, "decoder.embed"), &self.query)
    }

    /// The same loss computed entirely by the straight-line oracles.
    pub fn oracle_loss(&self) -> (f64, TalkOracle) {
        let enhanced = enhance(&self.store, &from(&self.video), &from(&self.motion));
        let talk = cross_talk(&self.store, &self.text_rows(), &enhanced, self.shape.k, self.shape.seg);
        let mut input = vec![1];
        input.extend(&self.answer);
        let mut targets = self.answer.clone();
        targets.push(2);
        let logits = decode(&self.store, &talk.fused, &input);
        (nll(&logits, &targets), talk)
    }
}

/// True when a finite-difference step could flip a discrete choice: the
/// K-th and (K+1)-th scores nearly tie, or some `r·T` sits near an integer.
pub fn near_discontinuity(out: &TalkOutput, t: usize, margin: f64) -> bool {
    let mut s = out.diagnostics.scores.clone();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = out.selection.indices.len();
    if k < s.len() && s[k - 1] - s[k] < margin {
        return true;
    }
    out.diagnostics.receptive_fields.iter().any(|&r| {
        let x = r * t as f64;
        (x - x.round()).abs() < margin * t as f64
    })
}
