use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{MotionSequence, VideoFeatureSequence, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    ArmRaise,
    Squat,
    SideStep,
    TorsoTwist,
    Lunge,
}

impl MotionClass {
    pub const ALL: [MotionClass; 5] = [
        MotionClass::ArmRaise,
        MotionClass::Squat,
        MotionClass::SideStep,
        MotionClass::TorsoTwist,
        MotionClass::Lunge,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn tag(self) -> &'static str {
        match self {
            MotionClass::ArmRaise => "arm_raise",
            MotionClass::Squat => "squat",
            MotionClass::SideStep => "side_step",
            MotionClass::TorsoTwist => "torso_twist",
            MotionClass::Lunge => "lunge",
        }
    }

    pub fn body_part(self) -> &'static str {
        match self {
            MotionClass::ArmRaise => "the arms",
            MotionClass::Squat | MotionClass::SideStep | MotionClass::Lunge => "the legs",
            MotionClass::TorsoTwist => "the torso",
        }
    }

    pub fn direction(self) -> &'static str {
        match self {
            MotionClass::ArmRaise | MotionClass::Squat => "up and down",
            MotionClass::SideStep => "side to side",
            MotionClass::TorsoTwist => "in circles",
            MotionClass::Lunge => "forward and back",
        }
    }

    /// Per-channel resting offset and oscillation amplitude for channels
    /// other than the repetition channel.
    fn signature(self, channel: usize) -> (f64, f64) {
        let (c, d) = ((self.index() + 1) as f64, channel as f64);
        (0.5 * (1.7 * c * d).sin(), 0.3 + 0.2 * (c + d).cos())
    }
}

/// Query templates, named after the benchmark aspects they mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFamily {
    BodyPart,
    Sequence,
    Direction,
    Counting,
}

impl QueryFamily {
    pub const ALL: [QueryFamily; 4] = [
        QueryFamily::BodyPart,
        QueryFamily::Sequence,
        QueryFamily::Direction,
        QueryFamily::Counting,
    ];

    fn queries(self) -> &'static [&'static str] {
        match self {
            QueryFamily::BodyPart => &[
                "which body part is moving",
                "what part of the body does the person move",
            ],
            QueryFamily::Sequence => &["when does the motion reach its peak", "at which frames is the peak"],
            QueryFamily::Direction => &[
                "in which direction does the person move",
                "what is the direction of the motion",
            ],
            QueryFamily::Counting => &[
                "how many repetitions does the person perform",
                "count the repetitions in this motion",
            ],
        }
    }

    fn answer(self, class: MotionClass, cycles: usize, peaks: &[usize]) -> String {
        match self {
            QueryFamily::BodyPart => class.body_part().to_string(),
            QueryFamily::Direction => class.direction().to_string(),
            QueryFamily::Counting => format!("{cycles} repetitions"),
            QueryFamily::Sequence => {
                let frames: Vec<String> = peaks.iter().map(|p| p.to_string()).collect();
                format!("frames {}", frames.join(" "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub rep_count: usize,
    pub key_frames: Vec<usize>,
    pub motion_class: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    pub id: String,
    pub motion: MotionSequence,
    pub video: Option<VideoFeatureSequence>,
    pub query: String,
    pub answer: String,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CyclicParams {
    pub seed: u64,
    pub cycles: usize,
    pub frames: usize,
    pub d_motion: usize,
    pub noise: f64,
    /// Drawn from the seed when absent.
    pub family: Option<QueryFamily>,
    pub class: Option<MotionClass>,
}

/// Frames of the maxima of `sin(2π·f·t/T)`, one per period. Each is the
/// integer nearest the continuous peak `T/(4f) + n·T/f`, ties to the
/// earlier frame (compared exactly in units of `1/(4f)` frames).
pub fn key_frames(cycles: usize, frames: usize) -> Vec<usize> {
    let (f, t) = (cycles as i64, frames as i64);
    (0..f)
        .map(|n| {
            let target = t * (1 + 4 * n); // 4f · peak position
            let lo = target / (4 * f);
            let hi = (lo + 1).min(t - 1);
            if (4 * f * hi - target).abs() < (target - 4 * f * lo).abs() {
                hi as usize
            } else {
                lo as usize
            }
        })
        .collect()
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One cyclic sample: channel 0 is `sin(2π·f·t/T)` plus Gaussian noise,
/// remaining channels carry class-specific smooth signals.
pub fn generate_cyclic(p: &CyclicParams) -> Result<MotionSample> {
    if p.cycles == 0 {
        return Err(Error::Domain("at least one cycle is required".into()));
    }
    if p.frames < 2 * p.cycles {
        return Err(Error::Domain(format!(
            "{} frames cannot resolve {} cycles (need at least {})",
            p.frames,
            p.cycles,
            2 * p.cycles
        )));
    }
    if p.d_motion == 0 {
        return Err(Error::Domain("motion needs at least one channel".into()));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::Domain(format!("noise must be non-negative, got {}", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let family = p
        .family
        .unwrap_or_else(|| QueryFamily::ALL[rng.random_range(0..QueryFamily::ALL.len())]);
    let class = p
        .class
        .unwrap_or_else(|| MotionClass::ALL[rng.random_range(0..MotionClass::ALL.len())]);
    let noise = Normal::new(0.0, p.noise).expect("validated");

    let (t_len, f) = (p.frames, p.cycles as f64);
    let channels: Vec<(f64, f64, f64, f64)> = (1..p.d_motion)
        .map(|d| {
            let (offset, amp) = class.signature(d);
            let freq = rng.random_range(1..=2) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            (offset, amp, freq, phase)
        })
        .collect();
    let mut values = Matrix::zeros(t_len, p.d_motion);
    for t in 0..t_len {
        let x = t as f64 / t_len as f64;
        values.set(t, 0, (2.0 * PI * f * x).sin() + noise.sample(&mut rng));
        for (d, &(offset, amp, freq, phase)) in channels.iter().enumerate() {
            let v = offset + amp * (2.0 * PI * freq * x + phase).sin() + noise.sample(&mut rng);
            values.set(t, d + 1, v);
        }
    }

    let peaks = key_frames(p.cycles, p.frames);
    let queries = family.queries();
    let query = queries[rng.random_range(0..queries.len())].to_string();
    let answer = family.answer(class, p.cycles, &peaks);
    Ok(MotionSample {
        id: format!("s{:016x}", p.seed),
        motion: MotionSequence::new(values, DEFAULT_FPS)?,
        video: None,
        query,
        answer,
        labels: Labels {
            rep_count: p.cycles,
            key_frames: peaks,
            motion_class: class.tag().to_string(),
        },
    })
}

/// Video features `motion · W` plus seeded Gaussian noise.
pub fn paired_video(sample: &MotionSample, map: &Matrix, noise: f64, seed: u64) -> Result<VideoFeatureSequence> {
    let mut values = sample.motion.values.matmul(map)?;
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, noise).map_err(|e| Error::Domain(e.to_string()))?;
        for v in values.data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok(VideoFeatureSequence { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub seed: u64,
    pub samples: usize,
    pub frames: usize,
    pub d_motion: usize,
    /// Video feature width; `0` disables paired video.
    pub d_video: usize,
    pub cycles_min: usize,
    pub cycles_max: usize,
    pub noise: f64,
    pub video_noise: f64,
    pub families: Vec<QueryFamily>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            seed: 0,
            samples: 32,
            frames: 40,
            d_motion: 6,
            d_video: 8,
            cycles_min: 1,
            cycles_max: 4,
            noise: 0.02,
            video_noise: 0.01,
            families: QueryFamily::ALL.to_vec(),
        }
    }
}

impl DatasetParams {
    /// The video projection shared by every sample of the dataset.
    pub fn video_map(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, u64::MAX));
        Matrix::random_normal(
            self.d_motion,
            self.d_video,
            1.0 / (self.d_motion as f64).sqrt(),
            &mut rng,
        )
    }
}

/// A deterministic dataset: sample `i` depends only on `(seed, i)`; query
/// families rotate through `families`.
pub fn generate_dataset(p: &DatasetParams) -> Result<Vec<MotionSample>> {
    if p.cycles_min == 0 || p.cycles_min > p.cycles_max {
        return Err(Error::Domain(format!(
            "invalid cycle range {}..{}",
            p.cycles_min, p.cycles_max
        )));
    }
    if p.families.is_empty() {
        return Err(Error::Domain("at least one query family is required".into()));
    }
    let map = (p.d_video > 0).then(|| p.video_map());
    (0..p.samples)
        .map(|i| {
            let sample_seed = mix(p.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let cycles = rng.random_range(p.cycles_min..=p.cycles_max);
            let mut s = generate_cyclic(&CyclicParams {
                seed: sample_seed,
                cycles,
                frames: p.frames,
                d_motion: p.d_motion,
                noise: p.noise,
                family: Some(p.families[i % p.families.len()]),
                class: None,
            })?;
            s.id = format!("sample-{i:05}");
            if let Some(map) = &map {
                s.video = Some(paired_video(&s, map, p.video_noise, mix(sample_seed, 1))?);
            }
            Ok(s)
        })
        .collect()
}

/// Every word any template can emit for sequences of up to `max_frames`
/// frames and `max_cycles` cycles.
pub fn template_words(max_frames: usize, max_cycles: usize) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for fam in QueryFamily::ALL {
        texts.extend(fam.queries().iter().map(|q| q.to_string()));
    }
    for c in MotionClass::ALL {
        texts.push(c.body_part().into());
        texts.push(c.direction().into());
    }
    texts.push("repetitions frames".into());
    texts.extend((0..max_frames.max(max_cycles + 1)).map(|n| n.to_string()));
    let mut out = Vec::new();
    for t in texts {
        for w in super::tokenizer::words(&t) {
            if !out.contains(&w) {
                out.push(w);
            }
        }
    }
    out
}
