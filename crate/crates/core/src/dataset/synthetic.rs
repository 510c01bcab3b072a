//! Synthetic users with planted interest structure.
//!
//! Every user likes 1–3 global clusters and dislikes up to two others. Engaged
//! tokens sit near liked clusters, hides near disliked ones, and impressions
//! are shown-but-ignored items drawn mostly from the disliked and unrelated
//! clusters. Candidates are labelled by which kind of cluster they were drawn
//! from, so only a model that reads the user's history can tell a liked
//! candidate from a disliked one: the clusters themselves are equally popular.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SequenceStore, TrainingExample, UserRecord};
use super::examples::Labels;
use crate::error::{Error, Result};
use crate::seqcore::{
    l2_normalize, quantize, surface, ActionToken, ActionType, Embedding, Head, UserSequences, EMBED_DIM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub ll: usize,
    pub rt: usize,
    pub imp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_interest_clusters: usize,
    pub tokens_per_user: TokenCounts,
    /// P(repin) for a candidate drawn from one of the user's liked clusters.
    pub positive_rate: f64,
    /// P(hide) for a candidate drawn from one of the user's disliked clusters.
    pub hide_rate: f64,
    /// Share of engagement-history tokens that are explicit hides.
    pub history_hide_share: f64,
    /// Share of impressions drawn from disliked clusters (rest: neutral ones).
    pub impression_disliked_share: f64,
    /// When > 0, clusters come in pairs whose centroids have this cosine, and
    /// a user's disliked clusters are siblings of liked ones (content that
    /// looks like what they engage with but isn't). 0: independent clusters.
    pub sibling_cosine: f64,
    pub rng_seed: u64,
    pub chunks_per_user: usize,
    pub candidates_per_chunk: usize,
    /// Spread of samples around their centroid; 0 puts them on it.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 1000,
            num_interest_clusters: 32,
            tokens_per_user: TokenCounts { ll: 64, rt: 16, imp: 16 },
            positive_rate: 0.8,
            hide_rate: 0.7,
            history_hide_share: 0.02,
            impression_disliked_share: 0.8,
            sibling_cosine: 0.8,
            rng_seed: 7,
            chunks_per_user: 4,
            candidates_per_chunk: 8,
            noise: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_interest_clusters", self.num_interest_clusters),
            ("tokens_per_user.ll", self.tokens_per_user.ll),
            ("tokens_per_user.rt", self.tokens_per_user.rt),
            ("tokens_per_user.imp", self.tokens_per_user.imp),
            ("chunks_per_user", self.chunks_per_user),
            ("candidates_per_chunk", self.candidates_per_chunk),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("positive_rate", self.positive_rate),
            ("hide_rate", self.hide_rate),
            ("history_hide_share", self.history_hide_share),
            ("impression_disliked_share", self.impression_disliked_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.sibling_cosine) {
            return Err(Error::validation(format!("sibling_cosine must be in [0, 1), got {}", self.sibling_cosine)));
        }
        if self.sibling_cosine > 0.0 && (self.num_interest_clusters < 4 || self.num_interest_clusters % 2 != 0) {
            return Err(Error::validation("sibling clusters need an even num_interest_clusters >= 4"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::validation(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        for (name, v) in [("tokens_per_user.ll", self.tokens_per_user.ll), ("tokens_per_user.rt", self.tokens_per_user.rt), ("tokens_per_user.imp", self.tokens_per_user.imp)] {
            if v > u16::MAX as usize {
                return Err(Error::validation(format!("{name} exceeds {}", u16::MAX)));
            }
        }
        Ok(())
    }
}

/// Which part of the user's taste a candidate was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    Liked,
    Disliked,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub liked: Vec<usize>,
    pub disliked: Vec<usize>,
}

/// Generator output. `examples` are in (user, chunk, position) order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub centroids: Vec<Embedding>,
    pub profiles: Vec<UserProfile>,
    pub store: SequenceStore,
    pub examples: Vec<TrainingExample>,
    /// Parallel to `examples`.
    pub kinds: Vec<CandidateKind>,
}

impl SyntheticData {
    /// Last chunk of every user is held out for evaluation.
    pub fn split(&self, chunks_per_user: usize) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
        let last = chunks_per_user as u64 - 1;
        self.examples.iter().cloned().partition(|e| e.chunk_id != last)
    }
}

const BASE_TS: u32 = 1_600_000_000;
const DAY: u32 = 86_400;
// Labels that fire regardless of the user (accidental taps, mis-hides).
const BACKGROUND_RATE: f64 = 0.04;

fn unit_gaussian(rng: &mut impl Rng) -> [f64; EMBED_DIM] {
    let mut v = [0f64; EMBED_DIM];
    for x in v.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    v
}

fn random_unit(rng: &mut impl Rng) -> Embedding {
    l2_normalize(&Embedding::new(unit_gaussian(rng)).expect("finite"))
}

/// Unit vector near `c`; values rounded to f32 so they survive the example file.
fn near(rng: &mut impl Rng, c: &Embedding, noise: f64) -> Embedding {
    let g = unit_gaussian(rng);
    let s = noise / (EMBED_DIM as f64).sqrt();
    let mut v = [0f64; EMBED_DIM];
    for i in 0..EMBED_DIM {
        v[i] = c.as_array()[i] + s * g[i];
    }
    let n = l2_normalize(&Embedding::new(v).expect("finite"));
    let mut out = [0f64; EMBED_DIM];
    for i in 0..EMBED_DIM {
        out[i] = f64::from(n.as_array()[i] as f32);
    }
    Embedding::new(out).expect("finite")
}

fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn positive_action(rng: &mut impl Rng) -> ActionType {
    let bits = match rng.random_range(0..4) {
        0 => ActionType::REPIN,
        1 => ActionType::REPIN | ActionType::CLOSEUP,
        2 => ActionType::CLICK,
        _ => ActionType::CLOSEUP | ActionType::CLICK,
    };
    ActionType::new(bits).expect("valid bits")
}

/// Liked clusters from distinct pairs; disliked ones are their siblings.
fn sibling_profile(rng: &mut impl Rng, user_id: u64, k: usize) -> UserProfile {
    let pairs = k / 2;
    let n_liked = rng.random_range(1..=3usize).min(pairs);
    let liked: Vec<usize> = sample(rng, pairs, n_liked)
        .into_iter()
        .map(|pair| 2 * pair + rng.random_range(0..2usize))
        .collect();
    let n_disliked = rng.random_range(1..=2usize).min(n_liked);
    let disliked = liked[..n_disliked].iter().map(|&c| c ^ 1).collect();
    UserProfile { user_id, liked, disliked }
}

/// Pairs of centroids with cosine `cos` inside each pair.
fn sibling_centroids(rng: &mut impl Rng, k: usize, cos: f64) -> Vec<Embedding> {
    let mut out = Vec::with_capacity(k);
    for _ in 0..k / 2 {
        let a = random_unit(rng);
        // Component of a random direction orthogonal to `a`.
        let r = random_unit(rng);
        let proj = a.dot(&r);
        let mut o = [0f64; EMBED_DIM];
        for i in 0..EMBED_DIM {
            o[i] = r.as_array()[i] - proj * a.as_array()[i];
        }
        let o = l2_normalize(&Embedding::new(o).expect("finite"));
        let sin = (1.0 - cos * cos).sqrt();
        let mut b = [0f64; EMBED_DIM];
        for i in 0..EMBED_DIM {
            b[i] = cos * a.as_array()[i] + sin * o.as_array()[i];
        }
        out.push(a);
        out.push(Embedding::new(b).expect("finite"));
    }
    out
}

fn profile(rng: &mut impl Rng, user_id: u64, k: usize) -> UserProfile {
    let n_liked = rng.random_range(1..=3usize).min(k);
    let n_disliked = rng.random_range(1..=2usize).min(k - n_liked);
    let picked = sample(rng, k, n_liked + n_disliked).into_vec();
    UserProfile {
        user_id,
        liked: picked[..n_liked].to_vec(),
        disliked: picked[n_liked..].to_vec(),
    }
}

/// `n` timestamps in `[lo, hi]`, most recent first.
fn timestamps(rng: &mut impl Rng, n: usize, lo: u32, hi: u32) -> Vec<u32> {
    let mut ts: Vec<u32> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    ts.sort_unstable_by(|a, b| b.cmp(a));
    ts
}

struct Sampler<'a> {
    cfg: &'a SyntheticConfig,
    centroids: &'a [Embedding],
}

impl Sampler<'_> {
    fn near_one(&self, rng: &mut impl Rng, clusters: &[usize]) -> Embedding {
        let c = pick(rng, clusters);
        near(rng, &self.centroids[c], self.cfg.noise)
    }

    fn disliked_or_far(&self, rng: &mut impl Rng, p: &UserProfile) -> Embedding {
        if p.disliked.is_empty() {
            random_unit(rng)
        } else {
            self.near_one(rng, &p.disliked)
        }
    }

    fn other(&self, rng: &mut impl Rng, p: &UserProfile) -> Embedding {
        let k = self.centroids.len();
        let free: Vec<usize> = (0..k).filter(|c| !p.liked.contains(c) && !p.disliked.contains(c)).collect();
        if free.is_empty() {
            random_unit(rng)
        } else {
            self.near_one(rng, &free)
        }
    }

    fn engagement_list(&self, rng: &mut impl Rng, p: &UserProfile, n: usize, lo: u32, hi: u32) -> Vec<ActionToken> {
        timestamps(rng, n, lo, hi)
            .into_iter()
            .map(|ts| {
                let (action, e) = if !rng.random_bool(self.cfg.history_hide_share) {
                    (positive_action(rng), self.near_one(rng, &p.liked))
                } else {
                    (ActionType::new(ActionType::HIDE).expect("valid"), self.disliked_or_far(rng, p))
                };
                self.token(rng, ts, action, &e)
            })
            .collect()
    }

    fn impressions(&self, rng: &mut impl Rng, p: &UserProfile, n: usize, lo: u32, hi: u32) -> Vec<ActionToken> {
        timestamps(rng, n, lo, hi)
            .into_iter()
            .map(|ts| {
                let e = if rng.random_bool(self.cfg.impression_disliked_share) { self.disliked_or_far(rng, p) } else { self.other(rng, p) };
                self.token(rng, ts, ActionType::impression(), &e)
            })
            .collect()
    }

    fn token(&self, rng: &mut impl Rng, ts: u32, action: ActionType, e: &Embedding) -> ActionToken {
        let q = quantize(e.as_slice()).expect("finite");
        ActionToken::new(ts, action, rng.random_range(0..=surface::OTHER), q).expect("ts > 0")
    }

    fn candidate(&self, rng: &mut impl Rng, p: &UserProfile) -> (CandidateKind, Embedding, Labels) {
        let cfg = self.cfg;
        let mut labels = Labels::default();
        let u = rng.random::<f64>();
        let (kind, e) = if u < 0.35 {
            (CandidateKind::Liked, self.near_one(rng, &p.liked))
        } else if u < 0.6 {
            (CandidateKind::Disliked, self.disliked_or_far(rng, p))
        } else {
            (CandidateKind::Other, self.other(rng, p))
        };
        match kind {
            CandidateKind::Liked => {
                labels.set(Head::Repin, rng.random_bool(cfg.positive_rate));
                labels.set(Head::Click, rng.random_bool(0.5 * cfg.positive_rate));
                labels.set(Head::Closeup, rng.random_bool(0.6 * cfg.positive_rate));
            }
            CandidateKind::Disliked => {
                labels.set(Head::Hide, rng.random_bool(cfg.hide_rate));
            }
            CandidateKind::Other => {
                for h in Head::ALL {
                    labels.set(h, rng.random_bool(BACKGROUND_RATE));
                }
            }
        }
        (kind, e, labels)
    }
}

/// Deterministic in `cfg.rng_seed`. Candidates carry no `nn_features`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let siblings = cfg.sibling_cosine > 0.0;
    let centroids: Vec<Embedding> = if siblings {
        sibling_centroids(&mut rng, cfg.num_interest_clusters, cfg.sibling_cosine)
    } else {
        (0..cfg.num_interest_clusters).map(|_| random_unit(&mut rng)).collect()
    };
    let sampler = Sampler { cfg, centroids: &centroids };
    let t = cfg.tokens_per_user;

    let mut profiles = Vec::with_capacity(cfg.num_users);
    let mut records = Vec::with_capacity(cfg.num_users);
    let mut examples = Vec::with_capacity(cfg.num_users * cfg.chunks_per_user * cfg.candidates_per_chunk);
    let mut kinds = Vec::with_capacity(examples.capacity());
    for u in 0..cfg.num_users {
        let user_id = u as u64 + 1;
        let p = if siblings {
            sibling_profile(&mut rng, user_id, centroids.len())
        } else {
            profile(&mut rng, user_id, centroids.len())
        };
        // Two years of history ending "now"; the real-time window is the last day.
        let now = BASE_TS + rng.random_range(0..30 * DAY);
        let sequences = UserSequences {
            lifelong: sampler.engagement_list(&mut rng, &p, t.ll, now - 730 * DAY, now - DAY - 1),
            realtime: sampler.engagement_list(&mut rng, &p, t.rt, now - DAY, now),
            impression: sampler.impressions(&mut rng, &p, t.imp, now - DAY, now),
        };
        for chunk in 0..cfg.chunks_per_user {
            let request_ts = now + 60 + chunk as u32 * rng.random_range(600..7200);
            for _ in 0..cfg.candidates_per_chunk {
                let (kind, candidate, labels) = sampler.candidate(&mut rng, &p);
                examples.push(TrainingExample {
                    user_id,
                    chunk_id: chunk as u64,
                    item_id: examples.len() as u64,
                    request_ts,
                    candidate,
                    labels,
                    nn_features: None,
                });
                kinds.push(kind);
            }
        }
        records.push(UserRecord { user_id, sequences });
        profiles.push(p);
    }
    Ok(SyntheticData {
        centroids,
        profiles,
        store: SequenceStore { records },
        examples,
        kinds,
    })
}
