//! Sequential model-based optimization over mixed categorical/integer/continuous
//! spaces: a Tree-structured Parzen Estimator and uniform random search.
//! Rewards are maximized.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid design space: {0}")]
    InvalidSpace(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OptimizeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { choices: usize },
    /// Inclusive bounds.
    Integer { low: i64, high: i64 },
    Continuous { low: f64, high: f64 },
}

impl Dimension {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dimension::Categorical { choices } => choices >= 1,
            Dimension::Integer { low, high } => low <= high,
            Dimension::Continuous { low, high } => low.is_finite() && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(OptimizeError::InvalidSpace(format!("empty dimension {self:?}")))
        }
    }

    fn contains(&self, v: &Value) -> bool {
        match (*self, *v) {
            (Dimension::Categorical { choices }, Value::Category(k)) => k < choices,
            (Dimension::Integer { low, high }, Value::Integer(i)) => (low..=high).contains(&i),
            (Dimension::Continuous { low, high }, Value::Real(x)) => (low..=high).contains(&x),
            _ => false,
        }
    }

    fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Value {
        match *self {
            Dimension::Categorical { choices } => Value::Category(rng.gen_range(0..choices)),
            Dimension::Integer { low, high } => Value::Integer(rng.gen_range(low..=high)),
            Dimension::Continuous { low, high } => {
                Value::Real(if low == high { low } else { rng.gen_range(low..high) })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Category(usize),
    Integer(i64),
    Real(f64),
}

impl Value {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Value::Category(k) => k as f64,
            Value::Integer(i) => i as f64,
            Value::Real(x) => x,
        }
    }

    pub fn category(&self) -> Option<usize> {
        match *self {
            Value::Category(k) => Some(k),
            _ => None,
        }
    }

    pub fn integer(&self) -> Option<i64> {
        match *self {
            Value::Integer(i) => Some(i),
            _ => None,
        }
    }

    pub fn real(&self) -> Option<f64> {
        match *self {
            Value::Real(x) => Some(x),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Category(k) => write!(f, "{k}"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    dims: Vec<Dimension>,
}

impl DesignSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(OptimizeError::InvalidSpace("no dimensions".into()));
        }
        for d in &dims {
            d.validate()?;
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn contains(&self, point: &[Value]) -> bool {
        point.len() == self.dims.len() && self.dims.iter().zip(point).all(|(d, v)| d.contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub point: Vec<Value>,
    /// NaN for failed trials.
    pub reward: f64,
    pub status: TrialStatus,
}

impl Trial {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Tpe,
    Random,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Tpe => "tpe",
            Algorithm::Random => "random",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = OptimizeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tpe" => Ok(Algorithm::Tpe),
            "random" | "rs" => Ok(Algorithm::Random),
            other => Err(OptimizeError::InvalidConfig(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub max_evals: usize,
    /// Stop after this many post-warmup trials without improvement.
    pub early_stop_patience: Option<usize>,
    pub gamma: f64,
    pub n_candidates: usize,
    pub n_startup: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Tpe,
            max_evals: 200,
            early_stop_patience: None,
            gamma: 0.25,
            n_candidates: 24,
            n_startup: 20,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OptimizeError::InvalidConfig(format!("gamma = {} not in (0, 1)", self.gamma)));
        }
        if self.n_candidates == 0 {
            return Err(OptimizeError::InvalidConfig("n_candidates must be ≥ 1".into()));
        }
        if self.max_evals == 0 {
            return Err(OptimizeError::InvalidConfig("max_evals must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub fn random_suggest<R: Rng>(space: &DesignSpace, rng: &mut R) -> Vec<Value> {
    space.dims.iter().map(|d| d.sample_uniform(rng)).collect()
}

/// Per-dimension density estimate built from one side of the split.
enum Model {
    Categorical(Vec<f64>),
    Parzen {
        centers: Vec<f64>,
        bandwidth: f64,
        low: f64,
        high: f64,
        integer: bool,
    },
}

impl Model {
    fn build(dim: &Dimension, values: &[f64], gamma: f64) -> Self {
        match *dim {
            Dimension::Categorical { choices } => {
                // Prior of unit total weight spread over the choices.
                let mut counts = vec![1.0 / choices as f64; choices];
                for v in values {
                    counts[*v as usize] += 1.0;
                }
                let total: f64 = counts.iter().sum();
                Model::Categorical(counts.into_iter().map(|c| c / total).collect())
            }
            Dimension::Integer { low, high } => Self::parzen(values, low as f64 - 0.5, high as f64 + 0.5, gamma, true),
            Dimension::Continuous { low, high } => Self::parzen(values, low, high, gamma, false),
        }
    }

    fn parzen(values: &[f64], low: f64, high: f64, gamma: f64, integer: bool) -> Self {
        let n = values.len().max(1) as f64;
        let range = (high - low).max(f64::MIN_POSITIVE);
        Model::Parzen {
            centers: values.to_vec(),
            bandwidth: range * gamma.max(1.0 / n.sqrt()),
            low,
            high,
            integer,
        }
    }

    fn log_density(&self, x: f64) -> f64 {
        match self {
            Model::Categorical(p) => p[x as usize].ln(),
            Model::Parzen { centers, bandwidth, low, high, .. } => {
                if centers.is_empty() {
                    return -(high - low).max(f64::MIN_POSITIVE).ln();
                }
                let norm = 1.0 / ((2.0 * PI).sqrt() * bandwidth * centers.len() as f64);
                let s: f64 = centers
                    .iter()
                    .map(|c| (-0.5 * ((x - c) / bandwidth).powi(2)).exp())
                    .sum();
                (s * norm).max(f64::MIN_POSITIVE).ln()
            }
        }
    }

    fn sample<R: Rng>(&self, dim: &Dimension, rng: &mut R) -> Value {
        match self {
            Model::Categorical(p) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        return Value::Category(k);
                    }
                }
                Value::Category(p.len() - 1)
            }
            Model::Parzen { centers, bandwidth, low, high, integer } => {
                if centers.is_empty() {
                    return dim.sample_uniform(rng);
                }
                let c = *centers.choose(rng).expect("nonempty");
                let x = (c + Normal::new(0.0, *bandwidth).expect("positive bandwidth").sample(rng)).clamp(*low, *high);
                match *dim {
                    Dimension::Integer { low: lo, high: hi } if *integer => Value::Integer((x.round() as i64).clamp(lo, hi)),
                    _ => Value::Real(x),
                }
            }
        }
    }
}

/// TPE suggestion: the best ⌈γ·√n⌉ completed trials form the good set; return the candidate drawn from the good-set model that maximizes l/g.
pub fn tpe_suggest<R: Rng>(space: &DesignSpace, history: &[Trial], cfg: &OptimizerConfig, rng: &mut R) -> Vec<Value> {
    let mut ok: Vec<&Trial> = history.iter().filter(|t| t.is_ok()).collect();
    if history.len() < cfg.n_startup || ok.len() < 2 {
        return random_suggest(space, rng);
    }
    // Stable sort keeps history order among equal rewards.
    ok.sort_by(|a, b| b.reward.total_cmp(&a.reward));
    let n_good = ((cfg.gamma * (ok.len() as f64).sqrt()).ceil() as usize).clamp(1, ok.len() - 1);
    let (good, bad) = ok.split_at(n_good);
    let models: Vec<(Model, Model)> = space
        .dims
        .iter()
        .enumerate()
        .map(|(d, dim)| {
            let g: Vec<f64> = good.iter().map(|t| t.point[d].as_f64()).collect();
            let b: Vec<f64> = bad.iter().map(|t| t.point[d].as_f64()).collect();
            (Model::build(dim, &g, cfg.gamma), Model::build(dim, &b, cfg.gamma))
        })
        .collect();
    let mut best: Option<(f64, Vec<Value>)> = None;
    for _ in 0..cfg.n_candidates {
        let cand: Vec<Value> = space
            .dims
            .iter()
            .zip(&models)
            .map(|(dim, (l, _))| l.sample(dim, rng))
            .collect();
        let score: f64 = cand
            .iter()
            .zip(&models)
            .map(|(v, (l, g))| l.log_density(v.as_f64()) - g.log_density(v.as_f64()))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.expect("n_candidates ≥ 1").1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best: Option<Trial>,
    pub history: Vec<Trial>,
}

impl OptimizationResult {
    /// Running maximum of reward over the history (failed trials carry the previous value).
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut cur = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|t| {
                if t.is_ok() && t.reward > cur {
                    cur = t.reward;
                }
                cur
            })
            .collect()
    }
}

/// Run the suggest → evaluate → record loop. Objective errors are recorded
/// as failed trials.
pub fn optimize<F, E>(space: &DesignSpace, mut objective: F, cfg: &OptimizerConfig) -> Result<OptimizationResult>
where
    F: FnMut(&[Value]) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<Trial> = Vec::with_capacity(cfg.max_evals);
    let mut best: Option<usize> = None;
    let mut stale = 0usize;
    for i in 0..cfg.max_evals {
        let point = match cfg.algorithm {
            Algorithm::Tpe => tpe_suggest(space, &history, cfg, &mut rng),
            Algorithm::Random => random_suggest(space, &mut rng),
        };
        let trial = match objective(&point) {
            Ok(r) if r.is_finite() => Trial { point, reward: r, status: TrialStatus::Ok },
            Ok(r) => {
                log::warn!("trial {i}: non-finite reward {r}");
                Trial { point, reward: f64::NAN, status: TrialStatus::Failed }
            }
            Err(e) => {
                log::warn!("trial {i}: objective failed: {e}");
                Trial { point, reward: f64::NAN, status: TrialStatus::Failed }
            }
        };
        let improved = trial.is_ok() && best.is_none_or(|b| trial.reward > history[b].reward);
        history.push(trial);
        if improved {
            best = Some(i);
            stale = 0;
        } else if i >= cfg.n_startup {
            stale += 1;
        }
        if let Some(p) = cfg.early_stop_patience {
            if i + 1 >= cfg.n_startup && stale >= p {
                break;
            }
        }
    }
    Ok(OptimizationResult {
        best: best.map(|b| history[b].clone()),
        history,
    })
}

/// History CSV: `trial,reward,x0,x1,...`; failed trials have an empty reward.
pub fn write_history<W: Write>(w: W, history: &[Trial]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let dims = history.first().map_or(0, |t| t.point.len());
    let mut header = vec!["trial".to_string(), "reward".to_string()];
    header.extend((0..dims).map(|d| format!("x{d}")));
    wtr.write_record(&header)?;
    for (i, t) in history.iter().enumerate() {
        let mut rec = vec![i.to_string(), if t.is_ok() { format!("{:e}", t.reward) } else { String::new() }];
        rec.extend(t.point.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Synthetic separable benchmark: each categorical dimension carries a hidden
/// score per category (a permutation of evenly spaced values in [0, 1]); the
/// reward is the sum over dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableBenchmark {
    scores: Vec<Vec<f64>>,
}

impl SeparableBenchmark {
    pub fn new(dims: usize, choices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denom = (choices.max(2) - 1) as f64;
        let scores = (0..dims)
            .map(|_| {
                let mut s: Vec<f64> = (0..choices).map(|k| k as f64 / denom).collect();
                s.shuffle(&mut rng);
                s
            })
            .collect();
        Self { scores }
    }

    pub fn space(&self) -> DesignSpace {
        DesignSpace::new(
            self.scores
                .iter()
                .map(|s| Dimension::Categorical { choices: s.len() })
                .collect(),
        )
        .expect("nonempty benchmark")
    }

    pub fn optimum(&self) -> f64 {
        self.scores.iter().map(|s| s.iter().cloned().fold(f64::MIN, f64::max)).sum()
    }

    pub fn evaluate(&self, point: &[Value]) -> f64 {
        point
            .iter()
            .zip(&self.scores)
            .map(|(v, s)| s[v.category().expect("categorical point")])
            .sum()
    }
}
