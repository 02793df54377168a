//! Maximum-entropy inverse reinforcement learning on a grid MDP.
//!
//! Cells carry a feature vector; the reward of departing a cell is `w . phi`.
//! Actions are the in-bounds king moves, and the goal only has STAY with
//! reward 0. Path probabilities are `exp(sum of departed rewards) / Z`, where
//! `Z(start)` sums over every path that reaches the goal within `H` steps.
//!
//! `soft_value_iteration` keeps every stage `V_0 ..= V_H`, so the policy can
//! be read either stationary (from the final pass) or time-indexed. The
//! time-indexed policy is the one whose visitation counts give the exact
//! log-likelihood gradient, and training uses it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelPalette, SemanticRaster};
use crate::rng::SplitMix64;

/// Grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// Lower bound on every finite traversal cost.
pub const COST_EPSILON: f64 = 1e-3;

/// The eight king moves as `(d_row, d_col)`, in row-major order.
pub const KING_MOVES: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

#[derive(Debug, Error, PartialEq)]
pub enum IrlError {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("demonstration {demo} invalid at step {step}: {reason}")]
    InvalidDemonstration { demo: usize, step: usize, reason: String },
    #[error("no demonstrations")]
    NoDemonstrations,
    #[error("invalid start distribution: {0}")]
    InvalidStart(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: non-finite gradient")]
    Divergence { iteration: usize },
    #[error("weights have {found} entries, expected {expected}")]
    WeightDimension { expected: usize, found: usize },
    #[error("invalid weights file: {0}")]
    WeightsFormat(String),
    #[error("goal {0:?} is unreachable from every cell within the horizon")]
    Unreachable(Cell),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMdp {
    width: usize,
    height: usize,
    feature_dim: usize,
    /// Row-major, `feature_dim` values per cell.
    features: Vec<f64>,
    goal: Cell,
    horizon: usize,
    /// Successor cell indices per cell; the goal has only itself.
    successors: Vec<Vec<usize>>,
    /// `(s, k)` pairs with `successors[s][k]` equal to the cell, by ascending `s`.
    predecessors: Vec<Vec<(usize, usize)>>,
}

impl GridMdp {
    pub fn new(
        width: usize,
        height: usize,
        feature_dim: usize,
        features: Vec<f64>,
        goal: Cell,
        horizon: usize,
    ) -> Result<Self, IrlError> {
        if width == 0 || height == 0 {
            return Err(IrlError::InvalidMdp("empty grid".into()));
        }
        if features.len() != width * height * feature_dim {
            return Err(IrlError::InvalidMdp(format!(
                "{} feature values for {}x{}x{}",
                features.len(),
                width,
                height,
                feature_dim
            )));
        }
        if goal.0 >= height || goal.1 >= width {
            return Err(IrlError::InvalidMdp(format!("goal {goal:?} out of bounds")));
        }
        if horizon == 0 {
            return Err(IrlError::InvalidMdp("horizon must be >= 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(IrlError::InvalidMdp("non-finite feature".into()));
        }
        let goal_index = goal.0 * width + goal.1;
        let successors = (0..width * height)
            .map(|i| {
                if i == goal_index {
                    return vec![i];
                }
                let (r, c) = ((i / width) as isize, (i % width) as isize);
                KING_MOVES
                    .iter()
                    .map(|(dr, dc)| (r + dr, c + dc))
                    .filter(|&(nr, nc)| nr >= 0 && nc >= 0 && nr < height as isize && nc < width as isize)
                    .map(|(nr, nc)| nr as usize * width + nc as usize)
                    .collect()
            })
            .collect::<Vec<Vec<usize>>>();
        let mut predecessors = vec![Vec::new(); width * height];
        for (s, succ) in successors.iter().enumerate() {
            for (k, &n) in succ.iter().enumerate() {
                predecessors[n].push((s, k));
            }
        }
        Ok(Self {
            width,
            height,
            feature_dim,
            features,
            goal,
            horizon,
            successors,
            predecessors,
        })
    }

    /// One-hot class features over `classes` semantic classes.
    pub fn from_semantic(semantic: &SemanticRaster, classes: usize, goal: Cell, horizon: usize) -> Result<Self, IrlError> {
        let (w, h) = semantic.dims();
        let mut features = vec![0.0; w * h * classes];
        for (i, &c) in semantic.data().iter().enumerate() {
            if c as usize >= classes {
                return Err(IrlError::InvalidMdp(format!("class {c} at cell {i} outside {classes} classes")));
            }
            features[i * classes + c as usize] = 1.0;
        }
        Self::new(w, h, classes, features, goal, horizon)
    }

    /// The default horizon `4 * (width + height)`.
    pub fn default_horizon(width: usize, height: usize) -> usize {
        4 * (width + height)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cells(&self) -> usize {
        self.width * self.height
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn goal(&self) -> Cell {
        self.goal
    }
    pub fn goal_index(&self) -> usize {
        self.index(self.goal)
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn index(&self, cell: Cell) -> usize {
        cell.0 * self.width + cell.1
    }
    pub fn cell(&self, index: usize) -> Cell {
        (index / self.width, index % self.width)
    }
    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.0 < self.height && cell.1 < self.width
    }
    pub fn phi(&self, index: usize) -> &[f64] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }
    pub fn successors(&self, index: usize) -> &[usize] {
        &self.successors[index]
    }

    pub fn with_goal(&self, goal: Cell) -> Result<Self, IrlError> {
        Self::new(self.width, self.height, self.feature_dim, self.features.clone(), goal, self.horizon)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self, IrlError> {
        Self::new(self.width, self.height, self.feature_dim, self.features.clone(), self.goal, horizon)
    }

    pub fn rewards(&self, w: &RewardWeights) -> Result<Vec<f64>, IrlError> {
        if w.values.len() != self.feature_dim {
            return Err(IrlError::WeightDimension {
                expected: self.feature_dim,
                found: w.values.len(),
            });
        }
        Ok((0..self.cells())
            .map(|i| self.phi(i).iter().zip(&w.values).map(|(f, w)| f * w).sum())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub path: Vec<Cell>,
}

impl Demonstration {
    pub fn new(path: Vec<Cell>) -> Self {
        Self { path }
    }

    pub fn start(&self) -> Cell {
        self.path[0]
    }

    /// Number of moves.
    pub fn steps(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    /// Checks adjacency, bounds, goal termination and the horizon. `demo` is
    /// the index reported in errors.
    pub fn validate(&self, mdp: &GridMdp, demo: usize) -> Result<(), IrlError> {
        let fail = |step: usize, reason: String| IrlError::InvalidDemonstration { demo, step, reason };
        if self.path.is_empty() {
            return Err(fail(0, "empty path".into()));
        }
        for (step, &cell) in self.path.iter().enumerate() {
            if !mdp.in_bounds(cell) {
                return Err(fail(step, format!("cell {cell:?} out of bounds")));
            }
            if step + 1 < self.path.len() && cell == mdp.goal {
                return Err(fail(step, "path continues past the goal".into()));
            }
            if step > 0 {
                let prev = self.path[step - 1];
                let dr = prev.0.abs_diff(cell.0);
                let dc = prev.1.abs_diff(cell.1);
                if dr > 1 || dc > 1 || (dr == 0 && dc == 0) {
                    return Err(fail(step, format!("{prev:?} -> {cell:?} is not a king move")));
                }
            }
        }
        let last = *self.path.last().expect("non-empty");
        if last != mdp.goal {
            return Err(fail(self.path.len() - 1, format!("ends at {last:?}, goal is {:?}", mdp.goal)));
        }
        if self.steps() > mdp.horizon {
            return Err(fail(mdp.horizon + 1, format!("{} steps exceed horizon {}", self.steps(), mdp.horizon)));
        }
        Ok(())
    }
}

/// Demonstrations file: `{"goal":[r,c],"paths":[[[r,c],...],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub goal: Cell,
    pub paths: Vec<Vec<Cell>>,
}

impl DemoSet {
    pub fn from_demos(goal: Cell, demos: &[Demonstration]) -> Self {
        Self {
            goal,
            paths: demos.iter().map(|d| d.path.clone()).collect(),
        }
    }

    pub fn demonstrations(&self) -> Vec<Demonstration> {
        self.paths.iter().cloned().map(Demonstration::new).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Feature names, typically palette class names.
    pub features: Vec<String>,
    #[serde(rename = "weights")]
    pub values: Vec<f64>,
}

impl RewardWeights {
    pub fn zeros(features: Vec<String>) -> Self {
        let values = vec![0.0; features.len()];
        Self { features, values }
    }

    pub fn new(features: Vec<String>, values: Vec<f64>) -> Result<Self, IrlError> {
        if features.len() != values.len() {
            return Err(IrlError::WeightDimension {
                expected: features.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IrlError::WeightsFormat("non-finite weight".into()));
        }
        Ok(Self { features, values })
    }

    /// Names taken from the palette, in class-id order.
    pub fn for_palette(palette: &LabelPalette, values: Vec<f64>) -> Result<Self, IrlError> {
        Self::new(palette.classes().iter().map(|c| c.name.clone()).collect(), values)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, IrlError> {
        let raw: Self = serde_json::from_str(text).map_err(|e| IrlError::WeightsFormat(e.to_string()))?;
        Self::new(raw.features, raw.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Seeds demo sampling helpers; training itself is deterministic.
    pub seed: u64,
    /// Overrides the mdp horizon when set.
    pub horizon: Option<usize>,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            iterations: 200,
            l2: 0.0,
            seed: 0,
            horizon: None,
        }
    }
}

impl IrlConfig {
    pub fn validate(&self) -> Result<(), IrlError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(IrlError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(IrlError::Config(format!("l2 {} must be non-negative", self.l2)));
        }
        if self.horizon == Some(0) {
            return Err(IrlError::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// All value stages of the backward recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftValues {
    rewards: Vec<f64>,
    /// `stages[t]` is `V_t`, for `t` in `0..=H`.
    stages: Vec<Vec<f64>>,
    goal: usize,
}

impl SoftValues {
    /// `V_H`.
    pub fn values(&self) -> &[f64] {
        self.stages.last().expect("at least V_0")
    }
    pub fn stage(&self, t: usize) -> &[f64] {
        &self.stages[t]
    }
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn time_indexed_policy(&self) -> Policy<'_> {
        Policy {
            values: self,
            stationary: false,
        }
    }

    /// `pi(a|s)` from the final pass, applied at every step.
    pub fn stationary_policy(&self) -> Policy<'_> {
        Policy {
            values: self,
            stationary: true,
        }
    }
}

/// Action distributions derived from [`SoftValues`].
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    values: &'a SoftValues,
    stationary: bool,
}

impl Policy<'_> {
    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Writes `(successor, probability)` pairs for state `s` at step `t` into
    /// `out`. Probabilities are `exp(r(s) + V_{k-1}(s') - V_k(s))`, with
    /// `k = H` for the stationary policy and `k = H - t` otherwise; `V_k(s)`
    /// is exactly the log-normalizer of those terms. Cells that cannot reach
    /// the goal in `k` steps get a uniform policy.
    pub fn actions(&self, mdp: &GridMdp, t: usize, s: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let succ = mdp.successors(s);
        out.extend(succ.iter().map(|&n| (n, 0.0)));
        self.probabilities(mdp, t, s, |k, p| out[k].1 = p);
    }

    /// Calls `emit(k, p)` for each successor index `k` of `s`.
    fn probabilities(&self, mdp: &GridMdp, t: usize, s: usize, mut emit: impl FnMut(usize, f64)) {
        let succ = mdp.successors(s);
        if s == self.values.goal {
            emit(0, 1.0);
            return;
        }
        let h = self.values.horizon();
        let remaining = if self.stationary { h } else { h.saturating_sub(t) };
        let norm = if remaining == 0 {
            f64::NEG_INFINITY
        } else {
            self.values.stages[remaining][s]
        };
        if norm == f64::NEG_INFINITY {
            let p = 1.0 / succ.len() as f64;
            (0..succ.len()).for_each(|k| emit(k, p));
            return;
        }
        let next = &self.values.stages[remaining - 1];
        let r = self.values.rewards[s];
        for (k, &n) in succ.iter().enumerate() {
            emit(k, (r + next[n] - norm).exp());
        }
    }
}

/// Backward recursion `V_{t+1}(s) = logsumexp_a [r(s) + V_t(next(s, a))]`
/// from `V_0` = 0 at the goal and -inf elsewhere.
pub fn soft_value_iteration(mdp: &GridMdp, w: &RewardWeights) -> Result<SoftValues, IrlError> {
    let rewards = mdp.rewards(w)?;
    let goal = mdp.goal_index();
    let mut v0 = vec![f64::NEG_INFINITY; mdp.cells()];
    v0[goal] = 0.0;
    let mut stages = Vec::with_capacity(mdp.horizon + 1);
    stages.push(v0);
    for _ in 0..mdp.horizon {
        let prev = stages.last().expect("non-empty");
        let next: Vec<f64> = (0..mdp.cells())
            .into_par_iter()
            .map(|s| {
                if s == goal {
                    0.0
                } else {
                    logsumexp(mdp.successors(s).iter().map(|&n| rewards[s] + prev[n]))
                }
            })
            .collect();
        stages.push(next);
    }
    Ok(SoftValues { rewards, stages, goal })
}

fn check_start(mdp: &GridMdp, start: &[f64]) -> Result<(), IrlError> {
    if start.len() != mdp.cells() {
        return Err(IrlError::InvalidStart(format!("{} entries for {} cells", start.len(), mdp.cells())));
    }
    if start.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(IrlError::InvalidStart("negative or non-finite mass".into()));
    }
    let total: f64 = start.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(IrlError::InvalidStart(format!("mass sums to {total}")));
    }
    Ok(())
}

/// Occupancy distributions `D_0 ..= D_H`.
pub fn expected_svf_by_step(mdp: &GridMdp, policy: &Policy<'_>, start: &[f64]) -> Result<Vec<Vec<f64>>, IrlError> {
    check_start(mdp, start)?;
    let mut steps = Vec::with_capacity(mdp.horizon + 1);
    steps.push(start.to_vec());
    let mut flow = vec![[0.0f64; 8]; mdp.cells()];
    for t in 0..mdp.horizon {
        let current = steps.last().expect("non-empty");
        // Mass leaving each cell along each action, then gathered per target
        // in a fixed predecessor order.
        flow.par_iter_mut().enumerate().for_each(|(s, row)| {
            let mass = current[s];
            *row = [0.0; 8];
            if mass != 0.0 {
                policy.probabilities(mdp, t, s, |k, p| row[k] = mass * p);
            }
        });
        let next: Vec<f64> = (0..mdp.cells())
            .into_par_iter()
            .map(|n| mdp.predecessors[n].iter().map(|&(s, k)| flow[s][k]).sum())
            .collect();
        steps.push(next);
    }
    Ok(steps)
}

/// Expected visitation counts `D = sum_t D_t` over `t = 0..=H`.
pub fn expected_svf(mdp: &GridMdp, policy: &Policy<'_>, start: &[f64]) -> Result<Vec<f64>, IrlError> {
    let steps = expected_svf_by_step(mdp, policy, start)?;
    let mut total = vec![0.0; mdp.cells()];
    for d in &steps {
        for (t, v) in total.iter_mut().zip(d) {
            *t += v;
        }
    }
    Ok(total)
}

pub fn validate_demos(mdp: &GridMdp, demos: &[Demonstration]) -> Result<(), IrlError> {
    if demos.is_empty() {
        return Err(IrlError::NoDemonstrations);
    }
    demos.iter().enumerate().try_for_each(|(i, d)| d.validate(mdp, i))
}

/// `(1/N) sum_demos sum phi(cell)` over the cells each demo departs, which
/// is every cell but the final goal.
pub fn demo_feature_expectations(demos: &[Demonstration], mdp: &GridMdp) -> Result<Vec<f64>, IrlError> {
    validate_demos(mdp, demos)?;
    let mut mu = vec![0.0; mdp.feature_dim];
    for demo in demos {
        for &cell in &demo.path[..demo.path.len() - 1] {
            for (m, f) in mu.iter_mut().zip(mdp.phi(mdp.index(cell))) {
                *m += f;
            }
        }
    }
    let n = demos.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(mu)
}

/// Empirical distribution of demo start cells.
pub fn empirical_starts(demos: &[Demonstration], mdp: &GridMdp) -> Vec<f64> {
    let mut start = vec![0.0; mdp.cells()];
    for d in demos {
        start[mdp.index(d.start())] += 1.0;
    }
    let n = demos.len() as f64;
    start.iter_mut().for_each(|p| *p /= n);
    start
}

/// Expected departed-cell feature counts under the time-indexed policy.
pub fn expected_feature_counts(mdp: &GridMdp, values: &SoftValues, start: &[f64]) -> Result<Vec<f64>, IrlError> {
    let svf = expected_svf(mdp, &values.time_indexed_policy(), start)?;
    let goal = mdp.goal_index();
    let mut counts = vec![0.0; mdp.feature_dim];
    for (s, &d) in svf.iter().enumerate() {
        if s == goal || d == 0.0 {
            continue;
        }
        for (c, f) in counts.iter_mut().zip(mdp.phi(s)) {
            *c += d * f;
        }
    }
    Ok(counts)
}

/// Mean log-likelihood `(1/N) sum [R(path) - V_H(start)]` of the demos.
pub fn log_likelihood(mdp: &GridMdp, demos: &[Demonstration], w: &RewardWeights) -> Result<f64, IrlError> {
    validate_demos(mdp, demos)?;
    let values = soft_value_iteration(mdp, w)?;
    Ok(log_likelihood_with(mdp, demos, &values))
}

fn log_likelihood_with(mdp: &GridMdp, demos: &[Demonstration], values: &SoftValues) -> f64 {
    let total: f64 = demos
        .iter()
        .map(|d| {
            let reward: f64 = d.path[..d.path.len() - 1].iter().map(|&c| values.rewards[mdp.index(c)]).sum();
            reward - values.values()[mdp.index(d.start())]
        })
        .sum();
    total / demos.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientInfo {
    /// `mu_hat - expected - l2 * w`.
    pub gradient: Vec<f64>,
    pub demo_features: Vec<f64>,
    pub expected_features: Vec<f64>,
    pub log_likelihood: f64,
}

/// Gradient of the mean demo log-likelihood minus `l2/2 |w|^2`.
pub fn maxent_gradient(mdp: &GridMdp, demos: &[Demonstration], w: &RewardWeights, l2: f64) -> Result<GradientInfo, IrlError> {
    let demo_features = demo_feature_expectations(demos, mdp)?;
    let values = soft_value_iteration(mdp, w)?;
    let start = empirical_starts(demos, mdp);
    let expected_features = expected_feature_counts(mdp, &values, &start)?;
    let gradient = demo_features
        .iter()
        .zip(&expected_features)
        .zip(&w.values)
        .map(|((m, e), w)| m - e - l2 * w)
        .collect();
    Ok(GradientInfo {
        gradient,
        log_likelihood: log_likelihood_with(mdp, demos, &values),
        demo_features,
        expected_features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlOutcome {
    pub weights: RewardWeights,
    /// Euclidean gradient norm at each iteration, before the step.
    pub grad_norms: Vec<f64>,
    /// `|mu_hat - expected|_inf` at each iteration, before the step.
    pub moment_gaps: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
}

/// Gradient ascent from `w = 0`.
pub fn irl_train(
    mdp: &GridMdp,
    demos: &[Demonstration],
    feature_names: Vec<String>,
    config: &IrlConfig,
) -> Result<IrlOutcome, IrlError> {
    config.validate()?;
    if feature_names.len() != mdp.feature_dim {
        return Err(IrlError::WeightDimension {
            expected: mdp.feature_dim,
            found: feature_names.len(),
        });
    }
    let owned;
    let mdp = match config.horizon {
        Some(h) if h != mdp.horizon => {
            owned = mdp.with_horizon(h)?;
            &owned
        }
        _ => mdp,
    };
    validate_demos(mdp, demos)?;
    let mut weights = RewardWeights::zeros(feature_names);
    let mut outcome = IrlOutcome {
        weights: weights.clone(),
        grad_norms: Vec::with_capacity(config.iterations),
        moment_gaps: Vec::with_capacity(config.iterations),
        log_likelihoods: Vec::with_capacity(config.iterations),
    };
    for iteration in 1..=config.iterations {
        let info = maxent_gradient(mdp, demos, &weights, config.l2)?;
        if info.gradient.iter().any(|g| !g.is_finite()) {
            return Err(IrlError::Divergence { iteration });
        }
        outcome.grad_norms.push(info.gradient.iter().map(|g| g * g).sum::<f64>().sqrt());
        outcome.moment_gaps.push(
            info.demo_features
                .iter()
                .zip(&info.expected_features)
                .map(|(m, e)| (m - e).abs())
                .fold(0.0, f64::max),
        );
        outcome.log_likelihoods.push(info.log_likelihood);
        for (w, g) in weights.values.iter_mut().zip(&info.gradient) {
            *w += config.learning_rate * g;
        }
        if weights.values.iter().any(|w| !w.is_finite()) {
            return Err(IrlError::Divergence { iteration });
        }
    }
    outcome.weights = weights;
    Ok(outcome)
}

/// Samples `count` demonstrations from the time-indexed soft-optimal policy
/// of `w`, with starts drawn uniformly from non-goal cells that can reach
/// the goal within the horizon.
pub fn sample_demonstrations(
    mdp: &GridMdp,
    w: &RewardWeights,
    count: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<Demonstration>, IrlError> {
    let values = soft_value_iteration(mdp, w)?;
    let goal = mdp.goal_index();
    let starts: Vec<usize> = (0..mdp.cells())
        .filter(|&s| s != goal && values.values()[s].is_finite())
        .collect();
    if starts.is_empty() {
        return Err(IrlError::Unreachable(mdp.goal));
    }
    let policy = values.time_indexed_policy();
    let mut actions = Vec::with_capacity(9);
    let mut probs = Vec::with_capacity(9);
    let mut demos = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = starts[rng.below_usize(starts.len())];
        let mut path = vec![mdp.cell(s)];
        let mut t = 0;
        while s != goal {
            policy.actions(mdp, t, s, &mut actions);
            probs.clear();
            probs.extend(actions.iter().map(|a| a.1));
            s = actions[rng.categorical(&probs)].0;
            path.push(mdp.cell(s));
            t += 1;
        }
        demos.push(Demonstration::new(path));
    }
    Ok(demos)
}

/// Per-cell traversal costs. Finite entries are at least [`COST_EPSILON`];
/// `+inf` marks a forbidden cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMap {
    width: usize,
    height: usize,
    cost: Vec<f64>,
}

impl CostMap {
    pub fn new(width: usize, height: usize, cost: Vec<f64>) -> Result<Self, IrlError> {
        if width == 0 || height == 0 || cost.len() != width * height {
            return Err(IrlError::InvalidMdp(format!("{} costs for {}x{}", cost.len(), width, height)));
        }
        if let Some(bad) = cost.iter().find(|&&c| !(c >= COST_EPSILON)) {
            return Err(IrlError::InvalidMdp(format!("cost {bad} below {COST_EPSILON}")));
        }
        Ok(Self { width, height, cost })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Result<Self, IrlError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn costs(&self) -> &[f64] {
        &self.cost
    }
    pub fn get(&self, cell: Cell) -> f64 {
        self.cost[cell.0 * self.width + cell.1]
    }
}

/// `cost(s) = max_s' r(s') - r(s) + epsilon`.
pub fn cost_map(mdp: &GridMdp, w: &RewardWeights) -> Result<CostMap, IrlError> {
    let rewards = mdp.rewards(w)?;
    Ok(costs_from_rewards(mdp.width, mdp.height, &rewards))
}

pub fn costs_from_rewards(width: usize, height: usize, rewards: &[f64]) -> CostMap {
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    CostMap {
        width,
        height,
        cost: rewards.iter().map(|r| (max - r) + COST_EPSILON).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(width: usize, goal: Cell, horizon: usize) -> GridMdp {
        GridMdp::new(width, 1, 1, vec![1.0; width], goal, horizon).unwrap()
    }

    fn weights(values: &[f64]) -> RewardWeights {
        RewardWeights::new((0..values.len()).map(|i| format!("f{i}")).collect(), values.to_vec()).unwrap()
    }

    #[test]
    fn two_cell_strip_values() {
        let mdp = strip(2, (0, 1), 1);
        let v = soft_value_iteration(&mdp, &weights(&[0.0])).unwrap();
        assert_eq!(v.values(), &[0.0, 0.0]);
        assert_eq!(v.stage(0), &[f64::NEG_INFINITY, 0.0]);
    }

    #[test]
    fn unreachable_cells_stay_neg_infinite() {
        let mdp = strip(4, (0, 3), 2);
        let v = soft_value_iteration(&mdp, &weights(&[-1.0])).unwrap();
        assert_eq!(v.values()[0], f64::NEG_INFINITY);
        assert!(v.values().iter().all(|x| !x.is_nan()));
        let mut out = Vec::new();
        v.stationary_policy().actions(&mdp, 0, 0, &mut out);
        assert!(out.iter().all(|(_, p)| p.is_finite()));
    }

    #[test]
    fn logsumexp_bounds() {
        let mut rng = SplitMix64::new(3);
        let features: Vec<f64> = (0..25 * 2).map(|_| rng.next_f64()).collect();
        let mdp = GridMdp::new(5, 5, 2, features, (2, 2), 6).unwrap();
        let w = weights(&[-1.3, 0.4]);
        let v = soft_value_iteration(&mdp, &w).unwrap();
        let prev = v.stage(5);
        for s in 0..25 {
            if s == mdp.goal_index() || !v.values()[s].is_finite() {
                continue;
            }
            let q: Vec<f64> = mdp.successors(s).iter().map(|&n| v.rewards()[s] + prev[n]).collect();
            let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max <= v.values()[s] + 1e-12);
            assert!(v.values()[s] <= max + (q.len() as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn policy_is_shift_invariant_per_state() {
        // With two steps left, every action from s pays r(s) and no successor
        // can return to s, so shifting r(s) leaves the policy at s unchanged.
        let mut features = Vec::new();
        for s in 0..9 {
            features.extend([(s % 2) as f64, (s % 3) as f64, if s == 0 { 1.0 } else { 0.0 }]);
        }
        let mdp = GridMdp::new(3, 3, 3, features, (1, 2), 4).unwrap();
        let policy_at_corner = |shift: f64| {
            let v = soft_value_iteration(&mdp, &weights(&[-0.5, -1.0, shift])).unwrap();
            let mut out = Vec::new();
            v.time_indexed_policy().actions(&mdp, 2, 0, &mut out);
            out
        };
        let base = policy_at_corner(0.0);
        assert!(base.iter().filter(|a| a.1 > 0.0).count() >= 2);
        for shift in [-3.0, 2.5] {
            for ((n1, p1), (n2, p2)) in base.iter().zip(&policy_at_corner(shift)) {
                assert_eq!(n1, n2);
                assert!((p1 - p2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svf_at_goal_and_mass_conservation() {
        let mdp = GridMdp::new(3, 3, 1, vec![1.0; 9], (1, 1), 5).unwrap();
        let v = soft_value_iteration(&mdp, &weights(&[-0.7])).unwrap();
        let mut start = vec![0.0; 9];
        start[4] = 1.0;
        let d = expected_svf(&mdp, &v.time_indexed_policy(), &start).unwrap();
        assert_eq!(d[4], 6.0);
        assert_eq!(d.iter().sum::<f64>(), 6.0);
        let uniform = vec![1.0 / 9.0; 9];
        for policy in [v.time_indexed_policy(), v.stationary_policy()] {
            for step in expected_svf_by_step(&mdp, &policy, &uniform).unwrap() {
                assert!((step.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(expected_svf(&mdp, &v.stationary_policy(), &[0.5; 9]).is_err());
    }

    #[test]
    fn demo_expectations_hand_cases() {
        let mdp = GridMdp::new(3, 1, 2, vec![1.0, 0.5, 2.0, -1.0, 0.0, 3.0], (0, 2), 4).unwrap();
        let demo = Demonstration::new(vec![(0, 0), (0, 1), (0, 2)]);
        // Departed cells (0,0) and (0,1): [1 + 2, 0.5 - 1].
        let mu = demo_feature_expectations(std::slice::from_ref(&demo), &mdp).unwrap();
        assert_eq!(mu, vec![3.0, -0.5]);
        let twice = demo_feature_expectations(&[demo.clone(), demo], &mdp).unwrap();
        assert_eq!(twice, mu);

        let sem = SemanticRaster::new(4, 1, vec![1, 1, 1, 0]).unwrap();
        let mdp = GridMdp::from_semantic(&sem, 2, (0, 3), 8).unwrap();
        let demo = Demonstration::new(vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
        assert_eq!(demo_feature_expectations(&[demo], &mdp).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn demo_validation_names_step() {
        let mdp = strip(4, (0, 3), 5);
        let jump = Demonstration::new(vec![(0, 0), (0, 2), (0, 3)]);
        assert!(matches!(jump.validate(&mdp, 4), Err(IrlError::InvalidDemonstration { demo: 4, step: 1, .. })));
        let wrong_goal = Demonstration::new(vec![(0, 0), (0, 1)]);
        assert!(matches!(wrong_goal.validate(&mdp, 0), Err(IrlError::InvalidDemonstration { step: 1, .. })));
        let long = GridMdp::new(4, 1, 1, vec![1.0; 4], (0, 3), 2).unwrap();
        let ok = Demonstration::new(vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
        assert!(ok.validate(&mdp, 0).is_ok());
        assert!(ok.validate(&long, 0).is_err());
        assert_eq!(demo_feature_expectations(&[], &mdp), Err(IrlError::NoDemonstrations));
    }

    #[test]
    fn zero_iterations_gives_zero_weights() {
        let mdp = strip(3, (0, 2), 4);
        let demo = Demonstration::new(vec![(0, 0), (0, 1), (0, 2)]);
        let config = IrlConfig {
            iterations: 0,
            ..IrlConfig::default()
        };
        let out = irl_train(&mdp, &[demo], vec!["a".into()], &config).unwrap();
        assert_eq!(out.weights.values, vec![0.0]);
        assert!(out.grad_norms.is_empty());
    }

    #[test]
    fn cost_map_cases() {
        let c = costs_from_rewards(2, 1, &[0.0, -2.0]);
        assert_eq!(c.costs(), &[COST_EPSILON, 2.0 + COST_EPSILON]);
        let u = costs_from_rewards(3, 1, &[-0.4; 3]);
        assert!(u.costs().iter().all(|&v| v == COST_EPSILON));
        let r = [0.3, -1.0, 0.9, 0.1];
        let c = costs_from_rewards(2, 2, &r);
        let argmin = (0..4).min_by(|&a, &b| c.costs()[a].total_cmp(&c.costs()[b])).unwrap();
        assert_eq!(argmin, 2);
        assert!(CostMap::new(1, 1, vec![0.0]).is_err());
        assert!(CostMap::new(1, 1, vec![f64::INFINITY]).is_ok());
    }

    #[test]
    fn weights_json_round_trip() {
        let w = weights(&[0.25, -1.5]);
        assert_eq!(RewardWeights::from_json(&w.to_json()).unwrap(), w);
        assert!(w.to_json().starts_with("{\"features\":"));
        assert!(RewardWeights::from_json("{\"features\":[\"a\"],\"weights\":[]}").is_err());
    }

    #[test]
    fn demo_set_json_shape() {
        let set: DemoSet = serde_json::from_str(r#"{"goal":[1,2],"paths":[[[0,0],[1,1],[1,2]]]}"#).unwrap();
        assert_eq!(set.goal, (1, 2));
        assert_eq!(set.demonstrations()[0].path[1], (1, 1));
    }

    #[test]
    fn sampled_demos_are_valid() {
        let mut rng = SplitMix64::new(9);
        let features: Vec<f64> = (0..36).map(|_| rng.next_f64()).collect();
        let mdp = GridMdp::new(6, 6, 1, features, (5, 0), 12).unwrap();
        let demos = sample_demonstrations(&mdp, &weights(&[-1.0]), 50, &mut rng).unwrap();
        validate_demos(&mdp, &demos).unwrap();
    }
}
