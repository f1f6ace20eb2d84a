//! Unconstrained feature model training with a standard, a fixed-ETF and an
//! implicit nearest-ETF classifier.
//!
//! Features are free `d×N` parameters kept on the unit sphere. In the ETF
//! modes the classifier is `W = M̄Uᵀ` with `M̄` the unit-column simplex ETF
//! and the logits are centred on the global mean, `ψ_i = τW(h_i − h_G)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddn::dy_dh;
use crate::error::{Error, Result};
use crate::etf::{cosine_margins, unit_column_etf, CosineMargins, NcMetricsRecord};
use crate::nearest_etf::{initialize_directions, solve_nearest_etf, InitScheme, NearestEtfProblem, DEFAULT_DELTA};
use crate::stiefel::{StiefelPoint, TrustRegionOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    FixedEtf,
    ImplicitEtf,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Standard, Mode::FixedEtf, Mode::ImplicitEtf];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::FixedEtf => "fixed_etf",
            Mode::ImplicitEtf => "implicit_etf",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
    Stratified {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Step size for the features, applied to the per-sample gradient
    /// `B·∂L/∂h_i` for a batch of `B` samples so it does not scale with `N`.
    pub learning_rate: f64,
    /// Step size for `W` and `b` in standard mode.
    pub classifier_learning_rate: f64,
    pub tau: f64,
    pub delta: f64,
    pub batch: BatchMode,
    pub seed: u64,
    pub init_scheme: InitScheme,
    pub use_ddn_vjp: bool,
    /// NC metrics are computed every `log_interval` iterations and at the end.
    pub log_interval: usize,
    /// Wall-clock timing of inner solves. Off by default so traces are
    /// reproducible byte for byte.
    pub record_timing: bool,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.01,
            classifier_learning_rate: 0.01,
            tau: 5.0,
            delta: DEFAULT_DELTA,
            batch: BatchMode::Full,
            seed: 0,
            init_scheme: InitScheme::Canonical,
            use_ddn_vjp: true,
            log_interval: 1,
            record_timing: false,
            solver_tol: 1e-8,
            solver_max_iter: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for lr in [self.learning_rate, self.classifier_learning_rate] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Domain("learning rates must be finite and nonnegative".into()));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Domain("tau must be positive".into()));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Domain("delta must be nonnegative".into()));
        }
        if let BatchMode::Stratified { size: 0 } = self.batch {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Domain("log interval must be at least 1".into()));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::Domain("solver tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> TrustRegionOptions {
        TrustRegionOptions { tol: self.solver_tol, max_iter: self.solver_max_iter, ..Default::default() }
    }
}

/// Free features plus the classifier they are trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct UfmModel {
    pub mode: Mode,
    pub num_classes: usize,
    /// `d×N`, unit-norm columns.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// `C×d`. Derived from the ETF direction in the ETF modes.
    pub classifier: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Current ETF direction (fixed or implicit modes).
    pub direction: Option<StiefelPoint>,
}

/// Labels `0, 1, …, C−1, 0, 1, …` for `n` samples.
pub fn balanced_labels(n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|i| i % c).collect()
}

fn normalise_columns(h: &mut DMatrix<f64>) -> Result<()> {
    for (i, mut col) in h.column_iter_mut().enumerate() {
        let n = col.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain(format!("feature {i} has zero or non-finite norm")));
        }
        col.unscale_mut(n);
    }
    Ok(())
}

fn normalise_rows(w: &mut DMatrix<f64>) -> Result<()> {
    for (i, mut row) in w.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain(format!("classifier row {i} has zero or non-finite norm")));
        }
        row.unscale_mut(n);
    }
    Ok(())
}

impl UfmModel {
    /// Gaussian features projected to the sphere; a Gaussian classifier with
    /// unit rows in standard mode. The ETF direction is filled in by
    /// [`Trainer::new`].
    pub fn random(d: usize, c: usize, n: usize, mode: Mode, rng: &mut impl Rng) -> Result<Self> {
        if c < 2 || d < c || n < c {
            return Err(Error::Dimension(format!("need 2 <= C <= d and N >= C, got d={d} C={c} N={n}")));
        }
        let mut features = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalise_columns(&mut features)?;
        let mut classifier = DMatrix::from_fn(c, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalise_rows(&mut classifier)?;
        Self::from_parts(features, balanced_labels(n, c), c, mode, classifier)
    }

    pub fn from_parts(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        mode: Mode,
        classifier: DMatrix<f64>,
    ) -> Result<Self> {
        if labels.len() != features.ncols() {
            return Err(Error::Dimension("one label per feature column".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!("label {y} out of range for {num_classes} classes")));
        }
        if classifier.shape() != (num_classes, features.nrows()) {
            return Err(Error::Dimension("classifier must be C×d".into()));
        }
        Ok(Self {
            mode,
            num_classes,
            features,
            labels,
            classifier,
            bias: DVector::zeros(num_classes),
            direction: None,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.features.nrows(), self.num_classes, self.features.ncols())
    }
}

/// `τ(WH + b1ᵀ)`.
pub fn logits(w: &DMatrix<f64>, b: &DVector<f64>, h: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut z = w * h;
    for mut col in z.column_iter_mut() {
        col += b;
    }
    z * tau
}

/// Column `i` is `τ M̄ Uᵀ (h_i − h_G)`.
pub fn implicit_logits(u_star: &StiefelPoint, h: &DMatrix<f64>, h_g: &DVector<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let (w, b) = etf_classifier(u_star, h_g)?;
    Ok(logits(&w, &b, h, tau))
}

/// `W = M̄Uᵀ`, `b = −W h_G`.
pub fn etf_classifier(u: &StiefelPoint, h_g: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (_, c) = u.dims();
    let w = unit_column_etf(c)? * u.matrix().transpose();
    let b = -(&w * h_g);
    Ok((w, b))
}

/// `(max, log Σ exp(z − max))`, with the leading term split off so tiny
/// tails survive.
fn log_softmax_column(z: nalgebra::DVectorView<f64>) -> (f64, f64) {
    let top = z.imax();
    let m = z[top];
    let rest = z.iter().enumerate().filter(|&(c, _)| c != top).map(|(_, v)| (v - m).exp()).sum::<f64>();
    (m, rest.ln_1p())
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let col = logits.column(i);
        let (m, lse) = log_softmax_column(col);
        total += (m - col[y]) + lse;
    }
    total / labels.len() as f64
}

/// Cross-entropy and its gradient `(softmax − onehot)/N` with respect to the
/// logits.
pub fn cross_entropy_with_grad(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = labels.len() as f64;
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let col = logits.column(i);
        let (m, lse) = log_softmax_column(col);
        total += (m - col[y]) + lse;
        for c in 0..col.len() {
            grad[(c, i)] = (col[c] - m - lse).exp() / n;
        }
        grad[(y, i)] -= 1.0 / n;
    }
    (total / n, grad)
}

/// Fraction of columns whose largest logit (lowest index on ties) is the label.
pub fn top1_accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let col = logits.column(i);
            let mut best = 0;
            for c in 1..col.len() {
                if col[c] > col[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Cross-entropy of the exactly collapsed configuration: every feature on its
/// class vertex of the unit-column ETF and the classifier equal to its dual.
pub fn collapse_lower_bound(c: usize, tau: f64) -> Result<f64> {
    let m = unit_column_etf(c)?;
    let labels: Vec<usize> = (0..c).collect();
    let z = m.transpose() * &m * tau;
    Ok(cross_entropy(&z, &labels))
}

/// Exponential moving average of the normalised centred means.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub h_tilde: DMatrix<f64>,
    /// Running global mean, averaged with the same schedule.
    pub global_mean: DVector<f64>,
    pub step: usize,
    pub alpha: f64,
    pub alpha_floor: f64,
}

impl EmaState {
    pub const ALPHA_FLOOR: f64 = 1e-4;

    pub fn new(d: usize, c: usize) -> Self {
        Self {
            h_tilde: DMatrix::zeros(d, c),
            global_mean: DVector::zeros(d),
            step: 0,
            alpha: 1.0,
            alpha_floor: Self::ALPHA_FLOOR,
        }
    }

    pub fn alpha_at(step: usize, floor: f64) -> f64 {
        (2.0 / (step as f64 + 1.0)).max(floor)
    }

    /// Returns the updated state and the pre-normalisation norm.
    pub fn update(&self, h_tilde_batch: &DMatrix<f64>, global_mean_batch: &DVector<f64>) -> Result<(Self, f64)> {
        if h_tilde_batch.shape() != self.h_tilde.shape() {
            return Err(Error::Dimension("EMA input shape mismatch".into()));
        }
        let step = self.step + 1;
        let alpha = Self::alpha_at(step, self.alpha_floor);
        let raw = h_tilde_batch * alpha + &self.h_tilde * (1.0 - alpha);
        let norm = raw.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateFeatures);
        }
        let global_mean = global_mean_batch * alpha + &self.global_mean * (1.0 - alpha);
        Ok((Self { h_tilde: raw / norm, global_mean, step, alpha, alpha_floor: self.alpha_floor }, norm))
    }
}

/// Endless sequence of mini-batches. With `batch_size ≥ C` every batch holds
/// every class: each epoch deals the shuffled samples of each class
/// round-robin over the batches and tops up any batch a class did not reach
/// with a random sample of it. Smaller batches are plain shuffled chunks.
#[derive(Debug, Clone)]
pub struct StratifiedBatches {
    by_class: Vec<Vec<usize>>,
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: std::collections::VecDeque<Vec<usize>>,
}

pub fn stratified_batches(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<StratifiedBatches> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Domain(format!("label {y} out of range")))?
            .push(i);
    }
    Ok(StratifiedBatches {
        by_class,
        n: labels.len(),
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: Default::default(),
    })
}

impl StratifiedBatches {
    fn refill(&mut self) {
        let present: Vec<usize> = (0..self.by_class.len()).filter(|&c| !self.by_class[c].is_empty()).collect();
        let nb = self.n.div_ceil(self.batch_size).max(1);
        if self.batch_size < present.len() {
            let mut all: Vec<usize> = (0..self.n).collect();
            all.shuffle(&mut self.rng);
            self.pending.extend(all.chunks(self.batch_size).map(|c| c.to_vec()));
            return;
        }
        let mut batches = vec![Vec::with_capacity(self.batch_size + present.len()); nb];
        let mut slot = self.rng.random_range(0..nb);
        for &c in &present {
            let mut idx = self.by_class[c].clone();
            idx.shuffle(&mut self.rng);
            let mut seen = vec![false; nb];
            for i in idx {
                batches[slot].push(i);
                seen[slot] = true;
                slot = (slot + 1) % nb;
            }
            for (b, hit) in seen.into_iter().enumerate() {
                if !hit {
                    let members = &self.by_class[c];
                    batches[b].push(members[self.rng.random_range(0..members.len())]);
                }
            }
        }
        self.pending.extend(batches);
    }
}

impl Iterator for StratifiedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.n == 0 {
            return None;
        }
        if self.pending.is_empty() {
            self.refill();
        }
        self.pending.pop_front()
    }
}

/// Global mean, centred class means (zero for classes absent from `labels`)
/// and per-class counts.
fn centred_means(h: &DMatrix<f64>, labels: &[usize], c: usize) -> (DVector<f64>, DMatrix<f64>, Vec<usize>) {
    let d = h.nrows();
    let mut sums = DMatrix::zeros(d, c);
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        let mut col = sums.column_mut(y);
        col += h.column(i);
        counts[y] += 1;
    }
    let h_g = h.column_sum() / h.ncols() as f64;
    let mut centred = DMatrix::zeros(d, c);
    for k in 0..c {
        if counts[k] > 0 {
            let m = sums.column(k) / counts[k] as f64 - &h_g;
            centred.set_column(k, &m);
        }
    }
    (h_g, centred, counts)
}

/// Removes the component along the unit-norm `x` and divides by `norm`: the
/// pullback of a gradient through `v ↦ v/‖v‖` at `v = norm·x`.
fn normalisation_pullback(g: &DMatrix<f64>, x: &DMatrix<f64>, norm: f64) -> DMatrix<f64> {
    (g - x * g.dot(x)) / norm
}

/// Outcome of one training step, measured before the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub accuracy: f64,
    /// Norm of the feature gradient tangent to the sphere.
    pub feature_grad_norm: f64,
    pub inner_iterations: usize,
    pub inner_time: Option<f64>,
    pub warning: Option<String>,
}

/// Classifier, loss and gradients for one batch; nothing is committed.
struct StepPlan {
    batch: Vec<usize>,
    loss: f64,
    accuracy: f64,
    grad_h: DMatrix<f64>,
    classifier: DMatrix<f64>,
    bias: DVector<f64>,
    grad_w: Option<(DMatrix<f64>, DVector<f64>)>,
    direction: Option<StiefelPoint>,
    ema: Option<EmaState>,
    inner_iterations: usize,
    inner_time: Option<f64>,
    warning: Option<String>,
}

/// One snapshot of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub train_top1: f64,
    pub metrics: Option<NcMetricsRecord>,
    pub inner_solve_iterations: usize,
    pub inner_solve_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub mode: Mode,
    pub rows: Vec<TraceRow>,
    /// First iteration whose full-data accuracy is 1.
    pub first_perfect_iteration: Option<usize>,
    pub final_margins: Option<CosineMargins>,
    pub warnings: Vec<String>,
}

impl TrainTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("a trace holds at least the final row")
    }
}

/// Owns one run: model, EMA, batch stream and the proximal direction.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: UfmModel,
    config: TrainConfig,
    ema: Option<EmaState>,
    batches: Option<StratifiedBatches>,
    u_prox: Option<StiefelPoint>,
    m_bar: DMatrix<f64>,
    step: usize,
}

impl Trainer {
    /// Seeds the ETF direction from the initial features when the mode needs one.
    pub fn new(mut model: UfmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (d, c, _) = model.dims();
        let m_bar = unit_column_etf(c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7f0);
        let mut u_prox = None;
        match model.mode {
            Mode::Standard => {}
            Mode::FixedEtf => {
                let u = match config.init_scheme {
                    InitScheme::Canonical => StiefelPoint::canonical(d, c)?,
                    InitScheme::HaarRandom => StiefelPoint::haar_random(d, c, &mut rng)?,
                };
                model.direction = Some(u);
            }
            Mode::ImplicitEtf => {
                let (_, centred, _) = centred_means(&model.features, &model.labels, c);
                let norm = centred.norm();
                if norm == 0.0 {
                    return Err(Error::DegenerateFeatures);
                }
                let (u_init, prox) =
                    initialize_directions(&(centred / norm), config.init_scheme, &mut rng, &config.solver_options())?;
                model.direction = Some(u_init);
                u_prox = Some(prox);
            }
        }
        if let Some(u) = &model.direction {
            let h_g = model.features.column_sum() / model.features.ncols() as f64;
            let (w, b) = etf_classifier(u, &h_g)?;
            model.classifier = w;
            model.bias = b;
        }
        let batches = match config.batch {
            BatchMode::Full => None,
            BatchMode::Stratified { size } => Some(stratified_batches(&model.labels, c, size, config.seed)?),
        };
        let ema = batches.as_ref().map(|_| EmaState::new(d, c));
        Ok(Self { model, config, ema, batches, u_prox, m_bar, step: 0 })
    }

    pub fn model(&self) -> &UfmModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ema(&self) -> Option<&EmaState> {
        self.ema.as_ref()
    }

    pub fn u_prox(&self) -> Option<&StiefelPoint> {
        self.u_prox.as_ref()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn plan(&self, batch: Vec<usize>, features: &DMatrix<f64>, opts: &TrustRegionOptions) -> Result<StepPlan> {
        let c = self.model.num_classes;
        let tau = self.config.tau;
        let labels: Vec<usize> = batch.iter().map(|&i| self.model.labels[i]).collect();
        let h = features.select_columns(&batch);
        let nb = batch.len() as f64;
        let (h_g_batch, centred, counts) = centred_means(&h, &labels, c);
        let centred_norm = centred.norm();

        if self.model.mode == Mode::Standard {
            let (w, b) = (&self.model.classifier, &self.model.bias);
            let z = logits(w, b, &h, tau);
            let (loss, e) = cross_entropy_with_grad(&z, &labels);
            let grad_w = (&h * e.transpose()).transpose() * tau;
            let grad_b = e.column_sum() * tau;
            return Ok(StepPlan {
                batch,
                loss,
                accuracy: top1_accuracy(&z, &labels),
                grad_h: w.transpose() * &e * tau,
                classifier: w.clone(),
                bias: b.clone(),
                grad_w: Some((grad_w, grad_b)),
                direction: None,
                ema: None,
                inner_iterations: 0,
                inner_time: None,
                warning: None,
            });
        }

        let degenerate = centred_norm == 0.0 || !centred_norm.is_finite();
        let h_tilde_batch = &centred / centred_norm;
        // the full-batch path uses the exact statistics (equivalent to α = 1)
        let (ema, alpha, h_tilde, ema_norm, h_g) = match &self.ema {
            // a single-class batch carries no direction: keep the running
            // H̃ and only advance the global mean
            Some(state) if degenerate && state.step > 0 => {
                let step = state.step + 1;
                let alpha = EmaState::alpha_at(step, state.alpha_floor);
                let hg = &h_g_batch * alpha + &state.global_mean * (1.0 - alpha);
                let next = EmaState { global_mean: hg.clone(), step, alpha, ..state.clone() };
                (Some(next), alpha, state.h_tilde.clone(), 1.0, hg)
            }
            _ if degenerate => return Err(Error::DegenerateFeatures),
            Some(state) => {
                let (next, norm) = state.update(&h_tilde_batch, &h_g_batch)?;
                let (alpha, ht, hg) = (next.alpha, next.h_tilde.clone(), next.global_mean.clone());
                (Some(next), alpha, ht, norm, hg)
            }
            None => (None, 1.0, h_tilde_batch.clone(), 1.0, h_g_batch.clone()),
        };

        let mut inner_iterations = 0;
        let mut inner_time = None;
        let mut warning = None;
        let mut problem = None;
        let u = match self.model.mode {
            Mode::FixedEtf => self.model.direction.clone().expect("fixed direction is set at construction"),
            _ => {
                let prox = self.u_prox.clone().expect("implicit mode keeps a proximal direction");
                let p = NearestEtfProblem::new(h_tilde.clone(), self.config.delta, prox)?;
                let start = self.model.direction.as_ref().expect("implicit mode keeps a direction");
                let t0 = Instant::now();
                let sol = solve_nearest_etf(&p, start, opts)?;
                if self.config.record_timing {
                    inner_time = Some(t0.elapsed().as_secs_f64());
                }
                inner_iterations = sol.report.iterations;
                if !sol.report.converged {
                    warning = Some(format!(
                        "inner solve stopped at Riemannian gradient norm {:.3e}",
                        sol.report.riemannian_grad_norm
                    ));
                }
                problem = Some(p);
                sol.u_star
            }
        };
        let (w, b) = etf_classifier(&u, &h_g)?;
        let z = logits(&w, &b, &h, tau);
        let (loss, e) = cross_entropy_with_grad(&z, &labels);

        // direct path, including the dependence of h_G on the batch
        let wt_e = w.transpose() * &e * tau;
        let through_mean = wt_e.column_sum() * (alpha / nb);
        let mut grad_h = wt_e;
        for mut col in grad_h.column_iter_mut() {
            col -= &through_mean;
        }

        if let (Some(p), true, false) = (&problem, self.config.use_ddn_vjp, degenerate) {
            // E (H − h_G 1ᵀ)ᵀ, without forming Hᵀ
            let grad_w = ((&h * e.transpose()).transpose() - e.column_sum() * h_g.transpose()) * tau;
            let grad_u = grad_w.transpose() * &self.m_bar;
            let jac = dy_dh(p, &u)?;
            if let Some(msg) = jac.stationarity_warning() {
                warning.get_or_insert(msg);
            }
            let g_used = jac.vjp(&grad_u)?;
            let g_batch = if self.ema.is_some() {
                normalisation_pullback(&g_used, &h_tilde, ema_norm) * alpha
            } else {
                g_used
            };
            let g_bar = normalisation_pullback(&g_batch, &h_tilde_batch, centred_norm);
            let mut shared = DVector::zeros(h.nrows());
            for k in 0..c {
                if counts[k] > 0 {
                    shared += g_bar.column(k);
                }
            }
            shared /= nb;
            for (i, &y) in labels.iter().enumerate() {
                let mut col = grad_h.column_mut(i);
                col += g_bar.column(y) / counts[y] as f64;
                col -= &shared;
            }
        }

        Ok(StepPlan {
            batch,
            loss,
            accuracy: top1_accuracy(&z, &labels),
            grad_h,
            classifier: w,
            bias: b,
            grad_w: None,
            direction: Some(u),
            ema,
            inner_iterations,
            inner_time,
            warning,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match &mut self.batches {
            Some(b) => b.next().expect("batch stream is endless"),
            None => (0..self.model.features.ncols()).collect(),
        }
    }

    /// Loss and feature gradient of the full-batch objective at `features`,
    /// with the current proximal direction and warm start held fixed.
    pub fn loss_and_feature_gradient(&self, features: &DMatrix<f64>, opts: &TrustRegionOptions) -> Result<(f64, DMatrix<f64>)> {
        if self.batches.is_some() {
            return Err(Error::Domain("defined for full-batch training only".into()));
        }
        if features.shape() != self.model.features.shape() {
            return Err(Error::Dimension("feature shape mismatch".into()));
        }
        let plan = self.plan((0..features.ncols()).collect(), features, opts)?;
        Ok((plan.loss, plan.grad_h))
    }

    /// Computes the classifier and gradients for the next batch, then takes a
    /// gradient step. On error the trainer is left as it was.
    pub fn train_step(&mut self) -> Result<StepOutput> {
        self.step_inner().map(|(out, _, _)| out)
    }

    /// As [`Self::train_step`], also returning the classifier used.
    fn step_inner(&mut self) -> Result<(StepOutput, DMatrix<f64>, DVector<f64>)> {
        let saved = self.batches.clone();
        let batch = self.next_batch();
        let plan = match self.plan(batch, &self.model.features, &self.config.solver_options()) {
            Ok(p) => p,
            Err(e) => {
                self.batches = saved;
                return Err(e);
            }
        };
        let lr = self.config.learning_rate * plan.batch.len() as f64;
        let lr_w = self.config.classifier_learning_rate;
        // duplicated samples (stratified top-up) accumulate their gradients
        let mut per_sample: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
        for (k, &i) in plan.batch.iter().enumerate() {
            per_sample
                .entry(i)
                .and_modify(|g| *g += plan.grad_h.column(k))
                .or_insert_with(|| plan.grad_h.column(k).clone_owned());
        }
        // radial components are discarded by the renormalisation, so only the
        // tangential part of each gradient is applied
        let mut features = self.model.features.clone();
        let mut grad_norm_sq = 0.0;
        let mut updated = Vec::with_capacity(per_sample.len());
        for (&i, g) in &per_sample {
            let h = features.column(i).clone_owned();
            let tangent = g - &h * h.dot(g);
            grad_norm_sq += tangent.norm_squared();
            if lr != 0.0 {
                features.column_mut(i).axpy(-lr, &tangent, 1.0);
                updated.push(i);
            }
        }
        let mut touched = features.select_columns(&updated);
        if let Err(e) = normalise_columns(&mut touched) {
            self.batches = saved;
            return Err(e);
        }
        for (k, &i) in updated.iter().enumerate() {
            features.set_column(i, &touched.column(k));
        }
        let (used_w, used_b) = (plan.classifier, plan.bias);
        let (mut classifier, mut bias) = (used_w.clone(), used_b.clone());
        if let (Some((gw, gb)), true) = (&plan.grad_w, lr_w != 0.0) {
            for (j, mut row) in classifier.row_iter_mut().enumerate() {
                let w = row.clone_owned();
                let g = gw.row(j);
                let tangent = &g - &w * w.dot(&g);
                row.copy_from(&(w - tangent * lr_w));
            }
            bias -= gb * lr_w;
            if let Err(e) = normalise_rows(&mut classifier) {
                self.batches = saved;
                return Err(e);
            }
        }

        self.model.features = features;
        self.model.classifier = classifier;
        self.model.bias = bias;
        if let Some(ema) = plan.ema {
            self.ema = Some(ema);
        }
        if self.model.mode == Mode::ImplicitEtf {
            self.u_prox = plan.direction.clone();
        }
        if plan.direction.is_some() {
            self.model.direction = plan.direction;
        }
        self.step += 1;
        let out = StepOutput {
            loss: plan.loss,
            accuracy: plan.accuracy,
            feature_grad_norm: grad_norm_sq.sqrt(),
            inner_iterations: plan.inner_iterations,
            inner_time: plan.inner_time,
            warning: plan.warning,
        };
        Ok((out, used_w, used_b))
    }

    /// Classifier for the current features on the full data set, without
    /// moving the proximal direction.
    pub fn current_classifier(&self) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
        let h = &self.model.features;
        let h_g = h.column_sum() / h.ncols() as f64;
        match self.model.mode {
            Mode::Standard => Ok((self.model.classifier.clone(), self.model.bias.clone(), 0)),
            Mode::FixedEtf => {
                let (w, b) = etf_classifier(self.model.direction.as_ref().expect("fixed direction"), &h_g)?;
                Ok((w, b, 0))
            }
            Mode::ImplicitEtf => {
                let (_, centred, _) = centred_means(h, &self.model.labels, self.model.num_classes);
                let norm = centred.norm();
                if norm == 0.0 {
                    return Err(Error::DegenerateFeatures);
                }
                let prox = self.u_prox.clone().expect("implicit mode keeps a proximal direction");
                let p = NearestEtfProblem::new(centred / norm, self.config.delta, prox)?;
                let start = self.model.direction.as_ref().expect("implicit direction");
                let sol = solve_nearest_etf(&p, start, &self.config.solver_options())?;
                let (w, b) = etf_classifier(&sol.u_star, &h_g)?;
                Ok((w, b, sol.report.iterations))
            }
        }
    }

    /// Full-data loss, accuracy and (optionally) NC metrics for the current state.
    pub fn evaluate(&self, with_metrics: bool) -> Result<(f64, f64, Option<NcMetricsRecord>, usize)> {
        let (w, b, iters) = self.current_classifier()?;
        let h = &self.model.features;
        let z = logits(&w, &b, h, self.config.tau);
        let loss = cross_entropy(&z, &self.model.labels);
        let acc = top1_accuracy(&z, &self.model.labels);
        let metrics = if with_metrics { Some(NcMetricsRecord::compute(&w, &b, h, &self.model.labels)?) } else { None };
        Ok((loss, acc, metrics, iters))
    }

    /// Runs `config.iterations` steps. Row `t` describes the model after `t`
    /// updates together with the classifier of step `t`; metrics are attached
    /// every `log_interval` rows and on the last one.
    pub fn train(mut self) -> Result<(TrainTrace, UfmModel)> {
        let total = self.config.iterations;
        let every = self.config.log_interval;
        let full = self.batches.is_none();
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        let mut first_perfect = None;
        for t in 0..total {
            let log = t % every == 0;
            let row = if full {
                let before = log.then(|| self.model.features.clone());
                let (out, w, b) = self.step_inner()?;
                let metrics = match before {
                    Some(h) => Some(NcMetricsRecord::compute(&w, &b, &h, &self.model.labels)?),
                    None => None,
                };
                if let Some(msg) = &out.warning {
                    warnings.push(format!("iteration {t}: {msg}"));
                }
                TraceRow {
                    iteration: t,
                    loss: out.loss,
                    train_top1: out.accuracy,
                    metrics,
                    inner_solve_iterations: out.inner_iterations,
                    inner_solve_time: out.inner_time,
                }
            } else {
                let (loss, acc, metrics, _) = self.evaluate(log)?;
                let out = self.train_step()?;
                if let Some(msg) = &out.warning {
                    warnings.push(format!("iteration {t}: {msg}"));
                }
                TraceRow {
                    iteration: t,
                    loss,
                    train_top1: acc,
                    metrics,
                    inner_solve_iterations: out.inner_iterations,
                    inner_solve_time: out.inner_time,
                }
            };
            if first_perfect.is_none() && row.train_top1 == 1.0 {
                first_perfect = Some(t);
            }
            if log {
                rows.push(row);
            }
        }
        let (w, b, iters) = self.current_classifier()?;
        let h = &self.model.features;
        let z = logits(&w, &b, h, self.config.tau);
        let acc = top1_accuracy(&z, &self.model.labels);
        if first_perfect.is_none() && acc == 1.0 {
            first_perfect = Some(total);
        }
        let metrics = NcMetricsRecord::compute(&w, &b, h, &self.model.labels)?;
        let final_margins = Some(cosine_margins(&w, h, &self.model.labels)?);
        rows.push(TraceRow {
            iteration: total,
            loss: cross_entropy(&z, &self.model.labels),
            train_top1: acc,
            metrics: Some(metrics),
            inner_solve_iterations: iters,
            inner_solve_time: None,
        });
        warnings.truncate(64);
        let mode = self.model.mode;
        Ok((TrainTrace { mode, rows, first_perfect_iteration: first_perfect, final_margins, warnings }, self.model))
    }
}
