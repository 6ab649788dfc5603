//! Training loops: cached TSGO sweeps, the Adam baseline, the Adam to TSGO
//! switch protocol, and the length-scan experiment runner.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::feature_map::EmbeddedSample;
use crate::linalg::{dot, DenseTensor};
use crate::loss::{
    all_site_gradients, assemble_center_gradient, clamp_amplitudes, log_amplitudes,
    nll_from_amplitudes, sample_term,
};
use crate::mps::{apply_left, apply_right, shift_left, shift_right, LogAmplitude, Mps, ScaledVec};
use crate::optim::{
    adam_step, rotate_tensor, AdamConfig, AdamState, StepDirection, TsgoState, DEFAULT_MIN_THETA,
    DEFAULT_SHRINK,
};

/// Relative rise over the best loss so far that marks an Adam run unstable.
pub const INSTABILITY_TOLERANCE: f64 = 0.01;
/// Epoch distance used by the relative-change convergence test.
pub const CONVERGENCE_WINDOW: usize = 3;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-4;
pub const DEFAULT_EPOCH_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Tsgo,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tsgo => "tsgo",
            Self::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsgo" => Ok(Self::Tsgo),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}' (expected tsgo or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepPattern {
    /// Left to right then back, one update per visited site.
    #[default]
    Roundtrip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub theta0: f64,
    pub shrink_factor: f64,
    pub min_theta: f64,
    /// Keeps theta constant, disabling the shrink schedule.
    pub fixed_angle: Option<f64>,
    pub direction: StepDirection,
    /// Revert an epoch whose loss went up, in addition to shrinking theta.
    pub rollback: bool,
    pub adam: AdamConfig,
    pub max_bond: usize,
    /// Adam minibatch size; `None` means full batch. TSGO is always full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub sweep: SweepPattern,
    /// Number of Adam epochs before switching to TSGO.
    pub switch_epoch: Option<usize>,
    /// Stop once the relative loss change over `CONVERGENCE_WINDOW` epochs
    /// drops below this value.
    pub early_stop: Option<f64>,
    /// When false, the elapsed-time column is written as 0.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Tsgo,
            epochs: DEFAULT_EPOCH_CAP,
            theta0: std::f64::consts::FRAC_PI_6,
            shrink_factor: DEFAULT_SHRINK,
            min_theta: DEFAULT_MIN_THETA,
            fixed_angle: None,
            direction: StepDirection::Unit,
            rollback: false,
            adam: AdamConfig::default(),
            max_bond: 16,
            batch_size: None,
            seed: 0,
            sweep: SweepPattern::Roundtrip,
            switch_epoch: None,
            early_stop: None,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.max_bond == 0 {
            return bad("max bond must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1".into());
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.adam.learning_rate
            ));
        }
        TsgoState::with_schedule(
            self.fixed_angle.unwrap_or(self.theta0),
            self.shrink_factor,
            self.min_theta,
        )?;
        if let Some(s) = self.switch_epoch {
            if self.optimizer != OptimizerKind::Adam {
                return bad("switch epoch requires the adam optimizer".into());
            }
            if s == 0 || s >= self.epochs {
                return bad(format!("switch epoch {s} must lie in 1..{}", self.epochs));
            }
        }
        if let Some(t) = self.early_stop {
            if t.is_nan() || t <= 0.0 {
                return bad("early-stop tolerance must be positive".into());
            }
        }
        Ok(())
    }

    fn tsgo_state(&self) -> Result<TsgoState> {
        TsgoState::with_schedule(
            self.fixed_angle.unwrap_or(self.theta0),
            self.shrink_factor,
            self.min_theta,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    /// Theta for TSGO epochs, the learning rate for Adam epochs.
    pub step_param: f64,
    pub elapsed_s: f64,
    /// Largest number of floored amplitudes seen by one gradient in the epoch.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceLog {
    pub rows: Vec<TraceRow>,
    /// Set when training stopped on a non-finite loss; the last row carries it.
    pub aborted: Option<String>,
}

pub const TRACE_HEADER: &str = "epoch,loss,step_param,elapsed_s,clamped";

impl TraceLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .map(|r| r.loss)
            .find(|l| l.is_finite())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.loss, r.step_param, r.elapsed_s, r.clamped
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-sample partial contractions around the center: `left[k]` covers
/// sites `< k`, `right[k]` covers sites `>= k`.
struct Stacks {
    left: Vec<ScaledVec>,
    right: Vec<ScaledVec>,
}

fn local_amplitude(
    left: &ScaledVec,
    t: &DenseTensor,
    x: [f64; 2],
    right: &ScaledVec,
) -> LogAmplitude {
    let w = apply_left(&left.values, t, x);
    let mut a = LogAmplitude::from_value(dot(&w, &right.values));
    if !a.is_zero() {
        a.log_magnitude += left.log_scale + right.log_scale;
    }
    a
}

fn build_stacks(mps: &Mps, data: &[EmbeddedSample]) -> Vec<Stacks> {
    let n = mps.len();
    data.par_iter()
        .map(|x| {
            let mut right = vec![ScaledVec::unit(); n + 1];
            for k in (1..n).rev() {
                let w = apply_right(mps.tensor(k), x.site(k), &right[k + 1].values);
                right[k] = ScaledVec::rescaled(w, right[k + 1].log_scale);
            }
            Stacks {
                left: vec![ScaledVec::unit(); n + 1],
                right,
            }
        })
        .collect()
}

/// Loss of a model, with zero amplitudes giving `+inf` and numerical
/// failures giving NaN.
pub fn epoch_loss(mps: &Mps, data: &[EmbeddedSample]) -> f64 {
    match log_amplitudes(mps, data).and_then(|a| nll_from_amplitudes(&a, mps.log_norm_sq())) {
        Ok(l) => l,
        Err(Error::ZeroAmplitude { .. }) => f64::INFINITY,
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub mps: Mps,
    /// NLL of the returned model.
    pub loss: f64,
    pub clamped: usize,
    /// Updates skipped because the gradient vanished.
    pub stationary_sites: usize,
}

/// Site order of one sweep.
pub fn sweep_sites(n: usize, pattern: SweepPattern) -> Vec<usize> {
    match pattern {
        SweepPattern::Roundtrip if n == 1 => vec![0],
        SweepPattern::Roundtrip => (0..n - 1).chain((1..n).rev()).collect(),
    }
}

/// One TSGO sweep. Each visited site gets a center gradient and a rotation
/// by `theta`, then the center moves on by one QR step. The returned model
/// has its center at site 0.
pub fn sweep_tsgo(
    mps: &Mps,
    data: &[EmbeddedSample],
    theta: f64,
    direction: StepDirection,
) -> Result<SweepOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    data.iter().try_for_each(|x| mps.check_sample(x))?;
    let mut model = match mps.center() {
        Some(0) => mps.clone(),
        Some(_) => mps.move_center(0)?,
        None => return Err(Error::InvalidArgument("sweep needs a canonical MPS".into())),
    };
    let n = model.len();
    let len = data.len();
    let mut stacks = build_stacks(&model, data);
    let sites = sweep_sites(n, SweepPattern::Roundtrip);
    let mut clamped_max = 0;
    let mut stationary = 0;

    for (step, &c) in sites.iter().enumerate() {
        let t = model.tensor(c);
        let amps: Vec<LogAmplitude> = stacks
            .par_iter()
            .zip(data)
            .map(|(s, x)| local_amplitude(&s.left[c], t, x.site(c), &s.right[c + 1]))
            .collect();
        let (amps, clamped) = clamp_amplitudes(&amps);
        clamped_max = clamped_max.max(clamped);
        let term = sample_term(len, t.shape(), &amps, |i| {
            (&stacks[i].left[c], data[i].site(c), &stacks[i].right[c + 1])
        });
        let (g, _) = assemble_center_gradient(t, &term, len);
        match rotate_tensor(t, &g, theta, direction)? {
            Some(next) => model.tensors_mut()[c] = next,
            None => stationary += 1,
        }

        let Some(&next) = sites.get(step + 1).or((c != 0).then_some(&0)) else {
            continue;
        };
        if next > c {
            let (q, moved) = {
                let ts = model.tensors();
                shift_right(&ts[c], &ts[c + 1])?
            };
            stacks.par_iter_mut().zip(data).for_each(|(s, x)| {
                let w = apply_left(&s.left[c].values, &q, x.site(c));
                s.left[c + 1] = ScaledVec::rescaled(w, s.left[c].log_scale);
            });
            let ts = model.tensors_mut();
            ts[c] = q;
            ts[c + 1] = moved;
        } else {
            let (moved, iso) = {
                let ts = model.tensors();
                shift_left(&ts[c - 1], &ts[c])?
            };
            stacks.par_iter_mut().zip(data).for_each(|(s, x)| {
                let w = apply_right(&iso, x.site(c), &s.right[c + 1].values);
                s.right[c] = ScaledVec::rescaled(w, s.right[c + 1].log_scale);
            });
            let ts = model.tensors_mut();
            ts[c - 1] = moved;
            ts[c] = iso;
        }
        model.set_center(Some(next));
    }
    debug_assert_eq!(model.center(), Some(0));

    let t0 = model.tensor(0);
    let amps: Vec<LogAmplitude> = stacks
        .par_iter()
        .zip(data)
        .map(|(s, x)| local_amplitude(&s.left[0], t0, x.site(0), &s.right[1]))
        .collect();
    let loss = match nll_from_amplitudes(&amps, model.log_norm_sq()) {
        Ok(l) => l,
        Err(Error::ZeroAmplitude { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(SweepOutcome {
        mps: model,
        loss,
        clamped: clamped_max,
        stationary_sites: stationary,
    })
}

fn minibatches(len: usize, batch: Option<usize>, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    match batch {
        Some(b) if b < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            order.shuffle(&mut rng);
            order.chunks(b).map(<[usize]>::to_vec).collect()
        }
        _ => vec![order],
    }
}

/// Adam over every site tensor for one epoch. Returns the largest clamp count.
fn adam_epoch(
    model: &mut Mps,
    data: &[EmbeddedSample],
    state: &mut AdamState,
    batch: Option<usize>,
    seed: u64,
    epoch: usize,
) -> Result<usize> {
    let mut clamped = 0;
    for idx in minibatches(data.len(), batch, seed, epoch) {
        let (grads, diag) = if idx.len() == data.len() {
            all_site_gradients(model, data)?
        } else {
            let sub: Vec<EmbeddedSample> = idx.iter().map(|&i| data[i].clone()).collect();
            all_site_gradients(model, &sub)?
        };
        clamped = clamped.max(diag.clamped);
        let grads: Vec<DenseTensor> = grads.into_iter().map(|g| g.values).collect();
        adam_step(model.tensors_mut(), &grads, state)?;
        model.set_center(None);
        if model
            .tensors()
            .iter()
            .any(|t| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("adam update"));
        }
    }
    Ok(clamped)
}

fn converged(losses: &[f64], tol: f64) -> bool {
    let t = losses.len();
    if t <= CONVERGENCE_WINDOW {
        return false;
    }
    let (now, then) = (losses[t - 1], losses[t - 1 - CONVERGENCE_WINDOW]);
    let scale = if then == 0.0 { 1.0 } else { then.abs() };
    (now - then).abs() / scale < tol
}

/// Trains from the seeded random initial state.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Mps, TraceLog)> {
    config.validate()?;
    let init = Mps::random(dataset.n_features(), 2, config.max_bond, config.seed)?;
    train_from(config, init, dataset)
}

/// Trains from a given initial model (a canonical copy is made for TSGO).
pub fn train_from(config: &TrainConfig, init: Mps, dataset: &Dataset) -> Result<(Mps, TraceLog)> {
    config.validate()?;
    let data = dataset.embedded()?;
    if init.len() != dataset.n_features() {
        return Err(Error::Shape(format!(
            "model has {} sites, dataset has {} features",
            init.len(),
            dataset.n_features()
        )));
    }
    let start = Instant::now();
    let elapsed = || {
        if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let adam_epochs = match (config.optimizer, config.switch_epoch) {
        (OptimizerKind::Tsgo, _) => 0,
        (OptimizerKind::Adam, Some(s)) => s,
        (OptimizerKind::Adam, None) => config.epochs,
    };

    let mut log = TraceLog::default();
    let mut model = if adam_epochs == 0 && init.center().is_none() {
        init.canonicalize(0)?
    } else {
        init
    };
    let mut adam = AdamState::new(model.tensors(), config.adam);
    let mut tsgo = config.tsgo_state()?;
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let (result, step_param) = if epoch <= adam_epochs {
            let mut next = model.clone();
            let r = adam_epoch(
                &mut next,
                &data,
                &mut adam,
                config.batch_size,
                config.seed,
                epoch,
            )
            .map(|clamped| {
                let loss = epoch_loss(&next, &data);
                (next, loss, clamped)
            });
            (r, config.adam.learning_rate)
        } else {
            if epoch == adam_epochs + 1 && adam_epochs > 0 {
                model = model.canonicalize(0)?;
            }
            let theta = tsgo.theta;
            let r = sweep_tsgo(&model, &data, theta, config.direction)
                .map(|o| (o.mps, o.loss, o.clamped));
            (r, theta)
        };

        let (next, loss, clamped) = match result {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
                log.aborted = Some(format!("epoch {epoch}: {e}"));
                (model.clone(), f64::NAN, 0)
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            log.rows.push(TraceRow {
                epoch,
                loss,
                step_param,
                elapsed_s: elapsed(),
                clamped,
            });
            log.aborted
                .get_or_insert_with(|| format!("non-finite loss at epoch {epoch}"));
            break;
        }

        let mut kept_loss = loss;
        if epoch > adam_epochs {
            let previous = tsgo.last_loss;
            if config.fixed_angle.is_none() {
                tsgo = tsgo.schedule_update(loss);
            } else {
                tsgo.last_loss = Some(loss);
            }
            match previous {
                Some(prev) if config.rollback && loss > prev => {
                    tsgo.last_loss = Some(prev);
                    kept_loss = prev;
                }
                _ => model = next,
            }
        } else {
            model = next;
        }
        log.rows.push(TraceRow {
            epoch,
            loss: kept_loss,
            step_param,
            elapsed_s: elapsed(),
            clamped,
        });
        losses.push(kept_loss);
        if let Some(tol) = config.early_stop {
            // the switch boundary restarts the window
            let phase = if epoch > adam_epochs {
                &losses[adam_epochs..]
            } else {
                &losses[..]
            };
            if converged(phase, tol) && (epoch > adam_epochs || adam_epochs == config.epochs) {
                break;
            }
        }
    }
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRow {
    pub n: usize,
    pub tsgo_loss: f64,
    pub adam_loss: f64,
    pub adam_unstable: bool,
    pub tsgo_epochs: usize,
    pub adam_epochs: usize,
}

pub const SCAN_HEADER: &str = "N,tsgo_loss,adam_loss,adam_unstable";

pub fn scan_to_csv(rows: &[ScanRow]) -> String {
    let mut out = String::from(SCAN_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.n, r.tsgo_loss, r.adam_loss, r.adam_unstable
        );
    }
    out
}

/// True when the trace hit a non-finite loss or rose more than
/// `INSTABILITY_TOLERANCE` above its running best.
pub fn is_unstable(log: &TraceLog) -> bool {
    if log.aborted.is_some() {
        return true;
    }
    let mut best = f64::INFINITY;
    for r in &log.rows {
        if !r.loss.is_finite() {
            return true;
        }
        if best.is_finite() && r.loss > best + INSTABILITY_TOLERANCE * best.abs() {
            return true;
        }
        best = best.min(r.loss);
    }
    false
}

/// For each length, trains TSGO and Adam from the same initial state until
/// the loss settles or `config.epochs` is reached. `source` supplies the
/// dataset for a given number of sites.
pub fn run_length_scan<F>(
    config: &TrainConfig,
    lengths: &[usize],
    mut source: F,
) -> Result<Vec<ScanRow>>
where
    F: FnMut(usize) -> Result<Dataset>,
{
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("no lengths to scan".into()));
    }
    let base = TrainConfig {
        switch_epoch: None,
        early_stop: Some(config.early_stop.unwrap_or(DEFAULT_CONVERGENCE_TOL)),
        ..config.clone()
    };
    base.validate()?;
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let dataset = source(n)?;
        if dataset.n_features() != n {
            return Err(Error::Shape(format!(
                "source returned {} features for length {n}",
                dataset.n_features()
            )));
        }
        let init = Mps::random(n, 2, base.max_bond, base.seed)?;
        let tsgo_cfg = TrainConfig {
            optimizer: OptimizerKind::Tsgo,
            ..base.clone()
        };
        let adam_cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            ..base.clone()
        };
        let (_, tsgo_log) = train_from(&tsgo_cfg, init.clone(), &dataset)?;
        let (_, adam_log) = train_from(&adam_cfg, init, &dataset)?;
        rows.push(ScanRow {
            n,
            tsgo_loss: tsgo_log.final_loss().unwrap_or(f64::NAN),
            adam_loss: adam_log.final_loss().unwrap_or(f64::NAN),
            adam_unstable: is_unstable(&adam_log),
            tsgo_epochs: tsgo_log.rows.len(),
            adam_epochs: adam_log.rows.len(),
        });
    }
    Ok(rows)
}
