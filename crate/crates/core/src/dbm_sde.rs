//! Euler–Maruyama integration of the β-DBM particle system
//!
//! ```text
//! dλ_i = sqrt(2/(βN)) dB_i + (1/N) Σ_{j≠i} dt/(λ_i - λ_j) - V'(λ_i)/2 dt
//! ```
//!
//! Positions are re-sorted after every step. When the smallest gap drops
//! under `gap_floor`, the step window is halved recursively; the noise
//! increment of the window is split evenly between the halves, so a
//! sub-stepped window equals the corresponding sequence of plain steps.

use rayon::prelude::*;
use thiserror::Error;

use crate::potential::PotentialSpec;
use crate::rng::NoiseStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("configuration needs at least one particle")]
    Empty,
    #[error("inverse temperature must satisfy beta >= 1, got {0}")]
    Beta(f64),
    #[error("non-finite position at index {0}")]
    NonFinite(usize),
    #[error("time must be finite and non-negative, got {0}")]
    Time(f64),
    #[error("degenerate configuration: particles {0} and {1} coincide")]
    Degenerate(usize, usize),
    #[error("blow-up at index {index} near t = {time}: position became non-finite; retry with a smaller step_h (currently {step_h})")]
    BlowUp { index: usize, time: f64, step_h: f64 },
    #[error("invalid parameter: {0}")]
    Params(String),
    #[error("noise vector has length {got}, expected {expected}")]
    NoiseLength { got: usize, expected: usize },
    #[error("run {run} failed: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<SdeError>,
    },
}

/// Ordered particle positions at a time stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleConfiguration {
    positions: Vec<f64>,
    time: f64,
    beta: f64,
}

impl ParticleConfiguration {
    /// Builds a configuration; positions are sorted on the way in.
    pub fn new(mut positions: Vec<f64>, time: f64, beta: f64) -> Result<Self, SdeError> {
        if positions.is_empty() {
            return Err(SdeError::Empty);
        }
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(SdeError::Beta(beta));
        }
        if !(time >= 0.0 && time.is_finite()) {
            return Err(SdeError::Time(time));
        }
        if let Some(i) = positions.iter().position(|x| !x.is_finite()) {
            return Err(SdeError::NonFinite(i));
        }
        positions.sort_by(f64::total_cmp);
        Ok(ParticleConfiguration {
            positions,
            time,
            beta,
        })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn max_abs(&self) -> f64 {
        self.positions.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Every position moved by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        ParticleConfiguration {
            positions: self.positions.iter().map(|x| x + delta).collect(),
            ..self.clone()
        }
    }

    fn with(&self, positions: Vec<f64>, time: f64) -> Self {
        ParticleConfiguration {
            positions,
            time,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeParams {
    pub step_h: f64,
    pub seed: u64,
    pub gap_floor: f64,
    /// When false the Brownian term is dropped and the scheme is a plain Euler method.
    pub noise: bool,
    pub max_halvings: u32,
}

impl SdeParams {
    /// `h = min(1e-2, 1/(4N²))`, `gap_floor = 1/(20N)`.
    pub fn for_particles(n: usize) -> Self {
        let nf = n.max(1) as f64;
        SdeParams {
            step_h: (1.0 / (4.0 * nf * nf)).min(1e-2),
            seed: 0,
            gap_floor: 1.0 / (20.0 * nf),
            noise: true,
            max_halvings: 12,
        }
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.step_h = h;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.step_h > 0.0 && self.step_h <= 1.0) {
            return Err(SdeError::Params(format!("step_h must lie in (0, 1], got {}", self.step_h)));
        }
        if !(self.gap_floor >= 0.0 && self.gap_floor.is_finite()) {
            return Err(SdeError::Params(format!("gap_floor must be >= 0, got {}", self.gap_floor)));
        }
        Ok(())
    }
}

/// Pairwise repulsion `Σ_{j≠i} 1/(x_i - x_j)` for sorted, distinct `x`.
fn interaction_into(x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let n = x.len();
    for i in 0..n {
        let xi = x[i];
        let (head, tail) = out.split_at_mut(i + 1);
        let rest = &x[i + 1..];
        let mut lanes = [0.0f64; 4];
        let mut tail_chunks = tail.chunks_exact_mut(4);
        let mut rest_chunks = rest.chunks_exact(4);
        for (o, xs) in (&mut tail_chunks).zip(&mut rest_chunks) {
            for l in 0..4 {
                let r = 1.0 / (xi - xs[l]);
                lanes[l] += r;
                o[l] -= r;
            }
        }
        let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        for (o, &xj) in tail_chunks
            .into_remainder()
            .iter_mut()
            .zip(rest_chunks.remainder())
        {
            let r = 1.0 / (xi - xj);
            acc += r;
            *o -= r;
        }
        head[i] += acc;
    }
}

fn check_distinct(x: &[f64]) -> Result<(), SdeError> {
    match x.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => Err(SdeError::Degenerate(i, i + 1)),
        None => Ok(()),
    }
}

fn drift_into(x: &[f64], spec: &PotentialSpec, out: &mut [f64]) -> Result<(), SdeError> {
    check_distinct(x)?;
    interaction_into(x, out);
    let inv_n = 1.0 / x.len() as f64;
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = *o * inv_n - 0.5 * spec.v_prime(xi);
    }
    Ok(())
}

/// `(1/N) Σ_{j≠i} 1/(λ_i - λ_j) - V'(λ_i)/2` for each particle.
pub fn drift(config: &ParticleConfiguration, spec: &PotentialSpec) -> Result<Vec<f64>, SdeError> {
    let mut out = vec![0.0; config.n()];
    drift_into(&config.positions, spec, &mut out)?;
    Ok(out)
}

/// Noise-free drift of an arbitrary sorted slice (used by the mean-field system).
pub(crate) fn deterministic_drift(x: &[f64], spec: &PotentialSpec, out: &mut [f64]) -> Result<(), SdeError> {
    drift_into(x, spec, out)
}

/// What happened inside one step window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Sizes of the plain Euler steps actually taken, in order.
    pub substeps: Vec<f64>,
    /// Adjacent inversions repaired by sorting.
    pub crossings: usize,
}

struct Stepper<'a> {
    spec: &'a PotentialSpec,
    params: &'a SdeParams,
    drift: Vec<f64>,
    report: StepReport,
    time: f64,
}

impl Stepper<'_> {
    fn window(&mut self, x: &mut [f64], h: f64, h0: f64, incr: &[f64], depth: u32) -> Result<(), SdeError> {
        let threshold = self.params.gap_floor * (h / h0).sqrt();
        if depth < self.params.max_halvings && threshold > 0.0 && min_gap(x) < threshold {
            let half: Vec<f64> = incr.iter().map(|v| 0.5 * v).collect();
            self.window(x, 0.5 * h, h0, &half, depth + 1)?;
            return self.window(x, 0.5 * h, h0, &half, depth + 1);
        }
        self.euler(x, h, incr)
    }

    fn euler(&mut self, x: &mut [f64], h: f64, incr: &[f64]) -> Result<(), SdeError> {
        drift_into(x, self.spec, &mut self.drift)?;
        self.time += h;
        for (i, ((xi, d), dw)) in x.iter_mut().zip(&self.drift).zip(incr).enumerate() {
            *xi += h * d + dw;
            if !xi.is_finite() {
                return Err(SdeError::BlowUp {
                    index: i,
                    time: self.time,
                    step_h: self.params.step_h,
                });
            }
        }
        let inversions = x.windows(2).filter(|w| w[0] > w[1]).count();
        if inversions > 0 {
            self.report.crossings += inversions;
            x.sort_by(f64::total_cmp);
        }
        self.report.substeps.push(h);
        Ok(())
    }
}

fn min_gap(x: &[f64]) -> f64 {
    x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn step_in_place(
    x: &mut [f64],
    time: f64,
    h: f64,
    beta: f64,
    spec: &PotentialSpec,
    params: &SdeParams,
    gauss: &[f64],
    drift_buf: Vec<f64>,
) -> Result<(StepReport, Vec<f64>), SdeError> {
    let n = x.len();
    if gauss.len() != n {
        return Err(SdeError::NoiseLength {
            got: gauss.len(),
            expected: n,
        });
    }
    let scale = if params.noise {
        (2.0 * h / (beta * n as f64)).sqrt()
    } else {
        0.0
    };
    let incr: Vec<f64> = gauss.iter().map(|g| scale * g).collect();
    let mut stepper = Stepper {
        spec,
        params,
        drift: drift_buf,
        report: StepReport::default(),
        time,
    };
    stepper.window(x, h, h, &incr, 0)?;
    Ok((stepper.report, stepper.drift))
}

/// One Euler–Maruyama step of size `params.step_h` driven by `gauss`.
pub fn em_step(
    config: &ParticleConfiguration,
    spec: &PotentialSpec,
    params: &SdeParams,
    gauss: &[f64],
) -> Result<ParticleConfiguration, SdeError> {
    em_step_with_report(config, spec, params, gauss).map(|(c, _)| c)
}

/// As [`em_step`], also returning the sub-step schedule and crossing count.
pub fn em_step_with_report(
    config: &ParticleConfiguration,
    spec: &PotentialSpec,
    params: &SdeParams,
    gauss: &[f64],
) -> Result<(ParticleConfiguration, StepReport), SdeError> {
    params.validate()?;
    let mut x = config.positions.clone();
    let buf = vec![0.0; x.len()];
    let (report, _) = step_in_place(
        &mut x,
        config.time,
        params.step_h,
        config.beta,
        spec,
        params,
        gauss,
        buf,
    )?;
    Ok((config.with(x, config.time + params.step_h), report))
}

/// Trajectory-level diagnostics of a [`simulate`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub steps: u64,
    /// Step windows that had to be subdivided.
    pub refined_windows: u64,
    pub euler_substeps: u64,
    pub crossings: u64,
    /// Largest `|λ_i|` seen along the trajectory.
    pub max_abs: f64,
    /// Confinement radius `𝔟` that `max_abs` is checked against.
    pub bound: f64,
}

impl Diagnostics {
    /// Crossings repaired per Euler sub-step.
    pub fn crossing_rate(&self) -> f64 {
        if self.euler_substeps == 0 {
            0.0
        } else {
            self.crossings as f64 / self.euler_substeps as f64
        }
    }

    pub fn bound_violated(&self) -> bool {
        self.max_abs > self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub config: ParticleConfiguration,
    pub diagnostics: Diagnostics,
}

/// Integrates from `config0.time` to exactly `t_end`.
///
/// Step `k` draws its noise from the counter stream `(params.seed, k, i)`.
pub fn simulate(
    config0: &ParticleConfiguration,
    spec: &PotentialSpec,
    params: &SdeParams,
    t_end: f64,
) -> Result<SimulationResult, SdeError> {
    params.validate()?;
    let t0 = config0.time;
    if !(t_end > t0 && t_end.is_finite()) {
        return Err(SdeError::Params(format!(
            "t_end = {t_end} must exceed the start time {t0}"
        )));
    }
    let h = params.step_h;
    let span = t_end - t0;
    let mut full = (span / h).floor() as u64;
    let mut remainder = span - full as f64 * h;
    if remainder <= 1e-9 * h {
        remainder = 0.0;
    } else if remainder >= h * (1.0 - 1e-9) {
        full += 1;
        remainder = 0.0;
    }
    let total = full + u64::from(remainder > 0.0);

    let n = config0.n();
    let mut x = config0.positions.clone();
    let mut gauss = vec![0.0; n];
    let mut drift_buf = vec![0.0; n];
    let mut noise = NoiseStream::new(params.seed);
    let mut diag = Diagnostics {
        max_abs: config0.max_abs(),
        bound: spec.b_cut(),
        ..Diagnostics::default()
    };
    for k in 0..total {
        let hk = if k < full { h } else { remainder };
        if params.noise {
            noise.fill_step(k, &mut gauss);
        }
        let time = t0 + k as f64 * h;
        let (report, buf) =
            step_in_place(&mut x, time, hk, config0.beta, spec, params, &gauss, drift_buf)?;
        drift_buf = buf;
        diag.steps += 1;
        diag.euler_substeps += report.substeps.len() as u64;
        if report.substeps.len() > 1 {
            diag.refined_windows += 1;
        }
        diag.crossings += report.crossings as u64;
        let (lo, hi) = (x[0].abs(), x[n - 1].abs());
        diag.max_abs = diag.max_abs.max(lo).max(hi);
    }
    Ok(SimulationResult {
        config: config0.with(x, t_end),
        diagnostics: diag,
    })
}

/// Independent runs with seeds `params.seed ^ r`, returned in run order.
pub fn ensemble(
    config0: &ParticleConfiguration,
    spec: &PotentialSpec,
    params: &SdeParams,
    t_end: f64,
    runs: usize,
) -> Result<Vec<SimulationResult>, SdeError> {
    if runs == 0 {
        return Err(SdeError::Params("runs must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|r| params.seed ^ r).collect();
    ensemble_with_seeds(config0, spec, params, t_end, &seeds)
}

/// Runs one trajectory per seed; output order follows `seeds`.
pub fn ensemble_with_seeds(
    config0: &ParticleConfiguration,
    spec: &PotentialSpec,
    params: &SdeParams,
    t_end: f64,
    seeds: &[u64],
) -> Result<Vec<SimulationResult>, SdeError> {
    seeds
        .par_iter()
        .enumerate()
        .map(|(run, &seed)| {
            let p = SdeParams {
                seed,
                ..params.clone()
            };
            simulate(config0, spec, &p, t_end).map_err(|e| SdeError::Run {
                run,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(x: Vec<f64>) -> ParticleConfiguration {
        ParticleConfiguration::new(x, 0.0, 2.0).unwrap()
    }

    fn naive_drift(x: &[f64], spec: &PotentialSpec) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..x.len() {
                    if j != i {
                        s += 1.0 / (x[i] - x[j]);
                    }
                }
                s / n - spec.v_prime(x[i]) / 2.0
            })
            .collect()
    }

    #[test]
    fn drift_examples() {
        let d = drift(&cfg(vec![2.0]), &PotentialSpec::quadratic()).unwrap();
        assert_eq!(d, vec![-1.0]);
        let a = 0.8;
        let d = drift(&cfg(vec![-a, a]), &PotentialSpec::zero()).unwrap();
        assert_eq!(d, vec![-1.0 / (4.0 * a), 1.0 / (4.0 * a)]);
        let d = drift(&cfg(vec![-1.0, 0.0, 1.0]), &PotentialSpec::quadratic()).unwrap();
        let oracle = naive_drift(&[-1.0, 0.0, 1.0], &PotentialSpec::quadratic());
        for (a, b) in d.iter().zip(&oracle) {
            assert!(a.abs() < 1e-15 && b.abs() < 1e-15);
        }
    }

    #[test]
    fn drift_matches_double_loop_oracle() {
        let spec = PotentialSpec::quartic();
        let x: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin() * 2.0 + i as f64 * 1e-3).collect();
        let c = cfg(x);
        let d = drift(&c, &spec).unwrap();
        let o = naive_drift(c.positions(), &spec);
        for (a, b) in d.iter().zip(&o) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn duplicate_positions_are_degenerate() {
        let err = drift(&cfg(vec![0.0, 1.0, 1.0]), &PotentialSpec::zero()).unwrap_err();
        assert_eq!(err, SdeError::Degenerate(1, 2));
    }

    #[test]
    fn em_step_examples() {
        let p = SdeParams::for_particles(1).with_step(0.1);
        let c = em_step(&cfg(vec![1.0]), &PotentialSpec::quadratic(), &p, &[0.0]).unwrap();
        assert!((c.positions()[0] - 0.95).abs() < 1e-15);
        assert!((c.time() - 0.1).abs() < 1e-15);

        let p = SdeParams::for_particles(2).with_step(0.01);
        let start = cfg(vec![-1.0, 1.0]);
        let c = em_step(&start, &PotentialSpec::zero(), &p, &[0.0, 0.0]).unwrap();
        let d = drift(&start, &PotentialSpec::zero()).unwrap();
        assert_eq!(c.positions(), &[-1.0 + 0.01 * d[0], 1.0 + 0.01 * d[1]]);
        assert!((c.positions()[1] - 1.0025).abs() < 1e-15);
    }

    #[test]
    fn substepping_equals_replayed_plain_steps() {
        let spec = PotentialSpec::zero();
        let params = SdeParams::for_particles(2).with_step(1e-3);
        let start = cfg(vec![0.0, 1e-4]);
        let gauss = [0.3, -1.1];
        let (out, report) = em_step_with_report(&start, &spec, &params, &gauss).unwrap();
        assert!(report.substeps.len() > 1);
        let total: f64 = report.substeps.iter().sum();
        assert!((total - 1e-3).abs() < 1e-15);

        let mut plain = params.clone();
        plain.gap_floor = 0.0;
        let mut x = start.clone();
        for &h in &report.substeps {
            plain.step_h = h;
            let ratio = (h / params.step_h).sqrt();
            let g: Vec<f64> = gauss.iter().map(|v| v * ratio).collect();
            x = em_step(&x, &spec, &plain, &g).unwrap();
        }
        for (a, b) in out.positions().iter().zip(x.positions()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn blow_up_names_the_index() {
        let spec = PotentialSpec::polynomial(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 2.0, 0.0).unwrap();
        let params = SdeParams::for_particles(2).with_step(1.0);
        let mut c = cfg(vec![-1.0, 1e30]);
        let mut err = None;
        for _ in 0..3 {
            match em_step(&c, &spec, &params, &[0.0, 0.0]) {
                Ok(next) => c = next,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        match err {
            Some(SdeError::BlowUp { index, .. }) => assert!(index < 2),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn simulate_hits_t_end_exactly_with_partial_step() {
        let spec = PotentialSpec::quadratic();
        let p = SdeParams::for_particles(1).with_step(0.3).without_noise();
        let r = simulate(&cfg(vec![1.0]), &spec, &p, 1.0).unwrap();
        assert_eq!(r.config.time(), 1.0);
        assert_eq!(r.diagnostics.steps, 4);
    }

    #[test]
    fn noise_free_scalar_ode() {
        let spec = PotentialSpec::quadratic();
        let p = SdeParams::for_particles(1).with_step(1e-4).without_noise();
        let r = simulate(&cfg(vec![1.0]), &spec, &p, 1.0).unwrap();
        assert!((r.config.positions()[0] - (-0.5f64).exp()).abs() <= 1e-3);
    }

    #[test]
    fn noise_free_pair_gap_ode() {
        let spec = PotentialSpec::zero();
        let a = 0.5;
        let p = SdeParams::for_particles(2).with_step(1e-4).without_noise();
        let t = 0.7;
        let r = simulate(&cfg(vec![-a, a]), &spec, &p, t).unwrap();
        let l2 = r.config.positions()[1];
        assert!((l2 * l2 - (a * a + t / 2.0)).abs() < 1e-3);
    }

    #[test]
    fn ensemble_single_run_equals_simulate() {
        let spec = PotentialSpec::quadratic();
        let start = cfg((0..20).map(|i| -1.0 + i as f64 * 0.1).collect());
        let p = SdeParams::for_particles(20).with_step(1e-3).with_seed(42);
        let one = ensemble(&start, &spec, &p, 0.05, 1).unwrap();
        let direct = simulate(&start, &spec, &p, 0.05).unwrap();
        assert_eq!(one[0], direct);
        let twins = ensemble_with_seeds(&start, &spec, &p, 0.05, &[9, 9]).unwrap();
        assert_eq!(twins[0], twins[1]);
        let distinct = ensemble(&start, &spec, &p, 0.05, 2).unwrap();
        assert_ne!(distinct[0].config, distinct[1].config);
    }

    #[test]
    fn run_failure_carries_run_index() {
        let spec = PotentialSpec::zero();
        let start = cfg(vec![0.0, 1.0]);
        let p = SdeParams::for_particles(2);
        let err = ensemble(&start, &spec, &p, -1.0, 2).unwrap_err();
        assert!(matches!(err, SdeError::Run { run: 0, .. }));
    }
}
