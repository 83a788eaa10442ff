//! Crude Monte Carlo and likelihood-ratio importance-sampling estimators of
//! the collision rate, the relative half-width stopping statistic, and the
//! sample-size planner.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{fmt_f64, Scenario};
use crate::stats;

/// Streaming sums over per-scenario values `w · I`, mergeable across
/// workers. Merging adds sums, so it is associative up to floating-point
/// rounding; merge partial accumulators in a fixed order for bit-identical
/// results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accumulator {
    pub n: u64,
    pub hits: u64,
    pub sum: f64,
    pub sum_sq: f64,
    pub weight_sum: f64,
    pub weight_sq_sum: f64,
    pub weight_min: f64,
    pub weight_max: f64,
}

impl Default for Accumulator {
    fn default() -> Self {
        Self {
            n: 0,
            hits: 0,
            sum: 0.0,
            sum_sq: 0.0,
            weight_sum: 0.0,
            weight_sq_sum: 0.0,
            weight_min: f64::INFINITY,
            weight_max: f64::NEG_INFINITY,
        }
    }
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, weight: f64, hit: bool) {
        self.n += 1;
        self.weight_sum += weight;
        self.weight_sq_sum += weight * weight;
        self.weight_min = self.weight_min.min(weight);
        self.weight_max = self.weight_max.max(weight);
        if hit {
            self.hits += 1;
            self.sum += weight;
            self.sum_sq += weight * weight;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        self.hits += other.hits;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.weight_sum += other.weight_sum;
        self.weight_sq_sum += other.weight_sq_sum;
        self.weight_min = self.weight_min.min(other.weight_min);
        self.weight_max = self.weight_max.max(other.weight_max);
    }

    pub fn estimate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Variance of the estimator (sample variance over `n`); infinite
    /// below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let sample_var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        sample_var / n
    }

    /// Relative half-width `z_{β/2} · se / estimate`, infinite when the
    /// estimate is zero.
    pub fn omega(&self, beta: f64) -> f64 {
        let est = self.estimate();
        if est > 0.0 {
            stats::z_two_sided(beta) * self.variance().sqrt() / est
        } else {
            f64::INFINITY
        }
    }

    /// `(Σw)² / Σw²` over all scenario weights.
    pub fn effective_sample_size(&self) -> f64 {
        if self.weight_sq_sum > 0.0 {
            self.weight_sum * self.weight_sum / self.weight_sq_sum
        } else {
            0.0
        }
    }

    pub fn report(&self, beta: f64, wall_clock_s: Option<f64>) -> Result<EstimationReport> {
        if self.n == 0 {
            return Err(Error::EmptyStream);
        }
        let variance = self.variance();
        let ess = self.effective_sample_size();
        Ok(EstimationReport {
            n: self.n,
            hits: self.hits,
            estimate: self.estimate(),
            variance,
            std_error: variance.sqrt(),
            omega: self.omega(beta),
            beta,
            z: stats::z_two_sided(beta),
            weight_min: self.weight_min,
            weight_max: self.weight_max,
            weight_mean: self.weight_sum / self.n as f64,
            ess,
            ess_fraction: ess / self.n as f64,
            omega_target: None,
            wall_clock_s,
        })
    }
}

/// Summary of one estimation run. Non-finite values are written to JSON as
/// `null` and read back as `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub n: u64,
    pub hits: u64,
    pub estimate: f64,
    #[serde(with = "finite_or_null")]
    pub variance: f64,
    #[serde(with = "finite_or_null")]
    pub std_error: f64,
    #[serde(with = "finite_or_null")]
    pub omega: f64,
    pub beta: f64,
    pub z: f64,
    #[serde(with = "finite_or_null")]
    pub weight_min: f64,
    #[serde(with = "finite_or_null")]
    pub weight_max: f64,
    pub weight_mean: f64,
    pub ess: f64,
    pub ess_fraction: f64,
    /// Set when the run stopped on a relative half-width target.
    #[serde(default)]
    pub omega_target: Option<f64>,
    /// Run time; left out of saved reports so reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl EstimationReport {
    /// Two-sided `1 − β` confidence interval.
    pub fn confidence_interval(&self) -> (f64, f64) {
        let h = self.z * self.std_error;
        (self.estimate - h, self.estimate + h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerInput {
    /// Anticipated rate.
    pub p: f64,
    /// Relative half-width threshold.
    pub b: f64,
    pub beta: f64,
}

impl PlannerInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) || !(self.b > 0.0) || !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "planner needs 0 < P <= 1, b > 0, 0 < beta < 1 (got P={}, b={}, beta={})",
                self.p, self.b, self.beta
            )));
        }
        Ok(())
    }
}

/// Smallest `n` with `n ≥ (1 − P)/P · z²_{β/2} / b²`.
pub fn required_n(input: &PlannerInput) -> Result<u64> {
    input.validate()?;
    let z = stats::z_two_sided(input.beta);
    let n = (1.0 - input.p) / input.p * z * z / (input.b * input.b);
    Ok(n.ceil() as u64)
}

pub fn crude_estimate<I: IntoIterator<Item = bool>>(outcomes: I, beta: f64) -> Result<EstimationReport> {
    let mut acc = Accumulator::new();
    for hit in outcomes {
        acc.push(1.0, hit);
    }
    acc.report(beta, None)
}

/// Importance-sampling estimate from `(log likelihood ratio, indicator)`
/// pairs.
pub fn is_estimate<I: IntoIterator<Item = (f64, bool)>>(scenarios: I, beta: f64) -> Result<EstimationReport> {
    let mut acc = Accumulator::new();
    for (index, (log_ratio, hit)) in scenarios.into_iter().enumerate() {
        acc.push(weight_from_log(log_ratio, index)?, hit);
    }
    acc.report(beta, None)
}

/// `exp(log_ratio)`, rejecting NaN and overflow.
pub fn weight_from_log(log_ratio: f64, index: usize) -> Result<f64> {
    let w = log_ratio.exp();
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::NonFiniteWeight { index })
    }
}

/// `ln p_s(s_1) − ln q_s(s_1) + Σ_t ln r_t`, summed in log space over the
/// steps actually taken.
pub fn scenario_log_ratio(sc: &Scenario) -> Result<f64> {
    if sc.step_terms.len() != sc.maneuvers.len() {
        return Err(Error::MissingTerms {
            steps: sc.maneuvers.len(),
            terms: sc.step_terms.len(),
        });
    }
    let init = &sc.initial_terms;
    let mut total = init.log_p_state - init.log_q_state + init.log_norm;
    for t in &sc.step_terms {
        total += t.log_ratio();
    }
    if total.is_nan() {
        return Err(Error::NonFinite("scenario log ratio"));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub n: u64,
    pub estimate: f64,
    pub omega: f64,
}

/// Running estimate and relative half-width after every `interval`
/// scenarios of a `(weight, indicator)` stream, plus the final partial
/// checkpoint.
pub fn convergence_trace<I: IntoIterator<Item = (f64, bool)>>(stream: I, interval: u64, beta: f64) -> Vec<TracePoint> {
    let interval = interval.max(1);
    let mut acc = Accumulator::new();
    let mut trace = Vec::new();
    for (w, hit) in stream {
        acc.push(w, hit);
        if acc.n.is_multiple_of(interval) {
            trace.push(acc.trace_point(beta));
        }
    }
    if !acc.n.is_multiple_of(interval) {
        trace.push(acc.trace_point(beta));
    }
    trace
}

impl Accumulator {
    pub fn trace_point(&self, beta: f64) -> TracePoint {
        TracePoint {
            n: self.n,
            estimate: self.estimate(),
            omega: self.omega(beta),
        }
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TracePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "estimate", "omega"])?;
    for p in trace {
        w.write_record([p.n.to_string(), fmt_f64(p.estimate), fmt_f64(p.omega)])?;
    }
    w.flush()?;
    Ok(())
}

/// Test-count and variance comparison of a crude and an IS run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub crude_estimate: f64,
    pub trimflow_estimate: f64,
    /// `trimflow − crude`.
    pub rate_gap: f64,
    pub relative_rate_gap: f64,
    pub crude_n: u64,
    pub trimflow_n: u64,
    /// `n_trimflow / n_crude`.
    pub test_count_ratio: f64,
    /// `1 − n_trimflow / n_crude`.
    pub reduction: f64,
    /// Ratio of per-scenario variances, `n · Var` of each run.
    pub variance_ratio: f64,
}

pub fn compare_reports(crude: &EstimationReport, trimflow: &EstimationReport) -> Result<Comparison> {
    if crude.beta != trimflow.beta {
        return Err(Error::IncompatibleTargets(format!(
            "beta {} vs {}",
            crude.beta, trimflow.beta
        )));
    }
    if crude.omega_target != trimflow.omega_target {
        return Err(Error::IncompatibleTargets(format!(
            "omega target {:?} vs {:?}",
            crude.omega_target, trimflow.omega_target
        )));
    }
    let ratio = trimflow.n as f64 / crude.n as f64;
    let per_sample = |r: &EstimationReport| r.variance * r.n as f64;
    Ok(Comparison {
        crude_estimate: crude.estimate,
        trimflow_estimate: trimflow.estimate,
        rate_gap: trimflow.estimate - crude.estimate,
        relative_rate_gap: if crude.estimate > 0.0 {
            (trimflow.estimate - crude.estimate) / crude.estimate
        } else {
            0.0
        },
        crude_n: crude.n,
        trimflow_n: trimflow.n,
        test_count_ratio: ratio,
        reduction: 1.0 - ratio,
        variance_ratio: per_sample(trimflow) / per_sample(crude),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{InitialTerms, Maneuver, Scene, StepTerms};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn planner_examples() {
        let paper = required_n(&PlannerInput {
            p: 1.33e-4,
            b: 0.2,
            beta: 0.05,
        })
        .unwrap();
        assert!((715_000..=730_000).contains(&paper), "{paper}");
        assert_eq!(required_n(&PlannerInput { p: 1.0, b: 0.2, beta: 0.05 }).unwrap(), 0);
        assert_eq!(required_n(&PlannerInput { p: 0.5, b: 0.2, beta: 0.05 }).unwrap(), 97);
        assert!(required_n(&PlannerInput { p: 0.0, b: 0.2, beta: 0.05 }).is_err());
    }

    #[test]
    fn crude_examples() {
        let r = crude_estimate([true, false, false, false], 0.05).unwrap();
        assert_eq!(r.estimate, 0.25);
        let zero = crude_estimate([false; 10], 0.05).unwrap();
        assert_eq!(zero.estimate, 0.0);
        assert!(zero.omega.is_infinite());
        assert!(matches!(crude_estimate([], 0.05), Err(Error::EmptyStream)));
    }

    #[test]
    fn crude_bernoulli_within_three_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = crude_estimate((0..1_000_000).map(|_| rng.random::<f64>() < 1e-3), 0.05).unwrap();
        assert!((r.estimate - 1e-3).abs() < 3.0 * r.std_error);
        assert!((r.omega * r.estimate / r.z - r.std_error).abs() < 1e-12);
    }

    #[test]
    fn unit_ratios_reduce_to_crude() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits: Vec<bool> = (0..10_000).map(|_| rng.random::<f64>() < 0.01).collect();
        let crude = crude_estimate(hits.iter().copied(), 0.05).unwrap();
        let is = is_estimate(hits.iter().map(|h| (0.0, *h)), 0.05).unwrap();
        assert_eq!(crude, is);
    }

    #[test]
    fn gaussian_tail_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stream = (0..10_000).map(|_| {
            let x: f64 = 3.0 + rng.sample::<f64, _>(StandardNormal);
            // N(0,1) / N(3,1) density ratio
            (-3.0 * x + 4.5, x > 3.0)
        });
        let r = is_estimate(stream, 0.05).unwrap();
        let exact = stats::normal_sf(3.0);
        assert!((r.estimate - exact).abs() < 3.0 * r.std_error);
    }

    #[test]
    fn non_finite_weight_rejected() {
        assert!(matches!(
            is_estimate([(0.0, true), (f64::NAN, false)], 0.05),
            Err(Error::NonFiniteWeight { index: 1 })
        ));
        assert!(matches!(
            is_estimate([(1e4, true)], 0.05),
            Err(Error::NonFiniteWeight { index: 0 })
        ));
    }

    #[test]
    fn merge_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let items: Vec<(f64, bool)> = (0..1000).map(|_| (rng.random_range(0.1..2.0), rng.random::<f64>() < 0.3)).collect();
        let mut whole = Accumulator::new();
        items.iter().for_each(|(w, h)| whole.push(*w, *h));
        let mut a = Accumulator::new();
        let mut b = Accumulator::new();
        items[..400].iter().for_each(|(w, h)| a.push(*w, *h));
        items[400..].iter().for_each(|(w, h)| b.push(*w, *h));
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        assert_eq!(ab.n, whole.n);
        assert!((ab.estimate() - whole.estimate()).abs() < 1e-12);
        assert!((ab.variance() - ba.variance()).abs() < 1e-15);
        assert_eq!(ab.weight_min, whole.weight_min);
    }

    fn scenario(steps: usize, terms: Vec<StepTerms>) -> Scenario {
        Scenario {
            maneuvers: vec![Maneuver::new(0.0); steps],
            scenes: vec![Scene::new(1.0, 1.0, 10.0, 0.0); steps + 1],
            collided: false,
            min_ttc: f64::INFINITY,
            initial_terms: InitialTerms {
                log_p_state: 0.3,
                log_q_state: 0.5,
                log_norm: 0.0,
            },
            step_terms: terms,
        }
    }

    #[test]
    fn log_ratio_hand_arithmetic() {
        let t = StepTerms {
            log_p_joint: 1.0,
            log_p_state: 0.2,
            log_q_joint: 0.7,
            log_q_state: 0.4,
            log_norm: 0.0,
        };
        let lr = scenario_log_ratio(&scenario(1, vec![t])).unwrap();
        assert!((lr - 0.3).abs() < 1e-12);
        assert!(matches!(
            scenario_log_ratio(&scenario(2, vec![t])),
            Err(Error::MissingTerms { steps: 2, terms: 1 })
        ));
        let mut same = scenario(3, vec![StepTerms::self_ratio(-1.0, -2.0); 3]);
        same.initial_terms.log_q_state = same.initial_terms.log_p_state;
        assert_eq!(scenario_log_ratio(&same).unwrap(), 0.0);
    }

    #[test]
    fn long_scenarios_stay_in_log_space() {
        let t = StepTerms {
            log_p_joint: -5.0,
            log_p_state: 0.0,
            log_q_joint: 0.0,
            log_q_state: 0.0,
            log_norm: 0.0,
        };
        let lr = scenario_log_ratio(&scenario(1000, vec![t; 1000])).unwrap();
        assert!((lr - (-0.2 - 5000.0)).abs() < 1e-9);
    }

    #[test]
    fn trace_behaviour() {
        assert!(convergence_trace(std::iter::empty(), 10, 0.05).is_empty());
        let constant = convergence_trace((0..50).map(|_| (1.0, true)), 1, 0.05);
        assert!(constant.iter().all(|p| p.estimate == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trace = convergence_trace((0..200_000).map(|_| (1.0, rng.random::<f64>() < 0.05)), 1000, 0.05);
        let pts: Vec<(f64, f64)> = trace.iter().map(|p| ((p.n as f64).ln(), p.omega.ln())).collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.1, "{slope}");
    }

    fn report(n: u64, beta: f64) -> EstimationReport {
        let mut acc = Accumulator::new();
        for i in 0..n {
            acc.push(1.0, i % 100 == 0);
        }
        acc.report(beta, None).unwrap()
    }

    #[test]
    fn comparison_examples() {
        let a = report(1000, 0.05);
        assert_eq!(compare_reports(&a, &a).unwrap().reduction, 0.0);
        let crude = EstimationReport { n: 720_000, ..a.clone() };
        let trim = EstimationReport { n: 100_000, ..a.clone() };
        let c = compare_reports(&crude, &trim).unwrap();
        assert!((c.reduction - 0.861).abs() < 5e-4);
        assert!(matches!(
            compare_reports(&a, &report(1000, 0.1)),
            Err(Error::IncompatibleTargets(_))
        ));
    }

    #[test]
    fn report_json_round_trip_with_infinite_omega() {
        let r = crude_estimate([false, false], 0.05).unwrap();
        let back: EstimationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(back.omega.is_infinite());
        assert_eq!(back.n, 2);
    }
}
