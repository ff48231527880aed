//! Temperature-parameterized softmax cross-entropy over ROI class scores.
//!
//! Four members share one code path: scores `f(x_i, y)` are scaled per class by `alpha(y)`,
//! divided by a temperature, and fed to a max-subtracted log-softmax.
//!
//! | variant         | temperature                          | alpha(y)                     |
//! |-----------------|--------------------------------------|------------------------------|
//! | `Baseline`      | 1                                    | 1                            |
//! | `Static`        | `rho_tau`                            | 1                            |
//! | `Dynamic`       | `exp(rho_a t^2 + rho_b t + rho_c)`   | 1                            |
//! | `ScaledDynamic` | `exp(rho_a t^2 + rho_b t + rho_c)`   | `rho_alpha` on novel classes |
//!
//! Background is a base class, so it is never scaled.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    Baseline,
    Static,
    Dynamic,
    ScaledDynamic,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Baseline,
        LossVariant::Static,
        LossVariant::Dynamic,
        LossVariant::ScaledDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Baseline => "baseline",
            LossVariant::Static => "static",
            LossVariant::Dynamic => "dynamic",
            LossVariant::ScaledDynamic => "scaled_dynamic",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(LossVariant::Baseline),
            "static" => Ok(LossVariant::Static),
            "dynamic" => Ok(LossVariant::Dynamic),
            "scaled_dynamic" | "scaleddynamic" => Ok(LossVariant::ScaledDynamic),
            other => Err(Error::contract(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKind {
    Base,
    Novel,
}

/// Parameters of one member of the loss family. Fields that the variant does not use are kept
/// at their neutral values (1 for `rho_tau`/`rho_alpha`, 0 for the polynomial).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub variant: LossVariant,
    pub rho_tau: f64,
    pub rho_a: f64,
    pub rho_b: f64,
    pub rho_c: f64,
    pub rho_alpha: f64,
}

impl LossParams {
    pub fn baseline() -> Self {
        LossParams {
            variant: LossVariant::Baseline,
            rho_tau: 1.0,
            rho_a: 0.0,
            rho_b: 0.0,
            rho_c: 0.0,
            rho_alpha: 1.0,
        }
    }

    pub fn static_temperature(rho_tau: f64) -> Result<Self> {
        LossParams {
            variant: LossVariant::Static,
            rho_tau,
            ..Self::baseline()
        }
        .validated()
    }

    pub fn dynamic(rho_a: f64, rho_b: f64, rho_c: f64) -> Result<Self> {
        LossParams {
            variant: LossVariant::Dynamic,
            rho_a,
            rho_b,
            rho_c,
            ..Self::baseline()
        }
        .validated()
    }

    pub fn scaled_dynamic(rho_a: f64, rho_b: f64, rho_c: f64, rho_alpha: f64) -> Result<Self> {
        LossParams {
            variant: LossVariant::ScaledDynamic,
            rho_a,
            rho_b,
            rho_c,
            rho_alpha,
            ..Self::baseline()
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            LossVariant::Baseline => Ok(()),
            LossVariant::Static => {
                if self.rho_tau.is_finite() && self.rho_tau > 0.0 {
                    Ok(())
                } else {
                    Err(Error::contract(format!("rho_tau must be positive, got {}", self.rho_tau)))
                }
            }
            LossVariant::Dynamic | LossVariant::ScaledDynamic => {
                if ![self.rho_a, self.rho_b, self.rho_c].iter().all(|v| v.is_finite()) {
                    return Err(Error::contract("temperature polynomial must be finite"));
                }
                // The exponent is a quadratic, so its extremes over [0, 1] are at the ends or
                // at the vertex.
                let mut probes = vec![0.0, 1.0];
                if self.rho_a != 0.0 {
                    let vertex = -self.rho_b / (2.0 * self.rho_a);
                    if (0.0..=1.0).contains(&vertex) {
                        probes.push(vertex);
                    }
                }
                for t in probes {
                    let f = self.polynomial_temperature(t);
                    if !(f.is_finite() && f > 0.0) {
                        return Err(Error::contract(format!(
                            "temperature exp(poly) at t={t} is {f}, not a positive finite value"
                        )));
                    }
                }
                if self.variant == LossVariant::ScaledDynamic
                    && !(self.rho_alpha.is_finite() && self.rho_alpha > 0.0)
                {
                    return Err(Error::contract(format!(
                        "rho_alpha must be positive, got {}",
                        self.rho_alpha
                    )));
                }
                Ok(())
            }
        }
    }

    fn polynomial_temperature(&self, t: f64) -> f64 {
        (self.rho_a * t * t + self.rho_b * t + self.rho_c).exp()
    }

    /// Temperature in effect at `clock` for any variant.
    pub fn temperature(&self, clock: TrainClock) -> f64 {
        match self.variant {
            LossVariant::Baseline => 1.0,
            LossVariant::Static => self.rho_tau,
            LossVariant::Dynamic | LossVariant::ScaledDynamic => {
                self.polynomial_temperature(clock.t())
            }
        }
    }

    /// Per-class score multiplier `alpha(y)`.
    pub fn class_scale(&self, kind: ClassKind) -> f64 {
        match (self.variant, kind) {
            (LossVariant::ScaledDynamic, ClassKind::Novel) => self.rho_alpha,
            _ => 1.0,
        }
    }
}

/// Normalized fine-tuning progress `iteration / total_iterations`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TrainClock(f64);

impl TrainClock {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(TrainClock(t))
        } else {
            Err(Error::contract(format!("train clock must lie in [0, 1], got {t}")))
        }
    }

    pub fn at(iteration: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::contract("train clock needs a positive iteration total"));
        }
        Self::new(iteration as f64 / total as f64)
    }

    pub fn t(self) -> f64 {
        self.0
    }
}

/// `exp(rho_a t^2 + rho_b t + rho_c)`; only defined for the dynamic variants.
pub fn dynamic_temperature(params: &LossParams, clock: TrainClock) -> Result<f64> {
    match params.variant {
        LossVariant::Dynamic | LossVariant::ScaledDynamic => {
            Ok(params.polynomial_temperature(clock.t()))
        }
        other => Err(Error::contract(format!(
            "dynamic_temperature requires a dynamic variant, got {other}"
        ))),
    }
}

/// Borrowed view of ROI scores: `logits` is row-major `n_rois x class_kinds.len()`.
#[derive(Debug, Clone, Copy)]
pub struct RoiBatch<'a> {
    logits: &'a [f64],
    labels: &'a [usize],
    class_kinds: &'a [ClassKind],
}

impl<'a> RoiBatch<'a> {
    pub fn new(logits: &'a [f64], labels: &'a [usize], class_kinds: &'a [ClassKind]) -> Result<Self> {
        let c = class_kinds.len();
        if c == 0 {
            return Err(Error::contract("a batch needs at least one class"));
        }
        if logits.len() != labels.len() * c {
            return Err(Error::contract(format!(
                "logits hold {} values but {} labels x {} classes were declared",
                logits.len(),
                labels.len(),
                c
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} outside [0, {c})")));
        }
        Ok(RoiBatch {
            logits,
            labels,
            class_kinds,
        })
    }

    pub fn n_rois(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_kinds.len()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        let c = self.n_classes();
        &self.logits[i * c..(i + 1) * c]
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn class_kinds(&self) -> &'a [ClassKind] {
        self.class_kinds
    }
}

/// Scaled logits `alpha(y) f / tau` for one row, written into `out`.
fn scaled_row(row: &[f64], scales: &[f64], out: &mut [f64]) {
    for ((o, &f), &s) in out.iter_mut().zip(row).zip(scales) {
        *o = s * f;
    }
}

/// In-place softmax; returns `log(sum(exp(z - max)))+max`, i.e. the row's log-partition.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn class_scales(batch: &RoiBatch<'_>, params: &LossParams, clock: TrainClock) -> Result<Vec<f64>> {
    params.validate()?;
    if batch.n_rois() == 0 {
        return Err(Error::EmptyBatch);
    }
    let tau = params.temperature(clock);
    Ok(batch
        .class_kinds()
        .iter()
        .map(|&k| params.class_scale(k) / tau)
        .collect())
}

/// Mean over ROIs of `-log softmax(z)[y_i]`.
pub fn classification_loss(batch: &RoiBatch<'_>, params: &LossParams, clock: TrainClock) -> Result<f64> {
    let scales = class_scales(batch, params, clock)?;
    let mut z = vec![0.0; batch.n_classes()];
    let mut total = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        scaled_row(batch.row(i), &scales, &mut z);
        let label_logit = z[y];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - label_logit;
    }
    Ok(total / batch.n_rois() as f64)
}

/// Gradient of [`classification_loss`] with respect to the raw scores, row-major like the
/// logits.
pub fn classification_loss_grad(
    batch: &RoiBatch<'_>,
    params: &LossParams,
    clock: TrainClock,
) -> Result<Vec<f64>> {
    loss_and_grad(batch, params, clock).map(|(_, g)| g)
}

/// Loss and gradient in one pass.
pub fn loss_and_grad(
    batch: &RoiBatch<'_>,
    params: &LossParams,
    clock: TrainClock,
) -> Result<(f64, Vec<f64>)> {
    let scales = class_scales(batch, params, clock)?;
    let c = batch.n_classes();
    let n = batch.n_rois() as f64;
    let mut grad = vec![0.0; batch.n_rois() * c];
    let mut total = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        let g = &mut grad[i * c..(i + 1) * c];
        scaled_row(batch.row(i), &scales, g);
        let label_logit = g[y];
        let log_partition = softmax_in_place(g);
        total += log_partition - label_logit;
        g[y] -= 1.0;
        for (gv, &s) in g.iter_mut().zip(&scales) {
            *gv *= s / n;
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kinds(c: usize, novel_from: usize) -> Vec<ClassKind> {
        (0..c)
            .map(|j| if j >= novel_from { ClassKind::Novel } else { ClassKind::Base })
            .collect()
    }

    fn clock(t: f64) -> TrainClock {
        TrainClock::new(t).unwrap()
    }

    #[test]
    fn dynamic_temperature_examples() {
        let p = LossParams::dynamic(0.0, 0.0, 0.0).unwrap();
        assert_eq!(dynamic_temperature(&p, clock(0.5)).unwrap(), 1.0);

        let p = LossParams::dynamic(0.0, 0.0, 2f64.ln()).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!((dynamic_temperature(&p, clock(t)).unwrap() - 2.0).abs() < 1e-15);
        }

        let p = LossParams::dynamic(1.0, -1.0, 0.0).unwrap();
        assert_eq!(dynamic_temperature(&p, clock(1.0)).unwrap(), 1.0);

        // 0.5 * 0.36 - 0.6 + 0.2 = -0.22
        let p = LossParams::dynamic(0.5, -1.0, 0.2).unwrap();
        let expected = (-0.22f64).exp();
        assert!((dynamic_temperature(&p, clock(0.6)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dynamic_temperature_rejects_other_variants() {
        let err = dynamic_temperature(&LossParams::baseline(), clock(0.1));
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = dynamic_temperature(&LossParams::static_temperature(2.0).unwrap(), clock(0.1));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_invariants() {
        assert!(LossParams::static_temperature(0.0).is_err());
        assert!(LossParams::static_temperature(-1.0).is_err());
        assert!(LossParams::scaled_dynamic(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LossParams::dynamic(f64::NAN, 0.0, 0.0).is_err());
        assert!(LossParams::dynamic(0.0, 0.0, 800.0).is_err());
        assert!(TrainClock::new(1.5).is_err());
        assert!(TrainClock::new(-0.1).is_err());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let c = 5;
        let logits = vec![0.7; 3 * c];
        let labels = [0, 2, 4];
        let k = kinds(c, 3);
        let batch = RoiBatch::new(&logits, &labels, &k).unwrap();
        let params = [
            LossParams::baseline(),
            LossParams::static_temperature(0.3).unwrap(),
            LossParams::dynamic(0.4, -2.0, 0.1).unwrap(),
        ];
        for p in params {
            let loss = classification_loss(&batch, &p, clock(0.25)).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12, "{p:?}: {loss}");
        }
    }

    #[test]
    fn single_roi_static_half_temperature() {
        // z = [4, 0], so the loss is ln(1 + e^-4).
        let logits = [2.0, 0.0];
        let labels = [0];
        let k = kinds(2, 2);
        let batch = RoiBatch::new(&logits, &labels, &k).unwrap();
        let p = LossParams::static_temperature(0.5).unwrap();
        let loss = classification_loss(&batch, &p, clock(0.0)).unwrap();
        let expected = (-4f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15, "{loss} vs {expected}");
    }

    #[test]
    fn baseline_gradient_example() {
        let logits = [0.0, 0.0];
        let labels = [0];
        let k = kinds(2, 2);
        let batch = RoiBatch::new(&logits, &labels, &k).unwrap();
        let g = classification_loss_grad(&batch, &LossParams::baseline(), clock(0.0)).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let k = kinds(3, 3);
        let batch = RoiBatch::new(&[], &[], &k).unwrap();
        assert!(matches!(
            classification_loss(&batch, &LossParams::baseline(), clock(0.0)),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            classification_loss_grad(&batch, &LossParams::baseline(), clock(0.0)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batch_shape_checks() {
        let k = kinds(3, 3);
        assert!(RoiBatch::new(&[0.0; 5], &[0, 1], &k).is_err());
        assert!(RoiBatch::new(&[0.0; 6], &[0, 3], &k).is_err());
    }

    #[test]
    fn gradient_rows_sum_to_zero_without_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 6;
        let logits: Vec<f64> = (0..4 * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [0, 5, 2, 3];
        let k = kinds(c, 4);
        let batch = RoiBatch::new(&logits, &labels, &k).unwrap();
        for p in [
            LossParams::baseline(),
            LossParams::static_temperature(0.4).unwrap(),
            LossParams::dynamic(1.0, -0.5, 0.3).unwrap(),
        ] {
            let g = classification_loss_grad(&batch, &p, clock(0.7)).unwrap();
            for row in g.chunks(c) {
                assert!(row.iter().sum::<f64>().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sharper_temperature_raises_confidence() {
        let row = [1.0, 0.2, -0.5, 0.9];
        let mut prev = 0.0;
        for tau in [4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
            let mut z: Vec<f64> = row.iter().map(|v| v / tau).collect();
            softmax_in_place(&mut z);
            let top = z.iter().copied().fold(0.0, f64::max);
            assert!(top > prev, "tau {tau}: {top} <= {prev}");
            prev = top;
        }
    }

    #[test]
    fn large_scaled_logits_stay_finite() {
        let logits = [500.0, -500.0, 0.0];
        let labels = [1];
        let k = kinds(3, 3);
        let batch = RoiBatch::new(&logits, &labels, &k).unwrap();
        let p = LossParams::static_temperature(1e-3).unwrap();
        let (loss, grad) = loss_and_grad(&batch, &p, clock(0.0)).unwrap();
        assert!(loss.is_finite() && (loss - 1e6).abs() < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
