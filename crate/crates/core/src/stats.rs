//! Evaluation statistics: MAE, brain age gap (BAG = predicted minus
//! chronological age), Pearson correlation with two-sided p-values,
//! Student-t 95% confidence intervals, per-group BAG summaries,
//! error-vs-cognitive-score correlations, and Welch's unequal-variance
//! t-test.
//!
//! p-values come from the Student-t CDF evaluated through the regularized
//! incomplete beta function (Lanczos log-gamma + Lentz continued
//! fraction); quantiles invert the CDF by bisection.

use crate::error::{Error, Result};
use crate::model::Group;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct AgePrediction {
    pub scan_id: String,
    pub subject_id: String,
    /// Chronological age y.
    pub age: f64,
    /// Model output y-hat.
    pub predicted: f64,
    pub group: Group,
    pub cog_score: f64,
}

impl AgePrediction {
    pub fn abs_err(&self) -> f64 {
        (self.predicted - self.age).abs()
    }
}

/// BAG = y-hat - y (signed).
pub fn bag(pred: &AgePrediction) -> f64 {
    pred.predicted - pred.age
}

/// (1/N) sum |y-hat_i - y_i|.
pub fn mae(preds: &[AgePrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Stats("mae of an empty prediction set".into()));
    }
    Ok(preds.iter().map(|p| p.abs_err()).sum::<f64>() / preds.len() as f64)
}

// ── special functions ───────────────────────────────────────────────

/// Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with (possibly fractional) df.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Inverse CDF by bisection (p in (0,1)).
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1)");
    if (p - 0.5).abs() < 1e-16 {
        return 0.0;
    }
    // Expand a bracket, then bisect.
    let mut hi = 1.0;
    while student_t_cdf(hi, df) < p.max(1.0 - p) {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let (mut lo, mut hi) = (-hi, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ── core statistics ─────────────────────────────────────────────────

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson r with a two-sided p-value from
/// t = r * sqrt((N-2)/(1-r^2)) against Student-t with N-2 df.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!(
            "pearson length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Stats(format!("pearson needs N >= 3, got {n}")));
    }
    let mx = mean_of(x);
    let my = mean_of(y);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Stats(
            "undefined correlation: an input has zero variance".into(),
        ));
    }
    let r = (cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 - 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        t_two_sided_p(t, df)
    };
    Ok((r, p))
}

/// mean +/- t_{0.975, N-1} * s / sqrt(N), s the sample (ddof 1) std.
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Stats(format!("mean_ci95 needs N >= 2, got {n}")));
    }
    let mean = mean_of(samples);
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let tq = student_t_quantile(0.975, (n - 1) as f64);
    Ok((mean, mean - tq * se, mean + tq * se))
}

/// Welch's unequal-variance t with Welch-Satterthwaite df, two-sided p.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "welch_t needs N >= 2 on both sides, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean_of(a), mean_of(b));
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / (nb - 1.0);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Err(Error::Stats(
            "degenerate variance: both samples are constant".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok((t, t_two_sided_p(t, df)))
}

// ── report assembly ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub group: Group,
    pub n: usize,
    pub bag_mean: f64,
    pub bag_ci95_low: Option<f64>,
    pub bag_ci95_high: Option<f64>,
    pub mae: f64,
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
}

/// Correlations of prediction error against the cognitive score, per
/// group. Both the paper's absolute-error flavor and the signed-BAG
/// flavor are reported side by side.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreCorrelation {
    pub group: Group,
    pub n: usize,
    pub abs_err_r: f64,
    pub abs_err_p: f64,
    pub bag_r: f64,
    pub bag_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WelchComparison {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
    /// CI construction, stated in every report.
    pub ci_method: String,
    pub groups: Vec<GroupStats>,
    pub correlations: Vec<ScoreCorrelation>,
    /// Welch tests between the groups' absolute-error distributions.
    pub comparisons: Vec<WelchComparison>,
    pub notices: Vec<String>,
}

/// Per-group BAG mean with 95% CI plus the absolute-error / BAG
/// correlations against the cognitive score. Groups with too few scans
/// are skipped with a notice rather than an error.
pub fn evaluate(preds: &[AgePrediction]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Stats("evaluate on an empty prediction set".into()));
    }
    let overall_mae = mae(preds)?;
    let ages: Vec<f64> = preds.iter().map(|p| p.age).collect();
    let yhat: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
    let mut notices = Vec::new();
    let (pearson_r, pearson_p) = match pearson(&yhat, &ages) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(e) => {
            notices.push(format!("overall correlation unavailable: {e}"));
            (None, None)
        }
    };

    let mut groups = Vec::new();
    let mut correlations = Vec::new();
    let mut err_samples: Vec<(Group, Vec<f64>)> = Vec::new();
    for group in Group::ALL {
        let members: Vec<&AgePrediction> = preds.iter().filter(|p| p.group == group).collect();
        if members.is_empty() {
            continue;
        }
        let bags: Vec<f64> = members.iter().map(|p| bag(p)).collect();
        let errs: Vec<f64> = members.iter().map(|p| p.abs_err()).collect();
        let g_ages: Vec<f64> = members.iter().map(|p| p.age).collect();
        let g_yhat: Vec<f64> = members.iter().map(|p| p.predicted).collect();
        let (ci_low, ci_high) = match mean_ci95(&bags) {
            Ok((_, lo, hi)) => (Some(lo), Some(hi)),
            Err(_) => {
                notices.push(format!(
                    "{}: n = {} too small for a 95% CI",
                    group.label(),
                    members.len()
                ));
                (None, None)
            }
        };
        let (gr, gp) = match pearson(&g_yhat, &g_ages) {
            Ok((r, p)) => (Some(r), Some(p)),
            Err(_) => (None, None),
        };
        groups.push(GroupStats {
            group,
            n: members.len(),
            bag_mean: mean_of(&bags),
            bag_ci95_low: ci_low,
            bag_ci95_high: ci_high,
            mae: mean_of(&errs),
            pearson_r: gr,
            pearson_p: gp,
        });

        if members.len() < 3 {
            notices.push(format!(
                "{}: n = {} < 3, score correlation skipped",
                group.label(),
                members.len()
            ));
        } else {
            let cogs: Vec<f64> = members.iter().map(|p| p.cog_score).collect();
            match (pearson(&errs, &cogs), pearson(&bags, &cogs)) {
                (Ok((ar, ap)), Ok((br, bp))) => correlations.push(ScoreCorrelation {
                    group,
                    n: members.len(),
                    abs_err_r: ar,
                    abs_err_p: ap,
                    bag_r: br,
                    bag_p: bp,
                }),
                _ => notices.push(format!(
                    "{}: score correlation undefined (constant input)",
                    group.label()
                )),
            }
        }
        err_samples.push((group, errs));
    }

    let mut comparisons = Vec::new();
    for i in 0..err_samples.len() {
        for j in i + 1..err_samples.len() {
            let (ga, ea) = &err_samples[i];
            let (gb, eb) = &err_samples[j];
            match welch_t(ea, eb) {
                Ok((t, p)) => comparisons.push(WelchComparison {
                    a: ga.label().to_string(),
                    b: gb.label().to_string(),
                    t,
                    p,
                }),
                Err(e) => notices.push(format!(
                    "welch {} vs {}: {e}",
                    ga.label(),
                    gb.label()
                )),
            }
        }
    }

    Ok(MetricsReport {
        n: preds.len(),
        mae: overall_mae,
        pearson_r,
        pearson_p,
        ci_method: "student-t on the mean".to_string(),
        groups,
        correlations,
        comparisons,
        notices,
    })
}

// ── flat CSV tables ─────────────────────────────────────────────────

pub fn predictions_csv(preds: &[AgePrediction]) -> String {
    let mut out =
        String::from("scan_id,subject_id,group,age,predicted,bag,abs_err,cog_score\n");
    for p in preds {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.scan_id,
            p.subject_id,
            p.group.label(),
            p.age,
            p.predicted,
            bag(p),
            p.abs_err(),
            p.cog_score
        ));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".to_string(), |x| x.to_string())
}

pub fn groups_csv(report: &MetricsReport) -> String {
    let mut out =
        String::from("group,n,bag_mean,bag_ci95_low,bag_ci95_high,mae,pearson_r,pearson_p\n");
    for g in &report.groups {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.group.label(),
            g.n,
            g.bag_mean,
            opt(g.bag_ci95_low),
            opt(g.bag_ci95_high),
            g.mae,
            opt(g.pearson_r),
            opt(g.pearson_p)
        ));
    }
    out
}

pub fn correlations_csv(report: &MetricsReport) -> String {
    let mut out = String::from("group,n,abs_err_r,abs_err_p,bag_r,bag_p\n");
    for c in &report.correlations {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.group.label(),
            c.n,
            c.abs_err_r,
            c.abs_err_p,
            c.bag_r,
            c.bag_p
        ));
    }
    out
}
