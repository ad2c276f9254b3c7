use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("correlation undefined: an input is constant")]
    Degenerate,
    #[error("non-finite input")]
    NonFinite,
    #[error("logistic fit failed: {0}")]
    FitFailed(String),
}

/// How PLCC treats predictions before correlating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlccMode {
    #[default]
    Raw,
    /// Fit a 4-parameter logistic from predictions to MOS first.
    Logistic,
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(MetricError::TooFewSamples(a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::Degenerate);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson product-moment correlation.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    check(pred, mos)?;
    pearson_unchecked(pred, mos)
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    check(pred, mos)?;
    pearson_unchecked(&fractional_ranks(pred), &fractional_ranks(mos))
}

pub fn plcc_with(mode: PlccMode, pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    match mode {
        PlccMode::Raw => plcc(pred, mos),
        PlccMode::Logistic => plcc_logistic(pred, mos),
    }
}

/// `f(x) = b2 + (b1 - b2) / (1 + exp(-(x - b3) / b4))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic4 {
    pub b: [f64; 4],
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        b2 + (b1 - b2) * sigmoid((x - b3) / b4)
    }

    fn gradient(&self, x: f64) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.b;
        let s = sigmoid((x - b3) / b4);
        let ds = s * (1.0 - s);
        [
            s,
            1.0 - s,
            -(b1 - b2) * ds / b4,
            -(b1 - b2) * ds * (x - b3) / (b4 * b4),
        ]
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Least-squares fit of [`Logistic4`] mapping `x` to `y` (Levenberg-Marquardt).
pub fn fit_logistic4(x: &[f64], y: &[f64]) -> Result<Logistic4, MetricError> {
    check(x, y)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(MetricError::Degenerate);
    }
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let mut model = Logistic4 {
        b: [ymax, ymin, mean, sd],
    };
    let sse = |m: &Logistic4| x.iter().zip(y).map(|(a, b)| (b - m.eval(*a)).powi(2)).sum::<f64>();
    let mut cost = sse(&model);
    let mut lambda = 1e-3;

    for _ in 0..500 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let g = model.gradient(xi);
            let r = yi - model.eval(xi);
            for a in 0..4 {
                jtr[a] += g[a] * r;
                for b in 0..4 {
                    jtj[a][b] += g[a] * g[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            if let Some(step) = solve4(m, jtr) {
                let mut cand = model;
                for (b, d) in cand.b.iter_mut().zip(step) {
                    *b += d;
                }
                let c = sse(&cand);
                if c.is_finite() && cand.b[3] != 0.0 && c < cost {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    model = cand;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-15;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if model.b.iter().all(|v| v.is_finite()) {
        Ok(model)
    } else {
        Err(MetricError::FitFailed("non-finite parameters".into()))
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * out[k]).sum();
        out[row] = (b[row] - s) / a[row][row];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// PLCC after mapping predictions through a fitted [`Logistic4`].
pub fn plcc_logistic(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    let model = fit_logistic4(pred, mos)?;
    let mapped: Vec<f64> = pred.iter().map(|&p| model.eval(p)).collect();
    pearson_unchecked(&mapped, mos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srcc_examples() {
        let up = [1.0, 2.0, 3.0, 4.0, 5.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((srcc(&up, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&down, &up).unwrap() + 1.0).abs() < 1e-15);

        // Ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4): centered
        // (-1.5, 0, 0, 1.5) and (-1.5, -0.5, 0.5, 1.5), so r = 4.5 / sqrt(4.5 * 5).
        let r = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn plcc_examples() {
        let mos = [10.0, 40.0, 30.0, 90.0];
        let affine: Vec<f64> = mos.iter().map(|m| 2.0 * m + 1.0).collect();
        assert!((plcc(&affine, &mos).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = mos.iter().map(|m| -m).collect();
        assert!((plcc(&neg, &mos).unwrap() + 1.0).abs() < 1e-15);

        // Means 0.4125 and 42.5; sum of products 29.375; squares 0.251875, 3475.
        let r = plcc(&[0.1, 0.4, 0.35, 0.8], &mos).unwrap();
        assert!((r - 29.375 / (0.251875f64 * 3475.0).sqrt()).abs() < 1e-12, "{r}");
        assert!((r - 0.9929055518635908).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(srcc(&[1.0, 2.0], &[1.0, 2.0]), Err(MetricError::TooFewSamples(2)));
        assert_eq!(plcc(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(MetricError::Degenerate));
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[1.0; 3]), Err(MetricError::Degenerate));
        assert_eq!(plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(3, 2)));
        assert_eq!(plcc(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), Err(MetricError::NonFinite));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(fractional_ranks(&[3.0, 1.0, 3.0, 2.0, 3.0]), vec![4.0, 1.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn logistic_recovers_sigmoid_data() {
        let truth = Logistic4 {
            b: [80.0, 10.0, 0.5, 0.08],
        };
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
        let raw = plcc(&x, &y).unwrap();
        let fitted = plcc_logistic(&x, &y).unwrap();
        assert!(raw < 0.97, "{raw}");
        assert!(fitted > 0.9999, "{fitted}");
    }

    proptest! {
        #[test]
        fn symmetric(v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..30)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let (Ok(x), Ok(y)) = (srcc(&a, &b), srcc(&b, &a)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            if let (Ok(x), Ok(y)) = (plcc(&a, &b), plcc(&b, &a)) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }
    }
}
