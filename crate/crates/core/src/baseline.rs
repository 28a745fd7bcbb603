//! Desk-scale reference predictors: the predict-train-mean constant and an
//! ordinary least squares read-out from mean session embeddings. They
//! bound what the main model must beat (train mean) and roughly match
//! (OLS) on synthetic corpora, and they double as corpus learnability
//! probes.

use crate::data::{filter_turns, DataError, SessionRecord, SpeakerView};

/// Mean client-turn embedding of a session.
pub fn mean_client_embedding(session: &SessionRecord, d_e: usize) -> Result<Vec<f64>, DataError> {
    let turns = filter_turns(session, SpeakerView::Client)?;
    let mut out = vec![0.0; d_e];
    for t in &turns {
        for (o, v) in out.iter_mut().zip(t.embedding.iter()) {
            *o += v;
        }
    }
    let n = turns.len() as f64;
    for o in out.iter_mut() {
        *o /= n;
    }
    Ok(out)
}

/// Solve (Xᵀ X + ridge·I) β = Xᵀ y by Cholesky; `ridge` defaults to a tiny
/// jitter that only guards numerical singularity.
fn solve_normal_equations(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Vec<f64> {
    let n = x.len();
    let p = x[0].len();
    assert_eq!(n, y.len());
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (row, &target) in x.iter().zip(y.iter()) {
        for i in 0..p {
            xty[i] += row[i] * target;
            for j in i..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        xtx[i * p + i] += ridge;
        for j in 0..i {
            xtx[i * p + j] = xtx[j * p + i];
        }
    }
    // Cholesky decomposition xtx = L Lᵀ.
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut sum = xtx[i * p + j];
            for k in 0..j {
                sum -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                l[i * p + i] = sum.max(1e-12).sqrt();
            } else {
                l[i * p + j] = sum / l[j * p + j];
            }
        }
    }
    // Forward then back substitution.
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut sum = xty[i];
        for k in 0..i {
            sum -= l[i * p + k] * z[k];
        }
        z[i] = sum / l[i * p + i];
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let mut sum = z[i];
        for k in i + 1..p {
            sum -= l[k * p + i] * beta[k];
        }
        beta[i] = sum / l[i * p + i];
    }
    beta
}

/// Linear regression with intercept over precomputed feature rows.
pub struct OlsModel {
    pub beta: Vec<f64>,
}

impl OlsModel {
    pub fn fit(features: &[Vec<f64>], targets: &[f64]) -> Self {
        assert!(!features.is_empty());
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                let mut r = Vec::with_capacity(f.len() + 1);
                r.push(1.0);
                r.extend_from_slice(f);
                r
            })
            .collect();
        OlsModel { beta: solve_normal_equations(&rows, targets, 1e-9) }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.beta[0] + self.beta[1..].iter().zip(features.iter()).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// OLS feature row for one session: mean client embedding, optionally
/// concatenated with the previous session's (zeros plus an indicator when
/// absent).
pub fn ols_features(
    session: &SessionRecord,
    prev: Option<&SessionRecord>,
    d_e: usize,
    with_history: bool,
) -> Result<Vec<f64>, DataError> {
    let mut row = mean_client_embedding(session, d_e)?;
    if with_history {
        match prev {
            Some(p) => {
                row.extend(mean_client_embedding(p, d_e)?);
                row.push(1.0);
            }
            None => {
                row.extend(vec![0.0; d_e]);
                row.push(0.0);
            }
        }
    }
    Ok(row)
}

/// Constant predictor at the mean of the training targets.
pub fn train_mean(targets: &[f64]) -> f64 {
    assert!(!targets.is_empty());
    targets.iter().sum::<f64>() / targets.len() as f64
}
