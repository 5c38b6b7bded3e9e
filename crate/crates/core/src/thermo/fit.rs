//! Small dense least-squares fits used for limit extrapolation.

/// Solves `min ‖A c − y‖₂` by Householder QR. `rows` holds the rows of `A`.
/// Returns `None` when `A` is rank deficient.
pub(crate) fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = rows.len();
    let p = rows.first()?.len();
    if n < p {
        return None;
    }
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let mut b = y.to_vec();
    for j in 0..p {
        let norm = (j..n).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..n).map(|i| a[i][j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in j..p {
            let dot: f64 = (j..n).map(|i| v[i - j] * a[i][col]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                a[i][col] -= f * v[i - j];
            }
        }
        let dot: f64 = (j..n).map(|i| v[i - j] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in j..n {
            b[i] -= f * v[i - j];
        }
    }
    let scale = (0..p).map(|j| a[j][j].abs()).fold(0.0, f64::max);
    let mut c = vec![0.0; p];
    for j in (0..p).rev() {
        if a[j][j].abs() <= 1e-13 * scale {
            return None;
        }
        let s: f64 = ((j + 1)..p).map(|k| a[j][k] * c[k]).sum();
        c[j] = (b[j] - s) / a[j][j];
    }
    Some(c)
}

/// Extrapolates `v(m) → v(∞)` assuming `v(m) = c0 + c1 ln m/m + c2/m + c3/m²`.
/// Abscissae are rescaled by `m_ref` to keep the design well conditioned.
pub(crate) fn log_corrected_limit(ms: &[f64], vs: &[f64]) -> Option<f64> {
    let m_ref = ms.iter().cloned().fold(1.0, f64::max);
    let rows: Vec<Vec<f64>> = ms
        .iter()
        .map(|&m| {
            let x = m_ref / m;
            vec![1.0, x * m.ln() / m_ref.ln().max(1.0), x, x * x]
        })
        .collect();
    least_squares(&rows, vs).map(|c| c[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_model() {
        let ms: Vec<f64> = (1..=40).map(|i| 100.0 * f64::from(i)).collect();
        let vs: Vec<f64> = ms.iter().map(|m| -0.7 + 2.0 * m.ln() / m - 3.0 / m + 5.0 / (m * m)).collect();
        let c0 = log_corrected_limit(&ms, &vs).unwrap();
        assert!((c0 + 0.7).abs() < 1e-10, "{c0}");
    }

    #[test]
    fn overdetermined_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, f64::from(i)]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 + 0.5 * f64::from(i)).collect();
        let c = least_squares(&rows, &y).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 2.0]).collect();
        assert!(least_squares(&rows, &[1.0; 5]).is_none());
    }
}
