//! Selective state-space scan with a frequency term on the readout, its
//! dual-scope (global + windowed) application, and causal linear attention
//! used as an independent check of the recurrence.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{softplus, standardize_columns_f64, Linear, Matrix};

/// Resolved parameters for one sequence of `N` tokens.
///
/// `A` is diagonal and shared by every channel; the state is `n_state × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `n_state`, entries ≤ 0.
    pub a: Vec<f64>,
    /// Per-token step, > 0.
    pub delta: Vec<f64>,
    /// `N × n_state`.
    pub b: Matrix<f64>,
    /// `N × n_state`.
    pub c: Matrix<f64>,
    /// Per-channel skip.
    pub d: Vec<f64>,
    /// ≥ 0.
    pub gamma: f64,
}

impl SsmParams {
    pub fn n_state(&self) -> usize {
        self.a.len()
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn validate(&self, tokens: usize, channels: usize) -> Result<()> {
        let n = self.n_state();
        if self.delta.len() != tokens {
            return Err(shape("ssm delta length", tokens, self.delta.len()));
        }
        for (m, what) in [(&self.b, "ssm B"), (&self.c, "ssm C")] {
            if m.rows() != tokens || m.cols() != n {
                return Err(shape(what, format!("{tokens}x{n}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        if self.d.len() != channels {
            return Err(shape("ssm D length", channels, self.d.len()));
        }
        if let Some(a) = self.a.iter().find(|a| !(**a <= 0.0)) {
            return Err(invalid(format!("ssm A entries must be <= 0, got {a}")));
        }
        if let Some(dt) = self.delta.iter().find(|d| !(**d > 0.0)) {
            return Err(invalid(format!("ssm delta must be > 0, got {dt}")));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid(format!("ssm gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Rows `start..end` of every per-token array.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let rows: Vec<usize> = (start..end).collect();
        Self {
            a: self.a.clone(),
            delta: self.delta[start..end].to_vec(),
            b: self.b.gather_rows(&rows),
            c: self.c.gather_rows(&rows),
            d: self.d.clone(),
            gamma: self.gamma,
        }
    }
}

/// Zero-order hold on `A`, first-order step on `B`: `(exp(Δ·A), Δ·B)`.
pub fn discretize(a: &[f64], delta: f64, b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(invalid(format!("discretize needs delta > 0, got {delta}")));
    }
    Ok((a.iter().map(|&v| (delta * v).exp()).collect(), b.iter().map(|&v| delta * v).collect()))
}

/// `h_i = Ā_i ⊙ h_{i−1} + B̄_i (Δ_i x_i)`, `y_i = (C_i + γ Q_i)·h_i + D ⊙ x_i`,
/// with `h_{−1} = 0`. `q` of `None` drops the frequency term.
pub fn fssm_scan(x: &Matrix<f64>, params: &SsmParams, q: Option<&Matrix<f64>>) -> Result<Matrix<f64>> {
    let (len, d) = (x.rows(), x.cols());
    params.validate(len, d)?;
    let n = params.n_state();
    if let Some(q) = q {
        if q.rows() != len || q.cols() != n {
            return Err(shape("ssm Q^freq", format!("{len}x{n}"), format!("{}x{}", q.rows(), q.cols())));
        }
    }
    let mut h = vec![0.0f64; n * d];
    let mut y = Matrix::zeros(len, d);
    let mut readout = vec![0.0f64; n];
    let mut dx = vec![0.0f64; d];
    for i in 0..len {
        let (abar, bbar) = discretize(&params.a, params.delta[i], params.b.row(i))?;
        let xi = x.row(i);
        for (o, v) in dx.iter_mut().zip(xi) {
            *o = params.delta[i] * v;
        }
        for s in 0..n {
            let hs = &mut h[s * d..(s + 1) * d];
            for (hv, xv) in hs.iter_mut().zip(&dx) {
                *hv = abar[s] * *hv + bbar[s] * xv;
            }
        }
        match q {
            Some(q) => {
                for (s, r) in readout.iter_mut().enumerate() {
                    *r = params.c.get(i, s) + params.gamma * q.get(i, s);
                }
            }
            None => readout.copy_from_slice(params.c.row(i)),
        }
        let yi = y.row_mut(i);
        for (ch, out) in yi.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (s, r) in readout.iter().enumerate() {
                acc += r * h[s * d + ch];
            }
            *out = acc + params.d[ch] * xi[ch];
        }
    }
    Ok(y)
}

/// `S_i = Σ_{j≤i} K_jᵀ V_j`; returns the unnormalized `Q_i · S_i`.
pub fn linear_attention_numerator(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Result<Matrix<f64>> {
    check_attention(q, k, v)?;
    Ok(attention_scan(q, k, v).0)
}

/// `y_i = (Q_i · S_i) / (Q_i · Z_i)` with `Z_i = Σ_{j≤i} K_j`.
pub fn causal_linear_attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Result<Matrix<f64>> {
    check_attention(q, k, v)?;
    let (mut num, den) = attention_scan(q, k, v);
    for (i, &z) in den.iter().enumerate() {
        if z.abs() < 1e-12 {
            return Err(Error::DegenerateNormalization { index: i, value: z });
        }
        num.row_mut(i).iter_mut().for_each(|y| *y /= z);
    }
    Ok(num)
}

fn check_attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(shape("attention lengths", q.rows(), format!("{} / {}", k.rows(), v.rows())));
    }
    if q.cols() != k.cols() {
        return Err(shape("attention key width", q.cols(), k.cols()));
    }
    Ok(())
}

fn attention_scan(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> (Matrix<f64>, Vec<f64>) {
    let (n, d) = (k.cols(), v.cols());
    let mut s = vec![0.0f64; n * d];
    let mut z = vec![0.0f64; n];
    let mut num = Matrix::zeros(q.rows(), d);
    let mut den = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        for a in 0..n {
            let ka = k.get(i, a);
            z[a] += ka;
            for (sv, vv) in s[a * d..(a + 1) * d].iter_mut().zip(v.row(i)) {
                *sv += ka * vv;
            }
        }
        let qi = q.row(i);
        for (ch, out) in num.row_mut(i).iter_mut().enumerate() {
            *out = (0..n).map(|a| qi[a] * s[a * d + ch]).sum();
        }
        den.push((0..n).map(|a| qi[a] * z[a]).sum());
    }
    (num, den)
}

/// Global scan plus independent scans over consecutive `window`-token
/// chunks, summed and standardized per channel.
pub fn dual_scope_scan(
    x: &Matrix<f64>,
    global: &SsmParams,
    local: &SsmParams,
    q: Option<&Matrix<f64>>,
    window: usize,
) -> Result<Matrix<f64>> {
    if window == 0 {
        return Err(invalid("dual-scope window must be positive"));
    }
    let mut y = fssm_scan(x, global, q)?;
    local.validate(x.rows(), x.cols())?;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + window).min(x.rows());
        let rows: Vec<usize> = (start..end).collect();
        let q_win = q.map(|q| q.gather_rows(&rows));
        let part = fssm_scan(&x.gather_rows(&rows), &local.slice(start, end), q_win.as_ref())?;
        for (r, i) in rows.iter().enumerate() {
            for (a, b) in y.row_mut(*i).iter_mut().zip(part.row(r)) {
                *a += b;
            }
        }
        start = end;
    }
    standardize_columns_f64(&mut y);
    Ok(y)
}

/// Maps from a token to its selective parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveWeights {
    /// `A = −exp(a_log)`.
    pub a_log: Vec<f32>,
    /// `d → 1`, through softplus.
    pub delta: Linear,
    /// `d → n_state`.
    pub b: Linear,
    /// `d → n_state`.
    pub c: Linear,
    pub d_skip: Vec<f32>,
    pub gamma: f32,
}

impl SelectiveWeights {
    /// Zero projections; `A = −1`, `Δ = ln 2`, no skip, no frequency term.
    pub fn zeros(d: usize, n_state: usize) -> Self {
        Self {
            a_log: vec![0.0; n_state],
            delta: Linear::zeros(d, 1),
            b: Linear::zeros(d, n_state),
            c: Linear::zeros(d, n_state),
            d_skip: vec![0.0; d],
            gamma: 0.0,
        }
    }

    pub fn n_state(&self) -> usize {
        self.a_log.len()
    }

    pub fn params(&self, x: &Matrix<f32>) -> Result<SsmParams> {
        let n = self.n_state();
        if self.delta.out_dim() != 1 || self.b.out_dim() != n || self.c.out_dim() != n {
            return Err(invalid("selective projections disagree on n_state"));
        }
        for lin in [&self.delta, &self.b, &self.c] {
            if lin.in_dim() != x.cols() {
                return Err(shape("selective projection input", x.cols(), lin.in_dim()));
            }
        }
        let len = x.rows();
        let mut b = Matrix::zeros(len, n);
        let mut c = Matrix::zeros(len, n);
        let mut delta = Vec::with_capacity(len);
        for i in 0..len {
            let row = x.row(i);
            delta.push(softplus(self.delta.apply(row)[0]).max(f64::MIN_POSITIVE));
            b.row_mut(i).copy_from_slice(&self.b.apply(row));
            c.row_mut(i).copy_from_slice(&self.c.apply(row));
        }
        Ok(SsmParams {
            a: self.a_log.iter().map(|&v| -f64::from(v).exp()).collect(),
            delta,
            b,
            c,
            d: self.d_skip.iter().map(|&v| f64::from(v)).collect(),
            gamma: f64::from(self.gamma),
        })
    }
}

/// Analytic cost of one scan: per token, `5·n·d` for the state update and
/// readout, `3·d` for the input step and skip, `4·n` for discretization and
/// the readout vector.
pub fn scan_flops(tokens: usize, n_state: usize, d: usize) -> u64 {
    let (n, d) = (n_state as u64, d as u64);
    tokens as u64 * (5 * n * d + 3 * d + 4 * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_matrix(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
    }

    fn random_params(seed: u64, len: usize, n: usize, d: usize) -> SsmParams {
        let mut r = rng::stream(seed, 0);
        SsmParams {
            a: (0..n).map(|_| -r.random_range(0.01..1.5)).collect(),
            delta: (0..len).map(|_| r.random_range(0.05..1.0)).collect(),
            b: rand_matrix(&mut r, len, n, 1.0),
            c: rand_matrix(&mut r, len, n, 1.0),
            d: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            gamma: r.random_range(0.0..1.0),
        }
    }

    /// `y_i = Σ_{j≤i} (C_i+γQ_i)·(Π_{k=j+1..i} Ā_k)·B̄_j·Δ_j·x_j + D·x_i`.
    fn unrolled(x: &Matrix<f64>, p: &SsmParams, q: &Matrix<f64>) -> Matrix<f64> {
        let (len, d, n) = (x.rows(), x.cols(), p.n_state());
        Matrix::from_fn(len, d, |i, ch| {
            let mut acc = p.d[ch] * x.get(i, ch);
            for j in 0..=i {
                for s in 0..n {
                    let mut decay = 1.0;
                    for k in j + 1..=i {
                        decay *= (p.delta[k] * p.a[s]).exp();
                    }
                    let read = p.c.get(i, s) + p.gamma * q.get(i, s);
                    acc += read * decay * p.delta[j] * p.b.get(j, s) * p.delta[j] * x.get(j, ch);
                }
            }
            acc
        })
    }

    #[test]
    fn discretize_cases() {
        let (a, _) = discretize(&[0.0, 0.0], 0.7, &[1.0, 2.0]).unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
        let (a, b) = discretize(&[-3.0], 1e-12, &[5.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-10 && b[0].abs() < 1e-10);
        let (a, b) = discretize(&[-1.0], 0.5, &[2.0]).unwrap();
        assert!((a[0] - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
        assert!(discretize(&[-1.0], 0.0, &[1.0]).is_err());
        assert!(discretize(&[-1.0], -1.0, &[1.0]).is_err());
    }

    #[test]
    fn single_step_expansion() {
        let p = random_params(1, 1, 3, 2);
        let mut r = rng::stream(2, 0);
        let x = rand_matrix(&mut r, 1, 2, 1.0);
        let q = rand_matrix(&mut r, 1, 3, 1.0);
        let y = fssm_scan(&x, &p, Some(&q)).unwrap();
        for ch in 0..2 {
            let mut want = p.d[ch] * x.get(0, ch);
            for s in 0..3 {
                want += (p.c.get(0, s) + p.gamma * q.get(0, s)) * (p.delta[0] * p.b.get(0, s)) * p.delta[0] * x.get(0, ch);
            }
            assert!((y.get(0, ch) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_matches_unrolled_sum() {
        for seed in 0..3 {
            let p = random_params(10 + seed, 64, 4, 3);
            let mut r = rng::stream(20 + seed, 0);
            let x = rand_matrix(&mut r, 64, 3, 1.0);
            let q = rand_matrix(&mut r, 64, 4, 1.0);
            let y = fssm_scan(&x, &p, Some(&q)).unwrap();
            let want = unrolled(&x, &p, &q);
            for (a, b) in y.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_a_unit_delta_equals_attention_numerator() {
        let mut r = rng::stream(30, 0);
        let (len, n, d) = (40, 5, 3);
        let mut p = random_params(31, len, n, d);
        p.a = vec![0.0; n];
        p.delta = vec![1.0; len];
        p.d = vec![0.0; d];
        p.gamma = 0.0;
        let x = rand_matrix(&mut r, len, d, 1.0);
        let y = fssm_scan(&x, &p, None).unwrap();
        let num = linear_attention_numerator(&p.c, &p.b, &x).unwrap();
        for (a, b) in y.as_slice().iter().zip(num.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_zero_is_bitwise_plain_scan() {
        let mut p = random_params(40, 50, 4, 2);
        p.gamma = 0.0;
        let mut r = rng::stream(41, 0);
        let x = rand_matrix(&mut r, 50, 2, 1.0);
        let q = rand_matrix(&mut r, 50, 4, 100.0);
        assert_eq!(fssm_scan(&x, &p, Some(&q)).unwrap(), fssm_scan(&x, &p, None).unwrap());
    }

    #[test]
    fn scan_errors() {
        let p = random_params(50, 5, 2, 2);
        let x = Matrix::zeros(4, 2);
        assert!(fssm_scan(&x, &p, None).is_err());
        let x = Matrix::zeros(5, 2);
        assert!(fssm_scan(&x, &p, Some(&Matrix::zeros(5, 3))).is_err());
        let mut bad = p.clone();
        bad.a[0] = 0.1;
        assert!(fssm_scan(&x, &bad, None).is_err());
        let mut bad = p.clone();
        bad.gamma = -1.0;
        assert!(fssm_scan(&x, &bad, None).is_err());
        let mut bad = p;
        bad.delta[2] = 0.0;
        assert!(fssm_scan(&x, &bad, None).is_err());
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = Matrix::from_vec(1, 2, vec![0.5, 1.0]).unwrap();
        let k = Matrix::from_vec(1, 2, vec![2.0, -0.5]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let y = causal_linear_attention(&q, &k, &v).unwrap();
        for (a, b) in y.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_orthogonal_query_is_degenerate() {
        let q = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let k = Matrix::from_vec(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let v = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        match causal_linear_attention(&q, &k, &v) {
            Err(Error::DegenerateNormalization { index: 0, .. }) => {}
            other => panic!("expected degenerate normalization, got {other:?}"),
        }
    }

    #[test]
    fn attention_matches_masked_quadratic_form() {
        let mut r = rng::stream(60, 0);
        let (len, n, d) = (50, 4, 3);
        // positive features keep the denominator away from zero
        let q = Matrix::from_fn(len, n, |_, _| r.random_range(0.1..1.0));
        let k = Matrix::from_fn(len, n, |_, _| r.random_range(0.1..1.0));
        let v = rand_matrix(&mut r, len, d, 1.0);
        let y = causal_linear_attention(&q, &k, &v).unwrap();
        for i in 0..len {
            let w: Vec<f64> = (0..=i).map(|j| (0..n).map(|a| q.get(i, a) * k.get(j, a)).sum()).collect();
            let z: f64 = w.iter().sum();
            for ch in 0..d {
                let want = (0..=i).map(|j| w[j] * v.get(j, ch)).sum::<f64>() / z;
                assert!((y.get(i, ch) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dual_scope_short_sequence_doubles_global() {
        let p = random_params(70, 100, 4, 3);
        let mut r = rng::stream(71, 0);
        let x = rand_matrix(&mut r, 100, 3, 1.0);
        let y = dual_scope_scan(&x, &p, &p, None, 128).unwrap();
        let mut want = fssm_scan(&x, &p, None).unwrap();
        want.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        standardize_columns_f64(&mut want);
        for (a, b) in y.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_scope_zero_local_is_standardized_global() {
        let p = random_params(72, 300, 4, 3);
        let mut r = rng::stream(73, 0);
        let x = rand_matrix(&mut r, 300, 3, 1.0);
        let zero = SsmParams {
            a: vec![-1.0; 4],
            delta: vec![1.0; 300],
            b: Matrix::zeros(300, 4),
            c: Matrix::zeros(300, 4),
            d: vec![0.0; 3],
            gamma: 0.0,
        };
        let y = dual_scope_scan(&x, &p, &zero, None, 128).unwrap();
        let mut want = fssm_scan(&x, &p, None).unwrap();
        standardize_columns_f64(&mut want);
        assert_eq!(y, want);
        assert!(dual_scope_scan(&x, &p, &zero, None, 0).is_err());
    }

    #[test]
    fn local_windows_break_at_multiples_of_128() {
        let p = random_params(74, 300, 4, 2);
        let mut r = rng::stream(75, 0);
        let x = rand_matrix(&mut r, 300, 2, 1.0);
        let local = |x: &Matrix<f64>| -> Matrix<f64> {
            // local-only: subtract the global pass before standardization
            let mut out = Matrix::zeros(300, 2);
            for (s, e) in [(0, 128), (128, 256), (256, 300)] {
                let rows: Vec<usize> = (s..e).collect();
                let part = fssm_scan(&x.gather_rows(&rows), &p.slice(s, e), None).unwrap();
                for (k, i) in rows.iter().enumerate() {
                    out.row_mut(*i).copy_from_slice(part.row(k));
                }
            }
            out
        };
        let base = local(&x);
        let mut xp = x.clone();
        xp.set(200, 0, xp.get(200, 0) + 1.0);
        let moved = local(&xp);
        for i in 0..300 {
            let same = base.row(i) == moved.row(i);
            assert_eq!(same, !(200..256).contains(&i), "token {i}");
        }
        // the composed pass agrees with the hand-chunked one
        let y = dual_scope_scan(&x, &p, &p, None, 128).unwrap();
        let mut want = fssm_scan(&x, &p, None).unwrap();
        for (a, b) in want.as_mut_slice().iter_mut().zip(base.as_slice()) {
            *a += b;
        }
        standardize_columns_f64(&mut want);
        assert_eq!(y, want);
    }

    #[test]
    fn selective_params_shapes_and_values() {
        let mut w = SelectiveWeights::zeros(3, 4);
        w.a_log = vec![0.0, (2.0f32).ln(), 0.0, 0.0];
        w.gamma = 0.5;
        let x = Matrix::from_fn(5, 3, |i, j| (i + j) as f32);
        let p = w.params(&x).unwrap();
        assert_eq!(p.a[0], -1.0);
        assert!((p.a[1] + 2.0).abs() < 1e-6);
        assert!(p.delta.iter().all(|&d| (d - std::f64::consts::LN_2).abs() < 1e-15));
        assert!(p.b.as_slice().iter().all(|&v| v == 0.0));
        assert!(w.params(&Matrix::zeros(5, 2)).is_err());
        p.validate(5, 3).unwrap();
    }

    #[test]
    fn flop_formula_is_linear_in_tokens() {
        assert_eq!(scan_flops(0, 16, 64), 0);
        assert_eq!(scan_flops(2000, 16, 64), 2 * scan_flops(1000, 16, 64));
    }
}
