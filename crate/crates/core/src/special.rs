//! Bessel functions of the first kind, their zeros, and Gauss-Legendre rules.

/// Fills `out[0..=nmax]` with `J_0(x) ..= J_nmax(x)` for `x >= 0`.
///
/// Miller's backward recurrence started well above `max(nmax, x)` and
/// normalized with `J_0 + 2 * sum J_2m = 1`. Accurate to a few ulp of
/// `max |J|` for every order and argument this crate uses (`x` up to ~1e3).
pub fn bessel_j_all(nmax: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.resize(nmax + 1, 0.0);
    debug_assert!(x >= 0.0, "negative argument {x}");
    if x == 0.0 {
        out[0] = 1.0;
        return;
    }
    let m = nmax.max(x.ceil() as usize);
    let mut start = m + 60 + (10.0 * (m as f64).cbrt()).ceil() as usize;
    if start % 2 == 1 {
        start += 1;
    }

    let two_over_x = 2.0 / x;
    let mut j_next = 0.0;
    let mut j = 1e-30;
    let mut sum = 2.0 * j;
    for k in (1..=start).rev() {
        let j_prev = k as f64 * two_over_x * j - j_next;
        j_next = j;
        j = j_prev;
        let idx = k - 1;
        if idx <= nmax {
            out[idx] = j;
        }
        if idx % 2 == 0 {
            sum += if idx == 0 { j } else { 2.0 * j };
        }
        if j.abs() > 1e200 {
            j *= 1e-200;
            j_next *= 1e-200;
            sum *= 1e-200;
            for v in out.iter_mut().skip(idx) {
                *v *= 1e-200;
            }
        }
    }
    let norm = 1.0 / sum;
    for v in out.iter_mut() {
        *v *= norm;
    }
}

/// `J_n(x)` for a single order.
pub fn bessel_j(n: usize, x: f64) -> f64 {
    if x < 0.0 {
        let v = bessel_j(n, -x);
        return if n % 2 == 0 { v } else { -v };
    }
    let mut buf = Vec::with_capacity(n + 1);
    bessel_j_all(n, x, &mut buf);
    buf[n]
}

/// Positive zeros of `J_k` for every order `k` that has at least one zero
/// in `(0, upper]`. `result[k]` lists the zeros of `J_k` in increasing order.
pub fn bessel_zeros_below(upper: f64) -> Vec<Vec<f64>> {
    assert!(upper > 0.0);
    // Consecutive zeros of J_k are more than pi apart, so a quarter step
    // never skips a sign change.
    let step = 0.25;
    let nmax = upper.ceil() as usize + 1;
    let npts = ((upper + 1.0) / step).ceil() as usize;
    let mut brackets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nmax + 1];
    let mut prev = vec![0.0; nmax + 1];
    let mut cur = Vec::new();
    bessel_j_all(nmax, step, &mut prev);
    for i in 2..=npts {
        let x = i as f64 * step;
        bessel_j_all(nmax, x, &mut cur);
        for k in 0..=nmax {
            if prev[k] == 0.0 || prev[k].signum() != cur[k].signum() {
                brackets[k].push((x - step, x));
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut zeros = Vec::new();
    for (k, list) in brackets.iter().enumerate() {
        let roots: Vec<f64> = list
            .iter()
            .map(|&(a, b)| refine_zero(k, a, b))
            .filter(|&z| z <= upper)
            .collect();
        if roots.is_empty() {
            break;
        }
        zeros.push(roots);
    }
    zeros
}

/// Safeguarded Newton iteration for a zero of `J_k` bracketed by `[a, b]`.
fn refine_zero(k: usize, mut a: f64, mut b: f64) -> f64 {
    let mut buf = Vec::with_capacity(k + 2);
    let eval = |x: f64, buf: &mut Vec<f64>| {
        bessel_j_all(k + 1, x, buf);
        let jk = buf[k];
        let dj = if x > 0.0 { k as f64 / x * jk - buf[k + 1] } else { 0.0 };
        (jk, dj)
    };
    let (fa, _) = eval(a, &mut buf);
    let mut x = 0.5 * (a + b);
    for _ in 0..100 {
        let (f, df) = eval(x, &mut buf);
        if f == 0.0 {
            return x;
        }
        if f.signum() == fa.signum() {
            a = x;
        } else {
            b = x;
        }
        let newton = x - f / df;
        let next = if df != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// Gauss-Legendre nodes and weights on `[lo, hi]`, nodes increasing.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * z * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        // z is the i-th largest root
        nodes[n - 1 - i] = mid + half * z;
        nodes[i] = mid - half * z;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}
