//! Small numerical toolbox: error function, Gaussian tail helpers,
//! Gauss-Legendre nodes, and composite Simpson integration.

/// Complementary error function, Cody's rational approximations.
///
/// Relative accuracy ~1e-16 over the double range; underflows to 0 beyond
/// x ~ 26.5.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf(x);
    } else if y <= 4.0 {
        const C: [f64; 9] = [
            5.64188496988670089e-1,
            8.88314979438837594e0,
            6.61191906371416295e1,
            2.98635138197400131e2,
            8.81952221241769090e2,
            1.71204761263407058e3,
            2.05107837782607147e3,
            1.23033935479799725e3,
            2.15311535474403846e-8,
        ];
        const D: [f64; 8] = [
            1.57449261107098347e1,
            1.17693950891312499e2,
            5.37181101862009858e2,
            1.62138957456669019e3,
            3.29079923573345963e3,
            4.36261909014324716e3,
            3.43936767414372164e3,
            1.23033935480374942e3,
        ];
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        let r = (xnum + C[7]) / (xden + D[7]);
        scaled_exp(y) * r
    } else {
        const SQRPI: f64 = 5.6418958354775628695e-1;
        const P: [f64; 6] = [
            3.05326634961232344e-1,
            3.60344899949804439e-1,
            1.25781726111229246e-1,
            1.60837851487422766e-2,
            6.58749161529837803e-4,
            1.63153871373020978e-2,
        ];
        const Q: [f64; 5] = [
            2.56852019228982242e0,
            1.87295284992346047e0,
            5.27905102951428412e-1,
            6.05183413124413191e-2,
            2.33520497626869185e-3,
        ];
        if y >= 26.6 {
            if x > 0.0 {
                return 0.0;
            }
            return 2.0;
        }
        let z = 1.0 / (y * y);
        let mut xnum = P[5] * z;
        let mut xden = z;
        for i in 0..4 {
            xnum = (xnum + P[i]) * z;
            xden = (xden + Q[i]) * z;
        }
        let mut r = z * (xnum + P[4]) / (xden + Q[4]);
        r = (SQRPI - r) / y;
        scaled_exp(y) * r
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

// exp(-y^2) computed as exp(-z^2)*exp(-(y-z)(y+z)) with z = y rounded to
// 1/16, which avoids the rounding of y*y inside the exponential.
fn scaled_exp(y: f64) -> f64 {
    let z = (y * 16.0).floor() / 16.0;
    let del = (y - z) * (y + z);
    (-z * z).exp() * (-del).exp()
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        const A: [f64; 5] = [
            3.16112374387056560e0,
            1.13864154151050156e2,
            3.77485237685302021e2,
            3.20937758913846947e3,
            1.85777706184603153e-1,
        ];
        const B: [f64; 4] = [
            2.36012909523441209e1,
            2.44024637934444173e2,
            1.28261652607737228e3,
            2.84423683343917062e3,
        ];
        let z = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut xnum = A[4] * z;
        let mut xden = z;
        for i in 0..3 {
            xnum = (xnum + A[i]) * z;
            xden = (xden + B[i]) * z;
        }
        x * (xnum + A[3]) / (xden + B[3])
    } else if x > 0.0 {
        1.0 - erfc(x)
    } else {
        erfc(-x) - 1.0
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// CDF of the chi distribution with 3 degrees of freedom: the radius
/// distribution of an isotropic unit-variance 3-d Gaussian.
pub fn chi3_cdf(r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    erf(r / std::f64::consts::SQRT_2)
        - (2.0 / std::f64::consts::PI).sqrt() * r * (-0.5 * r * r).exp()
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (p2, d2) = legendre_with_derivative(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre nodes and weights mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    (
        x.iter().map(|&xi| c + h * xi).collect(),
        w.iter().map(|&wi| wi * h).collect(),
    )
}

/// Composite Simpson integral of uniformly spaced samples.
///
/// Handles an odd interval count with a 3/8 rule on the last three cells;
/// a single interval falls back to the trapezoid.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    assert!(n >= 2, "need at least two samples");
    let intervals = n - 1;
    if intervals == 1 {
        return 0.5 * h * (values[0] + values[1]);
    }
    let mut total = 0.0;
    let simpson_end = if intervals % 2 == 0 { n - 1 } else { n - 4 };
    if simpson_end >= 2 {
        let mut s = values[0] + values[simpson_end];
        for (k, &v) in values[1..simpson_end].iter().enumerate() {
            s += if k % 2 == 0 { 4.0 * v } else { 2.0 * v };
        }
        total += s * h / 3.0;
    }
    if intervals % 2 == 1 {
        if simpson_end < 2 {
            // exactly 3 intervals: single 3/8 rule
            return 3.0 * h / 8.0 * (values[0] + 3.0 * values[1] + 3.0 * values[2] + values[3]);
        }
        let v = &values[simpson_end..];
        total += 3.0 * h / 8.0 * (v[0] + 3.0 * v[1] + 3.0 * v[2] + v[3]);
    }
    total
}

/// Cumulative trapezoid of uniformly spaced samples; output[0] = 0.
pub fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for pair in values.windows(2) {
        acc += 0.5 * h * (pair[0] + pair[1]);
        out.push(acc);
    }
    out
}
