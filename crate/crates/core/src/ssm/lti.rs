//! Linear time-invariant SSM: ZOH discretization and the dual recurrent /
//! convolutional evaluation paths.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// State matrix, either a diagonal (stored as its Q-vector) or a dense Q×Q
/// matrix. Models use the diagonal form exclusively; dense support exists
/// for oracle tests.
#[derive(Debug, Clone)]
pub enum StateMatrix {
    Diagonal(Array1<f64>),
    Dense(Array2<f64>),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            StateMatrix::Diagonal(d) => d.iter().all(|x| x.is_finite()),
            StateMatrix::Dense(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    pub fn matvec(&self, v: &Array1<f64>) -> Array1<f64> {
        match self {
            StateMatrix::Diagonal(d) => d * v,
            StateMatrix::Dense(m) => m.dot(v),
        }
    }
}

/// Continuous-time system dh/dt = A h + B x, y = C h + D x.
#[derive(Debug, Clone)]
pub struct ContinuousSsm {
    pub a: StateMatrix,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
    pub d: f64,
}

impl ContinuousSsm {
    pub fn new(a: StateMatrix, b: Array1<f64>, c: Array1<f64>, d: f64) -> Result<Self> {
        let q = a.dim();
        if q == 0 {
            return Err(Error::Shape("state dimension must be >= 1".into()));
        }
        if b.len() != q || c.len() != q {
            return Err(Error::Shape(format!(
                "B and C must have length Q={q}, got {} and {}",
                b.len(),
                c.len()
            )));
        }
        if !a.is_finite() || !b.iter().all(|x| x.is_finite()) || !c.iter().all(|x| x.is_finite()) || !d.is_finite() {
            return Err(Error::NumericRange("non-finite entry in continuous system".into()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }
}

/// Discrete system h_k = Ā h_{k-1} + B̄ x_k, y_k = C h_k + D x_k, produced
/// by [`discretize_zoh`].
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    pub b_bar: Array1<f64>,
    pub c: Array1<f64>,
    pub d: f64,
    pub delta: f64,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.dim()
    }
}

// Below this, (e^z - 1)/z switches to its series limit to avoid the
// singular inverse at z = 0.
const PHI_SERIES_CUTOFF: f64 = 1e-8;

/// (e^z - 1)/z with the analytic limit 1 at z -> 0.
fn phi(z: f64) -> f64 {
    if z.abs() < PHI_SERIES_CUTOFF {
        1.0 + z / 2.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// Matrix exponential by scaling-and-squaring over a truncated Taylor series.
fn expm(m: &Array2<f64>) -> Array2<f64> {
    let q = m.nrows();
    let norm = m.iter().map(|x| x.abs()).fold(0.0_f64, f64::max) * q as f64;
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = m / 2f64.powi(s as i32);

    let mut result = Array2::<f64>::eye(q);
    let mut term = Array2::<f64>::eye(q);
    for k in 1..=24 {
        term = term.dot(&scaled) / k as f64;
        result = &result + &term;
    }
    for _ in 0..s {
        result = result.dot(&result);
    }
    result
}

/// Φ(Z) = Σ_{k>=0} Z^k / (k+1)!, so that B̄ = Φ(ΔA)·ΔB without inverting A.
fn phi_matrix(m: &Array2<f64>) -> Array2<f64> {
    let q = m.nrows();
    let mut result = Array2::<f64>::eye(q);
    let mut term = Array2::<f64>::eye(q);
    for k in 1..=40 {
        term = term.dot(m) / (k + 1) as f64;
        result = &result + &term;
    }
    result
}

/// Zero-order-hold discretization: Ā = exp(ΔA), B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB,
/// with the series limit B̄ = ΔB used near zero eigenvalues.
pub fn discretize_zoh(cont: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let (a_bar, b_bar) = match &cont.a {
        StateMatrix::Diagonal(diag) => {
            let mut ab = Array1::<f64>::zeros(diag.len());
            let mut bb = Array1::<f64>::zeros(diag.len());
            for (i, &a) in diag.iter().enumerate() {
                let z = delta * a;
                let e = z.exp();
                if !e.is_finite() {
                    return Err(Error::NumericRange(format!(
                        "exp(delta*A) overflowed for eigenvalue {i} (a = {a}, delta = {delta})"
                    )));
                }
                ab[i] = e;
                bb[i] = phi(z) * delta * cont.b[i];
            }
            (StateMatrix::Diagonal(ab), bb)
        }
        StateMatrix::Dense(a) => {
            let z = a * delta;
            let e = expm(&z);
            if let Some((i, _)) = e.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                return Err(Error::NumericRange(format!(
                    "exp(delta*A) overflowed at entry {i} (delta = {delta})"
                )));
            }
            let bb = phi_matrix(&z).dot(&(&cont.b * delta));
            (StateMatrix::Dense(e), bb)
        }
    };
    if !b_bar.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericRange("non-finite B̄ after discretization".into()));
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: cont.c.clone(),
        d: cont.d,
        delta,
    })
}

/// Sequential recurrence h_k = Ā h_{k-1} + B̄ x_k, y_k = C h_k + D x_k.
/// Returns the output sequence and the final state for chunked continuation.
pub fn scan_recurrent(disc: &DiscreteSsm, x: &[f64], h0: &Array1<f64>) -> Result<(Vec<f64>, Array1<f64>)> {
    let q = disc.state_dim();
    if h0.len() != q {
        return Err(Error::Shape(format!(
            "initial state has length {}, state dimension is {q}",
            h0.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("input sequence must have length >= 1".into()));
    }
    let mut h = h0.clone();
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        h = disc.a_bar.matvec(&h) + &disc.b_bar * xk;
        y.push(disc.c.dot(&h) + disc.d * xk);
    }
    Ok((y, h))
}

/// Convolution kernel taps K_k = C·Ā^{k-1}·B̄ for k = 1..L. The feedthrough
/// D is not folded into the taps; [`conv_apply`] adds D·x once.
pub fn ssm_kernel(disc: &DiscreteSsm, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Shape("kernel length must be >= 1".into()));
    }
    let mut v = disc.b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(disc.c.dot(&v));
        v = disc.a_bar.matvec(&v);
    }
    Ok(kernel)
}

/// Causal convolution y_k = Σ_{j=1..k} K_j x_{k-j+1} + D x_k.
pub fn conv_apply(kernel: &[f64], x: &[f64], d: f64) -> Result<Vec<f64>> {
    if kernel.len() != x.len() {
        return Err(Error::Shape(format!(
            "kernel length {} != input length {}",
            kernel.len(),
            x.len()
        )));
    }
    let y = (0..x.len())
        .map(|k| {
            let conv: f64 = (0..=k).map(|j| kernel[j] * x[k - j]).sum();
            conv + d * x[k]
        })
        .collect();
    Ok(y)
}
