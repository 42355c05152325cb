//! Plain per-timestep reference for the selective scan.
//!
//! Deliberately shares nothing with the kernel: nested `Vec`s, time as the
//! outer loop, and its own discretization.

use crate::error::{Error, Result};

/// `x`, `delta`: `[seq][ch]`; `a`: `[ch][state]`; `b`, `c`: `[seq][state]`;
/// `d`: `[ch]`. Returns `y[seq][ch]`.
pub fn naive_scan_oracle(
    x: &[Vec<f64>],
    delta: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    d: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let seq = x.len();
    let ch = d.len();
    let state = a.first().map(Vec::len).unwrap_or(0);
    if delta.len() != seq || b.len() != seq || c.len() != seq || a.len() != ch {
        return Err(Error::Rank {
            op: "naive_scan_oracle",
            detail: "inconsistent sequence or channel extents".into(),
        });
    }
    let mut h = vec![vec![0.0; state]; ch];
    let mut y = vec![vec![0.0; ch]; seq];
    for t in 0..seq {
        for i in 0..ch {
            let dt = delta[t][i];
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::Domain(format!("non-positive step {} at t={}", dt, t)));
            }
            let mut acc = 0.0;
            for j in 0..state {
                let da = dt * a[i][j];
                let decay = da.exp();
                let gain = if da.abs() < 1e-6 {
                    dt * b[t][j] * (1.0 + da / 2.0 + da * da / 6.0)
                } else {
                    da.exp_m1() / a[i][j] * b[t][j]
                };
                h[i][j] = decay * h[i][j] + gain * x[t][i];
                acc += c[t][j] * h[i][j];
            }
            y[t][i] = acc + d[i] * x[t][i];
        }
    }
    Ok(y)
}
