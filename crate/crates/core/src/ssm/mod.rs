//! Discretized selective state-space machinery.
//!
//! The state matrix is diagonal: every `(channel i, state j)` pair is an
//! independent scalar system `h' = a·h + b·x` discretized with zero-order
//! hold at an input-dependent step `Δ[t, i]`.

mod block;
mod kernels;
pub mod oracle;

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor};

pub use block::{BlockDims, MambaBlock};
pub use kernels::{causal_conv, scan};
pub use oracle::naive_scan_oracle;

/// Below this `|Δa|` the ZOH input gain switches to its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// `φ(z) = (eᶻ − 1)/z`, so that `b̂ = Δ·b·φ(Δa)`.
pub(crate) fn zoh_phi(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// `φ'(z)`, consistent with the branch used by [`zoh_phi`].
pub(crate) fn zoh_phi_prime(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        0.5 + z / 3.0
    } else if z.abs() < 1e-3 {
        // Σ k·zᵏ⁻¹/(k+1)! ; the closed form cancels badly here
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `(eᶻ, φ(z))` from a single transcendental call. Far from zero `(eᶻ−1)/z`
/// has no cancellation, so `exp` suffices; near zero `expm1` keeps φ exact
/// and `1 + expm1` loses nothing since `eᶻ ≈ 1`.
pub(crate) fn zoh_terms(z: f64) -> (f64, f64) {
    if z.abs() > 0.5 {
        let e = z.exp();
        (e, (e - 1.0) / z)
    } else if z.abs() < ZOH_SERIES_THRESHOLD {
        (z.exp(), 1.0 + z / 2.0 + z * z / 6.0)
    } else {
        let em1 = z.exp_m1();
        (1.0 + em1, em1 / z)
    }
}

/// `φ'(z)` given `eᶻ` and `φ(z)`; matches [`zoh_phi_prime`].
pub(crate) fn zoh_phi_prime_from(z: f64, ez: f64, phi: f64) -> f64 {
    if z.abs() < 1e-3 {
        zoh_phi_prime(z)
    } else {
        (ez - phi) / z
    }
}

/// Discrete transition and input weight for one diagonal entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteStep {
    pub a_hat: f64,
    pub b_hat: f64,
}

/// Zero-order hold: `â = exp(Δa)`, `b̂ = (Δa)⁻¹(exp(Δa) − 1)·Δb`.
///
/// For `|Δa| < 1e-6` the input weight uses `Δb·(1 + Δa/2 + (Δa)²/6)`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<DiscreteStep> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("ZOH step must be positive and finite, got {}", delta)));
    }
    let z = delta * a;
    Ok(DiscreteStep {
        a_hat: z.exp(),
        b_hat: delta * b * zoh_phi(z),
    })
}

/// Learnable parameters of the selective SSM inside one Mamba block.
#[derive(Clone, Debug)]
pub struct SsmCore {
    pub d_inner: usize,
    pub d_state: usize,
    /// `A = −exp(a_log)`, `[d_inner, d_state]`.
    pub a_log: ParamId,
    pub delta_proj: ParamId,
    pub delta_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub d_skip: ParamId,
}

impl SsmCore {
    /// `A[i, j] = −(j + 1)`; Δ bias is the inverse softplus of a log-uniform
    /// draw in `dt_range`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_inner: usize,
        d_state: usize,
        dt_range: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (lo, hi) = (dt_range.0.ln(), dt_range.1.ln());
        let a_log = (0..d_inner)
            .flat_map(|_| (0..d_state).map(|j| ((j + 1) as f64).ln()))
            .collect();
        let bound = 1.0 / (d_inner as f64).sqrt();
        let delta_bias = (0..d_inner)
            .map(|_| {
                let u: f64 = rng.gen();
                let dt = (u * (hi - lo) + lo).exp();
                init::inverse_softplus(dt)
            })
            .collect();
        SsmCore {
            d_inner,
            d_state,
            a_log: store.add(
                format!("{prefix}.a_log"),
                Tensor::new(vec![d_inner, d_state], a_log).expect("a_log shape"),
            ),
            delta_proj: store.add(format!("{prefix}.delta_proj"), init::uniform(rng, &[d_inner, d_inner], bound)),
            delta_bias: store.add(format!("{prefix}.delta_bias"), Tensor::new(vec![d_inner], delta_bias).expect("bias")),
            b_proj: store.add(format!("{prefix}.b_proj"), init::linear(rng, d_inner, d_state)),
            c_proj: store.add(format!("{prefix}.c_proj"), init::linear(rng, d_inner, d_state)),
            d_skip: store.add(format!("{prefix}.d_skip"), Tensor::ones(&[d_inner])),
        }
    }

    /// `A = −exp(a_log)` as a graph value.
    pub fn a_matrix(&self, g: &mut Graph, p: &BoundParams) -> Result<Tensor> {
        let e = g.exp(p.get(self.a_log))?;
        g.scale(&e, -1.0)
    }

    /// Current `A` values, `[d_inner, d_state]`.
    pub fn a_values(&self, store: &ParamStore) -> Tensor {
        let a = store.get(self.a_log).data().iter().map(|v| -v.exp()).collect();
        Tensor::new(vec![self.d_inner, self.d_state], a).expect("A shape")
    }
}

/// Input-dependent `(Δ, B, C)` for one sequence batch.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    pub delta: Tensor,
    pub b_seq: Tensor,
    pub c_seq: Tensor,
}

/// `Δ = scale · softplus(x·W_Δ + b_Δ)`, `B = x·W_B`, `C = x·W_C`.
///
/// `scale` is a one-element tensor (constant or traced); `None` leaves the
/// selective Δ unmodulated.
pub fn selective_params(
    g: &mut Graph,
    p: &BoundParams,
    x: &Tensor,
    core: &SsmCore,
    scale: Option<&Tensor>,
) -> Result<SelectiveParams> {
    if let Some(s) = scale {
        let v = s.item()?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("scale must be positive and finite, got {}", v)));
        }
    }
    let pre = g.matmul(x, p.get(core.delta_proj))?;
    let pre = g.add(&pre, p.get(core.delta_bias))?;
    let delta = g.softplus(&pre)?;
    let delta = match scale {
        Some(s) => g.mul(&delta, s)?,
        None => delta,
    };
    let b_seq = g.matmul(x, p.get(core.b_proj))?;
    let c_seq = g.matmul(x, p.get(core.c_proj))?;
    Ok(SelectiveParams { delta, b_seq, c_seq })
}

/// Runs the scan with `core`'s `A` and skip term.
pub fn selective_scan(
    g: &mut Graph,
    p: &BoundParams,
    x: &Tensor,
    core: &SsmCore,
    params: &SelectiveParams,
) -> Result<Tensor> {
    let a = core.a_matrix(g, p)?;
    scan(g, x, &params.delta, &a, &params.b_seq, &params.c_seq, p.get(core.d_skip))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralRow {
    pub channel: usize,
    pub state: usize,
    pub delta: f64,
    pub magnitude: f64,
}

/// `|exp(Δ·a)|` for every diagonal entry and step size.
#[derive(Clone, Debug, Default)]
pub struct SpectralReport {
    pub rows: Vec<SpectralRow>,
    /// `(channel, state)` entries with `a ≥ 0`, which do not contract.
    pub non_contracting: Vec<(usize, usize)>,
}

impl SpectralReport {
    /// Magnitudes of one entry across the Δ grid, in grid order.
    pub fn magnitudes(&self, channel: usize, state: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.channel == channel && r.state == state)
            .map(|r| r.magnitude)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Data(format!("writing spectral report: {}", e));
        w.write_record(["channel", "state", "delta", "magnitude"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.channel.to_string(),
                r.state.to_string(),
                r.delta.to_string(),
                r.magnitude.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Data(format!("writing spectral report: {}", e)))?;
        Ok(())
    }
}

/// Tabulates the decay factor of each diagonal entry of `a` (`[C, N]`) over
/// an ascending grid of positive step sizes.
pub fn spectral_decay_report(a: &Tensor, deltas: &[f64]) -> Result<SpectralReport> {
    if a.rank() != 2 {
        return Err(Error::Rank {
            op: "spectral_decay_report",
            detail: format!("A must be [channels, states], got {:?}", a.shape()),
        });
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Domain("spectral grid needs positive step sizes".into()));
    }
    if deltas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("spectral grid must be strictly ascending".into()));
    }
    let (ch, st) = (a.shape()[0], a.shape()[1]);
    let mut report = SpectralReport::default();
    for i in 0..ch {
        for j in 0..st {
            let aij = a.data()[i * st + j];
            if aij >= 0.0 {
                report.non_contracting.push((i, j));
            }
            for &delta in deltas {
                report.rows.push(SpectralRow {
                    channel: i,
                    state: j,
                    delta,
                    magnitude: (delta * aij).exp().abs(),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_prime_matches_difference_quotient_across_branches() {
        for &z in &[-3.0f64, -0.5, -2e-3, -5e-4, -2e-5, 3e-7, 4e-4, 0.7] {
            let h = 1e-6 * z.abs().max(1e-3);
            let fd = (zoh_phi(z + h) - zoh_phi(z - h)) / (2.0 * h);
            assert!((fd - zoh_phi_prime(z)).abs() < 1e-6, "z={z}");
            let (ez, phi) = zoh_terms(z);
            assert!((ez - z.exp()).abs() < 1e-15 && (phi - zoh_phi(z)).abs() < 1e-15, "z={z}");
            assert!((zoh_phi_prime_from(z, ez, phi) - zoh_phi_prime(z)).abs() < 1e-11, "z={z}");
        }
    }

    #[test]
    fn spectral_grid_validation() {
        let a = Tensor::full(&[1, 1], -1.0);
        assert!(spectral_decay_report(&a, &[1.0, 0.5]).is_err());
        assert!(spectral_decay_report(&a, &[0.0, 1.0]).is_err());
        let flagged = spectral_decay_report(&Tensor::full(&[1, 2], 0.0), &[1.0]).unwrap();
        assert_eq!(flagged.non_contracting, vec![(0, 0), (0, 1)]);
    }
}
