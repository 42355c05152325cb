//! Fused sequence kernels registered as custom graph operations.
//!
//! Both kernels take activations laid out as `[batch…, seq, channels]`; all
//! leading axes are folded into one batch extent.

use super::{zoh_phi_prime_from, zoh_terms};
use crate::error::{Error, Result};
use crate::tensor::CustomOp;
use crate::tensor::{Graph, Tensor};

fn seq_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::Rank {
            op,
            detail: format!("expected [.., seq, channels], got {:?}", x.shape()),
        });
    }
    let r = x.rank();
    let (seq, ch) = (x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.numel() / (seq * ch), seq, ch))
}

// ── causal depthwise convolution ─────────────────────────────────────

struct CausalConv {
    batch: usize,
    seq: usize,
    ch: usize,
    width: usize,
}

/// `y[b,t,c] = bias[c] + Σₖ w[c,k]·x[b, t+k−(K−1), c]`, zero left padding.
pub fn causal_conv(g: &mut Graph, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, seq, ch) = seq_dims("causal_conv", x)?;
    if weight.rank() != 2 || weight.shape()[0] != ch || bias.shape() != [ch] {
        return Err(Error::shape("causal_conv", x.shape(), weight.shape()));
    }
    let width = weight.shape()[1];
    let (xd, w, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        for t in 0..seq {
            let row = &mut out[(b * seq + t) * ch..(b * seq + t + 1) * ch];
            row.copy_from_slice(bd);
            for k in 0..width {
                let Some(src_t) = (t + k).checked_sub(width - 1) else { continue };
                let src = &xd[(b * seq + src_t) * ch..(b * seq + src_t + 1) * ch];
                for c in 0..ch {
                    row[c] += w[c * width + k] * src[c];
                }
            }
        }
    }
    g.add_macs((batch * seq * ch * width) as u64);
    let op = CausalConv { batch, seq, ch, width };
    g.custom(&[x, weight, bias], x.shape().to_vec(), out, Box::new(op))
}

impl CustomOp for CausalConv {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&[f64]], grad: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let CausalConv { batch, seq, ch, width } = *self;
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; ch];
        for b in 0..batch {
            for t in 0..seq {
                let grow = &grad[(b * seq + t) * ch..(b * seq + t + 1) * ch];
                for c in 0..ch {
                    gb[c] += grow[c];
                }
                for k in 0..width {
                    let Some(src_t) = (t + k).checked_sub(width - 1) else { continue };
                    let base = (b * seq + src_t) * ch;
                    for c in 0..ch {
                        gw[c * width + k] += grow[c] * x[base + c];
                        gx[base + c] += grow[c] * w[c * width + k];
                    }
                }
            }
        }
        Ok(vec![Some(gx), Some(gw), Some(gb)])
    }
}

// ── selective scan ───────────────────────────────────────────────────

struct SelectiveScan {
    batch: usize,
    seq: usize,
    ch: usize,
    state: usize,
    /// h[b, i, j, t], the state after step t.
    states: Vec<f64>,
}

/// Diagonal selective scan with exact ZOH discretization.
///
/// Shapes: `x`, `delta`: `[.., S, C]`; `a`: `[C, N]`; `b_seq`, `c_seq`:
/// `[.., S, N]`; `d_skip`: `[C]`. Returns `[.., S, C]`.
pub fn scan(
    g: &mut Graph,
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b_seq: &Tensor,
    c_seq: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let (batch, seq, ch) = seq_dims("selective_scan", x)?;
    if delta.shape() != x.shape() {
        return Err(Error::shape("selective_scan(delta)", x.shape(), delta.shape()));
    }
    if a.rank() != 2 || a.shape()[0] != ch {
        return Err(Error::shape("selective_scan(A)", x.shape(), a.shape()));
    }
    let state = a.shape()[1];
    let mut bc_shape = x.shape().to_vec();
    *bc_shape.last_mut().unwrap() = state;
    if b_seq.shape() != bc_shape.as_slice() {
        return Err(Error::shape("selective_scan(B)", &bc_shape, b_seq.shape()));
    }
    if c_seq.shape() != bc_shape.as_slice() {
        return Err(Error::shape("selective_scan(C)", &bc_shape, c_seq.shape()));
    }
    if d_skip.shape() != [ch] {
        return Err(Error::shape("selective_scan(D)", &[ch], d_skip.shape()));
    }
    if let Some(bad) = delta.data().iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!("selective_scan needs positive finite delta, got {}", bad)));
    }

    let (xd, dd, ad, bd, cd, skip) = (x.data(), delta.data(), a.data(), b_seq.data(), c_seq.data(), d_skip.data());
    let mut y = vec![0.0; x.numel()];
    // States are only needed by the backward pass.
    let keep = g.is_tracing() && [x, delta, a, b_seq, c_seq, d_skip].iter().any(|t| t.requires_grad());
    let mut states = if keep { vec![0.0; batch * ch * state * seq] } else { Vec::new() };
    for b in 0..batch {
        for i in 0..ch {
            for j in 0..state {
                let aij = ad[i * state + j];
                let base = ((b * ch + i) * state + j) * seq;
                let mut h: f64 = 0.0;
                for t in 0..seq {
                    let xi = (b * seq + t) * ch + i;
                    let si = (b * seq + t) * state + j;
                    let dt = dd[xi];
                    let z = dt * aij;
                    let (ah, phi) = zoh_terms(z);
                    h = ah * h + dt * bd[si] * phi * xd[xi];
                    if keep {
                        states[base + t] = h;
                    }
                    y[xi] += cd[si] * h;
                }
            }
            for t in 0..seq {
                let xi = (b * seq + t) * ch + i;
                y[xi] += skip[i] * xd[xi];
            }
        }
    }
    g.add_macs((batch * seq * ch * (3 * state + 1)) as u64);
    let op = SelectiveScan { batch, seq, ch, state, states };
    g.custom(&[x, delta, a, b_seq, c_seq, d_skip], x.shape().to_vec(), y, Box::new(op))
}

impl CustomOp for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[f64]], grad: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (xd, dd, ad, bd, cd, skip) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let SelectiveScan { batch, seq, ch, state, .. } = *self;
        let hs = &self.states;
        let mut gx = vec![0.0; xd.len()];
        let mut gd = vec![0.0; dd.len()];
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        let mut gc = vec![0.0; cd.len()];
        let mut gskip = vec![0.0; ch];
        for b in 0..batch {
            for i in 0..ch {
                for j in 0..state {
                    let aij = ad[i * state + j];
                    let base = ((b * ch + i) * state + j) * seq;
                    let mut gh = 0.0;
                    for t in (0..seq).rev() {
                        let xi = (b * seq + t) * ch + i;
                        let si = (b * seq + t) * state + j;
                        let (dt, bt) = (dd[xi], bd[si]);
                        let h = hs[base + t];
                        let h_prev = if t > 0 { hs[base + t - 1] } else { 0.0 };
                        gh += grad[xi] * cd[si];
                        gc[si] += grad[xi] * h;

                        let z = dt * aij;
                        let (ah, phi) = zoh_terms(z);
                        let g_bh = gh * xd[xi];
                        gx[xi] += gh * dt * bt * phi;
                        let gz = gh * h_prev * ah + g_bh * dt * bt * zoh_phi_prime_from(z, ah, phi);
                        gd[xi] += g_bh * bt * phi + gz * aij;
                        gb[si] += g_bh * dt * phi;
                        ga[i * state + j] += gz * dt;
                        gh *= ah;
                    }
                }
                for t in 0..seq {
                    let xi = (b * seq + t) * ch + i;
                    gx[xi] += grad[xi] * skip[i];
                    gskip[i] += grad[xi] * xd[xi];
                }
            }
        }
        Ok(vec![Some(gx), Some(gd), Some(ga), Some(gb), Some(gc), Some(gskip)])
    }
}
