//! The optical cell: ideal and impaired matrix-vector stages.
//!
//! The recurrence delegates its `W * tanh(s)` product to a cell. `SimpleCell`
//! computes the product exactly. `AocCell` passes it through seven
//! parameterized impairment stages, applied in this fixed order:
//!
//! 1. `tanh_approx`  — `u = tanh(s) + e1*(tanh(s) - tanh(s)^3)`
//! 2. `microled`     — `u <- u * (1 - e2*|u|)`
//! 3. `slm_distortion` — on the weights: 9-bit quantisation, then
//!    `w <- w * (1 - e3*w^2)` per entry
//! 4. the matrix product `v = W_eff * u`
//! 5. `tia_gain`     — `v <- g . v`, `g` a frozen per-channel vector with
//!    `g_i = 1 - e4 + 2*e4*u_i`, `u_i` the i-th `f64` draw from a ChaCha8
//!    stream seeded with `derive_seed(rng_seed, "cell.tia_gain")`
//! 6. `crosstalk`    — `v <- (I + e5*C) * v`, `C` a frozen zero-diagonal
//!    matrix whose off-diagonal entries are row-major `f64` draws from the
//!    `"cell.crosstalk"` stream, each row then normalized to unit sum
//! 7. `darkness`     — `v <- v + e6 * mean(u) * 1` (leakage floor from the
//!    emitted light)
//! 8. `power_norm`   — when switched on, `v <- v * target_rms / max(rms(v), 1e-12)`
//!
//! Every stage is the identity at zero magnitude and is skipped outright in
//! that case, so an `AocCell` with all magnitudes zero and quantisation
//! disabled reproduces `SimpleCell` bit for bit. The per-channel draws are
//! frozen when the cell is constructed and never re-sampled, so repeated
//! calls are bitwise identical.
//!
//! Four trainable calibration gains (unity at initialization) scale the
//! outputs of the `tanh_approx`, `slm_distortion`, `crosstalk` and `darkness`
//! stages; they are the four extra parameters an impaired model carries and
//! give training a handle to compensate the static impairments.

use crate::error::{Error, Result};
use crate::linalg::{norm2, Mat};
use crate::seeds::stage_rng;
use rand::Rng;

/// Guard for relative norms and the power-norm denominator.
pub const EPS_FLOOR: f64 = 1e-12;

/// Which variant of the optical stage a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// Ideal product, no impairments, no quantisation, no calibration gains.
    Simple,
    /// Impairment pipeline with trainable calibration gains.
    Aoc,
}

/// Magnitudes (and shape parameters) of the seven impairment stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMagnitudes {
    pub tanh_approx: f64,
    pub microled: f64,
    pub slm_distortion: f64,
    pub tia_gain: f64,
    pub crosstalk: f64,
    pub darkness: f64,
    /// Binary switch; the stage has no strength knob.
    pub power_norm: bool,
    /// Shape parameter of `power_norm`.
    pub target_rms: f64,
}

impl StageMagnitudes {
    pub fn zeros() -> Self {
        StageMagnitudes {
            tanh_approx: 0.0,
            microled: 0.0,
            slm_distortion: 0.0,
            tia_gain: 0.0,
            crosstalk: 0.0,
            darkness: 0.0,
            power_norm: false,
            target_rms: 1.0,
        }
    }

    /// Default impaired configuration: every smooth stage at 0.02,
    /// power normalisation off.
    pub fn defaults() -> Self {
        StageMagnitudes {
            tanh_approx: 0.02,
            microled: 0.02,
            slm_distortion: 0.02,
            tia_gain: 0.02,
            crosstalk: 0.02,
            darkness: 0.02,
            power_norm: false,
            target_rms: 1.0,
        }
    }

    pub fn all_zero(&self) -> bool {
        self.tanh_approx == 0.0
            && self.microled == 0.0
            && self.slm_distortion == 0.0
            && self.tia_gain == 0.0
            && self.crosstalk == 0.0
            && self.darkness == 0.0
            && !self.power_norm
    }
}

/// Cell configuration: variant, stage magnitudes, quantisation depth and the
/// seed for the frozen per-channel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub stages: StageMagnitudes,
    /// Weight quantisation depth; `None` disables quantisation.
    pub quant_bits: Option<u32>,
    pub rng_seed: u64,
}

impl CellSpec {
    pub fn simple() -> Self {
        CellSpec {
            kind: CellKind::Simple,
            stages: StageMagnitudes::zeros(),
            quant_bits: None,
            rng_seed: 0,
        }
    }

    /// Impaired cell with default magnitudes and 9-bit quantisation.
    pub fn aoc(rng_seed: u64) -> Self {
        CellSpec {
            kind: CellKind::Aoc,
            stages: StageMagnitudes::defaults(),
            quant_bits: Some(9),
            rng_seed,
        }
    }

    /// Impaired cell with explicit magnitudes.
    pub fn aoc_with(stages: StageMagnitudes, quant_bits: Option<u32>, rng_seed: u64) -> Self {
        CellSpec {
            kind: CellKind::Aoc,
            stages,
            quant_bits,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stages;
        for (name, v) in [
            ("tanh_approx", s.tanh_approx),
            ("microled", s.microled),
            ("slm_distortion", s.slm_distortion),
            ("tia_gain", s.tia_gain),
            ("crosstalk", s.crosstalk),
            ("darkness", s.darkness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "stage `{name}` magnitude must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(s.target_rms > 0.0 && s.target_rms.is_finite()) {
            return Err(Error::config(format!(
                "power_norm target_rms must be finite and > 0, got {}",
                s.target_rms
            )));
        }
        if let Some(bits) = self.quant_bits {
            if !(2..=16).contains(&bits) {
                return Err(Error::config(format!(
                    "quant_bits must be in [2, 16], got {bits}"
                )));
            }
        }
        if self.kind == CellKind::Simple && (!s.all_zero() || self.quant_bits.is_some()) {
            return Err(Error::config(
                "SimpleCell requires all stage magnitudes zero and quantisation disabled",
            ));
        }
        Ok(())
    }
}

/// Trainable calibration gains `[tanh_approx, slm_distortion, crosstalk, darkness]`.
pub type Calib = [f64; 4];

pub const UNIT_CALIB: Calib = [1.0; 4];

/// Symmetric uniform quantisation of a weight matrix.
///
/// `scale = max |w|`; each entry maps to `round(w / scale * L)` clipped to
/// `[-L, L]` with `L = 2^(bits-1) - 1`, then back to `q * scale / L`. The
/// max-magnitude entry is a fixed point of the map, and the map is
/// idempotent. An all-zero matrix quantises to itself.
pub fn quantize_weights(w: &Mat, bits: u32) -> Mat {
    assert!((2..=16).contains(&bits), "quant bits out of range");
    let scale = w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return w.clone();
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = w.clone();
    for v in out.as_mut_slice() {
        let q = (*v / scale * levels).round().clamp(-levels, levels);
        *v = q * scale / levels;
    }
    out
}

/// A cell with its per-channel variation draws frozen.
///
/// Construction consumes a validated spec and the hidden dimension; the TIA
/// gain vector and crosstalk matrix are drawn once, here, and reused for
/// every subsequent call.
#[derive(Debug, Clone)]
pub struct FrozenCell {
    spec: CellSpec,
    d: usize,
    gain: Vec<f64>,
    crosstalk: Mat,
}

impl FrozenCell {
    pub fn new(spec: CellSpec, d_hidden: usize) -> Result<Self> {
        spec.validate()?;
        if d_hidden == 0 {
            return Err(Error::config("d_hidden must be >= 1"));
        }
        let (gain, crosstalk) = match spec.kind {
            CellKind::Simple => (vec![1.0; d_hidden], Mat::zeros(d_hidden, d_hidden)),
            CellKind::Aoc => {
                let e4 = spec.stages.tia_gain;
                let mut rng = stage_rng(spec.rng_seed, "cell.tia_gain");
                let gain: Vec<f64> = (0..d_hidden)
                    .map(|_| 1.0 - e4 + 2.0 * e4 * rng.gen::<f64>())
                    .collect();
                let mut rng = stage_rng(spec.rng_seed, "cell.crosstalk");
                let mut c = Mat::zeros(d_hidden, d_hidden);
                for i in 0..d_hidden {
                    let mut row_sum = 0.0;
                    for j in 0..d_hidden {
                        if i == j {
                            continue;
                        }
                        let v = rng.gen::<f64>();
                        c[(i, j)] = v;
                        row_sum += v;
                    }
                    if row_sum > 0.0 {
                        for j in 0..d_hidden {
                            c[(i, j)] /= row_sum;
                        }
                    }
                }
                (gain, c)
            }
        };
        Ok(FrozenCell {
            spec,
            d: d_hidden,
            gain,
            crosstalk,
        })
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn kind(&self) -> CellKind {
        self.spec.kind
    }

    pub fn d_hidden(&self) -> usize {
        self.d
    }

    pub fn tia_gains(&self) -> &[f64] {
        &self.gain
    }

    pub fn crosstalk_matrix(&self) -> &Mat {
        &self.crosstalk
    }

    /// Stage 3: the effective weight matrix held by the modulator for one
    /// forward pass (quantisation, transfer-curve compression, calibration
    /// gain). Computed once per pass, not per iteration.
    pub fn prepare_weights(&self, w: &Mat, calib: &Calib) -> Mat {
        if self.spec.kind == CellKind::Simple {
            return w.clone();
        }
        let mut eff = match self.spec.quant_bits {
            Some(bits) => quantize_weights(w, bits),
            None => w.clone(),
        };
        let e3 = self.spec.stages.slm_distortion;
        if e3 != 0.0 {
            for v in eff.as_mut_slice() {
                *v -= e3 * *v * *v * *v;
            }
        }
        let c2 = calib[1];
        if c2 != 1.0 {
            eff.scale(c2);
        } else {
            // multiplying by exactly 1.0 is the identity; skip the pass
        }
        eff
    }

    /// The impaired optical product for an already-prepared weight matrix.
    pub fn apply_prepared(&self, w_eff: &Mat, s: &[f64], calib: &Calib) -> Result<Vec<f64>> {
        let (out, _) = self.run(w_eff, s, calib, false)?;
        Ok(out)
    }

    /// Full impaired product `cell(W, s)`: prepares the weights, then applies.
    pub fn apply(&self, w: &Mat, s: &[f64], calib: &Calib) -> Result<Vec<f64>> {
        let w_eff = self.prepare_weights(w, calib);
        self.apply_prepared(&w_eff, s, calib)
    }

    /// Like [`apply_prepared`](Self::apply_prepared) but records every
    /// intermediate needed by the backward pass.
    pub fn apply_traced(&self, w_eff: &Mat, s: &[f64], calib: &Calib) -> Result<CellTrace> {
        let (_, trace) = self.run(w_eff, s, calib, true)?;
        Ok(trace.expect("trace requested"))
    }

    fn run(
        &self,
        w_eff: &Mat,
        s: &[f64],
        calib: &Calib,
        want_trace: bool,
    ) -> Result<(Vec<f64>, Option<CellTrace>)> {
        if s.len() != self.d || w_eff.rows() != self.d || w_eff.cols() != self.d {
            return Err(Error::config(format!(
                "cell dimension mismatch: d={}, |s|={}, W {}x{}",
                self.d,
                s.len(),
                w_eff.rows(),
                w_eff.cols()
            )));
        }
        let st = &self.spec.stages;
        let simple = self.spec.kind == CellKind::Simple;

        // stage 1: tanh and its odd perturbation
        let t: Vec<f64> = s.iter().map(|&x| x.tanh()).collect();
        let mut u1 = t.clone();
        if st.tanh_approx != 0.0 {
            for (u, &ti) in u1.iter_mut().zip(&t) {
                *u = ti + st.tanh_approx * (ti - ti * ti * ti);
            }
        }
        if !simple && calib[0] != 1.0 {
            for u in &mut u1 {
                *u *= calib[0];
            }
        }

        // stage 2: emitter saturation
        let mut u2 = u1.clone();
        if st.microled != 0.0 {
            for u in &mut u2 {
                *u *= 1.0 - st.microled * u.abs();
            }
        }

        // stage 4: the optical product (stage 3 already baked into w_eff)
        let v1 = w_eff.matvec(&u2);

        // stage 5: per-channel readout gain
        let mut v2 = v1.clone();
        if st.tia_gain != 0.0 {
            for (v, &g) in v2.iter_mut().zip(&self.gain) {
                *v *= g;
            }
        }

        // stage 6: photodiode crosstalk
        let mut mv2 = v2.clone();
        if st.crosstalk != 0.0 {
            let cv = self.crosstalk.matvec(&v2);
            for (m, c) in mv2.iter_mut().zip(cv) {
                *m += st.crosstalk * c;
            }
        }
        let mut v3 = mv2.clone();
        if !simple && calib[2] != 1.0 {
            for v in &mut v3 {
                *v *= calib[2];
            }
        }

        // stage 7: darkness leakage floor
        let mean_u2 = if st.darkness != 0.0 {
            u2.iter().sum::<f64>() / self.d as f64
        } else {
            0.0
        };
        let mut dark_inner = v3.clone();
        if st.darkness != 0.0 {
            for v in &mut dark_inner {
                *v += st.darkness * mean_u2;
            }
        }
        let mut v4 = dark_inner.clone();
        if !simple && calib[3] != 1.0 {
            for v in &mut v4 {
                *v *= calib[3];
            }
        }

        // stage 8: power normalisation
        let mut out = v4.clone();
        let mut pn_ratio = 1.0;
        if st.power_norm {
            let rms = norm2(&v4) / (self.d as f64).sqrt();
            pn_ratio = st.target_rms / rms.max(EPS_FLOOR);
            for v in &mut out {
                *v *= pn_ratio;
            }
        }

        if !out.iter().all(|v| v.is_finite()) {
            return Err(self.locate_nonfinite(&t, &u1, &u2, &v1, &v2, &v3, &v4, &out));
        }

        let trace = if want_trace {
            Some(CellTrace {
                t,
                u1,
                u2,
                v1,
                v2,
                mv2,
                dark_inner,
                v4,
                mean_u2,
                pn_ratio,
                out: out.clone(),
            })
        } else {
            None
        };
        Ok((out, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn locate_nonfinite(
        &self,
        t: &[f64],
        u1: &[f64],
        u2: &[f64],
        v1: &[f64],
        v2: &[f64],
        v3: &[f64],
        v4: &[f64],
        out: &[f64],
    ) -> Error {
        let stages: [(&'static str, &[f64]); 8] = [
            ("tanh_approx", t),
            ("tanh_approx", u1),
            ("microled", u2),
            ("matvec", v1),
            ("tia_gain", v2),
            ("crosstalk", v3),
            ("darkness", v4),
            ("power_norm", out),
        ];
        for (name, vals) in stages {
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Error::numeric(name, format!("produced {bad}"));
            }
        }
        Error::numeric("power_norm", "non-finite output")
    }

    /// Jacobian of the cell output with respect to the state, evaluated from
    /// a recorded trace. Quantisation is a per-pass constant of the weights
    /// and does not enter.
    pub fn jacobian_state(&self, w_eff: &Mat, trace: &CellTrace, calib: &Calib) -> Mat {
        let st = &self.spec.stages;
        let simple = self.spec.kind == CellKind::Simple;
        let d = self.d;
        let c1 = if simple { 1.0 } else { calib[0] };
        let c3 = if simple { 1.0 } else { calib[2] };
        let c4 = if simple { 1.0 } else { calib[3] };

        // chain = d(u2)/d(s), diagonal
        let mut chain = vec![0.0; d];
        for i in 0..d {
            let ti = trace.t[i];
            let d1 = c1 * (1.0 + st.tanh_approx * (1.0 - 3.0 * ti * ti)) * (1.0 - ti * ti);
            let d2 = 1.0 - 2.0 * st.microled * trace.u1[i].abs();
            chain[i] = d2 * d1;
        }

        // A = W_eff * diag(chain)
        let mut a = w_eff.clone();
        for i in 0..d {
            for j in 0..d {
                a[(i, j)] *= chain[j];
            }
        }
        // TIA gains scale rows
        if st.tia_gain != 0.0 {
            for i in 0..d {
                let g = self.gain[i];
                for j in 0..d {
                    a[(i, j)] *= g;
                }
            }
        }
        // crosstalk: A <- (I + e5 C) A
        if st.crosstalk != 0.0 {
            let ca = self.crosstalk.matmul(&a);
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] += st.crosstalk * ca[(i, j)];
                }
            }
        }
        if c3 != 1.0 {
            a.scale(c3);
        }
        // darkness adds the rank-one mean term
        if st.darkness != 0.0 {
            let coeff = st.darkness / d as f64;
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] += coeff * chain[j];
                }
            }
        }
        if c4 != 1.0 {
            a.scale(c4);
        }
        // power normalisation: exact Jacobian of v * T / max(rms(v), floor)
        if st.power_norm {
            let v4 = &trace.v4;
            let nrm = norm2(v4);
            if nrm / (d as f64).sqrt() > EPS_FLOOR {
                // out = T*sqrt(d)*v/|v| => J = ratio * (I - vhat vhat^T)
                let ratio = trace.pn_ratio;
                let mut proj = a.clone();
                proj.scale(ratio);
                // subtract ratio * vhat (vhat^T A)
                let vhat: Vec<f64> = v4.iter().map(|v| v / nrm).collect();
                let vta = a.matvec_t(&vhat);
                proj.add_outer(-ratio, &vhat, &vta);
                a = proj;
            } else {
                a.scale(trace.pn_ratio);
            }
        }
        a
    }

    /// Reverse-mode gradients of the cell with respect to the raw weights and
    /// the calibration gains, given the cotangent of the cell output.
    /// Quantisation uses the straight-through convention (identity backward).
    pub fn vjp_params(
        &self,
        w_eff: &Mat,
        w_raw: &Mat,
        trace: &CellTrace,
        calib: &Calib,
        cotangent: &[f64],
    ) -> CellGrad {
        let st = &self.spec.stages;
        let simple = self.spec.kind == CellKind::Simple;
        let d = self.d;
        let c3 = if simple { 1.0 } else { calib[2] };
        let c4 = if simple { 1.0 } else { calib[3] };

        // stage 8 backward
        let mut v4_bar: Vec<f64> = cotangent.to_vec();
        if st.power_norm {
            let v4 = &trace.v4;
            let nrm = norm2(v4);
            if nrm / (d as f64).sqrt() > EPS_FLOOR {
                let ratio = trace.pn_ratio;
                let vhat: Vec<f64> = v4.iter().map(|v| v / nrm).collect();
                let along = crate::linalg::dot(&vhat, cotangent);
                for i in 0..d {
                    v4_bar[i] = ratio * (cotangent[i] - vhat[i] * along);
                }
            } else {
                for v in &mut v4_bar {
                    *v *= trace.pn_ratio;
                }
            }
        }

        // stage 7 + calib[3]
        let mut calib_grad = [0.0f64; 4];
        if !simple {
            calib_grad[3] = trace
                .dark_inner
                .iter()
                .zip(&v4_bar)
                .map(|(x, g)| x * g)
                .sum();
        }
        let mut v3_bar = v4_bar.clone();
        if c4 != 1.0 {
            for v in &mut v3_bar {
                *v *= c4;
            }
        }
        let mut u2_bar = vec![0.0; d];
        if st.darkness != 0.0 {
            let m_bar: f64 = v3_bar.iter().sum::<f64>() * st.darkness / d as f64;
            for u in &mut u2_bar {
                *u += m_bar;
            }
        }

        // stage 6 + calib[2]
        if !simple {
            calib_grad[2] = trace.mv2.iter().zip(&v3_bar).map(|(x, g)| x * g).sum();
        }
        let mut mv2_bar = v3_bar.clone();
        if c3 != 1.0 {
            for v in &mut mv2_bar {
                *v *= c3;
            }
        }
        let mut v2_bar = mv2_bar.clone();
        if st.crosstalk != 0.0 {
            let ct = self.crosstalk.matvec_t(&mv2_bar);
            for (v, c) in v2_bar.iter_mut().zip(ct) {
                *v += st.crosstalk * c;
            }
        }

        // stage 5
        let mut v1_bar = v2_bar;
        if st.tia_gain != 0.0 {
            for (v, &g) in v1_bar.iter_mut().zip(&self.gain) {
                *v *= g;
            }
        }

        // stage 4: v1 = W_eff u2
        let mut w_eff_bar = Mat::zeros(d, d);
        w_eff_bar.add_outer(1.0, &v1_bar, &trace.u2);
        let wt_v1 = w_eff.matvec_t(&v1_bar);
        for (u, w) in u2_bar.iter_mut().zip(wt_v1) {
            *u += w;
        }

        // stage 3 backward: W_eff = c2 * (Wq - e3 Wq^3), straight-through Wq = W
        let c2 = if simple { 1.0 } else { calib[1] };
        let e3 = st.slm_distortion;
        let mut w_bar = Mat::zeros(d, d);
        if !simple {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    // W_eff / c2 is the stage-3 pre-gain output
                    acc += w_eff_bar[(i, j)] * w_eff[(i, j)] / c2;
                }
            }
            calib_grad[1] = acc;
        }
        for i in 0..d {
            for j in 0..d {
                let w = w_raw[(i, j)];
                w_bar[(i, j)] = c2 * (1.0 - 3.0 * e3 * w * w) * w_eff_bar[(i, j)];
            }
        }

        // stage 2 backward
        let mut u1_bar = u2_bar;
        if st.microled != 0.0 {
            for (u, &x) in u1_bar.iter_mut().zip(&trace.u1) {
                *u *= 1.0 - 2.0 * st.microled * x.abs();
            }
        }

        // stage 1 + calib[0]
        if !simple {
            let c1 = calib[0];
            calib_grad[0] = trace
                .u1
                .iter()
                .zip(&u1_bar)
                .map(|(x, g)| (x / c1) * g)
                .sum();
        }

        CellGrad {
            d_weights: w_bar,
            d_calib: calib_grad,
        }
    }
}

/// Intermediates of one impaired product, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CellTrace {
    pub t: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub mv2: Vec<f64>,
    pub dark_inner: Vec<f64>,
    pub v4: Vec<f64>,
    pub mean_u2: f64,
    pub pn_ratio: f64,
    pub out: Vec<f64>,
}

/// Gradients produced by [`FrozenCell::vjp_params`].
pub struct CellGrad {
    pub d_weights: Mat,
    pub d_calib: Calib,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_mat(d: usize, rng: &mut impl Rng) -> Mat {
        let mut m = Mat::zeros(d, d);
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    fn random_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn ideal_product(w: &Mat, s: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = s.iter().map(|&x| x.tanh()).collect();
        w.matvec(&t)
    }

    #[test]
    fn quantize_zero_matrix_is_zero() {
        let w = Mat::zeros(3, 3);
        let q = quantize_weights(&w, 9);
        assert!(q.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantize_full_scale_is_exact() {
        let w = Mat::from_rows(&[&[0.25, -0.7], &[0.7, 0.1]]);
        let q = quantize_weights(&w, 9);
        // entries at max magnitude map to themselves
        assert_eq!(q[(0, 1)], -0.7);
        assert_eq!(q[(1, 0)], 0.7);
    }

    /// Independent level-enumeration oracle: scan all 2^bits - 1 signed
    /// levels and take the closest in the scaled domain, ties away from zero.
    fn quantize_oracle_entry(w: f64, scale: f64, bits: u32) -> f64 {
        let levels = ((1u32 << (bits - 1)) - 1) as i64;
        let scaled = w / scale * levels as f64;
        let mut best_k = 0i64;
        let mut best_d = f64::INFINITY;
        for k in -levels..=levels {
            let d = (scaled - k as f64).abs();
            if d < best_d || (d == best_d && k.abs() > best_k.abs()) {
                best_d = d;
                best_k = k;
            }
        }
        best_k as f64 * scale / levels as f64
    }

    #[test]
    fn quantize_matches_level_enumeration() {
        // the 0.3 case: 9 bits, scale 1.0 -> 77/255
        let w = Mat::from_rows(&[&[0.3, 1.0], &[-1.0, 0.0]]);
        let q = quantize_weights(&w, 9);
        assert_eq!(q[(0, 0)], 77.0 / 255.0);
        assert_eq!(q[(0, 0)], quantize_oracle_entry(0.3, 1.0, 9));

        let mut rng = crate::seeds::stage_rng(21, "test.quant");
        for _ in 0..50 {
            let w = random_mat(4, &mut rng);
            let scale = w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let q = quantize_weights(&w, 9);
            for (qv, wv) in q.as_slice().iter().zip(w.as_slice()) {
                assert_eq!(*qv, quantize_oracle_entry(*wv, scale, 9));
            }
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = crate::seeds::stage_rng(22, "test.quant.idem");
        for bits in [2, 5, 9, 12] {
            let w = random_mat(6, &mut rng);
            let q1 = quantize_weights(&w, bits);
            let q2 = quantize_weights(&q1, bits);
            assert_eq!(q1, q2, "bits={bits}");
        }
    }

    #[test]
    fn simple_cell_is_exact_product() {
        let mut rng = crate::seeds::stage_rng(23, "test.simple");
        let cell = FrozenCell::new(CellSpec::simple(), 5).unwrap();
        for _ in 0..10 {
            let w = random_mat(5, &mut rng);
            let s = random_vec(5, &mut rng);
            let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
            assert_eq!(got, ideal_product(&w, &s), "must be bitwise identical");
        }
    }

    #[test]
    fn zero_magnitude_aoc_matches_simple_bitwise() {
        let mut rng = crate::seeds::stage_rng(24, "test.zeromag");
        let spec = CellSpec::aoc_with(StageMagnitudes::zeros(), None, 7);
        let cell = FrozenCell::new(spec, 4).unwrap();
        for _ in 0..100 {
            let w = random_mat(4, &mut rng);
            let s = random_vec(4, &mut rng);
            let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
            assert_eq!(got, ideal_product(&w, &s));
        }
    }

    #[test]
    fn tia_gain_reproduces_documented_draw() {
        // oracle: re-derive g from the documented generator procedure
        let seed = 99u64;
        let e4 = 0.05;
        let mut stages = StageMagnitudes::zeros();
        stages.tia_gain = e4;
        let spec = CellSpec::aoc_with(stages, None, seed);
        let cell = FrozenCell::new(spec, 2).unwrap();

        let mut rng = stage_rng(seed, "cell.tia_gain");
        let g_oracle: Vec<f64> = (0..2).map(|_| 1.0 - e4 + 2.0 * e4 * rng.gen::<f64>()).collect();
        assert_eq!(cell.tia_gains(), &g_oracle[..]);

        let w = Mat::from_rows(&[&[0.4, -0.2], &[0.1, 0.6]]);
        let s = [0.7, -1.1];
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        let base = ideal_product(&w, &s);
        for i in 0..2 {
            assert_eq!(got[i], g_oracle[i] * base[i]);
        }
    }

    /// Straight-line oracle for the full impaired pipeline, written
    /// independently of `FrozenCell::run`.
    fn full_cell_oracle(cell: &FrozenCell, w: &Mat, s: &[f64], calib: &Calib) -> Vec<f64> {
        let st = cell.spec().stages.clone();
        let d = s.len();
        let t: Vec<f64> = s.iter().map(|x| x.tanh()).collect();
        let u1: Vec<f64> = t
            .iter()
            .map(|&ti| calib[0] * (ti + st.tanh_approx * (ti - ti.powi(3))))
            .collect();
        let u2: Vec<f64> = u1.iter().map(|&u| u * (1.0 - st.microled * u.abs())).collect();
        let wq = match cell.spec().quant_bits {
            Some(b) => quantize_weights(w, b),
            None => w.clone(),
        };
        let mut weff = wq.clone();
        for v in weff.as_mut_slice() {
            *v = calib[1] * (*v - st.slm_distortion * v.powi(3));
        }
        let v1 = weff.matvec(&u2);
        let v2: Vec<f64> = v1.iter().zip(cell.tia_gains()).map(|(v, g)| v * g).collect();
        let cv = cell.crosstalk_matrix().matvec(&v2);
        let v3: Vec<f64> = v2
            .iter()
            .zip(&cv)
            .map(|(v, c)| calib[2] * (v + st.crosstalk * c))
            .collect();
        let m = u2.iter().sum::<f64>() / d as f64;
        let v4: Vec<f64> = v3.iter().map(|v| calib[3] * (v + st.darkness * m)).collect();
        if st.power_norm {
            let rms = norm2(&v4) / (d as f64).sqrt();
            let r = st.target_rms / rms.max(EPS_FLOOR);
            v4.iter().map(|v| v * r).collect()
        } else {
            v4
        }
    }

    #[test]
    fn full_pipeline_matches_straight_line_oracle() {
        let mut rng = crate::seeds::stage_rng(25, "test.fullcell");
        let mut stages = StageMagnitudes::defaults();
        stages.power_norm = true;
        stages.target_rms = 0.8;
        let spec = CellSpec::aoc_with(stages, Some(9), 31);
        let cell = FrozenCell::new(spec, 3).unwrap();
        let calib = [1.05, 0.97, 1.02, 0.97];
        for _ in 0..20 {
            let w = random_mat(3, &mut rng);
            let s = random_vec(3, &mut rng);
            let got = cell.apply(&w, &s, &calib).unwrap();
            let want = full_cell_oracle(&cell, &w, &s, &calib);
            for (g, w_) in got.iter().zip(&want) {
                assert!((g - w_).abs() <= 1e-12, "pipeline mismatch: {g} vs {w_}");
            }
        }
    }

    #[test]
    fn repeated_calls_are_bitwise_identical() {
        let mut rng = crate::seeds::stage_rng(26, "test.frozen");
        let cell = FrozenCell::new(CellSpec::aoc(5), 6).unwrap();
        let w = random_mat(6, &mut rng);
        let s = random_vec(6, &mut rng);
        let a = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        let b = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        assert_eq!(a, b);
    }

    /// Each stage alone changes the output exactly as its documented form.
    #[test]
    fn stage_locality_against_per_stage_oracles() {
        let mut rng = crate::seeds::stage_rng(27, "test.locality");
        let d = 4;
        let w = random_mat(d, &mut rng);
        let s = random_vec(d, &mut rng);
        let t: Vec<f64> = s.iter().map(|x| x.tanh()).collect();
        let eps = 0.07;

        let single = |set: fn(&mut StageMagnitudes, f64)| {
            let mut st = StageMagnitudes::zeros();
            set(&mut st, eps);
            FrozenCell::new(CellSpec::aoc_with(st, None, 13), d).unwrap()
        };

        // tanh_approx
        let cell = single(|st, e| st.tanh_approx = e);
        let u: Vec<f64> = t.iter().map(|&ti| ti + eps * (ti - ti.powi(3))).collect();
        let want = w.matvec(&u);
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for (g, w_) in got.iter().zip(&want) {
            assert!((g - w_).abs() <= 1e-12);
        }

        // microled
        let cell = single(|st, e| st.microled = e);
        let u: Vec<f64> = t.iter().map(|&ti| ti * (1.0 - eps * ti.abs())).collect();
        let want = w.matvec(&u);
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for (g, w_) in got.iter().zip(&want) {
            assert!((g - w_).abs() <= 1e-12);
        }

        // slm_distortion (quantisation off)
        let cell = single(|st, e| st.slm_distortion = e);
        let mut weff = w.clone();
        for v in weff.as_mut_slice() {
            *v -= eps * v.powi(3);
        }
        let want = weff.matvec(&t);
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for (g, w_) in got.iter().zip(&want) {
            assert!((g - w_).abs() <= 1e-12);
        }

        // crosstalk
        let cell = single(|st, e| st.crosstalk = e);
        let base = w.matvec(&t);
        let cv = cell.crosstalk_matrix().matvec(&base);
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for i in 0..d {
            assert!((got[i] - (base[i] + eps * cv[i])).abs() <= 1e-12);
        }

        // darkness
        let cell = single(|st, e| st.darkness = e);
        let m = t.iter().sum::<f64>() / d as f64;
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for i in 0..d {
            assert!((got[i] - (base[i] + eps * m)).abs() <= 1e-12);
        }

        // power_norm
        let mut st = StageMagnitudes::zeros();
        st.power_norm = true;
        st.target_rms = 0.5;
        let cell = FrozenCell::new(CellSpec::aoc_with(st, None, 13), d).unwrap();
        let rms = norm2(&base) / (d as f64).sqrt();
        let r = 0.5 / rms.max(EPS_FLOOR);
        let got = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
        for i in 0..d {
            assert!((got[i] - r * base[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn odd_symmetry_without_even_stages() {
        let mut rng = crate::seeds::stage_rng(28, "test.odd");
        let mut st = StageMagnitudes::zeros();
        st.tanh_approx = 0.04;
        st.slm_distortion = 0.03;
        st.tia_gain = 0.05;
        let cell = FrozenCell::new(CellSpec::aoc_with(st, Some(9), 17), 5).unwrap();
        for _ in 0..20 {
            let w = random_mat(5, &mut rng);
            let s = random_vec(5, &mut rng);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = cell.apply(&w, &s, &UNIT_CALIB).unwrap();
            let b = cell.apply(&w, &neg, &UNIT_CALIB).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x + y).abs() <= 1e-12, "odd symmetry violated");
            }
        }
    }

    #[test]
    fn simple_cell_spec_rejects_nonzero_stages() {
        let mut st = StageMagnitudes::zeros();
        st.darkness = 0.1;
        let spec = CellSpec {
            kind: CellKind::Simple,
            stages: st,
            quant_bits: None,
            rng_seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn nonfinite_input_names_stage() {
        let cell = FrozenCell::new(CellSpec::simple(), 2).unwrap();
        let mut w = Mat::zeros(2, 2);
        w[(0, 0)] = f64::INFINITY;
        let err = cell.apply(&w, &[1.0, 1.0], &UNIT_CALIB).unwrap_err();
        match err {
            Error::Numeric { stage, .. } => assert_eq!(stage, "matvec"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
