//! Truncated Fourier series on the torus `T^d` and the two small-divisor solvers.
//!
//! Angles are measured in turns: a mode `k` contributes `c_k e^{2πi k·θ}`.

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

pub type Mode = Vec<i32>;

pub const DEFAULT_DIVISOR_FLOOR: f64 = 1e-12;
pub const AVERAGE_TOLERANCE: f64 = 1e-13;

/// `|k| = |k_1| + ... + |k_d|`.
pub fn mode_norm(k: &[i32]) -> u32 {
    k.iter().map(|c| c.unsigned_abs()).sum()
}

/// Every multi-index of length `dim` with `|k| <= cap`, in lexicographic order.
pub fn modes_up_to(dim: usize, cap: u32) -> Vec<Mode> {
    fn rec(dim: usize, budget: i32, prefix: &mut Mode, out: &mut Vec<Mode>) {
        if prefix.len() == dim {
            out.push(prefix.clone());
            return;
        }
        for c in -budget..=budget {
            prefix.push(c);
            rec(dim, budget - c.abs(), prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, cap as i32, &mut Vec::with_capacity(dim), &mut out);
    out
}

fn dot_turns(k: &[i32], theta: &[f64]) -> f64 {
    let s: f64 = k.iter().zip(theta).map(|(&a, &b)| a as f64 * b).sum();
    s - s.round()
}

fn unit(turns: f64) -> Complex64 {
    Complex64::cis(TAU * turns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SeriesRecord", try_from = "SeriesRecord")]
pub struct FourierSeries {
    dim: usize,
    order_cap: u32,
    coeffs: BTreeMap<Mode, Complex64>,
}

/// On-disk layout: `dim`, `order_cap` and `(multi-index, re, im)` triples.
#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    dim: usize,
    order_cap: u32,
    terms: Vec<(Mode, f64, f64)>,
}

impl From<FourierSeries> for SeriesRecord {
    fn from(s: FourierSeries) -> Self {
        SeriesRecord {
            dim: s.dim,
            order_cap: s.order_cap,
            terms: s.coeffs.into_iter().map(|(k, c)| (k, c.re, c.im)).collect(),
        }
    }
}

impl TryFrom<SeriesRecord> for FourierSeries {
    type Error = String;

    fn try_from(r: SeriesRecord) -> std::result::Result<Self, String> {
        let mut s = FourierSeries::zero(r.dim, r.order_cap);
        for (k, re, im) in r.terms {
            if k.len() != r.dim {
                return Err(format!("mode {k:?} does not have length {}", r.dim));
            }
            if mode_norm(&k) > r.order_cap {
                return Err(format!("mode {k:?} exceeds order cap {}", r.order_cap));
            }
            s.add_term(k, Complex64::new(re, im));
        }
        Ok(s)
    }
}

impl FourierSeries {
    pub fn zero(dim: usize, order_cap: u32) -> Self {
        FourierSeries {
            dim,
            order_cap,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, order_cap: u32, c: impl Into<Complex64>) -> Self {
        let mut s = Self::zero(dim, order_cap);
        s.add_term(vec![0; dim], c.into());
        s
    }

    /// `amp · cos(2π k·θ)`.
    pub fn cos_mode(dim: usize, order_cap: u32, k: &[i32], amp: f64) -> Self {
        let mut s = Self::zero(dim, order_cap);
        let neg: Mode = k.iter().map(|c| -c).collect();
        s.add_term(k.to_vec(), Complex64::new(amp / 2.0, 0.0));
        s.add_term(neg, Complex64::new(amp / 2.0, 0.0));
        s
    }

    /// `amp · sin(2π k·θ)`.
    pub fn sin_mode(dim: usize, order_cap: u32, k: &[i32], amp: f64) -> Self {
        let mut s = Self::zero(dim, order_cap);
        let neg: Mode = k.iter().map(|c| -c).collect();
        s.add_term(k.to_vec(), Complex64::new(0.0, -amp / 2.0));
        s.add_term(neg, Complex64::new(0.0, amp / 2.0));
        s
    }

    pub fn from_terms<I>(dim: usize, order_cap: u32, terms: I) -> Self
    where
        I: IntoIterator<Item = (Mode, Complex64)>,
    {
        let mut s = Self::zero(dim, order_cap);
        for (k, c) in terms {
            s.add_term(k, c);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order_cap(&self) -> u32 {
        self.order_cap
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.values().all(|c| *c == Complex64::new(0.0, 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Mode, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn coeff(&self, k: &[i32]) -> Complex64 {
        self.coeffs.get(k).copied().unwrap_or_default()
    }

    /// Adds `c` to mode `k`. Modes beyond the order cap are dropped and the
    /// call returns `false`.
    pub fn add_term(&mut self, k: Mode, c: Complex64) -> bool {
        assert_eq!(k.len(), self.dim, "mode length must equal the torus dimension");
        if mode_norm(&k) > self.order_cap {
            return false;
        }
        if c == Complex64::new(0.0, 0.0) {
            return true;
        }
        let slot = self.coeffs.entry(k).or_default();
        *slot += c;
        true
    }

    pub fn set_term(&mut self, k: Mode, c: Complex64) {
        assert_eq!(k.len(), self.dim);
        if mode_norm(&k) > self.order_cap {
            return;
        }
        if c == Complex64::new(0.0, 0.0) {
            self.coeffs.remove(&k);
        } else {
            self.coeffs.insert(k, c);
        }
    }

    /// Copy with a different cap; modes beyond it are discarded.
    pub fn with_cap(&self, order_cap: u32) -> Self {
        let mut s = Self::zero(self.dim, order_cap);
        for (k, c) in &self.coeffs {
            s.add_term(k.clone(), *c);
        }
        s
    }

    pub fn evaluate(&self, theta: &[f64]) -> Complex64 {
        assert_eq!(theta.len(), self.dim);
        self.coeffs
            .iter()
            .map(|(k, c)| c * unit(dot_turns(k, theta)))
            .sum()
    }

    /// Evaluation at complex angles, for points inside the analyticity strip.
    pub fn evaluate_complex(&self, theta: &[Complex64]) -> Complex64 {
        assert_eq!(theta.len(), self.dim);
        self.coeffs
            .iter()
            .map(|(k, c)| {
                let phase: Complex64 = k.iter().zip(theta).map(|(&a, b)| b * a as f64).sum();
                c * (Complex64::new(0.0, TAU) * phase).exp()
            })
            .sum()
    }

    pub fn average(&self) -> Complex64 {
        self.coeff(&vec![0; self.dim])
    }

    pub fn oscillatory(&self) -> Self {
        let mut s = self.clone();
        s.coeffs.remove(&vec![0; self.dim]);
        s
    }

    pub fn rotate(&self, step: &[f64]) -> Self {
        assert_eq!(step.len(), self.dim);
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, c)| (k.clone(), c * unit(dot_turns(k, step))))
            .collect();
        FourierSeries {
            dim: self.dim,
            order_cap: self.order_cap,
            coeffs,
        }
    }

    /// `Σ_k |c_k| e^{2π|k|σ}`.
    pub fn strip_norm(&self, sigma: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, c)| c.norm() * (TAU * mode_norm(k) as f64 * sigma).exp())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn highest_mode(&self) -> u32 {
        self.coeffs.keys().map(|k| mode_norm(k)).max().unwrap_or(0)
    }

    pub fn scale(&self, factor: impl Into<Complex64>) -> Self {
        let f = factor.into();
        let mut s = Self::zero(self.dim, self.order_cap);
        if f == Complex64::new(0.0, 0.0) {
            return s;
        }
        s.coeffs = self.coeffs.iter().map(|(k, c)| (k.clone(), c * f)).collect();
        s
    }

    /// Pointwise product truncated to the smaller order cap, together with the
    /// summed modulus of the dropped coefficients.
    pub fn mul_truncated(&self, other: &Self) -> (Self, f64) {
        assert_eq!(self.dim, other.dim, "series on different tori");
        let cap = self.order_cap.min(other.order_cap);
        let mut out = Self::zero(self.dim, cap);
        let mut loss = 0.0;
        let mut k = vec![0i32; self.dim];
        for (ka, ca) in &self.coeffs {
            for (kb, cb) in &other.coeffs {
                for i in 0..self.dim {
                    k[i] = ka[i] + kb[i];
                }
                let c = ca * cb;
                if mode_norm(&k) > cap {
                    loss += c.norm();
                } else {
                    *out.coeffs.entry(k.clone()).or_default() += c;
                }
            }
        }
        out.coeffs.retain(|_, c| *c != Complex64::new(0.0, 0.0));
        (out, loss)
    }

    pub fn derivative(&self, axis: usize) -> Self {
        assert!(axis < self.dim);
        let mut s = Self::zero(self.dim, self.order_cap);
        for (k, c) in &self.coeffs {
            if k[axis] != 0 {
                s.coeffs
                    .insert(k.clone(), c * Complex64::new(0.0, TAU * k[axis] as f64));
            }
        }
        s
    }

    /// Directional derivative `Σ_i v_i ∂_i`.
    pub fn directional_derivative(&self, v: &[f64]) -> Self {
        assert_eq!(v.len(), self.dim);
        let mut s = Self::zero(self.dim, self.order_cap);
        for (k, c) in &self.coeffs {
            let kv: f64 = k.iter().zip(v).map(|(&a, b)| a as f64 * b).sum();
            if kv != 0.0 {
                s.coeffs.insert(k.clone(), c * Complex64::new(0.0, TAU * kv));
            }
        }
        s
    }

    /// The series of the complex conjugate function.
    pub fn conj(&self) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, c)| (k.iter().map(|a| -a).collect(), c.conj()))
            .collect();
        FourierSeries {
            dim: self.dim,
            order_cap: self.order_cap,
            coeffs,
        }
    }

    /// Real part of the function, `(f + conj f) / 2`.
    pub fn real_part(&self) -> Self {
        (self + &self.conj()).scale(0.5)
    }

    pub fn is_real_symmetric(&self, tol: f64) -> bool {
        let scale = self.strip_norm(0.0).max(1.0);
        self.coeffs.iter().all(|(k, c)| {
            let neg: Mode = k.iter().map(|a| -a).collect();
            (self.coeff(&neg) - c.conj()).norm() <= tol * scale
        })
    }

    /// Fixes the leading angles to `values`, leaving a series on the remaining ones.
    pub fn partial_evaluate(&self, values: &[f64]) -> Self {
        let n = values.len();
        assert!(n <= self.dim);
        let mut s = Self::zero(self.dim - n, self.order_cap);
        for (k, c) in &self.coeffs {
            let phase = dot_turns(&k[..n], values);
            s.add_term(k[n..].to_vec(), c * unit(phase));
        }
        s
    }

    /// Lifts to a torus of dimension `dim`, placing this series' angles at
    /// positions `offset..offset + self.dim`.
    pub fn embed(&self, dim: usize, offset: usize, order_cap: u32) -> Self {
        assert!(offset + self.dim <= dim);
        let mut s = Self::zero(dim, order_cap);
        for (k, c) in &self.coeffs {
            let mut kk = vec![0; dim];
            kk[offset..offset + self.dim].copy_from_slice(k);
            s.add_term(kk, *c);
        }
        s
    }

    /// Multiplies by `e^{2πi shift·θ}`.
    pub fn shift_modes(&self, shift: &[i32]) -> Self {
        assert_eq!(shift.len(), self.dim);
        let mut s = Self::zero(self.dim, self.order_cap);
        for (k, c) in &self.coeffs {
            let kk = k.iter().zip(shift).map(|(a, b)| a + b).collect();
            s.add_term(kk, *c);
        }
        s
    }

    /// Removes coefficients whose modulus is at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs.retain(|_, c| c.norm() > tol);
    }
}

impl Add for &FourierSeries {
    type Output = FourierSeries;
    fn add(self, rhs: &FourierSeries) -> FourierSeries {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub for &FourierSeries {
    type Output = FourierSeries;
    fn sub(self, rhs: &FourierSeries) -> FourierSeries {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&FourierSeries> for FourierSeries {
    fn add_assign(&mut self, rhs: &FourierSeries) {
        assert_eq!(self.dim, rhs.dim, "series on different tori");
        self.order_cap = self.order_cap.min(rhs.order_cap);
        let cap = self.order_cap;
        self.coeffs.retain(|k, _| mode_norm(k) <= cap);
        for (k, c) in &rhs.coeffs {
            self.add_term(k.clone(), *c);
        }
    }
}

impl SubAssign<&FourierSeries> for FourierSeries {
    fn sub_assign(&mut self, rhs: &FourierSeries) {
        *self += &(-rhs);
    }
}

impl Neg for &FourierSeries {
    type Output = FourierSeries;
    fn neg(self) -> FourierSeries {
        self.scale(-1.0)
    }
}

impl Mul for &FourierSeries {
    type Output = FourierSeries;
    fn mul(self, rhs: &FourierSeries) -> FourierSeries {
        self.mul_truncated(rhs).0
    }
}

impl Mul<Complex64> for &FourierSeries {
    type Output = FourierSeries;
    fn mul(self, rhs: Complex64) -> FourierSeries {
        self.scale(rhs)
    }
}

/// Frequencies of a quasiperiodic motion: `omega` on the `d` torus angles and
/// `nu` on the `d'` time angles. `c_estimate` and `k_max_checked` are zero
/// until a Diophantine scan fills them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector {
    pub omega: Vec<f64>,
    #[serde(default)]
    pub nu: Vec<f64>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub c_estimate: f64,
    #[serde(default)]
    pub k_max_checked: u32,
}

impl FrequencyVector {
    pub fn new(omega: Vec<f64>, nu: Vec<f64>) -> Self {
        FrequencyVector {
            omega,
            nu,
            tau: 0.0,
            c_estimate: 0.0,
            k_max_checked: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.omega.len()
    }

    pub fn d_prime(&self) -> usize {
        self.nu.len()
    }

    pub fn torus_dim(&self) -> usize {
        self.omega.len() + self.nu.len()
    }

    /// `(ω, ν)` as one vector.
    pub fn full(&self) -> Vec<f64> {
        self.omega.iter().chain(&self.nu).copied().collect()
    }

    pub fn is_scanned(&self) -> bool {
        self.k_max_checked > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    /// `|ω·k − l|` over integers `l`.
    Map,
    /// `|(ω, ν)·k|`.
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophantineScan {
    pub freq: FrequencyVector,
    pub kind: ScanKind,
    pub worst_k: Mode,
    pub worst_l: i64,
}

/// Smallest Diophantine quotient `dist · |k|^τ` over `0 < |k| <= k_max`.
pub fn diophantine_scan(
    omega: &[f64],
    nu: &[f64],
    tau: f64,
    k_max: u32,
    kind: ScanKind,
) -> Result<DiophantineScan> {
    if k_max == 0 {
        return Err(Error::Invalid("k_max must be at least 1".into()));
    }
    let freqs: Vec<f64> = match kind {
        ScanKind::Map => omega.to_vec(),
        ScanKind::Flow => omega.iter().chain(nu).copied().collect(),
    };
    if freqs.is_empty() {
        return Err(Error::Invalid("empty frequency vector".into()));
    }
    let mut best = f64::INFINITY;
    let mut worst_k = Vec::new();
    let mut worst_l = 0;
    for k in modes_up_to(freqs.len(), k_max) {
        // k and -k give the same quotient
        match k.iter().find(|&&c| c != 0) {
            Some(&c) if c > 0 => {}
            _ => continue,
        }
        let s: f64 = k.iter().zip(&freqs).map(|(&a, b)| a as f64 * b).sum();
        let (dist, l) = match kind {
            ScanKind::Map => {
                let l = s.round();
                ((s - l).abs(), l as i64)
            }
            ScanKind::Flow => (s.abs(), 0),
        };
        if dist == 0.0 {
            return Err(Error::ZeroDivisor { k, l });
        }
        let q = dist * (mode_norm(&k) as f64).powf(tau);
        if q < best {
            best = q;
            worst_k = k;
            worst_l = l;
        }
    }
    let mut freq = FrequencyVector::new(omega.to_vec(), nu.to_vec());
    freq.tau = tau;
    freq.c_estimate = best;
    freq.k_max_checked = k_max;
    Ok(DiophantineScan {
        freq,
        kind,
        worst_k,
        worst_l,
    })
}

fn check_average(h: &FourierSeries) -> Result<()> {
    let avg = h.average().norm();
    let tol = AVERAGE_TOLERANCE * h.strip_norm(0.0);
    if avg > tol {
        return Err(Error::NonzeroAverage {
            average: avg,
            tolerance: tol,
        });
    }
    Ok(())
}

fn divide_modes<F>(h: &FourierSeries, divisor_floor: f64, divisor: F) -> Result<FourierSeries>
where
    F: Fn(&[i32]) -> Complex64,
{
    check_average(h)?;
    let zero = vec![0; h.dim()];
    let mut phi = FourierSeries::zero(h.dim(), h.order_cap());
    for (k, c) in h.iter() {
        if *k == zero || *c == Complex64::new(0.0, 0.0) {
            continue;
        }
        let den = divisor(k);
        if den.norm() < divisor_floor {
            return Err(Error::ResonantMode {
                k: k.clone(),
                divisor: den.norm(),
            });
        }
        phi.set_term(k.clone(), c / den);
    }
    Ok(phi)
}

/// Zero-average solution of `φ(θ + ω) − φ(θ) = h(θ)`.
pub fn sd_solve_map(
    h: &FourierSeries,
    freq: &FrequencyVector,
    divisor_floor: f64,
) -> Result<FourierSeries> {
    if h.dim() != freq.d() {
        return Err(Error::DimensionMismatch(format!(
            "series on T^{} but {} frequencies",
            h.dim(),
            freq.d()
        )));
    }
    divide_modes(h, divisor_floor, |k| {
        unit(dot_turns(k, &freq.omega)) - Complex64::new(1.0, 0.0)
    })
}

/// Zero-average solution of `∂_θφ·ω + ∂_τφ·ν = h` on `T^{d+d'}`.
pub fn sd_solve_flow(
    h: &FourierSeries,
    freq: &FrequencyVector,
    divisor_floor: f64,
) -> Result<FourierSeries> {
    if h.dim() != freq.torus_dim() {
        return Err(Error::DimensionMismatch(format!(
            "series on T^{} but {} frequencies",
            h.dim(),
            freq.torus_dim()
        )));
    }
    let full = freq.full();
    divide_modes(h, divisor_floor, |k| {
        let kv: f64 = k.iter().zip(&full).map(|(&a, b)| a as f64 * b).sum();
        Complex64::new(0.0, TAU * kv)
    })
}

/// `φ(θ + ω) − φ(θ)`.
pub fn map_difference(phi: &FourierSeries, omega: &[f64]) -> FourierSeries {
    &phi.rotate(omega) - phi
}

/// `∂_θφ·ω + ∂_τφ·ν`.
pub fn flow_derivative(phi: &FourierSeries, freq: &FrequencyVector) -> FourierSeries {
    phi.directional_derivative(&freq.full())
}
