//! Weight quantizers: logarithmic power-of-two (PoT) quantization with
//! max-abs normalisation and a pruning threshold, plus symmetric uniform and
//! additive powers-of-two (APoT) quantizers used for comparison.
//!
//! All quantizers work per layer. A layer is normalised by its scale factor
//! `SF = max|w|`, so normalised weights live in `[-1, 1]`; because `SF` is
//! recomputed from the current weights on every call, the effective full scale
//! range follows the weight distribution during training.
//!
//! Bit widths count the sign bit: a 4-bit PoT weight has one sign bit and a
//! 3-bit exponent code, i.e. eight magnitude levels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantScheme {
    Float,
    /// Symmetric linear levels `{-(2^(bits-1)-1) .. 2^(bits-1)-1} * step`.
    Uniform { bits: u8 },
    /// Signed powers of two `2^(fsr_exp - c)`, `c in [0, 2^(bits-1) - 1]`.
    Pot {
        bits: u8,
        #[serde(default)]
        fsr_exp: i32,
    },
    /// Signed sums of two power-of-two terms; see [`APOT_FIRST_TERM`].
    Apot { bits: u8, terms: u8 },
}

impl QuantScheme {
    pub const fn pot(bits: u8) -> Self {
        Self::Pot { bits, fsr_exp: 0 }
    }

    pub const fn uniform(bits: u8) -> Self {
        Self::Uniform { bits }
    }

    pub const fn apot() -> Self {
        Self::Apot { bits: 4, terms: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Float => Ok(()),
            Self::Uniform { bits } | Self::Pot { bits, .. } if !(2..=8).contains(&bits) => Err(
                Error::Config(format!("bit width {bits} outside supported range 2..=8")),
            ),
            Self::Apot { bits, terms } if bits != 4 || terms != 2 => Err(Error::Config(format!(
                "only 4-bit two-term APoT is supported, got bits={bits} terms={terms}"
            ))),
            _ => Ok(()),
        }
    }

    /// Nominal bit width including the sign bit (32 for float).
    pub fn bits(&self) -> u8 {
        match *self {
            Self::Float => 32,
            Self::Uniform { bits } | Self::Pot { bits, .. } | Self::Apot { bits, .. } => bits,
        }
    }

    /// Largest magnitude code: the exponent code of the smallest PoT level, or
    /// the largest uniform integer level.
    pub fn max_code(&self) -> u8 {
        match *self {
            Self::Uniform { bits } | Self::Pot { bits, .. } => ((1u16 << (bits - 1)) - 1) as u8,
            Self::Apot { .. } => APOT_ZERO_CODE,
            Self::Float => 0,
        }
    }

    pub fn is_float(&self) -> bool {
        matches!(self, Self::Float)
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Float => "float".into(),
            Self::Uniform { bits } => format!("{bits}U"),
            Self::Pot { bits, .. } => format!("{bits}L"),
            Self::Apot { bits, .. } => format!("{bits}A"),
        }
    }
}

/// Pruning Factor: normalised weights with `|w_n| <= pf * 2^min_exponent` are
/// set to zero before PoT quantization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub pf: f32,
}

impl PruneConfig {
    pub fn new(pf: f32) -> Result<Self> {
        let c = Self { pf };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pf >= 0.0 && self.pf.is_finite()) {
            return Err(Error::Config(format!(
                "pruning factor must be a finite non-negative number, got {}",
                self.pf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn of(x: f32) -> Self {
        if x.is_sign_negative() && x != 0.0 {
            Self::Neg
        } else {
            Self::Pos
        }
    }

    pub fn is_negative(self) -> bool {
        self == Self::Neg
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Self::Pos => x,
            Self::Neg => -x,
        }
    }

    pub fn apply_int(self, x: i64) -> i64 {
        match self {
            Self::Pos => x,
            Self::Neg => -x,
        }
    }
}

/// First APoT term exponents (`2^-a`); `None` means the term is absent.
pub const APOT_FIRST_TERM: [Option<u8>; 4] = [Some(0), Some(2), Some(4), None];
/// Second APoT term exponents (`2^-b`).
pub const APOT_SECOND_TERM: [Option<u8>; 4] = [Some(1), Some(3), Some(5), None];
/// Unnormalised magnitude of the largest APoT level, `2^0 + 2^-1`.
pub const APOT_MAX_SUM: f64 = 1.5;
/// APoT code with both terms absent (the zero level).
pub const APOT_ZERO_CODE: u8 = 0b1111;

fn term(e: Option<u8>) -> f64 {
    e.map_or(0.0, |e| 2f64.powi(-(e as i32)))
}

/// Splits an APoT code into its first and second term indices.
pub fn apot_split(code: u8) -> (usize, usize) {
    ((code & 0b11) as usize, ((code >> 2) & 0b11) as usize)
}

/// Normalised magnitude (max level = 1) of an APoT code.
pub fn apot_magnitude(code: u8) -> f64 {
    let (a, b) = apot_split(code);
    (term(APOT_FIRST_TERM[a]) + term(APOT_SECOND_TERM[b])) / APOT_MAX_SUM
}

/// Quantized representation of one layer's weights.
///
/// `codes` hold, per scheme: the PoT exponent code `c` (level
/// `2^(fsr_exp - c)`), the uniform integer magnitude, or the APoT term pair
/// (low two bits first term, next two bits second term). Masked weights are
/// exactly zero and carry the canonical code `0` (`APOT_ZERO_CODE` for APoT)
/// with a positive sign.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    shape: Vec<usize>,
    scheme: QuantScheme,
    scale: f32,
    signs: Vec<Sign>,
    codes: Vec<u8>,
    zero_mask: Vec<bool>,
}

impl QuantizedLayer {
    /// Builds a layer from raw parts, checking every invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        scheme: QuantScheme,
        scale: f32,
        signs: Vec<Sign>,
        codes: Vec<u8>,
        zero_mask: Vec<bool>,
    ) -> Result<Self> {
        scheme.validate()?;
        if scheme.is_float() {
            return Err(Error::Input("float scheme has no quantized form".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Input(format!("scale factor must be positive, got {scale}")));
        }
        let n: usize = shape.iter().product();
        if signs.len() != n || codes.len() != n || zero_mask.len() != n {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} entries, got {}/{}/{}",
                signs.len(),
                codes.len(),
                zero_mask.len()
            )));
        }
        let zero_code = canonical_zero_code(scheme);
        for i in 0..n {
            let c = codes[i];
            if zero_mask[i] {
                if c != zero_code || signs[i] != Sign::Pos {
                    return Err(Error::Input(format!("masked weight {i} is not canonical")));
                }
                continue;
            }
            let ok = match scheme {
                QuantScheme::Pot { .. } => c <= scheme.max_code(),
                QuantScheme::Uniform { .. } => (1..=scheme.max_code()).contains(&c),
                QuantScheme::Apot { .. } => c < APOT_ZERO_CODE,
                QuantScheme::Float => false,
            };
            if !ok {
                return Err(Error::Input(format!("code {c} of weight {i} invalid for {scheme:?}")));
            }
        }
        Ok(Self {
            shape,
            scheme,
            scale,
            signs,
            codes,
            zero_mask,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    /// Scale factor `SF`.
    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn zero_mask(&self) -> &[bool] {
        &self.zero_mask
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.zero_mask.iter().filter(|&&z| z).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.len() as f64
    }

    /// Signed normalised level of weight `i` (before multiplying by `SF`).
    pub fn normalized(&self, i: usize) -> f64 {
        if self.zero_mask[i] {
            return 0.0;
        }
        let mag = match self.scheme {
            QuantScheme::Pot { fsr_exp, .. } => 2f64.powi(fsr_exp - self.codes[i] as i32),
            QuantScheme::Uniform { .. } => self.codes[i] as f64 / self.scheme.max_code() as f64,
            QuantScheme::Apot { .. } => apot_magnitude(self.codes[i]),
            QuantScheme::Float => unreachable!("validated in from_parts"),
        };
        if self.signs[i].is_negative() {
            -mag
        } else {
            mag
        }
    }

    pub fn value(&self, i: usize) -> f32 {
        if self.zero_mask[i] {
            return 0.0;
        }
        // For PoT layers this product is exact: scaling by a power of two only
        // changes the exponent.
        let mag = (self.scale as f64 * self.normalized(i).abs()) as f32;
        self.signs[i].apply(mag)
    }

    /// `W_Q = Q(W_N) * SF`.
    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.len()).map(|i| self.value(i)).collect();
        Tensor::new(self.shape.clone(), data).expect("shape checked at construction")
    }
}

fn canonical_zero_code(scheme: QuantScheme) -> u8 {
    match scheme {
        QuantScheme::Apot { .. } => APOT_ZERO_CODE,
        _ => 0,
    }
}

/// Layer scale factor `max|w|`; an all-zero tensor gets `1.0`.
pub fn compute_scale(w: &[f32]) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::Input("cannot compute the scale of an empty tensor".into()));
    }
    let m = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    Ok(if m > 0.0 { m } else { 1.0 })
}

/// Smallest representable PoT exponent for `bits` and `fsr_exp`.
pub fn pot_min_exponent(bits: u8, fsr_exp: i32) -> i32 {
    fsr_exp - (1i32 << (bits - 1)) + 1
}

/// Log-domain quantization of one normalised weight. Returns `None` for an
/// exact zero, otherwise the exponent code `c = fsr_exp - e` where
/// `e = round(log2|x|)` (halves away from zero) clipped to the representable
/// exponents. Magnitudes below the smallest level are promoted to it and
/// magnitudes above the largest are clipped to it.
pub fn logquant_exponent(x_norm: f64, bits: u8, fsr_exp: i32) -> Option<u8> {
    if x_norm == 0.0 || x_norm.is_nan() {
        return None;
    }
    let e = x_norm.abs().log2().round();
    let min_e = pot_min_exponent(bits, fsr_exp) as f64;
    let e = e.clamp(min_e, fsr_exp as f64) as i32;
    Some((fsr_exp - e) as u8)
}

pub fn quantize_pot(w: &Tensor, bits: u8, fsr_exp: i32, prune: PruneConfig) -> Result<QuantizedLayer> {
    let scheme = QuantScheme::Pot { bits, fsr_exp };
    scheme.validate()?;
    prune.validate()?;
    let sf = compute_scale(w.data())?;
    let threshold = prune.pf as f64 * 2f64.powi(pot_min_exponent(bits, fsr_exp));
    let n = w.numel();
    let (mut signs, mut codes, mut mask) = (vec![Sign::Pos; n], vec![0u8; n], vec![false; n]);
    for (i, &v) in w.data().iter().enumerate() {
        let wn = v as f64 / sf as f64;
        let code = if wn.abs() <= threshold {
            None
        } else {
            logquant_exponent(wn, bits, fsr_exp)
        };
        match code {
            Some(c) => {
                codes[i] = c;
                signs[i] = Sign::of(v);
            }
            None => mask[i] = true,
        }
    }
    QuantizedLayer::from_parts(w.shape().to_vec(), scheme, sf, signs, codes, mask)
}

/// Symmetric uniform quantization with `step = SF / (2^(bits-1) - 1)`.
/// Weights rounding to level 0 are masked.
pub fn quantize_uniform(w: &Tensor, bits: u8) -> Result<QuantizedLayer> {
    let scheme = QuantScheme::Uniform { bits };
    scheme.validate()?;
    let sf = compute_scale(w.data())?;
    let qmax = scheme.max_code() as f64;
    let n = w.numel();
    let (mut signs, mut codes, mut mask) = (vec![Sign::Pos; n], vec![0u8; n], vec![false; n]);
    for (i, &v) in w.data().iter().enumerate() {
        let level = (v as f64 / sf as f64 * qmax).round().clamp(-qmax, qmax);
        if level == 0.0 {
            mask[i] = true;
        } else {
            codes[i] = level.abs() as u8;
            signs[i] = Sign::of(v);
        }
    }
    QuantizedLayer::from_parts(w.shape().to_vec(), scheme, sf, signs, codes, mask)
}

/// APoT code whose magnitude is nearest to `mag` (ties go to the smaller
/// magnitude).
pub fn apot_nearest(mag: f64) -> u8 {
    let mut best = (APOT_ZERO_CODE, f64::INFINITY, 0.0f64);
    for code in 0..16u8 {
        let m = apot_magnitude(code);
        let d = (mag - m).abs();
        if d < best.1 || (d == best.1 && m < best.2) {
            best = (code, d, m);
        }
    }
    best.0
}

pub fn quantize_apot(w: &Tensor) -> Result<QuantizedLayer> {
    let scheme = QuantScheme::apot();
    let sf = compute_scale(w.data())?;
    let n = w.numel();
    let (mut signs, mut codes, mut mask) =
        (vec![Sign::Pos; n], vec![APOT_ZERO_CODE; n], vec![false; n]);
    for (i, &v) in w.data().iter().enumerate() {
        let code = apot_nearest((v as f64 / sf as f64).abs());
        if code == APOT_ZERO_CODE {
            mask[i] = true;
        } else {
            codes[i] = code;
            signs[i] = Sign::of(v);
        }
    }
    QuantizedLayer::from_parts(w.shape().to_vec(), scheme, sf, signs, codes, mask)
}

/// Dispatches on `scheme`. The pruning factor only affects PoT layers.
pub fn quantize(w: &Tensor, scheme: QuantScheme, prune: PruneConfig) -> Result<QuantizedLayer> {
    match scheme {
        QuantScheme::Pot { bits, fsr_exp } => quantize_pot(w, bits, fsr_exp, prune),
        QuantScheme::Uniform { bits } => quantize_uniform(w, bits),
        QuantScheme::Apot { .. } => {
            scheme.validate()?;
            quantize_apot(w)
        }
        QuantScheme::Float => Err(Error::Input("cannot quantize with the float scheme".into())),
    }
}

/// Every representable normalised value of `scheme`, zero included, sorted
/// ascending.
pub fn quant_levels(scheme: QuantScheme) -> Result<Vec<f64>> {
    scheme.validate()?;
    let mut mags: Vec<f64> = match scheme {
        QuantScheme::Float => {
            return Err(Error::Input("float scheme has no discrete levels".into()))
        }
        QuantScheme::Pot { fsr_exp, .. } => (0..=scheme.max_code())
            .map(|c| 2f64.powi(fsr_exp - c as i32))
            .collect(),
        QuantScheme::Uniform { .. } => {
            let q = scheme.max_code();
            (1..=q).map(|k| k as f64 / q as f64).collect()
        }
        QuantScheme::Apot { .. } => (0..APOT_ZERO_CODE).map(apot_magnitude).collect(),
    };
    mags.retain(|&m| m > 0.0);
    let mut levels: Vec<f64> = mags.iter().flat_map(|&m| [m, -m]).collect();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(&[0.5, -0.25, 0.1]).unwrap(), 0.5);
        assert_eq!(compute_scale(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(compute_scale(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn logquant_examples() {
        assert_eq!(logquant_exponent(0.0, 4, 0), None);
        assert_eq!(logquant_exponent(-0.25, 4, 0), Some(2));
        // log2(0.2) = -2.32 rounds to -2.
        assert_eq!(logquant_exponent(0.2, 4, 0), Some(2));
        // Tiny magnitudes are promoted to the smallest level 2^-7.
        assert_eq!(logquant_exponent(1e-6, 4, 0), Some(7));
        // Out-of-range magnitudes clip to the largest level.
        assert_eq!(logquant_exponent(3.0, 4, 0), Some(0));
        // Halfway in the log domain rounds away from zero: 2^-2.5 -> 2^-3.
        assert_eq!(logquant_exponent(2f64.powf(-2.5), 4, 0), Some(3));
    }

    #[test]
    fn pot_pipeline_example() {
        let q = quantize_pot(&t(&[0.5, -0.25, 0.1]), 4, 0, PruneConfig::default()).unwrap();
        assert_eq!(q.scale(), 0.5);
        // W_N = [1, -0.5, 0.2]
        assert_eq!(q.codes(), &[0, 1, 2]);
        assert_eq!(q.signs(), &[Sign::Pos, Sign::Neg, Sign::Pos]);
        assert_eq!(q.dequantize().data(), &[0.5, -0.25, 0.125]);
        assert_eq!(q.zero_fraction(), 0.0);
    }

    #[test]
    fn all_masked_dequantizes_to_zero() {
        let q = quantize_pot(&t(&[0.0, 0.0, 0.0]), 4, 0, PruneConfig::default()).unwrap();
        assert_eq!(q.zero_fraction(), 1.0);
        assert_eq!(q.dequantize().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pruning_threshold_is_relative_to_smallest_level() {
        // Smallest 4-bit level is 2^-7; PF = 2 prunes |w_n| <= 2^-6.
        let w = t(&[1.0, 2f32.powi(-6), 2f32.powi(-6) * 1.01, -2f32.powi(-8)]);
        let q = quantize_pot(&w, 4, 0, PruneConfig::new(2.0).unwrap()).unwrap();
        assert_eq!(q.zero_mask(), &[false, true, false, true]);
        let q0 = quantize_pot(&w, 4, 0, PruneConfig::default()).unwrap();
        assert_eq!(q0.zero_count(), 0);
        assert_eq!(q0.codes()[3], 7);
        assert!(PruneConfig::new(-1.0).is_err());
    }

    #[test]
    fn uniform_examples() {
        let q = quantize_uniform(&t(&[1.0, 0.01]), 4).unwrap();
        assert_eq!(q.codes(), &[7, 0]);
        assert_eq!(q.zero_mask(), &[false, true]);
        let q = quantize_uniform(&t(&[-0.3]), 4).unwrap();
        assert_eq!((q.codes()[0], q.signs()[0]), (7, Sign::Neg));
        assert_eq!(q.dequantize().data(), &[-0.3]);
    }

    #[test]
    fn apot_examples() {
        let q = quantize_apot(&t(&[0.0, 0.0])).unwrap();
        assert_eq!(q.codes(), &[APOT_ZERO_CODE, APOT_ZERO_CODE]);
        assert_eq!(q.dequantize().data(), &[0.0, 0.0]);
        // A weight sitting on a level maps to itself.
        let lvl = apot_magnitude(0b0101) as f32; // 2^-2 + 2^-3
        let q = quantize_apot(&t(&[1.0, -lvl])).unwrap();
        assert_eq!(q.codes()[1], 0b0101);
        assert_eq!(q.dequantize().data()[1], -lvl);
    }

    #[test]
    fn level_sets() {
        let pot = quant_levels(QuantScheme::pot(4)).unwrap();
        assert_eq!(pot.len(), 17);
        assert_eq!(pot[0], -1.0);
        assert_eq!(pot[7], -(2f64.powi(-7)));
        assert_eq!(pot[8], 0.0);
        let uni = quant_levels(QuantScheme::uniform(3)).unwrap();
        assert_eq!(uni, vec![-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(quant_levels(QuantScheme::Float).is_err());
    }

    #[test]
    fn apot_level_count_by_enumeration() {
        // Enumerate the two-term codebook independently of quant_levels.
        let mut mags = Vec::new();
        for a in [Some(0), Some(2), Some(4), None] {
            for b in [Some(1), Some(3), Some(5), None] {
                let f = |e: Option<i32>| e.map_or(0.0, |e| 2f64.powi(-e));
                mags.push((f(a) + f(b)) / 1.5);
            }
        }
        let mut vals: Vec<f64> = mags.iter().flat_map(|&m| [m, -m]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let levels = quant_levels(QuantScheme::apot()).unwrap();
        assert_eq!(levels, vals);
        assert_eq!(levels.len(), 31);
    }

    #[test]
    fn scheme_validation() {
        assert!(QuantScheme::pot(1).validate().is_err());
        assert!(QuantScheme::uniform(9).validate().is_err());
        assert!(QuantScheme::Apot { bits: 3, terms: 2 }.validate().is_err());
        assert!(quantize(&t(&[1.0]), QuantScheme::Float, PruneConfig::default()).is_err());
    }

    #[test]
    fn from_parts_rejects_broken_invariants() {
        let s = QuantScheme::pot(4);
        assert!(QuantizedLayer::from_parts(vec![1], s, 0.0, vec![Sign::Pos], vec![0], vec![false]).is_err());
        assert!(QuantizedLayer::from_parts(vec![1], s, 1.0, vec![Sign::Pos], vec![8], vec![false]).is_err());
        assert!(QuantizedLayer::from_parts(vec![1], s, 1.0, vec![Sign::Neg], vec![0], vec![true]).is_err());
        assert!(QuantizedLayer::from_parts(vec![2], s, 1.0, vec![Sign::Pos], vec![0], vec![false]).is_err());
    }

    fn schemes() -> impl Strategy<Value = QuantScheme> {
        prop_oneof![
            (2u8..=8, 0i32..=2).prop_map(|(bits, fsr_exp)| QuantScheme::Pot { bits, fsr_exp }),
            (2u8..=8).prop_map(QuantScheme::uniform),
            Just(QuantScheme::apot()),
        ]
    }

    proptest! {
        #[test]
        fn requantizing_is_idempotent(
            w in prop::collection::vec(-4.0f32..4.0, 1..64),
            scheme in schemes(),
        ) {
            // Level 1 must be representable, otherwise the requantized scale
            // moves.
            if let QuantScheme::Pot { bits, fsr_exp } = scheme {
                prop_assume!(pot_min_exponent(bits, fsr_exp) <= 0);
            }
            let w = t(&w);
            let q = quantize(&w, scheme, PruneConfig::default()).unwrap();
            let deq = q.dequantize();
            let q2 = quantize(&deq, scheme, PruneConfig::default()).unwrap();
            prop_assert_eq!(&q2, &q);
            prop_assert_eq!(q2.dequantize(), deq);
        }

        #[test]
        fn dequantized_values_are_scaled_levels(
            w in prop::collection::vec(-4.0f32..4.0, 1..64),
            scheme in schemes(),
        ) {
            let q = quantize(&t(&w), scheme, PruneConfig::default()).unwrap();
            let levels = quant_levels(scheme).unwrap();
            for (i, &v) in q.dequantize().data().iter().enumerate() {
                let n = q.normalized(i);
                prop_assert!(levels.contains(&n));
                prop_assert_eq!(v, (q.scale() as f64 * n) as f32);
            }
        }

        #[test]
        fn quantization_is_monotone(
            w in prop::collection::vec(-4.0f32..4.0, 2..64),
            scheme in schemes(),
        ) {
            let q = quantize(&t(&w), scheme, PruneConfig::default()).unwrap();
            let d = q.dequantize();
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] <= w[j] {
                        prop_assert!(d.data()[i] <= d.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn pruned_fraction_grows_with_pf(
            w in prop::collection::vec(-1.0f32..1.0, 1..128),
            pfs in prop::collection::vec(0.0f32..8.0, 2..6),
        ) {
            let mut pfs = pfs;
            pfs.sort_by(f32::total_cmp);
            let w = t(&w);
            let fracs: Vec<f64> = pfs
                .iter()
                .map(|&pf| quantize_pot(&w, 4, 0, PruneConfig { pf }).unwrap().zero_fraction())
                .collect();
            prop_assert!(fracs.windows(2).all(|f| f[0] <= f[1]));
        }

        #[test]
        fn codes_are_scale_invariant(
            w in prop::collection::vec(-1.0f32..1.0, 1..64),
            k in -8i32..8,
            scheme in schemes(),
        ) {
            prop_assume!(w.iter().any(|v| *v != 0.0));
            let c = 2f32.powi(k);
            let w1 = t(&w);
            let w2 = t(&w.iter().map(|v| v * c).collect::<Vec<_>>());
            let q1 = quantize(&w1, scheme, PruneConfig::default()).unwrap();
            let q2 = quantize(&w2, scheme, PruneConfig::default()).unwrap();
            prop_assert_eq!(q1.codes(), q2.codes());
            prop_assert_eq!(q1.signs(), q2.signs());
            prop_assert_eq!(q2.scale(), q1.scale() * c);
        }
    }
}
