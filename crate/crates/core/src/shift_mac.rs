//! Bit-exact emulation of four multiply-accumulate datapaths with 8-bit
//! activations: a uniform 8x8 multiplier, a uniform 4x8 multiplier, a PoT 4x8
//! unit (one shift plus sign correction) and an APoT 4x8 unit (two shifts, an
//! add and sign correction).
//!
//! Products are formed exactly, then squeezed into the configured
//! intermediate width; the running sum is squeezed into the accumulator width
//! after every step. Any value that does not fit is counted as an overflow
//! event, whichever [`OverflowMode`] is active.

use crate::error::{Error, Result};
use crate::par;
use crate::quantizers::Sign;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::AddAssign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacKind {
    Uniform8x8,
    Uniform4x8,
    Apot4x8,
    Pot4x8,
}

impl MacKind {
    pub const ALL: [MacKind; 4] = [
        MacKind::Uniform8x8,
        MacKind::Uniform4x8,
        MacKind::Apot4x8,
        MacKind::Pot4x8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MacKind::Uniform8x8 => "Uniform 8x8",
            MacKind::Uniform4x8 => "Uniform 4x8",
            MacKind::Apot4x8 => "APoT 4x8",
            MacKind::Pot4x8 => "PoT 4x8",
        }
    }
}

impl fmt::Display for MacKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowMode {
    /// Two's-complement wrap-around.
    #[default]
    Wrap,
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacConfig {
    pub kind: MacKind,
    pub intermediate_width: u32,
    pub accumulator_width: u32,
    pub overflow: OverflowMode,
}

impl MacConfig {
    /// Widths quoted for the synthesised units: 16-bit product and 24-bit
    /// accumulator for the 8x8 unit, 12-bit product and 16-bit accumulator
    /// for every 4x8 unit.
    pub fn synthesized(kind: MacKind) -> Self {
        let (intermediate_width, accumulator_width) = match kind {
            MacKind::Uniform8x8 => (16, 24),
            _ => (12, 16),
        };
        Self {
            kind,
            intermediate_width,
            accumulator_width,
            overflow: OverflowMode::Wrap,
        }
    }

    /// Default execution widths. Same as [`MacConfig::synthesized`] except
    /// that the shift units get a product register wide enough for every
    /// in-range operand pair: `act << 7` needs 16 bits and
    /// `(act << 5) + (act << 4)` needs 14, neither of which fits in 12.
    pub fn nominal(kind: MacKind) -> Self {
        let mut c = Self::synthesized(kind);
        c.intermediate_width = match kind {
            MacKind::Pot4x8 => 16,
            MacKind::Apot4x8 => 14,
            _ => c.intermediate_width,
        };
        c
    }

    pub fn with_overflow(mut self, overflow: OverflowMode) -> Self {
        self.overflow = overflow;
        self
    }

    pub fn with_widths(mut self, intermediate: u32, accumulator: u32) -> Self {
        self.intermediate_width = intermediate;
        self.accumulator_width = accumulator;
        self
    }
}

/// Weight operand as stored next to the datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightPayload {
    /// Sign-magnitude integer for the uniform multipliers.
    Magnitude(u8),
    /// Left-shift amount of a PoT weight.
    Shift(u8),
    /// Two shift amounts of an APoT weight; `None` is an absent term.
    ShiftPair(Option<u8>, Option<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightCode {
    pub sign: Sign,
    pub payload: WeightPayload,
}

impl WeightCode {
    pub fn uniform(sign: Sign, magnitude: u8) -> Self {
        Self {
            sign,
            payload: WeightPayload::Magnitude(magnitude),
        }
    }

    pub fn pot(sign: Sign, shift: u8) -> Self {
        Self {
            sign,
            payload: WeightPayload::Shift(shift),
        }
    }

    pub fn apot(sign: Sign, k1: Option<u8>, k2: Option<u8>) -> Self {
        Self {
            sign,
            payload: WeightPayload::ShiftPair(k1, k2),
        }
    }

    /// Decoded integer weight.
    pub fn value(&self) -> i64 {
        let mag = match self.payload {
            WeightPayload::Magnitude(m) => m as i64,
            WeightPayload::Shift(k) => 1i64 << k,
            WeightPayload::ShiftPair(a, b) => {
                a.map_or(0, |k| 1i64 << k) + b.map_or(0, |k| 1i64 << k)
            }
        };
        self.sign.apply_int(mag)
    }

    fn check(&self, kind: MacKind) -> Result<()> {
        let ok = match (kind, self.payload) {
            (MacKind::Uniform8x8, WeightPayload::Magnitude(m)) => m <= 127,
            (MacKind::Uniform4x8, WeightPayload::Magnitude(m)) => m <= 7,
            (MacKind::Pot4x8, WeightPayload::Shift(k)) => k <= 7,
            (MacKind::Apot4x8, WeightPayload::ShiftPair(a, b)) => {
                a.is_none_or(|k| k <= 7) && b.is_none_or(|k| k <= 7)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("weight {self:?} is not a valid {kind} operand")))
        }
    }
}

fn sign_correct(x: i64, sign: Sign) -> i64 {
    match sign {
        Sign::Pos => x,
        // Two's-complement negation: invert and add one.
        Sign::Neg => (!x).wrapping_add(1),
    }
}

/// `sign * (act << k)` computed with a shifter and a sign-correction stage.
pub fn shift_mul_pot(act: i32, sign: Sign, k: u8) -> i64 {
    sign_correct((act as i64) << k, sign)
}

/// `sign * ((act << k1) + (act << k2))`; absent terms contribute zero.
pub fn shift_mul_apot(act: i32, sign: Sign, k1: Option<u8>, k2: Option<u8>) -> i64 {
    let a = k1.map_or(0, |k| (act as i64) << k);
    let b = k2.map_or(0, |k| (act as i64) << k);
    sign_correct(a + b, sign)
}

/// Product of one activation and one weight code, before any width limit.
pub fn product(act: i32, code: &WeightCode) -> i64 {
    match code.payload {
        WeightPayload::Magnitude(m) => code.sign.apply_int(act as i64 * m as i64),
        WeightPayload::Shift(k) => shift_mul_pot(act, code.sign, k),
        WeightPayload::ShiftPair(a, b) => shift_mul_apot(act, code.sign, a, b),
    }
}

/// Squeezes `value` into a signed `width`-bit register. Returns the stored
/// value and whether it had to be wrapped or clamped.
pub fn fit(value: i64, width: u32, mode: OverflowMode) -> (i64, bool) {
    if width >= 64 {
        return (value, false);
    }
    let min = -(1i64 << (width - 1));
    let max = (1i64 << (width - 1)) - 1;
    if (min..=max).contains(&value) {
        return (value, false);
    }
    let stored = match mode {
        OverflowMode::Saturate => value.clamp(min, max),
        OverflowMode::Wrap => {
            let shift = 64 - width;
            (value << shift) >> shift
        }
    };
    (stored, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacStats {
    pub products: u64,
    pub intermediate_events: u64,
    pub accumulator_events: u64,
    /// Largest `|running sum|` seen, computed as if the registers were
    /// unbounded.
    pub peak_sum: u64,
}

impl MacStats {
    pub fn events(&self) -> u64 {
        self.intermediate_events + self.accumulator_events
    }

    /// Smallest signed accumulator width that holds [`MacStats::peak_sum`].
    pub fn required_accumulator_bits(&self) -> u32 {
        65 - self.peak_sum.leading_zeros()
    }
}

impl AddAssign for MacStats {
    fn add_assign(&mut self, o: Self) {
        self.products += o.products;
        self.intermediate_events += o.intermediate_events;
        self.accumulator_events += o.accumulator_events;
        self.peak_sum = self.peak_sum.max(o.peak_sum);
    }
}

/// A single accumulator register driven one product at a time.
#[derive(Debug, Clone)]
pub struct MacUnit {
    config: MacConfig,
    acc: i64,
    exact: i64,
    stats: MacStats,
}

impl MacUnit {
    pub fn new(config: MacConfig) -> Self {
        Self {
            config,
            acc: 0,
            exact: 0,
            stats: MacStats::default(),
        }
    }

    pub fn step(&mut self, act: i32, code: &WeightCode) -> Result<()> {
        code.check(self.config.kind)?;
        let exact_product = product(act, code);
        self.exact += exact_product;
        self.stats.peak_sum = self.stats.peak_sum.max(self.exact.unsigned_abs());
        let (p, clipped) = fit(exact_product, self.config.intermediate_width, self.config.overflow);
        let (acc, overflowed) = fit(self.acc + p, self.config.accumulator_width, self.config.overflow);
        self.acc = acc;
        self.stats.products += 1;
        self.stats.intermediate_events += clipped as u64;
        self.stats.accumulator_events += overflowed as u64;
        Ok(())
    }

    pub fn value(&self) -> i64 {
        self.acc
    }

    pub fn stats(&self) -> MacStats {
        self.stats
    }

    pub fn reset(&mut self) {
        self.acc = 0;
        self.exact = 0;
        self.stats = MacStats::default();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacOutput {
    pub value: i64,
    pub stats: MacStats,
}

/// Sequential dot product of `acts` and `codes` on one MAC unit.
pub fn mac_dot(config: &MacConfig, acts: &[i32], codes: &[WeightCode]) -> Result<MacOutput> {
    if acts.len() != codes.len() {
        return Err(Error::Input(format!(
            "{} activations but {} weights",
            acts.len(),
            codes.len()
        )));
    }
    let mut unit = MacUnit::new(*config);
    for (a, c) in acts.iter().zip(codes) {
        unit.step(*a, c)?;
    }
    Ok(MacOutput {
        value: unit.value(),
        stats: unit.stats(),
    })
}

/// FPGA resource usage and ASIC power/area relative to the uniform 8x8 unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HwCostEntry {
    pub kind: MacKind,
    pub lut: u32,
    pub ff: u32,
    pub rel_power: f64,
    pub rel_area: f64,
}

pub fn cost_report(kind: MacKind) -> HwCostEntry {
    let (lut, ff, power_gain, area_gain) = match kind {
        MacKind::Uniform8x8 => (87, 39, 1.0, 1.0),
        MacKind::Uniform4x8 => (46, 27, 2.5, 1.7),
        MacKind::Apot4x8 => (55, 49, 3.0, 1.3),
        MacKind::Pot4x8 => (39, 25, 6.0, 2.0),
    };
    HwCostEntry {
        kind,
        lut,
        ff,
        rel_power: 1.0 / power_gain,
        rel_area: 1.0 / area_gain,
    }
}

pub fn cost_table() -> Vec<HwCostEntry> {
    MacKind::ALL.iter().map(|&k| cost_report(k)).collect()
}

/// Outcome of [`self_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfCheck {
    pub pot_cases: u64,
    pub apot_cases: u64,
    pub uniform_cases: u64,
    pub mismatches: u64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares every shift-based product with a plain integer multiply of the
/// decoded weight, over all 8-bit activations and every weight code: 4096 PoT
/// cases, every APoT shift pair (absent terms included) and every 4-bit and
/// 8-bit sign-magnitude uniform weight.
pub fn self_check() -> SelfCheck {
    let per_act = par::map_range(256, |i| {
        let act = i as i64 - 128;
        let mut s = SelfCheck {
            pot_cases: 0,
            apot_cases: 0,
            uniform_cases: 0,
            mismatches: 0,
        };
        let shifts = || (0..=7u8).map(Some).chain(std::iter::once(None));
        for sign in [Sign::Pos, Sign::Neg] {
            let sv = if sign.is_negative() { -1 } else { 1 };
            for k in 0..=7u8 {
                s.pot_cases += 1;
                s.mismatches += (shift_mul_pot(act as i32, sign, k) != act * sv * (1 << k)) as u64;
            }
            for k1 in shifts() {
                for k2 in shifts() {
                    let w = sv * (k1.map_or(0, |k| 1 << k) + k2.map_or(0, |k| 1 << k));
                    s.apot_cases += 1;
                    s.mismatches += (shift_mul_apot(act as i32, sign, k1, k2) != act * w) as u64;
                }
            }
            for m in 0..=127u8 {
                s.uniform_cases += 1;
                let code = WeightCode::uniform(sign, m);
                s.mismatches += (product(act as i32, &code) != act * sv * m as i64) as u64;
            }
        }
        s
    });
    per_act.into_iter().fold(
        SelfCheck {
            pot_cases: 0,
            apot_cases: 0,
            uniform_cases: 0,
            mismatches: 0,
        },
        |a, b| SelfCheck {
            pot_cases: a.pot_cases + b.pot_cases,
            apot_cases: a.apot_cases + b.apot_cases,
            uniform_cases: a.uniform_cases + b.uniform_cases,
            mismatches: a.mismatches + b.mismatches,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pot_examples() {
        assert_eq!(shift_mul_pot(3, Sign::Pos, 2), 12);
        assert_eq!(shift_mul_pot(-5, Sign::Neg, 0), 5);
    }

    #[test]
    fn pot_exhaustive_against_multiply() {
        let mut cases = 0;
        for act in -128..=127i32 {
            for k in 0..=7u8 {
                for (sign, sv) in [(Sign::Pos, 1i64), (Sign::Neg, -1)] {
                    assert_eq!(shift_mul_pot(act, sign, k), act as i64 * sv * (1i64 << k));
                    cases += 1;
                }
            }
        }
        assert_eq!(cases, 4096);
    }

    #[test]
    fn apot_examples() {
        assert_eq!(shift_mul_apot(5, Sign::Neg, Some(3), Some(1)), -50);
        assert_eq!(shift_mul_apot(5, Sign::Pos, None, None), 0);
        for act in [-128, -3, 0, 77, 127] {
            for k in 0..=7 {
                assert_eq!(
                    shift_mul_apot(act, Sign::Neg, Some(k), None),
                    shift_mul_pot(act, Sign::Neg, k)
                );
            }
        }
    }

    #[test]
    fn nominal_widths() {
        let u8x8 = MacConfig::nominal(MacKind::Uniform8x8);
        assert_eq!((u8x8.intermediate_width, u8x8.accumulator_width), (16, 24));
        for k in [MacKind::Uniform4x8, MacKind::Pot4x8, MacKind::Apot4x8] {
            let c = MacConfig::synthesized(k);
            assert_eq!((c.intermediate_width, c.accumulator_width), (12, 16));
            assert_eq!(c.overflow, OverflowMode::Wrap);
            assert_eq!(MacConfig::nominal(k).accumulator_width, 16);
        }
        assert_eq!(MacConfig::nominal(MacKind::Uniform4x8).intermediate_width, 12);
        assert_eq!(MacConfig::nominal(MacKind::Pot4x8).intermediate_width, 16);
        assert_eq!(MacConfig::nominal(MacKind::Apot4x8).intermediate_width, 14);
    }

    #[test]
    fn nominal_product_registers_never_clip_single_products() {
        for kind in MacKind::ALL {
            let cfg = MacConfig::nominal(kind);
            let codes: Vec<WeightCode> = match kind {
                MacKind::Uniform8x8 => (0..=127).map(|m| WeightCode::uniform(Sign::Pos, m)).collect(),
                MacKind::Uniform4x8 => (0..=7).map(|m| WeightCode::uniform(Sign::Pos, m)).collect(),
                MacKind::Pot4x8 => (0..=7).map(|k| WeightCode::pot(Sign::Pos, k)).collect(),
                MacKind::Apot4x8 => [None, Some(1), Some(3), Some(5)]
                    .iter()
                    .flat_map(|&a| [None, Some(0), Some(2), Some(4)].map(move |b| WeightCode::apot(Sign::Pos, a, b)))
                    .collect(),
            };
            for act in -128..=127 {
                for c in &codes {
                    for sign in [Sign::Pos, Sign::Neg] {
                        let c = WeightCode { sign, ..*c };
                        let o = mac_dot(&cfg, &[act], &[c]).unwrap();
                        assert_eq!(o.stats.events(), 0, "{kind} act={act} {c:?}");
                        assert_eq!(o.value, act as i64 * c.value());
                    }
                }
            }
        }
    }

    #[test]
    fn dot_basics() {
        let cfg = MacConfig::nominal(MacKind::Pot4x8);
        assert_eq!(mac_dot(&cfg, &[], &[]).unwrap().value, 0);
        assert!(matches!(
            mac_dot(&cfg, &[1], &[]),
            Err(Error::Input(_))
        ));
        assert!(mac_dot(&cfg, &[1], &[WeightCode::uniform(Sign::Pos, 1)]).is_err());
        assert!(mac_dot(&cfg, &[1], &[WeightCode::pot(Sign::Pos, 8)]).is_err());
    }

    #[test]
    fn pot_dot_matches_uniform_on_power_of_two_magnitudes() {
        let pot = MacConfig::nominal(MacKind::Pot4x8);
        let uni = MacConfig::nominal(MacKind::Uniform4x8);
        let acts: Vec<i32> = (0..64).map(|i| (i * 37 % 256) - 128).collect();
        let shifts: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let signs: Vec<Sign> = (0..64).map(|i| if i % 5 == 0 { Sign::Neg } else { Sign::Pos }).collect();
        let pc: Vec<_> = shifts.iter().zip(&signs).map(|(&k, &s)| WeightCode::pot(s, k)).collect();
        let uc: Vec<_> = shifts.iter().zip(&signs).map(|(&k, &s)| WeightCode::uniform(s, 1 << k)).collect();
        assert_eq!(mac_dot(&pot, &acts, &pc).unwrap(), mac_dot(&uni, &acts, &uc).unwrap());
    }

    #[test]
    fn wrap_matches_modular_reduction_of_true_sum() {
        // Only the 16-bit accumulator overflows.
        let cfg = MacConfig::nominal(MacKind::Pot4x8);
        let acts = vec![127; 2048];
        let codes = vec![WeightCode::pot(Sign::Pos, 7); 2048];
        let out = mac_dot(&cfg, &acts, &codes).unwrap();
        let truth: i128 = 2048 * 127 * 128;
        let reduced = (truth.rem_euclid(1 << 16) as i64 + (1 << 15)).rem_euclid(1 << 16) - (1 << 15);
        assert_eq!(out.value, reduced);
        assert!(out.stats.accumulator_events > 0);
        assert_eq!(out.stats.intermediate_events, 0);

        let sat = mac_dot(&cfg.with_overflow(OverflowMode::Saturate), &acts, &codes).unwrap();
        assert_eq!(sat.value, 32767);
    }

    #[test]
    fn synthesized_pot_product_register_flags_wide_shifts() {
        // 12 bits hold at most |act << k| = 2047.
        let cfg = MacConfig::synthesized(MacKind::Pot4x8);
        let ok = mac_dot(&cfg, &[127], &[WeightCode::pot(Sign::Neg, 4)]).unwrap();
        assert_eq!((ok.value, ok.stats.events()), (-2032, 0));
        let over = mac_dot(&cfg, &[127], &[WeightCode::pot(Sign::Pos, 5)]).unwrap();
        assert_eq!(over.stats.intermediate_events, 1);
        // Uniform 4x8 never exceeds the 12-bit product register.
        let uni = MacConfig::synthesized(MacKind::Uniform4x8);
        for act in -128..=127 {
            for m in 0..=7 {
                for s in [Sign::Pos, Sign::Neg] {
                    let o = mac_dot(&uni, &[act], &[WeightCode::uniform(s, m)]).unwrap();
                    assert_eq!(o.stats.events(), 0);
                }
            }
        }
    }

    #[test]
    fn cost_table_constants() {
        let u = cost_report(MacKind::Uniform8x8);
        assert_eq!((u.lut, u.ff, u.rel_power, u.rel_area), (87, 39, 1.0, 1.0));
        let p = cost_report(MacKind::Pot4x8);
        assert_eq!((p.lut, p.ff), (39, 25));
        assert!((p.rel_power - 0.1667).abs() < 1e-3);
        let a = cost_report(MacKind::Apot4x8);
        assert_eq!((a.lut, a.ff), (55, 49));
        assert_eq!(cost_table().len(), 4);
    }

    #[test]
    fn self_check_passes() {
        let s = self_check();
        assert!(s.passed());
        assert_eq!(s.pot_cases, 4096);
        assert_eq!(s.apot_cases, 256 * 2 * 81);
    }

    proptest! {
        #[test]
        fn wrap_dot_is_permutation_invariant(
            pairs in prop::collection::vec((-128i32..=127, 0u8..=7, any::<bool>()), 0..300),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let cfg = MacConfig::nominal(MacKind::Pot4x8);
            let mk = |p: &[(i32, u8, bool)]| {
                let acts: Vec<i32> = p.iter().map(|x| x.0).collect();
                let codes: Vec<WeightCode> = p
                    .iter()
                    .map(|x| WeightCode::pot(if x.2 { Sign::Neg } else { Sign::Pos }, x.1))
                    .collect();
                mac_dot(&cfg, &acts, &codes).unwrap().value
            };
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(mk(&pairs), mk(&shuffled));
        }

        #[test]
        fn fit_wrap_is_modular(v in any::<i32>(), width in 2u32..40) {
            let (stored, _) = fit(v as i64, width, OverflowMode::Wrap);
            let m = 1i128 << width;
            prop_assert_eq!((stored as i128 - v as i128).rem_euclid(m), 0);
            prop_assert!(stored >= -(1i64 << (width - 1)) && stored < (1i64 << (width - 1)));
        }
    }
}
