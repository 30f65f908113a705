//! Two's-complement fixed-point scalars `fixed<WL, FL>`.
//!
//! A [`FixedWord`] stores a `WL`-bit representation whose value is
//! `rep * 2^-FL`. Products and sums are formed exactly in a [`WideWord`]
//! (a `2*WL`-bit container) and narrowed back with one of four rounding
//! modes. Every narrowing saturates to the format bounds instead of wrapping.
//!
//! [`FixedArith`] bundles a format, a rounding mode, an optional stochastic
//! stream and a saturation counter; it is the arithmetic context used by the
//! matrix kernels and the fixed-point LSMR.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedError {
    #[error("invalid fixed-point format fixed<{word_length},{fraction_length}>: word length must be 16 or 32 and 0 < FL < WL")]
    InvalidFormat { word_length: u32, fraction_length: u32 },
    #[error("cannot convert NaN to fixed-point")]
    NotANumber,
    #[error("fixed-point division by zero")]
    DivisionByZero,
    #[error("square root of a negative fixed-point value")]
    NegativeSqrt,
    #[error("stochastic rounding requires a random stream")]
    MissingStream,
    #[error("representation {rep} does not fit in {word_length} bits")]
    RepOutOfRange { rep: i64, word_length: u32 },
    #[error("operands use different fixed-point formats")]
    FormatMismatch,
}

/// Word length and fraction length of a fixed-point type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    word_length: u8,
    fraction_length: u8,
}

impl FixedFormat {
    /// `fixed<16,10>`, the format of the worked 16-bit examples.
    pub const Q16_10: FixedFormat = FixedFormat { word_length: 16, fraction_length: 10 };
    /// `fixed<32,18>`, the format used by the fixed-point LSMR.
    pub const Q32_18: FixedFormat = FixedFormat { word_length: 32, fraction_length: 18 };

    pub fn new(word_length: u32, fraction_length: u32) -> Result<Self, FixedError> {
        let valid_wl = word_length == 16 || word_length == 32;
        if !valid_wl || fraction_length == 0 || fraction_length >= word_length {
            return Err(FixedError::InvalidFormat { word_length, fraction_length });
        }
        Ok(FixedFormat {
            word_length: word_length as u8,
            fraction_length: fraction_length as u8,
        })
    }

    pub fn word_length(self) -> u32 {
        self.word_length as u32
    }

    pub fn fraction_length(self) -> u32 {
        self.fraction_length as u32
    }

    pub fn integer_length(self) -> u32 {
        self.word_length() - self.fraction_length()
    }

    /// Smallest positive representable value, `2^-FL`.
    pub fn epsilon(self) -> f64 {
        pow2(-(self.fraction_length() as i32))
    }

    pub fn upper_bound_rep(self) -> i32 {
        ((1i64 << (self.word_length() - 1)) - 1) as i32
    }

    pub fn lower_bound_rep(self) -> i32 {
        (-(1i64 << (self.word_length() - 1))) as i32
    }

    /// `2^(IL-1) - 2^-FL`
    pub fn upper_bound_value(self) -> f64 {
        pow2(self.integer_length() as i32 - 1) - self.epsilon()
    }

    /// `-2^(IL-1)`
    pub fn lower_bound_value(self) -> f64 {
        -pow2(self.integer_length() as i32 - 1)
    }

    /// Representation of 1.0 (`ONE_F`), saturated when 1.0 is out of range.
    pub fn one_rep(self) -> i32 {
        clamp_rep(1i128 << self.fraction_length(), self).0
    }

    /// Representation of -1.0 (`MINUS_ONE_F`).
    pub fn minus_one_rep(self) -> i32 {
        clamp_rep(-(1i128 << self.fraction_length()), self).0
    }

    /// Largest value of the `2*WL`-bit accumulator.
    pub fn wide_max(self) -> i64 {
        if self.word_length == 32 {
            i64::MAX
        } else {
            i32::MAX as i64
        }
    }

    pub fn wide_min(self) -> i64 {
        if self.word_length == 32 {
            i64::MIN
        } else {
            i32::MIN as i64
        }
    }

    /// Bit pattern of `rep` restricted to `WL` bits.
    pub fn bits(self, rep: i32) -> u32 {
        let mask = if self.word_length == 32 { u32::MAX } else { (1u32 << self.word_length) - 1 };
        (rep as u32) & mask
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fixed<{},{}>", self.word_length, self.fraction_length)
    }
}

fn pow2(exp: i32) -> f64 {
    if (-1022..=1023).contains(&exp) {
        f64::from_bits(((exp + 1023) as u64) << 52)
    } else {
        2f64.powi(exp)
    }
}

/// Clamp a wide integer with FL fraction bits to the word range.
#[inline]
fn clamp_rep(t: i128, fmt: FixedFormat) -> (i32, bool) {
    let hi = fmt.upper_bound_rep() as i128;
    let lo = fmt.lower_bound_rep() as i128;
    if t >= hi {
        (hi as i32, t > hi)
    } else if t <= lo {
        (lo as i32, t < lo)
    } else {
        (t as i32, false)
    }
}

/// A `WL`-bit fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedWord {
    rep: i32,
    format: FixedFormat,
}

impl FixedWord {
    pub fn from_rep(rep: i64, format: FixedFormat) -> Result<Self, FixedError> {
        if rep > format.upper_bound_rep() as i64 || rep < format.lower_bound_rep() as i64 {
            return Err(FixedError::RepOutOfRange { rep, word_length: format.word_length() });
        }
        Ok(FixedWord { rep: rep as i32, format })
    }

    /// Reinterpret the low `WL` bits of `bits` as a two's-complement word.
    pub fn from_bits(bits: u32, format: FixedFormat) -> Self {
        let wl = format.word_length();
        let rep = if wl == 32 { bits as i32 } else { ((bits << (32 - wl)) as i32) >> (32 - wl) };
        FixedWord { rep, format }
    }

    pub(crate) fn new_unchecked(rep: i32, format: FixedFormat) -> Self {
        FixedWord { rep, format }
    }

    pub fn zero(format: FixedFormat) -> Self {
        FixedWord { rep: 0, format }
    }

    pub fn one(format: FixedFormat) -> Self {
        FixedWord { rep: format.one_rep(), format }
    }

    pub fn rep(self) -> i32 {
        self.rep
    }

    pub fn format(self) -> FixedFormat {
        self.format
    }

    pub fn bits(self) -> u32 {
        self.format.bits(self.rep)
    }

    pub fn value(self) -> f64 {
        value_of(self)
    }

    pub fn is_zero(self) -> bool {
        self.rep == 0
    }
}

/// A `2*WL`-bit intermediate with either `FL` or `2*FL` fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WideWord {
    rep: i64,
    fraction_bits: u32,
}

impl WideWord {
    pub fn new(rep: i64, fraction_bits: u32) -> Self {
        WideWord { rep, fraction_bits }
    }

    /// Sign-extend a word; the result keeps FL fraction bits.
    pub fn widen(w: FixedWord) -> Self {
        WideWord { rep: w.rep as i64, fraction_bits: w.format.fraction_length() }
    }

    /// Exact product of two words, carrying `2*FL` fraction bits.
    pub fn product(a: FixedWord, b: FixedWord) -> Self {
        WideWord {
            rep: a.rep as i64 * b.rep as i64,
            fraction_bits: 2 * a.format.fraction_length(),
        }
    }

    pub fn rep(self) -> i64 {
        self.rep
    }

    pub fn fraction_bits(self) -> u32 {
        self.fraction_bits
    }

    pub fn value(self) -> f64 {
        self.rep as f64 * pow2(-(self.fraction_bits as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    Down,
    Up,
    Nearest,
    Stochastic,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 4] =
        [RoundingMode::Nearest, RoundingMode::Stochastic, RoundingMode::Up, RoundingMode::Down];

    pub fn name(self) -> &'static str {
        match self {
            RoundingMode::Down => "down",
            RoundingMode::Up => "up",
            RoundingMode::Nearest => "nearest",
            RoundingMode::Stochastic => "stochastic",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != RoundingMode::Stochastic
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "down" => Ok(RoundingMode::Down),
            "up" => Ok(RoundingMode::Up),
            "nearest" => Ok(RoundingMode::Nearest),
            "stochastic" => Ok(RoundingMode::Stochastic),
            other => Err(format!("unknown rounding mode `{other}`")),
        }
    }
}

/// Mix a sequence of integers into a 64-bit stream identifier (splitmix64 chain).
pub fn stream_key(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Counter-based random stream for stochastic rounding.
///
/// Streams are addressed by `(seed, stream)`, so concurrent callers can each
/// own an independent, reproducible stream.
#[derive(Debug, Clone)]
pub struct StochasticStream {
    rng: ChaCha8Rng,
}

impl StochasticStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        StochasticStream { rng }
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * pow2(-53)
    }
}

/// Drop the low `shift` bits of `t` using `mode`. The integer part is the
/// arithmetic-shift floor; `mode` decides whether to add one.
#[inline]
fn round_shift(t: i128, shift: u32, mode: RoundingMode, stream: Option<&mut StochasticStream>) -> Result<i128, FixedError> {
    let floor = t >> shift;
    let diff = t & ((1i128 << shift) - 1);
    let up = match mode {
        RoundingMode::Down => false,
        RoundingMode::Up => diff != 0,
        RoundingMode::Nearest => diff >= (1i128 << (shift - 1)),
        RoundingMode::Stochastic => {
            let stream = stream.ok_or(FixedError::MissingStream)?;
            if diff == 0 {
                false
            } else {
                let prob = 1.0 - diff as f64 * pow2(-(shift as i32));
                stream.next_unit() > prob
            }
        }
    };
    Ok(floor + up as i128)
}

/// Quantize a real number. Values at or beyond the bounds saturate.
pub fn convert(x: f64, fmt: FixedFormat, mode: RoundingMode, stream: Option<&mut StochasticStream>) -> Result<FixedWord, FixedError> {
    if x.is_nan() {
        return Err(FixedError::NotANumber);
    }
    if x >= fmt.upper_bound_value() {
        return Ok(FixedWord::new_unchecked(fmt.upper_bound_rep(), fmt));
    }
    if x <= fmt.lower_bound_value() {
        return Ok(FixedWord::new_unchecked(fmt.lower_bound_rep(), fmt));
    }
    // Scaling by a power of two is exact, so floor and fraction are exact too.
    let scaled = x * pow2(fmt.fraction_length() as i32);
    let floor = scaled.floor();
    let frac = scaled - floor;
    let up = match mode {
        RoundingMode::Down => false,
        RoundingMode::Up => frac > 0.0,
        RoundingMode::Nearest => frac >= 0.5,
        RoundingMode::Stochastic => {
            let stream = stream.ok_or(FixedError::MissingStream)?;
            frac > 0.0 && stream.next_unit() > 1.0 - frac
        }
    };
    let rep = floor as i64 + up as i64;
    Ok(FixedWord::new_unchecked(clamp_rep(rep as i128, fmt).0, fmt))
}

/// Exact value `rep * 2^-FL`.
pub fn value_of(w: FixedWord) -> f64 {
    w.rep as f64 * w.format.epsilon()
}

/// Narrow a wide value with FL fraction bits by saturation.
pub fn cast_wide_simple(t: WideWord, fmt: FixedFormat) -> FixedWord {
    FixedWord::new_unchecked(clamp_rep(t.rep as i128, fmt).0, fmt)
}

/// Narrow a wide value with `2*FL` fraction bits, rounding the discarded
/// FL bits with `mode`.
pub fn cast_wide(t: WideWord, fmt: FixedFormat, mode: RoundingMode, stream: Option<&mut StochasticStream>) -> Result<FixedWord, FixedError> {
    let (rep, _) = cast_wide_rep(t.rep as i128, fmt, mode, stream)?;
    Ok(FixedWord::new_unchecked(rep, fmt))
}

#[inline]
fn cast_wide_rep(t: i128, fmt: FixedFormat, mode: RoundingMode, stream: Option<&mut StochasticStream>) -> Result<(i32, bool), FixedError> {
    cast_shifted(t, fmt.fraction_length(), fmt, mode, stream)
}

/// Narrow `t`, which carries `FL + shift` fraction bits, to the word.
#[inline]
fn cast_shifted(
    t: i128,
    shift: u32,
    fmt: FixedFormat,
    mode: RoundingMode,
    stream: Option<&mut StochasticStream>,
) -> Result<(i32, bool), FixedError> {
    if let (Ok(t), true) = (i64::try_from(t), shift <= 32) {
        return cast_shifted_i64(t, shift, fmt, mode, stream);
    }
    let hi = (fmt.upper_bound_rep() as i128) << shift;
    let lo = (fmt.lower_bound_rep() as i128) << shift;
    if t <= lo {
        return Ok((fmt.lower_bound_rep(), t < lo));
    }
    if t >= hi {
        return Ok((fmt.upper_bound_rep(), t > hi));
    }
    let rounded = round_shift(t, shift, mode, stream)?;
    Ok(clamp_rep(rounded, fmt))
}

// Same as the i128 path; bounds shifted by at most 32 bits fit in i64.
#[inline]
fn cast_shifted_i64(
    t: i64,
    shift: u32,
    fmt: FixedFormat,
    mode: RoundingMode,
    stream: Option<&mut StochasticStream>,
) -> Result<(i32, bool), FixedError> {
    let hi = (fmt.upper_bound_rep() as i64) << shift;
    let lo = (fmt.lower_bound_rep() as i64) << shift;
    if t <= lo {
        return Ok((fmt.lower_bound_rep(), t < lo));
    }
    if t >= hi {
        return Ok((fmt.upper_bound_rep(), t > hi));
    }
    if shift == 0 {
        return Ok((t as i32, false));
    }
    let floor = t >> shift;
    let diff = t & ((1i64 << shift) - 1);
    let up = match mode {
        RoundingMode::Down => false,
        RoundingMode::Up => diff != 0,
        RoundingMode::Nearest => diff >= (1i64 << (shift - 1)),
        RoundingMode::Stochastic => {
            let stream = stream.ok_or(FixedError::MissingStream)?;
            diff != 0 && stream.next_unit() > 1.0 - diff as f64 * pow2(-(shift as i32))
        }
    };
    Ok(clamp_rep((floor + up as i64) as i128, fmt))
}

/// Digit-by-digit integer square root, `floor(sqrt(n))`.
pub fn isqrt_u64(n: u64) -> u64 {
    let mut rem = n;
    let mut root = 0u64;
    let mut bit = 1u64 << 62;
    while bit > rem {
        bit >>= 2;
    }
    while bit != 0 {
        if rem >= root + bit {
            rem -= root + bit;
            root = (root >> 1) + bit;
        } else {
            root >>= 1;
        }
        bit >>= 2;
    }
    root
}

/// Square root of a non-negative sum of squares with `2*FL` fraction bits.
/// The integer root of the representation already carries FL fraction bits.
pub fn integer_sqrt(t: WideWord, fmt: FixedFormat) -> Result<FixedWord, FixedError> {
    if t.rep < 0 {
        return Err(FixedError::NegativeSqrt);
    }
    let root = isqrt_u64(t.rep as u64);
    Ok(FixedWord::new_unchecked(clamp_rep(root as i128, fmt).0, fmt))
}

/// Square root through `f64`, rounded back to nearest.
pub fn float_sqrt_path(t: WideWord, fmt: FixedFormat) -> Result<FixedWord, FixedError> {
    if t.rep < 0 {
        return Err(FixedError::NegativeSqrt);
    }
    convert(t.value().sqrt(), fmt, RoundingMode::Nearest, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqrtPath {
    Integer,
    #[default]
    Float,
}

/// Arithmetic context: format, rounding mode, stream and saturation count.
#[derive(Debug, Clone)]
pub struct FixedArith {
    format: FixedFormat,
    mode: RoundingMode,
    stream: Option<StochasticStream>,
    sqrt_path: SqrtPath,
    saturations: u64,
}

impl FixedArith {
    /// Context for a deterministic mode. Stochastic mode needs [`FixedArith::stochastic`].
    pub fn new(format: FixedFormat, mode: RoundingMode) -> Result<Self, FixedError> {
        if mode == RoundingMode::Stochastic {
            return Err(FixedError::MissingStream);
        }
        Ok(FixedArith { format, mode, stream: None, sqrt_path: SqrtPath::Float, saturations: 0 })
    }

    pub fn stochastic(format: FixedFormat, stream: StochasticStream) -> Self {
        FixedArith {
            format,
            mode: RoundingMode::Stochastic,
            stream: Some(stream),
            sqrt_path: SqrtPath::Float,
            saturations: 0,
        }
    }

    /// Build a context for any mode; the stream is only used when stochastic.
    pub fn with_stream(format: FixedFormat, mode: RoundingMode, seed: u64, stream: u64) -> Self {
        let stream = (mode == RoundingMode::Stochastic).then(|| StochasticStream::new(seed, stream));
        FixedArith { format, mode, stream, sqrt_path: SqrtPath::Float, saturations: 0 }
    }

    pub fn with_sqrt_path(mut self, path: SqrtPath) -> Self {
        self.sqrt_path = path;
        self
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    pub fn sqrt_path(&self) -> SqrtPath {
        self.sqrt_path
    }

    /// Number of saturation events seen so far.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    pub fn word(&self, rep: i32) -> FixedWord {
        FixedWord::new_unchecked(rep, self.format)
    }

    fn check(&self, w: FixedWord) -> Result<(), FixedError> {
        if w.format != self.format {
            Err(FixedError::FormatMismatch)
        } else {
            Ok(())
        }
    }

    pub fn convert(&mut self, x: f64) -> Result<FixedWord, FixedError> {
        if x.is_finite() && (x > self.format.upper_bound_value() || x < self.format.lower_bound_value()) {
            self.saturations += 1;
        }
        convert(x, self.format, self.mode, self.stream.as_mut())
    }

    pub fn convert_rep(&mut self, x: f64) -> Result<i32, FixedError> {
        self.convert(x).map(FixedWord::rep)
    }

    #[inline]
    pub fn cast_wide_simple_rep(&mut self, t: i64) -> i32 {
        let (rep, sat) = clamp_rep(t as i128, self.format);
        self.saturations += sat as u64;
        rep
    }

    #[inline]
    pub fn cast_wide_rep(&mut self, t: i128) -> i32 {
        // A stream is always present for stochastic contexts.
        let (rep, sat) = cast_wide_rep(t, self.format, self.mode, self.stream.as_mut())
            .expect("stochastic context without a stream");
        self.saturations += sat as u64;
        rep
    }

    pub fn cast_wide_simple(&mut self, t: WideWord) -> FixedWord {
        let rep = self.cast_wide_simple_rep(t.rep);
        self.word(rep)
    }

    pub fn cast_wide(&mut self, t: WideWord) -> FixedWord {
        let rep = self.cast_wide_rep(t.rep as i128);
        self.word(rep)
    }

    /// Add to a `2*WL`-bit accumulator, saturating at the container bounds.
    #[inline]
    pub fn accumulate(&mut self, sum: i64, term: i64) -> i64 {
        let s = sum as i128 + term as i128;
        let hi = self.format.wide_max() as i128;
        let lo = self.format.wide_min() as i128;
        if s > hi {
            self.saturations += 1;
            hi as i64
        } else if s < lo {
            self.saturations += 1;
            lo as i64
        } else {
            s as i64
        }
    }

    #[inline]
    pub fn add_rep(&mut self, a: i32, b: i32) -> i32 {
        self.cast_wide_simple_rep(a as i64 + b as i64)
    }

    #[inline]
    pub fn sub_rep(&mut self, a: i32, b: i32) -> i32 {
        self.cast_wide_simple_rep(a as i64 - b as i64)
    }

    #[inline]
    pub fn neg_rep(&mut self, a: i32) -> i32 {
        self.cast_wide_simple_rep(-(a as i64))
    }

    #[inline]
    pub fn mul_rep(&mut self, a: i32, b: i32) -> i32 {
        self.cast_wide_rep(a as i128 * b as i128)
    }

    /// `a / b`: the dividend is shifted by `2*FL`, the quotient is floored
    /// with a sticky bit for any remainder, then narrowed with the context
    /// mode, so every mode sees the exact quotient.
    #[inline]
    pub fn div_rep(&mut self, a: i32, b: i32) -> Result<i32, FixedError> {
        if b == 0 {
            return Err(FixedError::DivisionByZero);
        }
        let shift = 2 * self.format.fraction_length();
        let (q, rem) = if (a as i64).unsigned_abs() < 1u64 << (62 - shift) {
            let n = (a as i64) << shift;
            let (q, r) = (n / b as i64, n % b as i64);
            (q as i128, r as i128)
        } else {
            let n = (a as i128) << shift;
            (n / b as i128, n % b as i128)
        };
        let q = if rem != 0 && ((rem < 0) != (b < 0)) { q - 1 } else { q };
        let t = (q << 1) | i128::from(rem != 0);
        let fl = self.format.fraction_length();
        let (rep, sat) = cast_shifted(t, fl + 1, self.format, self.mode, self.stream.as_mut())
            .expect("stochastic context without a stream");
        self.saturations += sat as u64;
        Ok(rep)
    }

    pub fn add_f(&mut self, a: FixedWord, b: FixedWord) -> Result<FixedWord, FixedError> {
        self.check(a)?;
        self.check(b)?;
        let rep = self.add_rep(a.rep, b.rep);
        Ok(self.word(rep))
    }

    pub fn sub_f(&mut self, a: FixedWord, b: FixedWord) -> Result<FixedWord, FixedError> {
        self.check(a)?;
        self.check(b)?;
        let rep = self.sub_rep(a.rep, b.rep);
        Ok(self.word(rep))
    }

    pub fn multiply_f(&mut self, a: FixedWord, b: FixedWord) -> Result<FixedWord, FixedError> {
        self.check(a)?;
        self.check(b)?;
        let rep = self.mul_rep(a.rep, b.rep);
        Ok(self.word(rep))
    }

    pub fn divide_f(&mut self, a: FixedWord, b: FixedWord) -> Result<FixedWord, FixedError> {
        self.check(a)?;
        self.check(b)?;
        let rep = self.div_rep(a.rep, b.rep)?;
        Ok(self.word(rep))
    }

    /// Square root of a sum of squares (`2*FL` fraction bits) via the configured path.
    pub fn sqrt_wide(&mut self, t: WideWord) -> Result<FixedWord, FixedError> {
        self.sqrt_wide_via(t, self.sqrt_path)
    }

    pub fn sqrt_wide_via(&mut self, t: WideWord, path: SqrtPath) -> Result<FixedWord, FixedError> {
        let out = match path {
            SqrtPath::Integer => integer_sqrt(t, self.format)?,
            SqrtPath::Float => float_sqrt_path(t, self.format)?,
        };
        if t.value().sqrt() > self.format.upper_bound_value() {
            self.saturations += 1;
        }
        Ok(out)
    }

    /// Square root of a word with FL fraction bits.
    pub fn sqrt_rep(&mut self, a: i32) -> Result<i32, FixedError> {
        let widened = (a as i64) << self.format.fraction_length();
        Ok(self.sqrt_wide(WideWord::new(widened, 2 * self.format.fraction_length()))?.rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q16: FixedFormat = FixedFormat::Q16_10;
    const Q32: FixedFormat = FixedFormat::Q32_18;

    #[test]
    fn worked_16_bit_examples() {
        let w = convert(23.1337890625, Q16, RoundingMode::Nearest, None).unwrap();
        assert_eq!(w.rep(), 23689);
        assert_eq!(w.bits(), 0b0101_1100_1000_1001);
        let n = FixedWord::from_bits(0b1001_0001_1010_0010, Q16);
        assert_eq!(n.rep(), -28254);
        assert_eq!(n.value(), -27.591796875);
        assert_eq!(FixedWord::from_rep(1, Q16).unwrap().value(), 2f64.powi(-10));
    }

    #[test]
    fn constants_32_18() {
        assert_eq!(Q32.bits(Q32.upper_bound_rep()), 0x7FFF_FFFF);
        assert_eq!(Q32.bits(Q32.lower_bound_rep()), 0x8000_0000);
        assert_eq!(Q32.bits(Q32.one_rep()), 0b0000_0000_0000_0100_0000_0000_0000_0000);
        assert_eq!(Q32.bits(Q32.minus_one_rep()), 0b1111_1111_1111_1100_0000_0000_0000_0000);
        assert_eq!(Q32.integer_length(), 14);
        assert_eq!(Q32.upper_bound_value(), 8192.0 - 2f64.powi(-18));
        assert_eq!(Q32.lower_bound_value(), -8192.0);
    }

    #[test]
    fn invalid_formats() {
        assert!(FixedFormat::new(32, 32).is_err());
        assert!(FixedFormat::new(16, 0).is_err());
        assert!(FixedFormat::new(24, 10).is_err());
        assert_eq!(FixedFormat::new(32, 18).unwrap(), Q32);
    }

    #[test]
    fn nan_is_rejected() {
        assert_eq!(convert(f64::NAN, Q32, RoundingMode::Down, None), Err(FixedError::NotANumber));
    }

    #[test]
    fn stochastic_needs_stream() {
        assert_eq!(convert(0.3, Q16, RoundingMode::Stochastic, None), Err(FixedError::MissingStream));
        assert!(FixedArith::new(Q16, RoundingMode::Stochastic).is_err());
    }

    #[test]
    fn point_three_in_each_mode() {
        // 0.3 * 1024 = 307.2
        let rep = |m| convert(0.3, Q16, m, None).unwrap().rep();
        assert_eq!(rep(RoundingMode::Down), 307);
        assert_eq!(rep(RoundingMode::Up), 308);
        assert_eq!(rep(RoundingMode::Nearest), 307);
    }

    #[test]
    fn saturating_convert() {
        for mode in [RoundingMode::Down, RoundingMode::Up, RoundingMode::Nearest] {
            assert_eq!(convert(1e10, Q32, mode, None).unwrap().bits(), 0x7FFF_FFFF);
            assert_eq!(convert(-1e10, Q32, mode, None).unwrap().bits(), 0x8000_0000);
            assert_eq!(convert(0.0, Q32, mode, None).unwrap().rep(), 0);
        }
        let mut s = StochasticStream::new(1, 2);
        assert_eq!(convert(1e10, Q32, RoundingMode::Stochastic, Some(&mut s)).unwrap().bits(), 0x7FFF_FFFF);
    }

    #[test]
    fn simple_cast() {
        assert_eq!(cast_wide_simple(WideWord::new(1 << 40, 18), Q32).rep(), Q32.upper_bound_rep());
        assert_eq!(cast_wide_simple(WideWord::new(5, 18), Q32).rep(), 5);
        let below = Q32.lower_bound_rep() as i64 - 1;
        assert_eq!(cast_wide_simple(WideWord::new(below, 18), Q32).rep(), Q32.lower_bound_rep());
    }

    #[test]
    fn cast_wide_exact_fraction() {
        let t = WideWord::new(23689i64 << 10, 20);
        for mode in [RoundingMode::Down, RoundingMode::Up, RoundingMode::Nearest] {
            assert_eq!(cast_wide(t, Q16, mode, None).unwrap().rep(), 23689);
        }
        let mut s = StochasticStream::new(0, 0);
        assert_eq!(cast_wide(t, Q16, RoundingMode::Stochastic, Some(&mut s)).unwrap().rep(), 23689);
    }

    #[test]
    fn cast_wide_modes_on_negative() {
        // -2.5 ulp: floor is -3, nearest rounds the half up to -2.
        let t = WideWord::new(-5i64 << 17, 36);
        assert_eq!(cast_wide(t, Q32, RoundingMode::Down, None).unwrap().rep(), -3);
        assert_eq!(cast_wide(t, Q32, RoundingMode::Up, None).unwrap().rep(), -2);
        assert_eq!(cast_wide(t, Q32, RoundingMode::Nearest, None).unwrap().rep(), -2);
    }

    #[test]
    fn stochastic_cast_probability() {
        // diff = 0.75 * 2^FL rounds up with probability 0.75
        let t = WideWord::new((10i64 << 18) + (3i64 << 16), 36);
        let mut s = StochasticStream::new(42, 7);
        let n = 100_000;
        let ups = (0..n)
            .filter(|_| cast_wide(t, Q32, RoundingMode::Stochastic, Some(&mut s)).unwrap().rep() == 11)
            .count();
        let p = ups as f64 / n as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75f64 * 0.25 / n as f64).sqrt(), "p = {p}");
    }

    #[test]
    fn primary_ops() {
        let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
        let one = FixedWord::one(Q32);
        assert_eq!(ar.add_f(one, one).unwrap().value(), 2.0);
        let top = ar.word(Q32.upper_bound_rep());
        assert_eq!(ar.add_f(top, ar.word(1)).unwrap(), top);
        assert_eq!(ar.saturations(), 1);

        let a = convert(1.5, Q32, RoundingMode::Nearest, None).unwrap();
        let b = convert(2.25, Q32, RoundingMode::Nearest, None).unwrap();
        assert_eq!(ar.multiply_f(a, b).unwrap().value(), 3.375);
        assert_eq!(ar.multiply_f(one, b).unwrap(), b);
        assert_eq!(ar.multiply_f(FixedWord::zero(Q32), b).unwrap().rep(), 0);

        assert_eq!(ar.divide_f(b, one).unwrap(), b);
        let two = convert(2.0, Q32, RoundingMode::Nearest, None).unwrap();
        assert_eq!(ar.divide_f(one, two).unwrap().value(), 0.5);
        assert_eq!(ar.divide_f(one, FixedWord::zero(Q32)), Err(FixedError::DivisionByZero));
    }

    #[test]
    fn division_rounds_exact_quotient() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for fmt in [Q16, Q32] {
            let fl = fmt.fraction_length();
            let (lo, hi) = (fmt.lower_bound_rep(), fmt.upper_bound_rep());
            for _ in 0..20_000 {
                let a: i32 = rng.gen_range(lo..=hi);
                let b: i32 = if rng.gen_bool(0.5) { rng.gen_range(lo..=hi) } else { rng.gen_range(-4000..4000) };
                if b == 0 {
                    continue;
                }
                // Exact quotient in units of epsilon is num / den with den > 0.
                let (mut num, mut den) = ((a as i128) << fl, b as i128);
                if den < 0 {
                    num = -num;
                    den = -den;
                }
                let floor = num.div_euclid(den);
                let exact = num.rem_euclid(den) == 0;
                let clamp = |v: i128| v.clamp(lo as i128, hi as i128) as i32;
                let want = [
                    (RoundingMode::Down, clamp(floor)),
                    (RoundingMode::Up, clamp(if exact { floor } else { floor + 1 })),
                    (RoundingMode::Nearest, clamp((2 * num + den).div_euclid(2 * den))),
                ];
                for (mode, w) in want {
                    let mut ar = FixedArith::new(fmt, mode).unwrap();
                    assert_eq!(ar.div_rep(a, b).unwrap(), w, "{a}/{b} {mode:?} {fmt}");
                }
            }
        }
    }

    #[test]
    fn format_mismatch() {
        let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
        let a = FixedWord::one(Q16);
        assert_eq!(ar.add_f(a, a), Err(FixedError::FormatMismatch));
    }

    #[test]
    fn square_roots() {
        let one_sq = WideWord::new((Q32.one_rep() as i64).pow(2), 36);
        assert_eq!(integer_sqrt(one_sq, Q32).unwrap().rep(), Q32.one_rep());
        assert_eq!(float_sqrt_path(one_sq, Q32).unwrap().rep(), Q32.one_rep());
        assert_eq!(integer_sqrt(WideWord::new(0, 36), Q32).unwrap().rep(), 0);
        let twenty_five = WideWord::new(25i64 << 36, 36);
        assert_eq!(float_sqrt_path(twenty_five, Q32).unwrap().value(), 5.0);
        assert_eq!(integer_sqrt(twenty_five, Q32).unwrap().value(), 5.0);
        assert_eq!(integer_sqrt(WideWord::new(-1, 36), Q32), Err(FixedError::NegativeSqrt));
        assert_eq!(float_sqrt_path(WideWord::new(-1, 36), Q32), Err(FixedError::NegativeSqrt));
    }

    #[test]
    fn isqrt_small_values() {
        for n in 0..10_000u64 {
            let r = isqrt_u64(n);
            assert!(r * r <= n && (r + 1) * (r + 1) > n, "n = {n}");
        }
        assert_eq!(isqrt_u64(u64::MAX), u32::MAX as u64);
    }

    #[test]
    fn stream_is_reproducible() {
        let mut a = StochasticStream::new(3, 9);
        let mut b = StochasticStream::new(3, 9);
        let mut c = StochasticStream::new(3, 10);
        let xa: Vec<f64> = (0..8).map(|_| a.next_unit()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.next_unit()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.next_unit()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert!(xa.iter().all(|u| (0.0..1.0).contains(u)));
    }

    #[test]
    fn rounding_mode_parse() {
        assert_eq!("Nearest".parse::<RoundingMode>().unwrap(), RoundingMode::Nearest);
        assert!("zero".parse::<RoundingMode>().is_err());
    }
}
