//! Weight quantization over the 4/8/16/32-bit grid.
//!
//! 4- and 8-bit use symmetric, zero-point-free integer codes in
//! `[-qmax, qmax]` with one positive scale per tensor or per row. 16-bit
//! stores binary16 values. 32-bit is the identity.

mod f16;
mod pack;

pub use f16::{f16_bits_to_f32, f32_to_f16_bits, round_to_f16, F16_MAX};
pub use pack::{pack4, unpack4};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensors::{ModelBundle, Precision, StoredTensor, TargetFilter, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("value {value} at flat index {index} exceeds the binary16 range")]
    F16Overflow { index: usize, value: f32 },
    #[error("code {code} at index {index} outside the symmetric 4-bit range [-7, 7]")]
    CodeOutOfRange { index: usize, code: i8 },
    #[error("bundle is already stored at {0}; quantize from a 32-bit bundle")]
    AlreadyQuantized(Precision),
    #[error("malformed quantized tensor: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    #[default]
    PerRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: Precision,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub target_filter: TargetFilter,
}

impl QuantSpec {
    pub fn new(bits: Precision) -> Self {
        Self {
            bits,
            granularity: Granularity::PerRow,
            target_filter: TargetFilter::Projections,
        }
    }

    pub fn per_tensor(bits: Precision) -> Self {
        Self {
            granularity: Granularity::PerTensor,
            ..Self::new(bits)
        }
    }
}

/// binary16 storage of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfTensor {
    shape: Vec<usize>,
    bits: Vec<u16>,
}

impl HalfTensor {
    pub fn from_bits(shape: Vec<usize>, bits: Vec<u16>) -> Result<Self, QuantizeError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != bits.len() {
            return Err(QuantizeError::Malformed(format!(
                "{} half values for shape {shape:?}",
                bits.len()
            )));
        }
        if let Some(i) = bits.iter().position(|b| b & 0x7c00 == 0x7c00) {
            return Err(QuantizeError::NonFinite(i));
        }
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u16] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u16] {
        &mut self.bits
    }

    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.bits.iter().map(|b| f16_bits_to_f32(*b)).collect(),
        )
    }
}

/// Packed symmetric integer codes with their scales.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    precision: Precision,
    granularity: Granularity,
    packed: Vec<u8>,
    scales: Vec<f32>,
}

impl QuantizedTensor {
    /// Validates and assembles a quantized tensor from stored parts.
    pub fn from_parts(
        shape: Vec<usize>,
        precision: Precision,
        granularity: Granularity,
        packed: Vec<u8>,
        scales: Vec<f32>,
    ) -> Result<Self, QuantizeError> {
        let qmax = precision
            .qmax()
            .ok_or_else(|| QuantizeError::Malformed(format!("{precision} is not an integer precision")))?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(QuantizeError::Malformed(format!("bad shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let rows = numel / shape[shape.len() - 1];
        let expected_scales = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
        };
        if scales.len() != expected_scales {
            return Err(QuantizeError::Malformed(format!(
                "{} scales for {granularity:?} layout of {rows} rows",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(QuantizeError::Malformed(format!("scale {s} is not positive")));
        }
        let code_len = match precision {
            Precision::Int8 => numel,
            _ => numel.div_ceil(2),
        };
        if packed.len() != code_len {
            return Err(QuantizeError::Malformed(format!(
                "{} code bytes, expected {code_len}",
                packed.len()
            )));
        }
        let q = Self {
            shape,
            precision,
            granularity,
            packed,
            scales,
        };
        if q.codes().iter().any(|c| i32::from(*c).abs() > qmax) {
            return Err(QuantizeError::Malformed("code outside symmetric range".into()));
        }
        Ok(q)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.packed
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Unpacked signed codes in flat order.
    pub fn codes(&self) -> Vec<i8> {
        match self.precision {
            Precision::Int8 => self.packed.iter().map(|b| *b as i8).collect(),
            _ => unpack4(&self.packed, self.numel()),
        }
    }

    /// Scale applying to a flat element index.
    pub fn scale_for(&self, flat: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerRow => self.scales[flat / self.cols()],
        }
    }

    pub fn code_bytes(&self) -> u64 {
        self.packed.len() as u64
    }

    pub fn payload_bytes(&self) -> u64 {
        self.code_bytes() + 4 * self.scales.len() as u64
    }

    /// Zeroes the codes where `keep` is false.
    pub(crate) fn mask_codes(&mut self, keep: &[bool]) {
        let mut codes = self.codes();
        for (c, k) in codes.iter_mut().zip(keep) {
            if !k {
                *c = 0;
            }
        }
        self.packed = match self.precision {
            Precision::Int8 => codes.iter().map(|c| *c as u8).collect(),
            _ => pack4(&codes).expect("masked codes stay in range"),
        };
    }
}

/// Round half away from zero; `f64::round` already has these semantics.
fn round_half_away(x: f64) -> f64 {
    x.round()
}

fn quantize_int(t: &Tensor, precision: Precision, granularity: Granularity) -> QuantizedTensor {
    let qmax = precision.qmax().expect("integer precision");
    let cols = t.cols();
    let groups: Vec<&[f32]> = match granularity {
        Granularity::PerTensor => vec![t.data()],
        Granularity::PerRow => t.data().chunks(cols).collect(),
    };
    let mut scales = Vec::with_capacity(groups.len());
    let mut codes = Vec::with_capacity(t.numel());
    for group in groups {
        let absmax = group.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            scales.push(1.0);
            codes.extend(std::iter::repeat_n(0i8, group.len()));
            continue;
        }
        let scale = absmax / qmax as f32;
        let s = f64::from(scale);
        scales.push(scale);
        codes.extend(group.iter().map(|v| {
            let q = round_half_away(f64::from(*v) / s).clamp(-f64::from(qmax), f64::from(qmax));
            q as i8
        }));
    }
    let packed = match precision {
        Precision::Int8 => codes.iter().map(|c| *c as u8).collect(),
        _ => pack4(&codes).expect("codes clamped to range"),
    };
    QuantizedTensor {
        shape: t.shape().to_vec(),
        precision,
        granularity,
        packed,
        scales,
    }
}

/// Quantizes one tensor. 32-bit passes through unchanged.
pub fn quantize(t: &Tensor, spec: &QuantSpec) -> Result<StoredTensor, QuantizeError> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(QuantizeError::NonFinite(i));
    }
    Ok(match spec.bits {
        Precision::Fp32 => StoredTensor::F32(t.clone()),
        Precision::Fp16 => {
            let bits = t
                .data()
                .iter()
                .enumerate()
                .map(|(index, v)| {
                    let b = f32_to_f16_bits(*v);
                    if b & 0x7c00 == 0x7c00 {
                        Err(QuantizeError::F16Overflow { index, value: *v })
                    } else {
                        Ok(b)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            StoredTensor::F16(HalfTensor {
                shape: t.shape().to_vec(),
                bits,
            })
        }
        p => StoredTensor::Quantized(quantize_int(t, p, spec.granularity)),
    })
}

/// `value = code * scale`, element-wise with the matching scale.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .codes()
        .iter()
        .enumerate()
        .map(|(i, c)| f32::from(*c) * q.scale_for(i))
        .collect();
    Tensor::from_raw(q.shape.clone(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantErrorStats {
    pub max_abs_err: f64,
    pub mse: f64,
}

/// Round-trip error of `quantize` followed by dequantization, measured in
/// `f64`.
pub fn quant_error(t: &Tensor, spec: &QuantSpec) -> Result<QuantErrorStats, QuantizeError> {
    let back = quantize(t, spec)?.to_dense();
    let mut max_abs_err = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (x, y) in t.data().iter().zip(back.data()) {
        let e = (f64::from(*x) - f64::from(*y)).abs();
        max_abs_err = max_abs_err.max(e);
        sum_sq += e * e;
    }
    Ok(QuantErrorStats {
        max_abs_err,
        mse: sum_sq / t.numel() as f64,
    })
}

/// Stores every tensor selected by the spec's filter at the requested
/// precision. The input must be a 32-bit bundle.
pub fn quantize_bundle(b: &ModelBundle, spec: &QuantSpec) -> Result<ModelBundle, QuantizeError> {
    if b.lineage.precision_bits != Precision::Fp32 {
        return Err(QuantizeError::AlreadyQuantized(b.lineage.precision_bits));
    }
    if let Some((_, t)) = b.tensors().iter().find(|(_, t)| t.precision() != Precision::Fp32) {
        return Err(QuantizeError::AlreadyQuantized(t.precision()));
    }
    let mut out = b.map_tensors(|name, t| match t {
        StoredTensor::F32(dense) if spec.target_filter.matches(name) => quantize(dense, spec),
        other => Ok(other.clone()),
    })?;
    out.lineage.precision_bits = spec.bits;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn as_q(s: StoredTensor) -> QuantizedTensor {
        match s {
            StoredTensor::Quantized(q) => q,
            other => panic!("expected quantized, got {other:?}"),
        }
    }

    #[test]
    fn int8_example() {
        let x = t(&[4], &[-1.0, 0.5, 0.25, 1.0]);
        let q = as_q(quantize(&x, &QuantSpec::per_tensor(Precision::Int8)).unwrap());
        assert_eq!(q.scales(), &[1.0f32 / 127.0]);
        assert_eq!(q.codes(), vec![-127, 64, 32, 127]);
    }

    #[test]
    fn int8_example_mse_matches_oracle() {
        // oracle: per-element residual of code*scale in f64
        let xs = [-1.0f64, 0.5, 0.25, 1.0];
        let scale = f64::from(1.0f32 / 127.0);
        let codes = [-127.0, 64.0, 32.0, 127.0];
        let expected: f64 = xs
            .iter()
            .zip(codes)
            .map(|(x, c)| {
                let deq = f64::from((c as f32) * (scale as f32));
                (x - deq).powi(2)
            })
            .sum::<f64>()
            / 4.0;
        let x = t(&[4], &[-1.0, 0.5, 0.25, 1.0]);
        let stats = quant_error(&x, &QuantSpec::per_tensor(Precision::Int8)).unwrap();
        assert!((stats.mse - expected).abs() < 1e-15);
        assert!(stats.max_abs_err <= scale / 2.0);
    }

    #[test]
    fn all_zero_convention() {
        let x = t(&[2, 3], &[0.0; 6]);
        for spec in [
            QuantSpec::per_tensor(Precision::Int4),
            QuantSpec::new(Precision::Int4),
        ] {
            let q = as_q(quantize(&x, &spec).unwrap());
            assert!(q.scales().iter().all(|s| *s == 1.0));
            assert!(q.codes().iter().all(|c| *c == 0));
            assert!(dequantize(&q).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn fp32_is_identity() {
        let x = t(&[3], &[0.1, -7.5, 3.0e10]);
        assert_eq!(
            quantize(&x, &QuantSpec::new(Precision::Fp32)).unwrap(),
            StoredTensor::F32(x.clone())
        );
        let stats = quant_error(&x, &QuantSpec::new(Precision::Fp32)).unwrap();
        assert_eq!(stats.max_abs_err, 0.0);
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor::from_parts(
            vec![2],
            Precision::Int8,
            Granularity::PerTensor,
            vec![127u8, 64u8],
            vec![1.0 / 127.0],
        )
        .unwrap();
        let d = dequantize(&q);
        assert_eq!(d.data()[0], 1.0);
        assert!((f64::from(d.data()[1]) - 64.0 / 127.0).abs() < 1e-7);
    }

    #[test]
    fn fp16_overflow_is_error() {
        let x = t(&[2], &[1.0, 70000.0]);
        assert!(matches!(
            quantize(&x, &QuantSpec::new(Precision::Fp16)),
            Err(QuantizeError::F16Overflow { index: 1, .. })
        ));
    }

    #[test]
    fn non_finite_is_rejected_by_tensor() {
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn per_row_scale_count() {
        let x = t(&[3, 2], &[1.0, -2.0, 0.0, 0.0, 0.5, 0.25]);
        let q = as_q(quantize(&x, &QuantSpec::new(Precision::Int8)).unwrap());
        assert_eq!(q.scales().len(), 3);
        assert_eq!(q.scales()[1], 1.0);
        assert_eq!(q.codes(), vec![64, -127, 0, 0, 127, 64]);
    }

    #[test]
    fn negation_flips_codes() {
        let x = t(&[2, 4], &[0.3, -0.9, 0.11, 0.5, -0.2, 0.7, 0.0, 0.05]);
        for p in [Precision::Int4, Precision::Int8] {
            let a = as_q(quantize(&x, &QuantSpec::new(p)).unwrap());
            let b = as_q(quantize(&x.neg(), &QuantSpec::new(p)).unwrap());
            assert_eq!(a.scales(), b.scales());
            let neg: Vec<i8> = a.codes().iter().map(|c| -c).collect();
            assert_eq!(b.codes(), neg);
        }
    }

    #[test]
    fn from_parts_rejects_bad_scales() {
        let err = QuantizedTensor::from_parts(
            vec![2],
            Precision::Int8,
            Granularity::PerTensor,
            vec![1, 2],
            vec![0.0],
        );
        assert!(err.is_err());
    }
}
