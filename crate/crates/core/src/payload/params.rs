use bytes::{Buf, BufMut, BytesMut};

use super::PayloadError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub len: usize,
}

/// Flat model parameters plus the sample count used as aggregation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layout: Vec<LayoutEntry>,
    values: Vec<f64>,
    num_samples: u64,
}

impl ParameterSet {
    pub fn new(layout: Vec<LayoutEntry>, values: Vec<f64>, num_samples: u64) -> Result<Self, PayloadError> {
        let declared: usize = layout.iter().map(|e| e.len).sum();
        if declared != values.len() {
            return Err(PayloadError::LayoutMismatch {
                declared,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PayloadError::NonFiniteValue { index: i });
        }
        Ok(ParameterSet {
            layout,
            values,
            num_samples,
        })
    }

    /// Zero-filled parameters for a layout given as `(name, len)` pairs.
    pub fn zeros(layout: &[(&str, usize)]) -> Self {
        let layout: Vec<LayoutEntry> = layout
            .iter()
            .map(|(n, l)| LayoutEntry {
                name: n.to_string(),
                len: *l,
            })
            .collect();
        let total = layout.iter().map(|e| e.len).sum();
        ParameterSet {
            layout,
            values: vec![0.0; total],
            num_samples: 0,
        }
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_samples(&self) -> u64 {
        self.num_samples
    }

    pub fn with_num_samples(mut self, n: u64) -> Self {
        self.num_samples = n;
        self
    }

    /// Replaces the values, keeping the layout. Fails on length or
    /// finiteness violations.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, PayloadError> {
        ParameterSet::new(self.layout.clone(), values, self.num_samples)
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.layout == other.layout
    }

    /// Values belonging to one named layout entry.
    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for e in &self.layout {
            if e.name == name {
                return Some(&self.values[offset..offset + e.len]);
            }
            offset += e.len;
        }
        None
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = BytesMut::with_capacity(12 + self.layout.len() * 16 + self.values.len() * 8);
        out.put_u64(self.num_samples);
        out.put_u32(self.layout.len() as u32);
        for e in &self.layout {
            out.put_u16(e.name.len() as u16);
            out.put_slice(e.name.as_bytes());
            out.put_u64(e.len as u64);
        }
        for v in &self.values {
            out.put_u64(v.to_bits());
        }
        out.to_vec()
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, PayloadError> {
        let need = |buf: &[u8], n: usize| {
            if buf.remaining() < n {
                Err(PayloadError::TruncatedBody)
            } else {
                Ok(())
            }
        };
        need(buf, 12)?;
        let num_samples = buf.get_u64();
        let entries = buf.get_u32() as usize;
        let mut layout = Vec::with_capacity(entries.min(1024));
        let mut declared: u64 = 0;
        for _ in 0..entries {
            need(buf, 2)?;
            let n = buf.get_u16() as usize;
            need(buf, n + 8)?;
            let name = std::str::from_utf8(&buf[..n])
                .map_err(|_| PayloadError::MalformedBody("layout name is not UTF-8"))?
                .to_string();
            buf.advance(n);
            let len = buf.get_u64();
            declared = declared.saturating_add(len);
            layout.push(LayoutEntry {
                name,
                len: len as usize,
            });
        }
        let actual = buf.remaining() / 8;
        if !buf.remaining().is_multiple_of(8) || declared != actual as u64 {
            return Err(PayloadError::LayoutMismatch {
                declared: declared as usize,
                actual,
            });
        }
        let mut values = Vec::with_capacity(actual);
        for i in 0..actual {
            let v = f64::from_bits(buf.get_u64());
            if !v.is_finite() {
                return Err(PayloadError::NonFiniteValue { index: i });
            }
            values.push(v);
        }
        Ok(ParameterSet {
            layout,
            values,
            num_samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        ParameterSet::new(
            vec![
                LayoutEntry {
                    name: "w".into(),
                    len: 2,
                },
                LayoutEntry {
                    name: "b".into(),
                    len: 1,
                },
            ],
            vec![1.0, -2.5, 0.0],
            10,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let p = sample();
        let back = ParameterSet::decode(&p.encode()).unwrap();
        assert_eq!(back, p);
        let bits: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, vec![1.0f64.to_bits(), (-2.5f64).to_bits(), 0.0f64.to_bits()]);
        assert_eq!(back.slice("b"), Some(&[0.0][..]));
        // -0.0 keeps its sign bit
        let neg = p.with_values(vec![-0.0, 1e-300, f64::MAX]).unwrap();
        let back = ParameterSet::decode(&neg.encode()).unwrap();
        assert_eq!(back.values()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn nan_rejected_on_decode() {
        let mut raw = sample().encode();
        let n = raw.len();
        raw[n - 8..].copy_from_slice(&f64::NAN.to_bits().to_be_bytes());
        assert_eq!(
            ParameterSet::decode(&raw),
            Err(PayloadError::NonFiniteValue { index: 2 })
        );
        assert!(ParameterSet::new(
            vec![LayoutEntry {
                name: "w".into(),
                len: 1
            }],
            vec![f64::INFINITY],
            1
        )
        .is_err());
    }

    #[test]
    fn short_value_array_is_layout_mismatch() {
        let raw = sample().encode();
        let truncated = &raw[..raw.len() - 8];
        assert_eq!(
            ParameterSet::decode(truncated),
            Err(PayloadError::LayoutMismatch { declared: 3, actual: 2 })
        );
    }
}
