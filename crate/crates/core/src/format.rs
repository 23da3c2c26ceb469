//! Binary wire formats, little-endian throughout. These codecs work on
//! byte buffers; file I/O belongs to the CLI.
//!
//! SequenceFile:  "DSEQ" | version u16 | float width u8 | 0u8
//!                | T u32 | d u32 | T·d scalars
//! CodeStreamFile: "DCST" | version u16 | 0u16
//!                | K u32 | M u32 | M × (code u32, duration u32)

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"DSEQ";
pub const CODE_STREAM_MAGIC: &[u8; 4] = b"DCST";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_sequence<S: Scalar>(x: &Tensor<S>) -> Result<Vec<u8>> {
    if x.shape().len() != 2 {
        return Err(Error::Format(format!(
            "sequence tensor must be rank 2, got {:?}",
            x.shape()
        )));
    }
    let (t, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(16 + x.numel() * S::WIDTH as usize);
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(S::WIDTH);
    out.push(0);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in x.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_sequence<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes, "sequence file");
    r.expect_magic(SEQUENCE_MAGIC)?;
    r.expect_version(FORMAT_VERSION)?;
    let width = r.u8()?;
    if width != S::WIDTH {
        return Err(Error::Format(format!(
            "float width {} does not match requested scalar width {}",
            width,
            S::WIDTH
        )));
    }
    let pad = r.u8()?;
    if pad != 0 {
        return Err(Error::Format("non-zero padding byte".into()));
    }
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        data.push(r.scalar::<S>()?);
    }
    r.expect_end()?;
    Tensor::new(vec![t, d], data)
}

/// Decoded code stream: codebook size plus (code, duration) records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeStream {
    pub num_codes: usize,
    pub codes: Vec<usize>,
    pub durations: Vec<usize>,
}

pub fn encode_code_stream(
    num_codes: usize,
    codes: &[usize],
    durations: &[usize],
) -> Result<Vec<u8>> {
    if codes.len() != durations.len() {
        return Err(Error::Format(format!(
            "{} codes vs {} durations",
            codes.len(),
            durations.len()
        )));
    }
    if let Some(&bad) = codes.iter().find(|&&c| c >= num_codes) {
        return Err(Error::IndexOutOfRange {
            what: "code",
            index: bad,
            size: num_codes,
        });
    }
    if let Some((pos, &d)) = durations.iter().enumerate().find(|(_, &d)| d == 0) {
        return Err(Error::Duration(d, pos));
    }
    let mut out = Vec::with_capacity(16 + codes.len() * 8);
    out.extend_from_slice(CODE_STREAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(num_codes as u32).to_le_bytes());
    out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    for (&c, &d) in codes.iter().zip(durations) {
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_code_stream(bytes: &[u8]) -> Result<CodeStream> {
    let mut r = Reader::new(bytes, "code stream file");
    r.expect_magic(CODE_STREAM_MAGIC)?;
    r.expect_version(FORMAT_VERSION)?;
    let pad = r.u16()?;
    if pad != 0 {
        return Err(Error::Format("non-zero padding".into()));
    }
    let k = r.u32()? as usize;
    let m = r.u32()? as usize;
    let mut codes = Vec::with_capacity(m);
    let mut durations = Vec::with_capacity(m);
    for i in 0..m {
        let c = r.u32()? as usize;
        let d = r.u32()? as usize;
        if c >= k {
            return Err(Error::Format(format!("record {i}: code {c} >= K {k}")));
        }
        if d == 0 {
            return Err(Error::Format(format!("record {i}: zero duration")));
        }
        codes.push(c);
        durations.push(d);
    }
    r.expect_end()?;
    Ok(CodeStream {
        num_codes: k,
        codes,
        durations,
    })
}

/// Bounds-checked little-endian reader shared by the format codecs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader {
            bytes,
            pos: 0,
            what,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{} truncated at byte {} (wanted {} more)",
                self.what, self.pos, n
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn scalar<S: Scalar>(&mut self) -> Result<S> {
        Ok(S::read_le(self.take(S::WIDTH as usize)?))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what, got, magic
            )));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u16) -> Result<()> {
        let got = self.u16()?;
        if got != version {
            return Err(Error::Format(format!(
                "{}: unsupported version {} (expected {})",
                self.what, got, version
            )));
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sequence_round_trip_is_byte_identical() {
        let x = Tensor::new(vec![3, 2], vec![1.5f32, -2.0, 0.0, 1e-7, 9.0, -0.25]).unwrap();
        let bytes = encode_sequence(&x).unwrap();
        let back = decode_sequence::<f32>(&bytes).unwrap();
        assert_eq!(back, x);
        assert_eq!(encode_sequence(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_load_errors() {
        let x = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_sequence(&x).unwrap();
        assert!(matches!(
            decode_sequence::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_sequence::<f32>(&bad_magic),
            Err(Error::Format(_))
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_sequence::<f32>(&bad_version),
            Err(Error::Format(_))
        ));
        // width mismatch: decoding an f32 file as f64
        assert!(matches!(
            decode_sequence::<f64>(&bytes),
            Err(Error::Format(_))
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(
            decode_sequence::<f32>(&trailing),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn code_stream_round_trip_and_validation() {
        let bytes = encode_code_stream(16, &[3, 0, 15], &[1, 7, 2]).unwrap();
        let back = decode_code_stream(&bytes).unwrap();
        assert_eq!(back.num_codes, 16);
        assert_eq!(back.codes, vec![3, 0, 15]);
        assert_eq!(back.durations, vec![1, 7, 2]);
        assert_eq!(
            encode_code_stream(16, &back.codes, &back.durations).unwrap(),
            bytes
        );

        assert!(encode_code_stream(4, &[4], &[1]).is_err());
        assert!(encode_code_stream(4, &[1], &[0]).is_err());
    }

    #[test]
    fn code_stream_rejects_inconsistent_payload() {
        let mut bytes = encode_code_stream(4, &[1], &[2]).unwrap();
        // corrupt the stored code to 9 (>= K)
        let n = bytes.len();
        bytes[n - 8] = 9;
        assert!(matches!(decode_code_stream(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn sequence_files_round_trip(
            rows in 1usize..12,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect();
            let x = Tensor::new(vec![rows, cols], data).unwrap();
            let bytes = encode_sequence(&x).unwrap();
            let back = decode_sequence::<f32>(&bytes).unwrap();
            prop_assert_eq!(&back, &x);
            prop_assert_eq!(encode_sequence(&back).unwrap(), bytes);
        }

        #[test]
        fn code_streams_round_trip(
            records in proptest::collection::vec((0usize..32, 1usize..50), 0..20)
        ) {
            let codes: Vec<usize> = records.iter().map(|r| r.0).collect();
            let durations: Vec<usize> = records.iter().map(|r| r.1).collect();
            let bytes = encode_code_stream(32, &codes, &durations).unwrap();
            let back = decode_code_stream(&bytes).unwrap();
            prop_assert_eq!(back.codes, codes);
            prop_assert_eq!(back.durations, durations);
        }
    }
}
