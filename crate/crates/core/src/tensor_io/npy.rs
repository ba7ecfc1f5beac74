//! Minimal NPY container codec.
//!
//! Only what the pipeline exchanges is supported: C-order arrays of
//! little-endian `f32` (`<f4`) or `u8` (`|u1`). Headers are written exactly the
//! way numpy writes them (version 1.0, dict keys sorted, growth padding,
//! total header length a multiple of 64), so files produced here are
//! byte-identical to `numpy.save` output for the same array.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
// numpy reserves room so the leading axis can grow in place.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::U8 => "|u1",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "|u1" | "<u1" | ">u1" => Ok(Dtype::U8),
            other => Err(Error::Shape(format!(
                "unsupported dtype '{other}' (expected '<f4' or '|u1')"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NpyData {
    pub fn dtype(&self) -> Dtype {
        match self {
            NpyData::F32(_) => Dtype::F32,
            NpyData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: NpyData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            NpyData::F32(v) => Ok((self.shape, v)),
            NpyData::U8(_) => Err(Error::Shape("expected '<f4' array, found '|u1'".into())),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            NpyData::U8(v) => Ok((self.shape, v)),
            NpyData::F32(_) => Err(Error::Shape("expected '|u1' array, found '<f4'".into())),
        }
    }
}

fn python_tuple(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => {
            let inner: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", inner.join(", "))
        }
    }
}

/// Renders the complete v1.0 header (magic through trailing newline).
pub fn encode_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        python_tuple(shape)
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    // magic(6) + version(2) + u16 length(2) + dict + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + pad + 1;

    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    out
}

pub fn write_npy<W: Write>(writer: &mut W, array: &NpyArray) -> std::io::Result<()> {
    writer.write_all(&encode_header(array.data.dtype(), &array.shape))?;
    match &array.data {
        NpyData::F32(values) => {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            writer.write_all(&buf)
        }
        NpyData::U8(values) => writer.write_all(values),
    }
}

struct Header {
    dtype: Dtype,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}':");
    let start = dict
        .find(&needle)
        .ok_or_else(|| Error::Format(format!("header is missing key '{key}'")))?;
    Ok(dict[start + needle.len()..].trim_start())
}

fn parse_header(dict: &str) -> Result<Header> {
    let dict = dict.trim();
    if !dict.starts_with('{') || !dict.ends_with('}') {
        return Err(Error::Format("header is not a python dict literal".into()));
    }

    let descr = dict_value(dict, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::Format("malformed 'descr' value".into()))?;

    let fortran = dict_value(dict, "fortran_order")?;
    let fortran_order = if fortran.starts_with("False") {
        false
    } else if fortran.starts_with("True") {
        true
    } else {
        return Err(Error::Format("malformed 'fortran_order' value".into()));
    };

    let shape_src = dict_value(dict, "shape")?;
    let inner = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("malformed 'shape' value".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header {
        dtype: Dtype::parse(descr)?,
        fortran_order,
        shape,
    })
}

fn read_exact_or<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Format(format!("failed reading {what}: {e}")),
    })
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut magic = [0u8; 8];
    read_exact_or(reader, &mut magic, "magic")?;
    if &magic[..6] != MAGIC {
        return Err(Error::Format("missing \\x93NUMPY magic".into()));
    }
    let header_len = match (magic[6], magic[7]) {
        (1, 0) => {
            let mut len = [0u8; 2];
            read_exact_or(reader, &mut len, "header length")?;
            u16::from_le_bytes(len) as usize
        }
        (2, 0) => {
            let mut len = [0u8; 4];
            read_exact_or(reader, &mut len, "header length")?;
            u32::from_le_bytes(len) as usize
        }
        (major, minor) => {
            return Err(Error::Format(format!(
                "unsupported npy version {major}.{minor}"
            )))
        }
    };
    let mut raw = vec![0u8; header_len];
    read_exact_or(reader, &mut raw, "header")?;
    let dict =
        std::str::from_utf8(&raw).map_err(|_| Error::Format("header is not valid utf-8".into()))?;
    let header = parse_header(dict)?;
    if header.fortran_order {
        return Err(Error::Format(
            "fortran-order arrays are not supported".into(),
        ));
    }

    let count: usize = header.shape.iter().product();
    let mut payload = vec![0u8; count * header.dtype.size()];
    read_exact_or(reader, &mut payload, "payload")?;
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Format("trailing bytes after payload".into())),
        Err(e) => return Err(Error::Format(format!("failed reading payload: {e}"))),
    }

    let data = match header.dtype {
        Dtype::F32 => NpyData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => NpyData::U8(payload),
    };
    NpyArray::new(header.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Bytes produced by `np.save(f, np.array([[[0.5]]], dtype='<f4'))`.
    fn numpy_minimal() -> Vec<u8> {
        let mut v = b"\x93NUMPY\x01\x00\x76\x00".to_vec();
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 1), }";
        v.extend_from_slice(dict.as_bytes());
        v.extend(std::iter::repeat_n(b' ', 128 - 10 - dict.len() - 1));
        v.push(b'\n');
        v.extend_from_slice(&0.5f32.to_le_bytes());
        v
    }

    #[test]
    fn minimal_tensor_has_128_byte_header() {
        let arr = NpyArray::new(vec![1, 1, 1], NpyData::F32(vec![0.5])).unwrap();
        let mut out = Vec::new();
        write_npy(&mut out, &arr).unwrap();
        assert_eq!(out.len(), 128 + 4);
        assert_eq!(out, numpy_minimal());
        assert_eq!(&out[128..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn header_is_64_aligned_for_many_shapes() {
        for shape in [vec![], vec![7], vec![60, 60, 1024], vec![123456789, 2]] {
            let h = encode_header(Dtype::F32, &shape);
            assert_eq!(h.len() % 64, 0, "{shape:?}");
            assert_eq!(*h.last().unwrap(), b'\n');
        }
    }

    #[test]
    fn reads_back_u8() {
        let arr = NpyArray::new(vec![2, 2], NpyData::U8(vec![0, 1, 1, 0])).unwrap();
        let mut out = Vec::new();
        write_npy(&mut out, &arr).unwrap();
        assert_eq!(read_npy(&mut out.as_slice()).unwrap(), arr);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = numpy_minimal();
        bytes[1] = b'X';
        assert!(matches!(
            read_npy(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = numpy_minimal();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_npy(&mut &cut[..]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_f64() {
        let mut bytes = numpy_minimal();
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos + 2] = b'8';
        assert!(matches!(
            read_npy(&mut bytes.as_slice()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn accepts_version_two() {
        let arr = NpyArray::new(vec![3], NpyData::F32(vec![1.0, 2.0, 3.0])).unwrap();
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (3,), }\n";
        let mut bytes = b"\x93NUMPY\x02\x00".to_vec();
        bytes.extend_from_slice(&(dict.len() as u32).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_npy(&mut bytes.as_slice()).unwrap(), arr);
    }
}
