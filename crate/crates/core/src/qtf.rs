//! QTF: little-endian binary container for plans, dense matrices and LoRA
//! adapters.
//!
//! ```text
//! file    := "QNTA" version:u16 scalar:u8 count:u32 record*count
//! record  := kind:u8 body
//!
//! kind 0, plan:
//!   rank:u32 dims:u32*rank               input axis shape
//!   input_len:u32 output_len:u32 frozen:u8
//!   gates:u32
//!   (m:u32 n:u32)*gates                  axis pairs
//!   (out_m:u32 out_n:u32)*gates          output extents of each gate
//!   (len:u64)*gates                      payload lengths, rows*cols
//!   f64*sum(len)                         row-major gate matrices
//! kind 1, dense matrix:
//!   rank:u32 (=2) rows:u32 cols:u32 len:u64 f64*len
//! kind 2, LoRA adapter:
//!   rank:u32 (=2) out_dim:u32 in_dim:u32 r:u32 alpha:f64
//!   len_a:u64 len_b:u64 f64*len_a (A, r x in) f64*len_b (B, out x r)
//! ```
//!
//! Version is 1 and the only scalar code is 0 (`f64`). Readers reject
//! trailing bytes and any payload length that disagrees with the extents.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::plan::{GateSpec, QuantaPlan};
use crate::tensor::AxisShape;

pub const MAGIC: &[u8; 4] = b"QNTA";
pub const VERSION: u16 = 1;
pub const SCALAR_F64: u8 = 0;

const KIND_PLAN: u8 = 0;
const KIND_MATRIX: u8 = 1;
const KIND_LORA: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum QtfRecord {
    Plan(QuantaPlan),
    Matrix(Matrix),
    Lora(LoraAdapter),
}

impl QtfRecord {
    pub fn kind_name(&self) -> &'static str {
        match self {
            QtfRecord::Plan(_) => "plan",
            QtfRecord::Matrix(_) => "matrix",
            QtfRecord::Lora(_) => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QtfFile {
    pub records: Vec<QtfRecord>,
}

impl QtfFile {
    pub fn new(records: Vec<QtfRecord>) -> Self {
        Self { records }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(SCALAR_F64);
        put_u32(&mut w, self.records.len())?;
        for rec in &self.records {
            match rec {
                QtfRecord::Plan(p) => write_plan(&mut w, p)?,
                QtfRecord::Matrix(m) => {
                    w.push(KIND_MATRIX);
                    put_u32(&mut w, 2)?;
                    put_u32(&mut w, m.rows())?;
                    put_u32(&mut w, m.cols())?;
                    put_u64(&mut w, m.as_slice().len());
                    put_f64s(&mut w, m.as_slice());
                }
                QtfRecord::Lora(l) => {
                    w.push(KIND_LORA);
                    put_u32(&mut w, 2)?;
                    put_u32(&mut w, l.out_dim())?;
                    put_u32(&mut w, l.in_dim())?;
                    put_u32(&mut w, l.rank())?;
                    w.extend_from_slice(&l.alpha.to_le_bytes());
                    put_u64(&mut w, l.a.as_slice().len());
                    put_u64(&mut w, l.b.as_slice().len());
                    put_f64s(&mut w, l.a.as_slice());
                    put_f64s(&mut w, l.b.as_slice());
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Format, "bad magic");
        let version = u16::from_le_bytes(r.array()?);
        ensure!(version == VERSION, Format, "unsupported version {version}");
        let scalar = r.u8()?;
        ensure!(scalar == SCALAR_F64, Format, "unsupported scalar code {scalar}");
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rec = match r.u8()? {
                KIND_PLAN => QtfRecord::Plan(read_plan(&mut r)?),
                KIND_MATRIX => {
                    ensure!(r.u32()? == 2, Format, "matrix record must have rank 2");
                    let (rows, cols) = (r.u32()?, r.u32()?);
                    let data = r.payload(rows.checked_mul(cols))?;
                    QtfRecord::Matrix(Matrix::from_vec(rows, cols, data)?)
                }
                KIND_LORA => {
                    ensure!(r.u32()? == 2, Format, "LoRA record must have rank 2");
                    let (out_dim, in_dim, rank) = (r.u32()?, r.u32()?, r.u32()?);
                    let alpha = f64::from_le_bytes(r.array()?);
                    let (la, lb) = (r.u64()?, r.u64()?);
                    ensure!(
                        Some(la) == rank.checked_mul(in_dim) && Some(lb) == out_dim.checked_mul(rank),
                        Format,
                        "LoRA payload lengths {la}/{lb} disagree with extents"
                    );
                    let a = Matrix::from_vec(rank, in_dim, r.f64s(la)?)?;
                    let b = Matrix::from_vec(out_dim, rank, r.f64s(lb)?)?;
                    QtfRecord::Lora(LoraAdapter::from_parts(a, b, alpha)?)
                }
                other => return Err(Error::Format(format!("unknown record kind {other}"))),
            };
            records.push(rec);
        }
        ensure!(r.pos == bytes.len(), Format, "{} trailing bytes", bytes.len() - r.pos);
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The first plan record.
    pub fn plan(&self) -> Result<&QuantaPlan> {
        self.records
            .iter()
            .find_map(|r| if let QtfRecord::Plan(p) = r { Some(p) } else { None })
            .ok_or_else(|| Error::Format("file holds no plan record".into()))
    }

    /// All plan records in file order.
    pub fn plans(&self) -> Vec<&QuantaPlan> {
        self.records.iter().filter_map(|r| if let QtfRecord::Plan(p) = r { Some(p) } else { None }).collect()
    }

    /// The first dense-matrix record.
    pub fn matrix(&self) -> Result<&Matrix> {
        self.records
            .iter()
            .find_map(|r| if let QtfRecord::Matrix(m) = r { Some(m) } else { None })
            .ok_or_else(|| Error::Format("file holds no matrix record".into()))
    }

    pub fn lora(&self) -> Result<&LoraAdapter> {
        self.records
            .iter()
            .find_map(|r| if let QtfRecord::Lora(l) = r { Some(l) } else { None })
            .ok_or_else(|| Error::Format("file holds no LoRA record".into()))
    }
}

fn write_plan(w: &mut Vec<u8>, p: &QuantaPlan) -> Result<()> {
    w.push(KIND_PLAN);
    let dims = p.in_shape().dims();
    put_u32(w, dims.len())?;
    for &d in dims {
        put_u32(w, d)?;
    }
    put_u32(w, p.input_len())?;
    put_u32(w, p.output_len())?;
    w.push(p.is_frozen() as u8);
    put_u32(w, p.gate_count())?;
    for g in p.gates() {
        put_u32(w, g.axes.0)?;
        put_u32(w, g.axes.1)?;
    }
    for g in p.gates() {
        put_u32(w, g.out_dims.0)?;
        put_u32(w, g.out_dims.1)?;
    }
    for g in p.gates() {
        put_u64(w, g.tensor.as_slice().len());
    }
    for g in p.gates() {
        put_f64s(w, g.tensor.as_slice());
    }
    Ok(())
}

fn read_plan(r: &mut Reader<'_>) -> Result<QuantaPlan> {
    let rank = r.u32()?;
    ensure!(rank <= r.remaining() / 4, Format, "axis count {rank} exceeds file size");
    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let shape = AxisShape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let (input_len, output_len) = (r.u32()?, r.u32()?);
    let frozen = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad frozen flag {f}"))),
    };
    let n = r.u32()?;
    ensure!(n <= r.remaining() / 8, Format, "gate count {n} exceeds file size");
    let axes = (0..n).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let outs = (0..n).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let lens = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;

    // Trace extents so each payload length can be checked before reading.
    let mut current = shape.dims().to_vec();
    let mut gates = Vec::with_capacity(n);
    for k in 0..n {
        let (m, nn) = axes[k];
        ensure!(m < current.len() && nn < current.len() && m != nn, Format, "gate {k} axes ({m}, {nn}) invalid");
        let cols = current[m] * current[nn];
        let rows = outs[k].0 * outs[k].1;
        ensure!(
            Some(lens[k]) == rows.checked_mul(cols),
            Format,
            "gate {k} payload length {} does not match {rows}x{cols}",
            lens[k]
        );
        current[m] = outs[k].0;
        current[nn] = outs[k].1;
        gates.push((rows, cols));
    }
    let gates = gates
        .into_iter()
        .enumerate()
        .map(|(k, (rows, cols))| {
            let t = Matrix::from_vec(rows, cols, r.f64s(lens[k])?)?;
            Ok(GateSpec::rectangular(axes[k], outs[k], t))
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = QuantaPlan::new(shape, gates)?.with_io_lens(input_len, output_len)?;
    Ok(if frozen { plan.freeze() } else { plan })
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u64(w: &mut Vec<u8>, v: usize) {
    w.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, data: &[f64]) {
    w.reserve(data.len() * 8);
    for v in data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(n <= self.remaining(), Format, "unexpected end of data at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| Error::Format("length overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format("payload length overflow".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
    }

    fn payload(&mut self, expected: Option<usize>) -> Result<Vec<f64>> {
        let len = self.u64()?;
        ensure!(Some(len) == expected, Format, "payload length {len} disagrees with extents");
        self.f64s(len)
    }
}
