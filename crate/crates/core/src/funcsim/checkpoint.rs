//! Binary memory-image checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"PIMIMAGE"`, version `u32`, columns `u32`, device count `u32`, then per
//! device: id `u32`, Shared Buffer (slot count `u32`, lanes, written flags),
//! Global Buffers (channel count `u32`, slots per channel `u32`, lanes and
//! flags), accumulators (channels `u32`, banks `u32`, registers `u32`,
//! `f32` values), bank rows (count `u64`, then channel `u8`, bank `u8`,
//! row `u32` and the row's lanes each). Pending messages are not saved.

use super::{AfTables, DeviceState, MemoryImage};
use crate::bf16::{Lanes, ZERO_LANES};
use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 8] = b"PIMIMAGE";
pub const VERSION: u32 = 1;

fn w32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn wlanes(w: &mut impl Write, l: &Lanes) -> io::Result<()> {
    for x in l {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_image(w: &mut impl Write, img: &MemoryImage) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w32(w, VERSION)?;
    w32(w, img.columns as u32)?;
    w32(w, img.devices.len() as u32)?;
    for (&id, d) in &img.devices {
        w32(w, id)?;
        w32(w, d.sb.len() as u32)?;
        for l in &d.sb {
            wlanes(w, l)?;
        }
        w.write_all(&d.sb_written.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        w32(w, d.gb.len() as u32)?;
        w32(w, d.gb.first().map_or(0, |g| g.len()) as u32)?;
        for (g, f) in d.gb.iter().zip(&d.gb_written) {
            for l in g {
                wlanes(w, l)?;
            }
            w.write_all(&f.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        }
        let banks = d.acc.first().map_or(0, |c| c.len());
        let regs = d.acc.first().and_then(|c| c.first()).map_or(0, |b| b.len());
        w32(w, d.acc.len() as u32)?;
        w32(w, banks as u32)?;
        w32(w, regs as u32)?;
        for v in d.acc.iter().flatten().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(d.banks.len() as u64).to_le_bytes())?;
        for (&(ch, bank, row), data) in &d.banks {
            w.write_all(&[ch, bank])?;
            w32(w, row)?;
            for l in data.iter() {
                wlanes(w, l)?;
            }
        }
    }
    Ok(())
}

struct Rd<'a, R: Read>(&'a mut R);

impl<R: Read> Rd<'_, R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn lanes(&mut self) -> io::Result<Lanes> {
        let mut l = ZERO_LANES;
        for x in l.iter_mut() {
            *x = u16::from_le_bytes(self.bytes()?);
        }
        Ok(l)
    }
    fn flags(&mut self, n: usize) -> io::Result<Vec<bool>> {
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        Ok(b.into_iter().map(|x| x != 0).collect())
    }
}

fn bad(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn read_image(r: &mut impl Read) -> io::Result<MemoryImage> {
    let mut r = Rd(r);
    if &r.bytes::<8>()? != MAGIC {
        return Err(bad("not a memory image checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let columns = r.u32()? as usize;
    let n = r.u32()?;
    let mut devices = BTreeMap::new();
    for _ in 0..n {
        let id = r.u32()?;
        let ns = r.u32()? as usize;
        let sb = (0..ns).map(|_| r.lanes()).collect::<io::Result<Vec<_>>>()?;
        let sb_written = r.flags(ns)?;
        let nch = r.u32()? as usize;
        let ngb = r.u32()? as usize;
        let mut gb = Vec::with_capacity(nch);
        let mut gb_written = Vec::with_capacity(nch);
        for _ in 0..nch {
            gb.push((0..ngb).map(|_| r.lanes()).collect::<io::Result<Vec<_>>>()?);
            gb_written.push(r.flags(ngb)?);
        }
        let (ac, ab, ar) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut acc = vec![vec![vec![0.0f32; ar]; ab]; ac];
        for v in acc.iter_mut().flatten().flatten() {
            *v = f32::from_le_bytes(r.bytes()?);
        }
        let rows = u64::from_le_bytes(r.bytes()?);
        let mut banks = BTreeMap::new();
        for _ in 0..rows {
            let [ch, bank] = r.bytes::<2>()?;
            let row = r.u32()?;
            let data = (0..columns).map(|_| r.lanes()).collect::<io::Result<Vec<_>>>()?;
            banks.insert((ch, bank, row), data.into_boxed_slice());
        }
        devices.insert(id, DeviceState { banks, gb, gb_written, sb, sb_written, acc, inbox: VecDeque::new() });
    }
    Ok(MemoryImage { devices, columns, af: AfTables::new() })
}
