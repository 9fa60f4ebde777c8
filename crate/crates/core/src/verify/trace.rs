//! Binary replay files: a case name, the schedule that was followed and the normalized
//! trace it produced.
//!
//! Layout (little-endian): magic `IDLKTRCE`, `u16` version, then length-prefixed suite
//! and case names, `u64` seed, `u32` count of `u16` thread picks, `u32` count of steps
//! (each `u16` thread, `u8` kind, `u8` space, `u32` location, `u128` old, `u128` new),
//! and a length-prefixed message.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::step::{Space, StepKind};

use super::sched::Step;

pub const MAGIC: &[u8; 8] = b"IDLKTRCE";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceFile {
    pub suite: String,
    pub case: String,
    pub seed: u64,
    pub schedule: Vec<u16>,
    pub steps: Vec<Step>,
    /// Verdict of the recorded execution, empty if it passed.
    pub message: String,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> io::Result<&[u8]> {
        if self.0.len() < n {
            return Err(bad("trace file is truncated"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn array<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> io::Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> io::Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
}

impl TraceFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.schedule.len() * 2 + self.steps.len() * 40);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.suite);
        put_str(&mut out, &self.case);
        out.extend(self.seed.to_le_bytes());
        out.extend((self.schedule.len() as u32).to_le_bytes());
        for t in &self.schedule {
            out.extend(t.to_le_bytes());
        }
        out.extend((self.steps.len() as u32).to_le_bytes());
        for s in &self.steps {
            out.extend(s.thread.to_le_bytes());
            out.push(s.kind as u8);
            out.push(s.space as u8);
            out.extend(s.loc.to_le_bytes());
            out.extend(s.old.to_le_bytes());
            out.extend(s.new.to_le_bytes());
        }
        put_str(&mut out, &self.message);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> io::Result<Self> {
        let mut c = Cursor(bytes);
        if c.take(8)? != MAGIC {
            return Err(bad("not a trace file"));
        }
        let v = c.u16()?;
        if v != VERSION {
            return Err(bad(format!("trace file version {v}, expected {VERSION}")));
        }
        let suite = c.string()?;
        let case = c.string()?;
        let seed = c.u64()?;
        let n = c.u32()? as usize;
        let schedule = (0..n).map(|_| c.u16()).collect::<io::Result<_>>()?;
        let n = c.u32()? as usize;
        let mut steps = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            steps.push(Step {
                thread: c.u16()?,
                kind: StepKind::from_u8(c.u8()?).ok_or_else(|| bad("unknown step kind"))?,
                space: Space::from_u8(c.u8()?).ok_or_else(|| bad("unknown location space"))?,
                loc: c.u32()?,
                old: c.u128()?,
                new: c.u128()?,
            });
        }
        let message = c.string()?;
        if !c.0.is_empty() {
            return Err(bad("trailing bytes after trace"));
        }
        Ok(TraceFile {
            suite,
            case,
            seed,
            schedule,
            steps,
            message,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> io::Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step() -> impl Strategy<Value = Step> {
        (any::<u16>(), 0u8..6, 0u8..8, any::<u32>(), any::<u128>(), any::<u128>()).prop_map(|(thread, k, s, loc, old, new)| Step {
            thread,
            kind: StepKind::from_u8(k).unwrap(),
            space: Space::from_u8(s).unwrap(),
            loc,
            old,
            new,
        })
    }

    proptest! {
        #[test]
        fn round_trips(suite in ".{0,12}", case in ".{0,20}", seed in any::<u64>(),
                       schedule in proptest::collection::vec(any::<u16>(), 0..50),
                       steps in proptest::collection::vec(step(), 0..30), message in ".{0,40}") {
            let t = TraceFile { suite, case, seed, schedule, steps, message };
            prop_assert_eq!(TraceFile::from_bytes(&t.to_bytes()).unwrap(), t);
        }

        #[test]
        fn truncation_is_an_error(cut in 0usize..60) {
            let t = TraceFile { suite: "s".into(), case: "c".into(), seed: 1, schedule: vec![0, 1], steps: vec![], message: "m".into() };
            let b = t.to_bytes();
            prop_assume!(cut < b.len());
            prop_assert!(TraceFile::from_bytes(&b[..cut]).is_err());
        }
    }

    #[test]
    fn rejects_other_versions() {
        let t = TraceFile { suite: "s".into(), case: "c".into(), seed: 1, schedule: vec![], steps: vec![], message: String::new() };
        let mut b = t.to_bytes();
        b[8] = 9;
        assert!(TraceFile::from_bytes(&b).unwrap_err().to_string().contains("version"));
    }
}
