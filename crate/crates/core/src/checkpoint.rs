//! Binary checkpoints.
//!
//! Layout (little-endian): magic `VSDM`, `u32` version, then sections of
//! `[4-byte tag][u64 length][payload]` in a fixed order: `CONF` (config
//! TOML), `MODL` (score model), `ADAM`, `DRFT` (variational state) and
//! `PROG` (progress counters). All randomness is counter-based, so the
//! progress counters are the complete RNG state.

use std::path::Path;

use crate::config::RunConfig;
use crate::drift::{DriftMatrixGrid, DriftMode};
use crate::error::{Result, VsdmError};
use crate::linalg::{Mat, Vector};
use crate::score::{Adam, ScoreModel};
use crate::variational::{Averaging, Parametrization, SvdFactors, VariationalScore};

pub const MAGIC: &[u8; 4] = b"VSDM";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    /// Completed stages.
    pub stage: u64,
    /// Training rounds already run inside the current stage.
    pub round_in_stage: u64,
    /// Global training round counter.
    pub rounds_done: u64,
    pub sa_updates: u64,
    /// Sum of the DSM losses seen so far in the current stage.
    pub stage_loss_sum: f64,
    pub last_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ScoreModel,
    pub adam: Adam,
    pub variational: VariationalScore,
    pub progress: Progress,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, tag: &[u8; 4], body: Vec<u8>) {
        self.0.extend_from_slice(tag);
        self.u64(body.len() as u64);
        self.0.extend_from_slice(&body);
    }
}

struct Reader<'a>(&'a [u8]);

fn corrupt(msg: impl Into<String>) -> VsdmError {
    VsdmError::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(corrupt("checkpoint is truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.0.len() as u64 {
            return Err(corrupt("length prefix exceeds the remaining data"));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n.saturating_mul(8) > self.0.len() {
            return Err(corrupt("array length exceeds the remaining data"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("string is not UTF-8"))
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(corrupt(format!(
                "expected section {} but found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        let n = self.len()?;
        Ok(Reader(self.take(n)?))
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(corrupt(format!("{} trailing bytes in {what}", self.0.len())))
        }
    }
}

fn mat(w: &mut Writer, m: &Mat) {
    w.u64(m.nrows() as u64);
    w.f64s(m.as_slice());
}

fn read_mat(r: &mut Reader<'_>) -> Result<Mat> {
    let n = r.u64()? as usize;
    let v = r.f64s()?;
    if v.len() != n * n {
        return Err(corrupt("matrix block has the wrong size"));
    }
    Ok(Mat::from_column_slice(n, n, &v))
}

fn write_variational(vs: &VariationalScore) -> Vec<u8> {
    let mut w = Writer::default();
    let g = vs.grid();
    w.str(g.mode().as_str());
    w.str(vs.parametrization().as_str());
    w.f64(vs.floor());
    match vs.averaging() {
        Averaging::None => w.u8(0),
        Averaging::Polyak => w.u8(1),
        Averaging::Ema { rate } => {
            w.u8(2);
            w.f64(rate);
        }
    }
    w.u64(g.cells() as u64);
    w.u64(g.stored() as u64);
    for d in g.stored_d() {
        mat(&mut w, d);
    }
    for &k in vs.counters() {
        w.u64(k);
    }
    for b in vs.buffer() {
        mat(&mut w, b);
    }
    w.u64(vs.factors().len() as u64);
    for f in vs.factors() {
        mat(&mut w, &f.v);
        w.f64s(f.rho.as_slice());
    }
    w.0
}

fn read_variational(r: &mut Reader<'_>) -> Result<VariationalScore> {
    let mode: DriftMode = r.str()?.parse().map_err(|e: VsdmError| corrupt(e.to_string()))?;
    let param: Parametrization = r.str()?.parse().map_err(|e: VsdmError| corrupt(e.to_string()))?;
    let floor = r.f64()?;
    let averaging = match r.u8()? {
        0 => Averaging::None,
        1 => Averaging::Polyak,
        2 => Averaging::Ema { rate: r.f64()? },
        b => return Err(corrupt(format!("unknown averaging tag {b}"))),
    };
    let cells = r.u64()? as usize;
    let stored = r.u64()? as usize;
    if stored > cells.max(1) {
        return Err(corrupt("more stored drift matrices than cells"));
    }
    let values = (0..stored).map(|_| read_mat(r)).collect::<Result<Vec<_>>>()?;
    let grid = DriftMatrixGrid::from_d(mode, cells, values).map_err(|e| corrupt(e.to_string()))?;
    let counters = (0..stored).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let buffer = (0..stored).map(|_| read_mat(r)).collect::<Result<Vec<_>>>()?;
    let nf = r.u64()? as usize;
    if nf > stored {
        return Err(corrupt("more SVD factors than drift matrices"));
    }
    let factors = (0..nf)
        .map(|_| {
            let v = read_mat(r)?;
            let rho = Vector::from_vec(r.f64s()?);
            Ok(SvdFactors { v, rho })
        })
        .collect::<Result<Vec<_>>>()?;
    VariationalScore::from_parts(grid, param, factors, floor, counters, averaging, buffer)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.section(b"CONF", self.config.to_toml().into_bytes());
        let mut m = Vec::new();
        self.model.write_bytes(&mut m);
        w.section(b"MODL", m);
        let mut a = Writer::default();
        a.u64(self.adam.step);
        a.f64s(&self.adam.m);
        a.f64s(&self.adam.v);
        w.section(b"ADAM", a.0);
        w.section(b"DRFT", write_variational(&self.variational));
        let mut p = Writer::default();
        p.u64(self.progress.stage);
        p.u64(self.progress.round_in_stage);
        p.u64(self.progress.rounds_done);
        p.u64(self.progress.sa_updates);
        p.f64(self.progress.stage_loss_sum);
        p.f64(self.progress.last_loss);
        w.section(b"PROG", p.0);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(corrupt("not a VSDM checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!(
                "checkpoint version {version} is not supported (this build reads version {VERSION})"
            )));
        }
        let mut conf = r.section(b"CONF")?;
        let text = std::str::from_utf8(conf.take(conf.0.len())?).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = RunConfig::from_toml(text).map_err(|e| corrupt(format!("embedded config: {e}")))?;

        let mut ms = r.section(b"MODL")?;
        let model = ScoreModel::read_bytes(&mut ms.0)?;
        ms.finish("model section")?;

        let mut a = r.section(b"ADAM")?;
        let step = a.u64()?;
        let m = a.f64s()?;
        let v = a.f64s()?;
        a.finish("optimizer section")?;
        if m.len() != model.param_count() || v.len() != model.param_count() {
            return Err(corrupt("optimizer state does not match the model"));
        }
        let adam = Adam {
            config: config.train.adam,
            m,
            v,
            step,
        };

        let mut d = r.section(b"DRFT")?;
        let variational = read_variational(&mut d)?;
        d.finish("drift section")?;

        let mut p = r.section(b"PROG")?;
        let progress = Progress {
            stage: p.u64()?,
            round_in_stage: p.u64()?,
            rounds_done: p.u64()?,
            sa_updates: p.u64()?,
            stage_loss_sum: p.f64()?,
            last_loss: p.f64()?,
        };
        p.finish("progress section")?;
        r.finish("checkpoint")?;
        Ok(Checkpoint {
            config,
            model,
            adam,
            variational,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VsdmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VsdmError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            VsdmError::Checkpoint(msg) => VsdmError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
