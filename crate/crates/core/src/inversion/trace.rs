//! Binary trace files.
//!
//! ```text
//! "CINVTRC1"
//! u64 stage, method, T, N, num_train_steps
//! f64 guidance
//! u64 height, width, channels, embedding width
//! T x u64                        grid timesteps
//! u64 has_conditioning
//!   [f64 sigma_aug, u64 seed, u64 h, u64 w, u64 c, h*w*c x f64]
//! width x f64                    conditional embedding
//! T x width x f64                null embeddings
//! (T+1) x h*w*c x f64            states
//! u64 n_losses, then per entry: f64 start, f64 end, u64 iterations,
//!                               u64 n_history, n_history x f64
//! ```
//! Little-endian throughout.

use std::fs;
use std::path::Path;

use super::{InversionMethod, InversionTrace, SrConditioning, StepLoss};
use crate::denoiser::file::Reader;
use crate::error::{Error, Result};
use crate::schedule::TimestepGrid;
use crate::tensor::StateTensor;

pub const TRACE_MAGIC: &[u8; 8] = b"CINVTRC1";

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
}

pub fn encode_trace(trace: &InversionTrace) -> Result<Vec<u8>> {
    trace.check(None)?;
    let mut w = Writer(TRACE_MAGIC.to_vec());
    let (h, wd, c) = trace.states[0].dims();
    for v in [
        trace.stage,
        trace.method.code() as usize,
        trace.grid.len(),
        trace.inner_steps,
        trace.num_train_steps,
    ] {
        w.u64(v as u64);
    }
    w.f64(trace.guidance);
    for v in [h, wd, c, trace.cond_embedding.len()] {
        w.u64(v as u64);
    }
    trace.grid.timesteps().iter().for_each(|&t| w.u64(t as u64));
    match &trace.conditioning {
        None => w.u64(0),
        Some(sr) => {
            w.u64(1);
            w.f64(sr.sigma_aug);
            w.u64(sr.seed);
            let (bh, bw, bc) = sr.base.dims();
            [bh, bw, bc].iter().for_each(|&v| w.u64(v as u64));
            w.f64s(sr.base.data());
        }
    }
    w.f64s(&trace.cond_embedding);
    for n in &trace.null_embeddings {
        if n.len() != trace.cond_embedding.len() {
            return Err(Error::TraceMismatch("null embedding width".into()));
        }
        w.f64s(n);
    }
    trace.states.iter().for_each(|s| w.f64s(s.data()));
    w.u64(trace.step_losses.len() as u64);
    for l in &trace.step_losses {
        w.f64(l.start);
        w.f64(l.end);
        w.u64(l.iterations as u64);
        w.u64(l.history.len() as u64);
        w.f64s(&l.history);
    }
    Ok(w.0)
}

fn dim(r: &mut Reader<'_>) -> Result<usize> {
    match r.u64()? {
        0 => Err(Error::Format("zero dimension".into())),
        d if d > 1 << 20 => Err(Error::Format(format!("dimension {d} is implausible"))),
        d => Ok(d as usize),
    }
}

fn tensor(r: &mut Reader<'_>, h: usize, w: usize, c: usize) -> Result<StateTensor> {
    let n = h * w * c;
    if n.saturating_mul(8) > r.remaining() {
        return Err(Error::Format("truncated tensor".into()));
    }
    StateTensor::new(h, w, c, r.f64s(n)?)
}

pub fn decode_trace(bytes: &[u8]) -> Result<InversionTrace> {
    let mut r = Reader::new(bytes);
    if r.bytes(8)? != TRACE_MAGIC {
        return Err(Error::Format("bad trace magic".into()));
    }
    let stage = r.u64()? as usize;
    let method = InversionMethod::from_code(r.u64()?)?;
    let t_len = dim(&mut r)?;
    let inner_steps = r.u64()? as usize;
    let num_train_steps = dim(&mut r)?;
    let guidance = r.f64()?;
    let (h, w, c) = (dim(&mut r)?, dim(&mut r)?, dim(&mut r)?);
    let width = r.u64()? as usize;
    if t_len.saturating_mul(8) > r.remaining() || width.saturating_mul(8) > r.remaining() {
        return Err(Error::Format("header lengths exceed payload".into()));
    }
    let timesteps = (0..t_len).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let grid = TimestepGrid::from_timesteps(timesteps, num_train_steps)
        .map_err(|e| Error::Format(format!("grid: {e}")))?;
    let conditioning = match r.u64()? {
        0 => None,
        1 => {
            let sigma_aug = r.f64()?;
            let seed = r.u64()?;
            let (bh, bw, bc) = (dim(&mut r)?, dim(&mut r)?, dim(&mut r)?);
            Some(SrConditioning {
                base: tensor(&mut r, bh, bw, bc)?,
                sigma_aug,
                seed,
            })
        }
        other => return Err(Error::Format(format!("conditioning flag {other}"))),
    };
    let cond_embedding = r.f64s(width)?;
    let null_embeddings = (0..t_len).map(|_| r.f64s(width)).collect::<Result<Vec<_>>>()?;
    let states = (0..=t_len).map(|_| tensor(&mut r, h, w, c)).collect::<Result<Vec<_>>>()?;
    let n_losses = r.len(32)?;
    let mut step_losses = Vec::with_capacity(n_losses);
    for _ in 0..n_losses {
        let start = r.f64()?;
        let end = r.f64()?;
        let iterations = r.u64()? as usize;
        let n_hist = r.len(8)?;
        step_losses.push(StepLoss {
            start,
            end,
            iterations,
            history: r.f64s(n_hist)?,
        });
    }
    r.finish()?;
    let trace = InversionTrace {
        stage,
        method,
        num_train_steps,
        grid,
        inner_steps,
        guidance,
        cond_embedding,
        null_embeddings,
        conditioning,
        states,
        step_losses,
    };
    trace.check(None).map_err(|e| Error::Format(e.to_string()))?;
    Ok(trace)
}

pub fn save_trace(path: impl AsRef<Path>, trace: &InversionTrace) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode_trace(trace)?)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<InversionTrace> {
    decode_trace(&fs::read(path)?)
}
