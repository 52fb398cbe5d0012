//! `VIPT` trajectory dumps.
//!
//! Layout (little-endian): magic `VIPT`, `u32` version (1), `u32` C, H, W,
//! `u32` step count T, `u32` class, then `f64` payloads in order: time grid
//! (T + 1), states ((T + 1)·C·H·W), step means (T·C·H·W), step stds (T),
//! noise draws (T·C·H·W), log-density maps (T·H·W).

use std::io::{Read, Write};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"VIPT";
const VERSION: u32 = 1;

fn put_f64s<W: Write>(out: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, mut out: W) -> Result<()> {
    let shape = traj.states[0].shape();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [shape[0], shape[1], shape[2], traj.num_steps(), traj.class] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    put_f64s(&mut out, &traj.t_grid)?;
    for s in &traj.states {
        put_f64s(&mut out, s.data())?;
    }
    for m in &traj.step_means {
        put_f64s(&mut out, m.data())?;
    }
    put_f64s(&mut out, &traj.step_std)?;
    for n in &traj.noise_draws {
        put_f64s(&mut out, n.data())?;
    }
    for l in &traj.logp_map {
        put_f64s(&mut out, l.data())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

fn read_tensors<R: Read>(r: &mut R, count: usize, shape: &[usize]) -> Result<Vec<Tensor>> {
    let n: usize = shape.iter().product();
    (0..count)
        .map(|_| Tensor::new(shape.to_vec(), read_f64s(r, n)?))
        .collect()
}

pub fn read_trajectory<R: Read>(mut input: R) -> Result<Trajectory> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::BadMagic { expected: "VIPT" })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { expected: "VIPT" });
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = read_u32(&mut input)? as usize;
    }
    let [c, h, w, steps, class] = d;
    let image = [c, h, w];
    Ok(Trajectory {
        class,
        t_grid: read_f64s(&mut input, steps + 1)?,
        states: read_tensors(&mut input, steps + 1, &image)?,
        step_means: read_tensors(&mut input, steps, &image)?,
        step_std: read_f64s(&mut input, steps)?,
        noise_draws: read_tensors(&mut input, steps, &image)?,
        logp_map: read_tensors(&mut input, steps, &[h, w])?,
    })
}
