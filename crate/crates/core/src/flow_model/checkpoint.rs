//! `VIPC` checkpoint files.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `VIPC` |
//! | 4     | `u32` version (1) |
//! | 4     | `u32` descriptor field count (5) |
//! | 4×5   | `u32` side, hidden, layers, kernel, num_classes |
//! | 8     | `u64` parameter count |
//! | 8×n   | `f64` parameters |

use std::io::{Read, Write};
use std::path::Path;

use super::network::{Architecture, VelocityField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VIPC";
const VERSION: u32 = 1;
const DESCRIPTOR_FIELDS: u32 = 5;

pub fn write_checkpoint<W: Write>(model: &VelocityField, mut out: W) -> Result<()> {
    let a = model.arch();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&DESCRIPTOR_FIELDS.to_le_bytes())?;
    for v in [a.side, a.hidden, a.layers, a.kernel, a.num_classes] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&(model.num_params() as u64).to_le_bytes())?;
    for p in model.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<VelocityField> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::BadMagic { expected: "VIPC" })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { expected: "VIPC" });
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let fields = read_u32(&mut input)?;
    if fields != DESCRIPTOR_FIELDS {
        return Err(Error::ShapeMismatch(format!(
            "architecture descriptor has {fields} fields, expected {DESCRIPTOR_FIELDS}"
        )));
    }
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = read_u32(&mut input)? as usize;
    }
    let arch = Architecture {
        side: d[0],
        hidden: d[1],
        layers: d[2],
        kernel: d[3],
        num_classes: d[4],
    };
    arch.validate()?;
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    let count = u64::from_le_bytes(b) as usize;
    if count != arch.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            arch.num_params()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteValues);
    }
    VelocityField::from_params(arch, params)
}

pub fn save_checkpoint(model: &VelocityField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VelocityField> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn round_trip_preserves_bits() {
        let model = VelocityField::new(Architecture::default(), &mut RngStream::new(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VIPC");
        assert_eq!(buf.len(), 4 + 4 + 4 + 20 + 8 + 8 * model.num_params());
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_inputs() {
        let model = VelocityField::new(Architecture::default(), &mut RngStream::new(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::BadVersion(9))));

        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(matches!(read_checkpoint(&buf[..2]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn missing_file() {
        let err = load_checkpoint(Path::new("/nonexistent/model.vipc")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
