//! Versioned binary checkpoints shared by every module.
//!
//! Layout: magic `VPCSV1`, record count (u32 LE), then per tensor:
//! name length (u32 LE), name bytes, rank (u32 LE), dims (u32 LE each),
//! raw f32 little-endian data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::{AdamState, ParamStore};
use super::NumericError;

const MAGIC: &[u8; 6] = b"VPCSV1";

fn format_err(msg: impl Into<String>) -> NumericError {
    NumericError::CheckpointFormat(msg.into())
}

pub fn write_tensors(
    path: &Path,
    tensors: &[(&str, &[usize], &[f32])],
) -> Result<(), NumericError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in tensors {
            let numel: usize = shape.iter().product();
            assert_eq!(numel, data.len(), "tensor `{name}`");
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in *shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in *data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, NumericError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err(format!(
            "bad magic in {}: expected VPCSV1",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(format_err("unreasonable tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name not utf-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(format_err(format!("tensor `{name}`: rank {rank} > 8")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Save every parameter, and optimizer moments when given, into one file.
pub fn save_params(
    path: &Path,
    params: &ParamStore,
    adam: Option<&AdamState>,
) -> Result<(), NumericError> {
    let mut tensors: Vec<(String, &[usize], &[f32])> = Vec::new();
    for pid in params.ids() {
        tensors.push((params.name(pid).to_string(), params.shape(pid), params.data(pid)));
    }
    let t_data;
    if let Some(adam) = adam {
        for pid in params.ids() {
            let (m, v) = adam.moments(pid);
            tensors.push((format!("optim.m.{}", params.name(pid)), params.shape(pid), m));
            tensors.push((format!("optim.v.{}", params.name(pid)), params.shape(pid), v));
        }
        t_data = [adam.t() as f32];
        tensors.push(("optim.t".to_string(), &[1usize] as &[usize], &t_data));
    }
    let borrowed: Vec<(&str, &[usize], &[f32])> = tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), *s, *d))
        .collect();
    write_tensors(path, &borrowed)
}

/// Load parameters (and optimizer moments when requested) saved by
/// [`save_params`]. Every parameter in the store must be present with a
/// matching shape; unknown tensors in the file are ignored.
pub fn load_params(
    path: &Path,
    params: &mut ParamStore,
    adam: Option<&mut AdamState>,
) -> Result<(), NumericError> {
    let tensors = read_tensors(path)?;
    let by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f32>)> = tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();
    for pid in params.ids() {
        let name = params.name(pid).to_string();
        let (shape, data) = by_name
            .get(name.as_str())
            .ok_or_else(|| format_err(format!("missing tensor `{name}` in {}", path.display())))?;
        if shape.as_slice() != params.shape(pid) {
            return Err(format_err(format!(
                "tensor `{name}`: shape {:?} in file, {:?} expected",
                shape,
                params.shape(pid)
            )));
        }
        params.set_data(pid, (*data).clone());
    }
    if let Some(adam) = adam {
        let mut ms = Vec::with_capacity(params.len());
        let mut vs = Vec::with_capacity(params.len());
        for pid in params.ids() {
            for (prefix, dst) in [("m", &mut ms), ("v", &mut vs)] {
                let key = format!("optim.{prefix}.{}", params.name(pid));
                let (shape, data) = by_name
                    .get(key.as_str())
                    .ok_or_else(|| format_err(format!("missing tensor `{key}`")))?;
                if shape.as_slice() != params.shape(pid) {
                    return Err(format_err(format!("tensor `{key}`: bad shape {shape:?}")));
                }
                dst.push((*data).clone());
            }
        }
        let (_, t) = by_name
            .get("optim.t")
            .ok_or_else(|| format_err("missing tensor `optim.t`".to_string()))?;
        adam.restore(t[0] as u64, ms, vs);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("vpcsv-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn params_and_adam_round_trip() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = store.add("enc.b", &[3], vec![-0.5, 0.0, 0.5]);
        let mut adam = AdamState::new(&store, 0.01);
        // Take a couple of real steps so moments are nonzero.
        for _ in 0..3 {
            let mut tape = super::super::Tape::new();
            let w = tape.param(&store, a);
            let sq = tape.mul(&w, &w).unwrap();
            let l = tape.mean_all(&sq).unwrap();
            let g = tape.backward(&l).unwrap();
            adam.step(&mut store, &g).unwrap();
        }
        let path = tmp("roundtrip.ckpt");
        save_params(&path, &store, Some(&adam)).unwrap();

        let mut store2 = ParamStore::new();
        let a2 = store2.add("enc.w", &[2, 3], vec![0.0; 6]);
        let b2 = store2.add("enc.b", &[3], vec![0.0; 3]);
        let mut adam2 = AdamState::new(&store2, 0.01);
        load_params(&path, &mut store2, Some(&mut adam2)).unwrap();

        assert_eq!(store.data(a), store2.data(a2));
        assert_eq!(store.data(b), store2.data(b2));
        assert_eq!(adam.t(), adam2.t());
        assert_eq!(adam.moments(a).0, adam2.moments(a2).0);
        assert_eq!(adam.moments(a).1, adam2.moments(a2).1);
    }

    #[test]
    fn rejects_bad_magic() {
        let path = tmp("badmagic.ckpt");
        std::fs::write(&path, b"NOTCKPT000").unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_file() {
        let path = tmp("trunc.ckpt");
        write_tensors(&path, &[("w", &[4], &[1.0, 2.0, 3.0, 4.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_tensors(&path).is_err());
    }

    #[test]
    fn missing_param_is_reported_by_name() {
        let path = tmp("missing.ckpt");
        write_tensors(&path, &[("other", &[1], &[0.0])]).unwrap();
        let mut store = ParamStore::new();
        store.add("needed.w", &[1], vec![0.0]);
        let err = load_params(&path, &mut store, None).unwrap_err();
        assert!(err.to_string().contains("needed.w"), "{err}");
    }

    #[test]
    fn saves_are_byte_identical() {
        let mut store = ParamStore::new();
        store.add("w", &[2], vec![0.25, -0.75]);
        let p1 = tmp("det1.ckpt");
        let p2 = tmp("det2.ckpt");
        save_params(&p1, &store, None).unwrap();
        save_params(&p2, &store, None).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
