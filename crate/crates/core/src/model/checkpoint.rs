//! Checkpoint file: magic, version, config echo, then named parameter
//! tensors as little-endian f32 with dimension prefixes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ahbs::AhbsParams;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::VisitParams;

const MAGIC: &[u8; 8] = b"ABMAMBA\0";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32, path: &str) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn collect_tensors(model: &mut ModelParams, ahbs: &mut AhbsParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut push = |name: String, t: crate::nn::TensorMut| {
        out.push((name, t.shape(), t.iter().copied().collect::<Vec<f64>>()));
    };
    model.visit_mut("model", &mut push);
    ahbs.visit_mut("ahbs", &mut push);
    out
}

/// Writes model + projector parameters with a config echo for provenance.
pub fn save_checkpoint(path: &Path, config_echo: &str, model: &ModelParams, ahbs: &AhbsParams) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(&p, e))?;
    write_u32(&mut w, VERSION, &p)?;
    let echo = config_echo.as_bytes();
    write_u32(&mut w, echo.len() as u32, &p)?;
    w.write_all(echo).map_err(|e| Error::io(&p, e))?;

    let mut model = model.clone();
    let mut ahbs = ahbs.clone();
    let tensors = collect_tensors(&mut model, &mut ahbs);
    write_u32(&mut w, tensors.len() as u32, &p)?;
    for (name, shape, data) in tensors {
        write_u32(&mut w, name.len() as u32, &p)?;
        w.write_all(name.as_bytes()).map_err(|e| Error::io(&p, e))?;
        write_u32(&mut w, shape.len() as u32, &p)?;
        for dim in &shape {
            write_u32(&mut w, *dim as u32, &p)?;
        }
        for v in data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

/// Loads a checkpoint into pre-shaped parameter structs and returns the
/// stored config echo. Shapes must match the provided structs exactly.
pub fn load_checkpoint(path: &Path, model: &mut ModelParams, ahbs: &mut AhbsParams) -> Result<String> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{p}: not a checkpoint file (bad magic)")));
    }
    let version = read_u32(&mut r, &p)?;
    if version != VERSION {
        return Err(Error::Data(format!("{p}: unsupported checkpoint version {version}")));
    }
    let echo_len = read_u32(&mut r, &p)? as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo).map_err(|e| Error::io(&p, e))?;
    let echo = String::from_utf8(echo).map_err(|_| Error::Data(format!("{p}: config echo is not UTF-8")))?;

    let count = read_u32(&mut r, &p)? as usize;
    let mut stored = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, &p)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(&p, e))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data(format!("{p}: tensor name is not UTF-8")))?;
        let ndim = read_u32(&mut r, &p)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, &p)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|e| Error::io(&p, e))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        stored.insert(name, (shape, data));
    }

    let mut err = None;
    let mut apply = |name: String, mut t: crate::nn::TensorMut| {
        if err.is_some() {
            return;
        }
        match stored.get(&name) {
            Some((shape, data)) if *shape == t.shape() => {
                let mut it = data.iter().copied();
                t.fill_from(&mut it);
            }
            Some((shape, _)) => {
                err = Some(Error::Data(format!(
                    "{p}: tensor {name} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            None => err = Some(Error::Data(format!("{p}: missing tensor {name}"))),
        }
    };
    model.visit_mut("model", &mut apply);
    ahbs.visit_mut("ahbs", &mut apply);
    if let Some(e) = err {
        return Err(e);
    }
    Ok(echo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahbs::AhbsConfig;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mcfg = ModelConfig {
            vocab: 8,
            layers: 1,
            d: 4,
            expand: 2,
            conv_width: 3,
            state_dim: 4,
        };
        let acfg = AhbsConfig {
            pathways: 2,
            d_model: 4,
            state_dim: 3,
            ..AhbsConfig::default()
        };
        let model = ModelParams::init(&mcfg, &mut rng);
        let ahbs = AhbsParams::init(&acfg, 6, &mut rng);

        let dir = std::env::temp_dir().join("abmamba_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save_checkpoint(&path, "key = value", &model, &ahbs).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let mut model2 = ModelParams::init(&mcfg, &mut rng2);
        let mut ahbs2 = AhbsParams::init(&acfg, 6, &mut rng2);
        let echo = load_checkpoint(&path, &mut model2, &mut ahbs2).unwrap();
        assert_eq!(echo, "key = value");
        for (a, b) in model.embed.iter().zip(model2.embed.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, *b as f32 as f64); // values pass through f32
        }

        // Shape mismatch is a data error.
        let mcfg_big = ModelConfig { d: 8, ..mcfg };
        let mut model3 = ModelParams::init(&mcfg_big, &mut rng2);
        assert!(matches!(
            load_checkpoint(&path, &mut model3, &mut ahbs2),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("abmamba_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mcfg = ModelConfig {
            vocab: 8,
            layers: 1,
            d: 4,
            expand: 2,
            conv_width: 3,
            state_dim: 4,
        };
        let mut model = ModelParams::init(&mcfg, &mut rng);
        let mut ahbs = AhbsParams::init(&AhbsConfig { d_model: 4, ..Default::default() }, 6, &mut rng);
        assert!(matches!(
            load_checkpoint(&path, &mut model, &mut ahbs),
            Err(Error::Data(_))
        ));
    }
}
