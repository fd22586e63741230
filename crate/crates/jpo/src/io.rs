//! Versioned binary container for problem sets and network parameters, so
//! every method can be replayed on bit-identical data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{JpoError, Result};
use crate::net::NetParams;
use crate::problems::{Family, ProblemSet};

const MAGIC: &[u8; 4] = b"JPOC";
const VERSION: u32 = 1;
const KIND_PROBLEM_SET: u8 = 1;
const KIND_NET_PARAMS: u8 = 2;

fn family_code(f: Family) -> u8 {
    match f {
        Family::Wavepacket => 1,
        Family::Billiards => 2,
        Family::Ks => 3,
        Family::Arm => 4,
    }
}

fn family_from_code(c: u8) -> Result<Family> {
    match c {
        1 => Ok(Family::Wavepacket),
        2 => Ok(Family::Billiards),
        3 => Ok(Family::Ks),
        4 => Ok(Family::Arm),
        other => Err(JpoError::Container(format!("unknown family code {other}"))),
    }
}

fn write_header(w: &mut impl Write, kind: u8, family: u8, n: u64, seed: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind, family])?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(u8, u8, u64, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(JpoError::Container("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(JpoError::Container(format!("unsupported version {version}")));
    }
    let mut kf = [0u8; 2];
    r.read_exact(&mut kf)?;
    let mut n = [0u8; 8];
    r.read_exact(&mut n)?;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    Ok((kf[0], kf[1], u64::from_le_bytes(n), u64::from_le_bytes(seed)))
}

fn write_array(w: &mut impl Write, data: &[f64]) -> Result<()> {
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_list(w: &mut impl Write, list: &[Vec<f64>]) -> Result<()> {
    w.write_all(&(list.len() as u64).to_le_bytes())?;
    for item in list {
        write_array(w, item)?;
    }
    Ok(())
}

fn read_list(r: &mut impl Read) -> Result<Vec<Vec<f64>>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    (0..len).map(|_| read_array(r)).collect()
}

pub fn save_problem_set(set: &ProblemSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        KIND_PROBLEM_SET,
        family_code(set.family),
        set.n as u64,
        set.seed,
    )?;
    write_list(&mut w, &set.gammas)?;
    write_list(&mut w, &set.targets)?;
    match set.ground_truth() {
        Some(truth) => {
            w.write_all(&[1])?;
            write_list(&mut w, truth)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn load_problem_set(path: &Path) -> Result<ProblemSet> {
    let mut r = BufReader::new(File::open(path)?);
    let (kind, family, n, seed) = read_header(&mut r)?;
    if kind != KIND_PROBLEM_SET {
        return Err(JpoError::Container(format!("expected problem set, kind {kind}")));
    }
    let family = family_from_code(family)?;
    let gammas = read_list(&mut r)?;
    let targets = read_list(&mut r)?;
    let mut has_truth = [0u8; 1];
    r.read_exact(&mut has_truth)?;
    let truth = if has_truth[0] == 1 { Some(read_list(&mut r)?) } else { None };
    let set = ProblemSet::new(family, seed, gammas, targets, truth)?;
    if set.n != n as usize {
        return Err(JpoError::Container("header/body length mismatch".into()));
    }
    Ok(set)
}

pub fn save_net_params(params: &NetParams, seed: u64, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_NET_PARAMS, 0, params.theta.len() as u64, seed)?;
    write_array(&mut w, &params.theta)?;
    match params.norm {
        Some((m, s)) => {
            w.write_all(&[1])?;
            write_array(&mut w, &[m, s])?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn load_net_params(path: &Path) -> Result<(NetParams, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let (kind, _family, n, seed) = read_header(&mut r)?;
    if kind != KIND_NET_PARAMS {
        return Err(JpoError::Container(format!("expected net params, kind {kind}")));
    }
    let theta = read_array(&mut r)?;
    if theta.len() != n as usize {
        return Err(JpoError::Container("header/body length mismatch".into()));
    }
    let mut has_norm = [0u8; 1];
    r.read_exact(&mut has_norm)?;
    let norm = if has_norm[0] == 1 {
        let arr = read_array(&mut r)?;
        Some((arr[0], arr[1]))
    } else {
        None
    };
    Ok((NetParams { theta, norm }, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::generate;

    #[test]
    fn problem_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for fam in [Family::Wavepacket, Family::Billiards, Family::Ks, Family::Arm] {
            let set = generate(fam, 3, 42).unwrap();
            let path = dir.path().join(format!("{}.jpoc", fam.tag()));
            save_problem_set(&set, &path).unwrap();
            let loaded = load_problem_set(&path).unwrap();
            assert_eq!(loaded.family, set.family);
            assert_eq!(loaded.seed, set.seed);
            assert_eq!(loaded.gammas, set.gammas);
            assert_eq!(loaded.targets, set.targets);
            assert_eq!(
                loaded.ground_truth().map(<[Vec<f64>]>::to_vec),
                set.ground_truth().map(<[Vec<f64>]>::to_vec)
            );
        }
    }

    #[test]
    fn net_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = NetParams { theta: vec![1.5, -2.25, 0.0], norm: Some((0.5, 2.0)) };
        let path = dir.path().join("net.jpoc");
        save_net_params(&params, 7, &path).unwrap();
        let (loaded, seed) = load_net_params(&path).unwrap();
        assert_eq!(loaded.theta, params.theta);
        assert_eq!(loaded.norm, params.norm);
        assert_eq!(seed, 7);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jpoc");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(load_problem_set(&path).is_err());
    }
}
