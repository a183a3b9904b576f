//! Preprocessed training-pair cache: one small binary file per pair plus a
//! text index manifest (one record per line: case id, phase, slice,
//! file path).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::volume::{Phase, TrainingPair};

const PAIR_MAGIC: &[u8; 4] = b"CSPR";
const PAIR_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "index.tsv";

fn write_pair(path: &Path, pair: &TrainingPair) -> Result<()> {
    let (h, w) = pair.image.dim();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(PAIR_MAGIC)?;
    out.write_all(&PAIR_VERSION.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    let labels = pair.label.as_standard_layout();
    out.write_all(labels.as_slice().expect("standard layout"))?;
    let image = pair.image.as_standard_layout();
    for &v in image.as_slice().expect("standard layout") {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_pair(path: &Path, case_id: String, phase: Phase, slice_index: usize) -> Result<TrainingPair> {
    let mut file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut head = [0u8; 16];
    file.read_exact(&mut head)?;
    if &head[0..4] != PAIR_MAGIC {
        return Err(Error::msg(format!("{}: not a pair cache file", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != PAIR_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: PAIR_VERSION,
        });
    }
    let h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut labels = vec![0u8; h * w];
    file.read_exact(&mut labels)?;
    let mut raw = vec![0u8; h * w * 8];
    file.read_exact(&mut raw)?;
    let image: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TrainingPair {
        image: Array2::from_shape_vec((h, w), image).expect("shape"),
        label: Array2::from_shape_vec((h, w), labels).expect("shape"),
        case_id,
        phase,
        slice_index,
    })
}

/// Write all pairs into `dir` and produce the manifest.
pub fn write_cache(dir: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("pair_{i:06}.csp");
        write_pair(&dir.join(&name), pair)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            pair.case_id, pair.phase, pair.slice_index, name
        ));
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Load a cache directory in manifest order.
pub fn read_cache(dir: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|_| Error::MissingFile(manifest_path.clone()))?;
    let mut pairs = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::msg(format!(
                "{}:{}: expected 4 tab-separated fields",
                manifest_path.display(),
                lineno + 1
            )));
        }
        let phase: Phase = fields[1].parse()?;
        let slice_index: usize = fields[2]
            .parse()
            .map_err(|_| Error::msg(format!("bad slice index {:?}", fields[2])))?;
        pairs.push(read_pair(
            &dir.join(fields[3]),
            fields[0].to_string(),
            phase,
            slice_index,
        )?);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "cache manifest {} lists no pairs",
            manifest_path.display()
        )));
    }
    Ok(pairs)
}
