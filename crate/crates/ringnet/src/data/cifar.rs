//! CIFAR-10 binary batch IO: consecutive 3073-byte records, one label byte
//! followed by 3072 pixel bytes (red plane, green plane, blue plane).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use super::{ImageSet, CIFAR10_CATEGORIES, IMAGE_PIXELS};

pub const RECORD_BYTES: usize = 1 + IMAGE_PIXELS;

/// Append every record of one binary batch stream to `set`.
pub fn read_records(mut reader: impl Read, set: &mut ImageSet) -> Result<usize> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "batch is {} bytes, not a multiple of the {RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        set.push(rec[0], &rec[1..])?;
    }
    Ok(n)
}

/// Load one or more CIFAR-10 binary batch files into a single image set.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageSet> {
    let mut set = ImageSet::new(CIFAR10_CATEGORIES.iter().map(|s| s.to_string()).collect())?;
    for p in paths {
        let file = File::open(p.as_ref())
            .map_err(|e| Error::Data(format!("open {}: {e}", p.as_ref().display())))?;
        read_records(BufReader::new(file), &mut set)?;
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset("no CIFAR records loaded".into()));
    }
    Ok(set)
}

/// Serialize a set back to the binary batch layout.
pub fn write_records(set: &ImageSet, mut writer: impl Write) -> Result<()> {
    for i in 0..set.len() {
        let r = set.record(i);
        writer.write_all(&[r.label])?;
        writer.write_all(r.pixels)?;
    }
    Ok(())
}

pub fn save_cifar_binary<P: AsRef<Path>>(set: &ImageSet, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write_records(set, &mut w)?;
    w.flush()?;
    Ok(())
}
