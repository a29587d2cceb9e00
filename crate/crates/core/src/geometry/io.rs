use std::io::{Read, Write};
use std::path::Path;

use super::{ObjectClass, PointCloud, View};
use crate::error::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"ADLP";
pub const CLOUD_VERSION: u16 = 1;

/// Writes a cloud as little-endian binary: header, `f32` xyz triples, `u8` part ids.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(21 + n * 13);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&cloud.object_class.id().to_le_bytes());
    buf.push(cloud.view.code());
    buf.extend_from_slice(&cloud.seed.to_le_bytes());
    for p in &cloud.points {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&cloud.part_ids);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 21 || &bytes[..4] != CLOUD_MAGIC {
        return Err(bad("missing ADLP header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLOUD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let class = u16::from_le_bytes([bytes[10], bytes[11]]);
    let view = bytes[12];
    let seed = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    if bytes.len() != 21 + n * 13 {
        return Err(bad(format!(
            "expected {} bytes for {n} points, found {}",
            21 + n * 13,
            bytes.len()
        )));
    }
    let object_class =
        ObjectClass::from_id(class).ok_or_else(|| bad(format!("unknown class id {class}")))?;
    let view = View::from_code(view).ok_or_else(|| bad(format!("unknown view code {view}")))?;
    let body = &bytes[21..];
    let points = (0..n)
        .map(|i| {
            let f = |k: usize| {
                let o = (i * 3 + k) * 4;
                f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64
            };
            [f(0), f(1), f(2)]
        })
        .collect();
    let part_ids = body[n * 12..].to_vec();
    Ok(PointCloud {
        points,
        part_ids,
        object_class,
        view,
        seed,
    })
}
