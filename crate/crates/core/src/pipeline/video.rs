use crate::error::{Error, Result};
use crate::numerics::io::{put_u32, write_tensor, ByteReader};
use crate::numerics::Tensor;
use std::path::Path;

/// Clip count (`u32`) followed by each clip in the tensor format.
pub fn write_video(clips: &[Tensor]) -> Result<Vec<u8>> {
    let n = u32::try_from(clips.len()).map_err(|_| Error::Size(format!("{} clips", clips.len())))?;
    let mut buf = Vec::new();
    put_u32(&mut buf, n);
    for c in clips {
        if c.rank() != 4 {
            return Err(Error::Dimension(format!("clip must be [C, T, H, W], got {:?}", c.shape())));
        }
        write_tensor(&mut buf, c)?;
    }
    Ok(buf)
}

pub fn read_video(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = ByteReader::new(bytes);
    let n = r.len()?;
    let mut clips = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.offset();
        let t = r.tensor()?;
        if t.rank() != 4 {
            return Err(Error::Corrupt { offset: at, msg: format!("clip of rank {}", t.rank()) });
        }
        clips.push(t);
    }
    if !r.is_at_end() {
        return r.corrupt("trailing bytes after the last clip");
    }
    Ok(clips)
}

pub fn save_video(path: impl AsRef<Path>, clips: &[Tensor]) -> Result<()> {
    std::fs::write(path, write_video(clips)?)?;
    Ok(())
}

pub fn load_video(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_video(&std::fs::read(path)?)
}
