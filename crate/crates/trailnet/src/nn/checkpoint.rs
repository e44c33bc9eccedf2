//! Model checkpoint container (magic `FTNN`).
//!
//! Layout, all little-endian: magic, version u32, image size u32, then the
//! ten tensors in `TENSOR_NAMES` order, each as name length u32 + name
//! bytes, rank u32, extents u32 each, f32 values. Values are stored f32;
//! reading therefore rounds in-memory f64 parameters once, after which
//! write/read cycles are byte-stable.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{tensor_shapes, ModelParams, NnError, Tensor, TENSOR_NAMES};

pub const FTNN_MAGIC: &[u8; 4] = b"FTNN";
pub const FTNN_VERSION: u32 = 1;

pub fn write_ftnn(params: &ModelParams, path: &Path) -> Result<(), NnError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FTNN_MAGIC)?;
    w.write_all(&FTNN_VERSION.to_le_bytes())?;
    w.write_all(&(params.image_size as u32).to_le_bytes())?;
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for e in &t.shape {
            w.write_all(&(*e as u32).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), NnError> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                NnError::Format { offset: at, what: format!("unexpected end of file in {what}") }
            } else {
                NnError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_ftnn(path: &Path) -> Result<ModelParams, NnError> {
    let file = std::fs::File::open(path)?;
    let mut r = CountingReader { inner: std::io::BufReader::new(file), offset: 0 };

    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != FTNN_MAGIC {
        return Err(NnError::Format { offset: 0, what: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != FTNN_VERSION {
        return Err(NnError::Format { offset: 4, what: format!("unsupported version {version}") });
    }
    let image_size = r.u32("image size")? as usize;
    if image_size < 16 || image_size % 8 != 0 {
        return Err(NnError::Format {
            offset: 8,
            what: format!("invalid image size {image_size}"),
        });
    }

    let expected = tensor_shapes(image_size);
    let mut tensors = Vec::with_capacity(10);
    for (name, (shape, _)) in TENSOR_NAMES.iter().zip(expected.iter()) {
        let name_at = r.offset;
        let name_len = r.u32("tensor name length")? as usize;
        if name_len > 64 {
            return Err(NnError::Format {
                offset: name_at,
                what: format!("tensor name length {name_len} out of range"),
            });
        }
        let mut name_buf = vec![0u8; name_len];
        r.fill(&mut name_buf, "tensor name")?;
        if name_buf != name.as_bytes() {
            return Err(NnError::Format {
                offset: name_at,
                what: format!(
                    "expected tensor {name:?}, found {:?}",
                    String::from_utf8_lossy(&name_buf)
                ),
            });
        }
        let rank_at = r.offset;
        let rank = r.u32("rank")? as usize;
        if rank != shape.len() {
            return Err(NnError::Format {
                offset: rank_at,
                what: format!("tensor {name}: rank {rank}, expected {}", shape.len()),
            });
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u32("extent")? as usize);
        }
        if extents != *shape {
            return Err(NnError::Format {
                offset: rank_at,
                what: format!("tensor {name}: shape {extents:?}, expected {shape:?}"),
            });
        }
        let count: usize = extents.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.fill(&mut bytes, "tensor values")?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.push(Tensor { shape: extents, data });
    }

    let mut it = tensors.into_iter();
    Ok(ModelParams {
        image_size,
        conv1_w: it.next().unwrap(),
        conv1_b: it.next().unwrap(),
        conv2_w: it.next().unwrap(),
        conv2_b: it.next().unwrap(),
        conv3_w: it.next().unwrap(),
        conv3_b: it.next().unwrap(),
        fc_feat_w: it.next().unwrap(),
        fc_feat_b: it.next().unwrap(),
        fc_out_w: it.next().unwrap(),
        fc_out_b: it.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn write_read_write_is_byte_identical() {
        let p = init_params(13, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ftnn");
        let b = dir.path().join("b.ftnn");
        write_ftnn(&p, &a).unwrap();
        let back = read_ftnn(&a).unwrap();
        write_ftnn(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn read_rounds_to_f32_exactly_once() {
        let mut p = init_params(13, 16).unwrap();
        p.fc_out_b.data[1] = 0.1; // not representable in f32
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ftnn");
        write_ftnn(&p, &path).unwrap();
        let back = read_ftnn(&path).unwrap();
        assert_eq!(back.image_size, 16);
        assert_eq!(back.fc_out_b.data[1], f64::from(0.1f32));
        for (a, b) in p.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        // A second cycle is the identity.
        let path2 = dir.path().join("p2.ftnn");
        write_ftnn(&back, &path2).unwrap();
        let twice = read_ftnn(&path2).unwrap();
        assert_eq!(back, twice);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let p = init_params(13, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ftnn");
        write_ftnn(&p, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match read_ftnn(&path) {
            Err(NnError::Format { offset: 0, .. }) => {}
            other => panic!("expected magic failure, got {other:?}"),
        }

        // First tensor name starts after magic+version+image size = 12 bytes.
        let mut bad = good.clone();
        bad[16] = b'X'; // name bytes follow the u32 length at offset 12
        std::fs::write(&path, &bad).unwrap();
        match read_ftnn(&path) {
            Err(NnError::Format { offset: 12, .. }) => {}
            other => panic!("expected name failure, got {other:?}"),
        }

        let mut bad = good.clone();
        bad.truncate(good.len() - 2);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_ftnn(&path), Err(NnError::Format { .. })));
    }

    #[test]
    fn image_size_must_be_valid() {
        let p = init_params(13, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ftnn");
        write_ftnn(&p, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&20u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_ftnn(&path) {
            Err(NnError::Format { offset: 8, .. }) => {}
            other => panic!("expected image-size failure, got {other:?}"),
        }
    }
}
