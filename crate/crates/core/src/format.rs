//! On-disk formats.
//!
//! `FIAV` grids: `b"FIAV"`, version `u16`, then depth, height, width and
//! channel count as `u32`, followed by the row-major payload for each channel
//! in turn. Intensity grids store `f32`, masks store one `u8` per voxel; the
//! element width follows from the payload length. All integers and floats
//! are little-endian.
//!
//! `FIAP` parameters: `b"FIAP"`, version `u16`, length `u64`, then `f64`
//! values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, Mask};
use crate::model::{Layout, ModelParams};

pub const VOLUME_MAGIC: &[u8; 4] = b"FIAV";
pub const PARAMS_MAGIC: &[u8; 4] = b"FIAP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Vec<Grid<f32>>),
    Masks(Vec<Mask>),
}

fn write_header<W: Write>(w: &mut W, dims: Dims, channels: usize) -> Result<()> {
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [dims.depth, dims.height, dims.width, channels] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn same_dims<T>(grids: &[&Grid<T>]) -> Result<Dims> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Format("at least one channel is required".into()))?
        .dims();
    if let Some(g) = grids.iter().find(|g| g.dims() != first) {
        return Err(Error::shape(first, g.dims()));
    }
    Ok(first)
}

pub fn write_image<W: Write>(w: &mut W, channels: &[&Grid<f32>]) -> Result<()> {
    let dims = same_dims(channels)?;
    write_header(w, dims, channels.len())?;
    for g in channels {
        for v in g.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_masks<W: Write>(w: &mut W, channels: &[&Mask]) -> Result<()> {
    let dims = same_dims(channels)?;
    write_header(w, dims, channels.len())?;
    for g in channels {
        w.write_all(g.as_slice())?;
    }
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn read_volume<R: Read>(r: &mut R) -> Result<VolumeFile> {
    read_magic(r, VOLUME_MAGIC)?;
    let depth = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let channels = read_u32(r)? as usize;
    let dims = Dims::new(depth, height, width);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let cells = dims.len() * channels;
    if cells == 0 {
        return Err(Error::Format("empty grid".into()));
    }
    if payload.len() == cells * 4 {
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(VolumeFile::Image(
            values
                .chunks_exact(dims.len())
                .map(|c| Grid::from_vec(dims, c.to_vec()))
                .collect(),
        ))
    } else if payload.len() == cells {
        if payload.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask payload contains values other than 0/1".into()));
        }
        Ok(VolumeFile::Masks(
            payload
                .chunks_exact(dims.len())
                .map(|c| Grid::from_vec(dims, c.to_vec()))
                .collect(),
        ))
    } else {
        Err(Error::Format(format!(
            "payload of {} bytes fits neither f32 nor u8 for {channels} x {dims}",
            payload.len()
        )))
    }
}

pub fn write_params<W: Write>(w: &mut W, params: &ModelParams) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a parameter vector; its length must match `layout`.
pub fn read_params<R: Read>(r: &mut R, layout: &Layout) -> Result<ModelParams> {
    read_magic(r, PARAMS_MAGIC)?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let len = u64::from_le_bytes(b) as usize;
    if len != layout.len {
        return Err(Error::shape(format!("{} parameters", layout.len), format!("{len} parameters")));
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    Ok(ModelParams {
        values,
        layout: layout.clone(),
    })
}

/// Human-readable dump: one block per slice, `0`/`1` per voxel.
pub fn mask_to_text(mask: &Mask) -> String {
    let dims = mask.dims();
    let mut out = String::with_capacity(dims.len() + dims.depth * (dims.height + 16));
    for z in 0..dims.depth {
        if z > 0 {
            out.push('\n');
        }
        out.push_str(&format!("# slice {z}\n"));
        for row in mask.slice(z).chunks(dims.width) {
            out.extend(row.iter().map(|&v| if v != 0 { '1' } else { '0' }));
            out.push('\n');
        }
    }
    out
}

pub fn mask_from_text(text: &str) -> Result<Mask> {
    let mut slices: Vec<Vec<Vec<u8>>> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with('#') {
            slices.push(Vec::new());
        } else if !line.is_empty() {
            let row = line
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::Format(format!("unexpected character {other:?} in mask dump"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            slices
                .last_mut()
                .ok_or_else(|| Error::Format("mask rows before first slice header".into()))?
                .push(row);
        }
    }
    let height = slices.first().map_or(0, Vec::len);
    let width = slices.first().and_then(|s| s.first()).map_or(0, Vec::len);
    if slices.iter().any(|s| s.len() != height || s.iter().any(|r| r.len() != width)) {
        return Err(Error::Format("ragged mask dump".into()));
    }
    let data = slices.into_iter().flatten().flatten().collect();
    Ok(Grid::from_vec(Dims::new(text.matches("# slice").count(), height, width), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_volume, VolumeSpec};

    #[test]
    fn header_layout_is_exact() {
        let mask = Grid::from_vec(Dims::new(1, 2, 3), vec![0, 1, 0, 1, 1, 0]);
        let mut buf = Vec::new();
        write_masks(&mut buf, &[&mask]).unwrap();
        assert_eq!(&buf[..4], b"FIAV");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[14..18], &3u32.to_le_bytes());
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..], &[0, 1, 0, 1, 1, 0]);
    }

    #[test]
    fn volume_files_round_trip() {
        let v = generate_volume(&VolumeSpec::default(), 2).unwrap();
        let mut buf = Vec::new();
        write_image(&mut buf, &[&v.image]).unwrap();
        assert_eq!(read_volume(&mut buf.as_slice()).unwrap(), VolumeFile::Image(vec![v.image.clone()]));

        let mut buf = Vec::new();
        write_masks(&mut buf, &[&v.gt_mask, &v.noisy_mask, &v.working_mask]).unwrap();
        match read_volume(&mut buf.as_slice()).unwrap() {
            VolumeFile::Masks(m) => assert_eq!(m, vec![v.gt_mask.clone(), v.noisy_mask, v.working_mask]),
            other => panic!("expected masks, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mask = Mask::zeros(Dims::new(2, 4, 4));
        let mut buf = Vec::new();
        write_masks(&mut buf, &[&mask]).unwrap();
        buf.pop();
        assert!(matches!(read_volume(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(read_volume(&mut &b"NOPE\x01\x00"[..]).is_err());
    }

    #[test]
    fn params_round_trip_bitwise() {
        let layout = ModelConfig::default().layout();
        let mut p = ModelParams::zeros(layout.clone());
        for (i, v) in p.values.iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-3 + 1.0 / 3.0;
        }
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"FIAP");
        assert_eq!(buf.len(), 4 + 2 + 8 + 8 * layout.len);
        assert_eq!(read_params(&mut buf.as_slice(), &layout).unwrap(), p);

        let other = ModelConfig {
            hidden_channels: vec![4],
            ..ModelConfig::default()
        }
        .layout();
        assert!(read_params(&mut buf.as_slice(), &other).is_err());
    }

    #[test]
    fn text_dump_round_trip() {
        let v = generate_volume(&VolumeSpec::default(), 5).unwrap();
        let text = mask_to_text(&v.gt_mask);
        assert!(text.starts_with("# slice 0\n"));
        assert_eq!(mask_from_text(&text).unwrap(), v.gt_mask);
    }
}
