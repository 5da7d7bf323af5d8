//! Binary model checkpoints. Layout (little-endian) is documented in
//! `docs/formats.md`. Values are stored as `f64`, so `f32` and `f64` models
//! both round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::config::TrainConfig;
use crate::datasets::{inventory_from_text, inventory_to_text};
use crate::encoder::{Dense, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::trainer::{transition_kind, Model};
use crate::transition::{SlotLayout, TransitionModel};
use crate::Real;

pub const MAGIC: &[u8; 8] = b"NHMMCKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.out.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn text(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        Ok(self.out.write_all(s.as_bytes())?)
    }
    fn values<T: Real>(&mut self, v: impl ExactSizeIterator<Item = T>) -> Result<()> {
        self.u64(v.len() as u64)?;
        for x in v {
            self.out.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }
    fn matrix<T: Real>(&mut self, m: &Array2<T>) -> Result<()> {
        self.u64(m.nrows() as u64)?;
        self.u64(m.ncols() as u64)?;
        self.values(m.iter().copied())
    }
}

struct Reader<'a, R> {
    input: R,
    origin: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.input.read_exact(&mut b).map_err(|_| Error::format(self.origin, "truncated checkpoint"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > 1 << 32 {
            return Err(Error::format(self.origin, format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.input.read_exact(&mut buf).map_err(|_| Error::format(self.origin, "truncated checkpoint"))?;
        String::from_utf8(buf).map_err(|_| Error::format(self.origin, "text field is not UTF-8"))
    }
    fn values<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(T::lit(f64::from_le_bytes(self.bytes()?)))).collect()
    }
    fn matrix<T: Real>(&mut self) -> Result<Array2<T>> {
        let rows = self.len()?;
        let cols = self.len()?;
        let v = self.values()?;
        Array2::from_shape_vec((rows, cols), v).map_err(|_| Error::format(self.origin, "matrix size mismatch"))
    }
}

pub fn write_checkpoint<T: Real, W: Write>(out: W, model: &Model<T>) -> Result<()> {
    let mut w = Writer { out };
    w.out.write_all(MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(model.step)?;
    w.text(&model.config.to_text())?;
    w.text(&inventory_to_text(&model.inventory))?;
    w.u64(model.encoder.config().input_dim as u64)?;
    w.u32(model.encoder.layers.len() as u32)?;
    for layer in &model.encoder.layers {
        w.matrix(&layer.weight)?;
        w.values(layer.bias.iter().copied())?;
    }
    w.values(model.tm.logits.iter().copied())?;
    match &model.tm.head {
        Some(h) => {
            w.u8(1)?;
            w.matrix(h)?;
        }
        None => w.u8(0)?,
    }
    w.values(model.prior.iter().copied())?;
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(input: R, origin: &Path) -> Result<Model<T>> {
    let mut r = Reader { input, origin };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::format(origin, "not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let config = TrainConfig::parse(&r.text()?)?;
    let inventory = inventory_from_text(&r.text()?)?;
    let input_dim = r.len()?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = r.matrix()?;
        let bias = Array1::from(r.values()?);
        layers.push(Dense { weight, bias });
    }
    let enc_cfg = EncoderConfig {
        input_dim,
        context: config.context,
        hidden: config.hidden.clone(),
        activation: config.activation,
        output_dim: inventory.len(),
        dropout: config.dropout,
    };
    let encoder = Encoder::from_layers(enc_cfg.clone(), layers)?;
    let logits = r.values()?;
    let head = match r.u8()? {
        0 => None,
        1 => Some(r.matrix()?),
        other => return Err(Error::format(origin, format!("bad head flag {other}"))),
    };
    let layout = SlotLayout::new(transition_kind(config.tm_kind, &enc_cfg), &inventory);
    let tm = TransitionModel::from_parts(layout, logits, head)?;
    let prior = r.values()?;
    if prior.len() != inventory.len() {
        return Err(Error::format(origin, "prior length does not match the inventory"));
    }
    let mut trailing = [0u8; 1];
    if r.input.read(&mut trailing)? != 0 {
        return Err(Error::format(origin, "trailing bytes after checkpoint"));
    }
    Ok(Model { inventory, config, encoder, tm, prior, step })
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes[..], path)
}
