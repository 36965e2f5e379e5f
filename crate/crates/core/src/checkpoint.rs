//! Versioned model checkpoints (`biooss-ckpt-v1`).
//!
//! A checkpoint is one JSON document. Structure and shapes are plain JSON;
//! every numeric array is a `{shape, data}` tensor whose `data` is base64 of
//! little-endian IEEE-754 binary64 values, so a load restores bit-identical
//! weights.

use std::io::{Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Field, GridShape, PhysicalParams};
use crate::model::{Encoder, HeadMode, LayerSpec, Matrix, ModelSpec, Pooling};

pub const FORMAT: &str = "biooss-ckpt-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    shape: Vec<usize>,
    data: String,
}

impl Tensor {
    fn new(shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor { shape, data: STANDARD.encode(bytes) }
    }

    fn values(&self, what: &str) -> Result<Vec<f64>> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Format(format!("{what}: bad base64: {e}")))?;
        let want: usize = self.shape.iter().product();
        if bytes.len() != 8 * want {
            return Err(Error::Format(format!(
                "{what}: shape {:?} needs {} bytes, found {}",
                self.shape,
                8 * want,
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(m: &Matrix) -> Self {
        Tensor::new(vec![m.rows, m.cols], &m.data)
    }

    fn to_matrix(&self, what: &str) -> Result<Matrix> {
        let [r, c] = self.shape[..] else {
            return Err(Error::Format(format!("{what}: expected a 2-d tensor, got shape {:?}", self.shape)));
        };
        Matrix::from_vec(r, c, self.values(what)?)
    }

    fn vector(v: &[f64]) -> Self {
        Tensor::new(vec![v.len()], v)
    }

    fn to_vector(&self, what: &str) -> Result<Vec<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Format(format!("{what}: expected a 1-d tensor, got shape {:?}", self.shape)));
        }
        self.values(what)
    }

    fn field(f: &Field<f64>) -> Self {
        Tensor::new(vec![f.height(), f.width()], f.as_slice())
    }

    fn to_field(&self, what: &str) -> Result<Field<f64>> {
        let m = self.to_matrix(what)?;
        Field::from_vec(m.rows, m.cols, m.data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderRecord {
    w: Tensor,
    b: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    height: usize,
    width: usize,
    /// `[dx, dt]`.
    spacing: Tensor,
    bc: BoundaryCondition,
    allow_unstable: bool,
    b: Tensor,
    wz: Tensor,
    wg: Tensor,
    c: Tensor,
    d: Tensor,
    glu_w1: Tensor,
    glu_w2: Tensor,
    wave_speed: Tensor,
    kp: Tensor,
    ko: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    format: String,
    pooling: Pooling,
    head: HeadMode,
    encoder: Option<EncoderRecord>,
    layers: Vec<LayerRecord>,
    w_out: Tensor,
    b_out: Tensor,
}

fn to_record(model: &ModelSpec) -> Record {
    Record {
        format: FORMAT.into(),
        pooling: model.pooling,
        head: model.head,
        encoder: model.encoder.as_ref().map(|e| EncoderRecord { w: Tensor::matrix(&e.w), b: Tensor::vector(&e.b) }),
        layers: model
            .layers
            .iter()
            .map(|l| LayerRecord {
                height: l.shape.height,
                width: l.shape.width,
                spacing: Tensor::vector(&[l.shape.dx, l.shape.dt]),
                bc: l.bc,
                allow_unstable: l.allow_unstable,
                b: Tensor::matrix(&l.b),
                wz: Tensor::matrix(&l.wz),
                wg: Tensor::matrix(&l.wg),
                c: Tensor::matrix(&l.c),
                d: Tensor::matrix(&l.d),
                glu_w1: Tensor::matrix(&l.glu_w1),
                glu_w2: Tensor::matrix(&l.glu_w2),
                wave_speed: Tensor::field(&l.params.c),
                kp: Tensor::field(&l.params.kp),
                ko: Tensor::field(&l.params.ko),
            })
            .collect(),
        w_out: Tensor::matrix(&model.w_out),
        b_out: Tensor::vector(&model.b_out),
    }
}

fn from_record(r: Record) -> Result<ModelSpec> {
    if r.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}, expected {FORMAT:?}", r.format)));
    }
    let encoder = match r.encoder {
        Some(e) => Some(Encoder { w: e.w.to_matrix("encoder.w")?, b: e.b.to_vector("encoder.b")? }),
        None => None,
    };
    let layers = r
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let at = |name: &str| format!("layer{i}.{name}");
            let sp = l.spacing.to_vector(&at("spacing"))?;
            let [dx, dt] = sp[..] else {
                return Err(Error::Format(format!("{}: expected [dx, dt]", at("spacing"))));
            };
            Ok(LayerSpec {
                b: l.b.to_matrix(&at("B"))?,
                wz: l.wz.to_matrix(&at("Wz"))?,
                wg: l.wg.to_matrix(&at("Wg"))?,
                c: l.c.to_matrix(&at("C"))?,
                d: l.d.to_matrix(&at("D"))?,
                glu_w1: l.glu_w1.to_matrix(&at("glu_W1"))?,
                glu_w2: l.glu_w2.to_matrix(&at("glu_W2"))?,
                params: PhysicalParams {
                    c: l.wave_speed.to_field(&at("c"))?,
                    kp: l.kp.to_field(&at("kp"))?,
                    ko: l.ko.to_field(&at("ko"))?,
                },
                shape: GridShape::new(l.height, l.width, dx, dt)?,
                bc: l.bc,
                allow_unstable: l.allow_unstable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ModelSpec {
        encoder,
        layers,
        w_out: r.w_out.to_matrix("W_out")?,
        b_out: r.b_out.to_vector("b_out")?,
        pooling: r.pooling,
        head: r.head,
    };
    model.validate()?;
    Ok(model)
}

pub fn write_checkpoint<W: Write>(out: W, model: &ModelSpec) -> Result<()> {
    serde_json::to_writer_pretty(out, &to_record(model)).map_err(|e| Error::Io(e.to_string()))
}

/// Parse and validate a checkpoint.
pub fn read_checkpoint<R: Read>(input: R) -> Result<ModelSpec> {
    let r: Record = serde_json::from_reader(input).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    from_record(r)
}

pub fn save_checkpoint(path: &Path, model: &ModelSpec) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSpec> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f))
}
