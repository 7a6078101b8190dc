//! Binary checkpoint container for trained models.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "DRCKPT\0\0"
//! version  u32
//! kind     u32      1 = MF, 2 = MLP, 3 = fused
//! n, m, K, p        u64 each
//! count    u32      number of blocks
//! block*   name_len u32, name bytes (UTF-8), rows u64, cols u64, rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::fusion::FusionModel;
use crate::linalg::DenseMatrix;
use crate::mf::MfParams;
use crate::mlp::{Layer, MlpParams};

pub const MAGIC: &[u8; 8] = b"DRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("unknown model kind tag {0}")]
    UnknownKind(u32),
    #[error("checkpoint block {0:?} missing")]
    Missing(String),
    #[error("checkpoint block {name:?} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    Shape {
        name: String,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mf,
    Mlp,
    Fusion,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Mf => 1,
            ModelKind::Mlp => 2,
            ModelKind::Fusion => 3,
        }
    }

    fn from_tag(tag: u32) -> Result<Self, CheckpointError> {
        match tag {
            1 => Ok(ModelKind::Mf),
            2 => Ok(ModelKind::Mlp),
            3 => Ok(ModelKind::Fusion),
            t => Err(CheckpointError::UnknownKind(t)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mf => "MF",
            ModelKind::Mlp => "MLP",
            ModelKind::Fusion => "fused",
        }
    }
}

/// Header dimensions `(n, m, K, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Mf(MfParams),
    Mlp(MlpParams),
    Fusion(FusionModel),
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Mf(_) => ModelKind::Mf,
            Checkpoint::Mlp(_) => ModelKind::Mlp,
            Checkpoint::Fusion(_) => ModelKind::Fusion,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Checkpoint::Mf(p) => Dims {
                n: p.n_users(),
                m: p.n_products(),
                k: p.k(),
                p: p.p(),
            },
            Checkpoint::Mlp(p) => Dims {
                n: p.n_users(),
                m: p.n_products(),
                k: p.k(),
                p: p.p(),
            },
            Checkpoint::Fusion(f) => Dims {
                n: f.n_users(),
                m: f.n_products(),
                k: f.k(),
                p: f.p(),
            },
        }
    }

    pub fn into_mf(self) -> Result<MfParams, CheckpointError> {
        match self {
            Checkpoint::Mf(p) => Ok(p),
            other => Err(CheckpointError::Kind {
                expected: "MF",
                found: other.kind().name(),
            }),
        }
    }

    pub fn into_mlp(self) -> Result<MlpParams, CheckpointError> {
        match self {
            Checkpoint::Mlp(p) => Ok(p),
            other => Err(CheckpointError::Kind {
                expected: "MLP",
                found: other.kind().name(),
            }),
        }
    }

    pub fn into_fusion(self) -> Result<FusionModel, CheckpointError> {
        match self {
            Checkpoint::Fusion(p) => Ok(p),
            other => Err(CheckpointError::Kind {
                expected: "fused",
                found: other.kind().name(),
            }),
        }
    }

    fn blocks(&self) -> Vec<(String, DenseMatrix)> {
        match self {
            Checkpoint::Mf(p) => mf_blocks(p, ""),
            Checkpoint::Mlp(p) => mlp_blocks(p, ""),
            Checkpoint::Fusion(f) => {
                let mut out = mf_blocks(&f.mf, "mf.");
                out.extend(mlp_blocks(&f.mlp, "mlp."));
                out.push(("fusion.w_h".into(), f.w_h.clone()));
                out.push(("fusion.w_re".into(), f.w_re.clone()));
                out.push(("fusion.b_re".into(), scalar(f.b_re)));
                out.push(("fusion.gamma".into(), scalar(f.gamma)));
                out.push(("fusion.fallback_raw".into(), scalar(f.fallback_raw)));
                out
            }
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let d = self.dims();
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.kind().tag().to_le_bytes())?;
        for x in [d.n, d.m, d.k, d.p] {
            w.write_all(&(x as u64).to_le_bytes())?;
        }
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, m) in &blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = ModelKind::from_tag(read_u32(&mut r)?)?;
        let dims = Dims {
            n: read_len(&mut r)?,
            m: read_len(&mut r)?,
            k: read_len(&mut r)?,
            p: read_len(&mut r)?,
        };
        let count = read_u32(&mut r)?;
        let mut blocks = Blocks::default();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(CheckpointError::Corrupt(format!("block name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Corrupt("block name is not UTF-8".into()))?;
            let rows = read_len(&mut r)?;
            let cols = read_len(&mut r)?;
            let total = rows
                .checked_mul(cols)
                .filter(|t| *t <= 1 << 34)
                .ok_or_else(|| CheckpointError::Corrupt(format!("block {name:?} too large")))?;
            let mut data = Vec::with_capacity(total);
            let mut buf = [0u8; 8];
            for _ in 0..total {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = DenseMatrix::from_vec(rows, cols, data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            blocks.0.insert(name, m);
        }
        let ckpt = match kind {
            ModelKind::Mf => Checkpoint::Mf(blocks.mf("", &dims)?),
            ModelKind::Mlp => Checkpoint::Mlp(blocks.mlp("", &dims)?),
            ModelKind::Fusion => {
                let mf = blocks.mf("mf.", &dims)?;
                let mlp = blocks.mlp("mlp.", &dims)?;
                Checkpoint::Fusion(FusionModel {
                    mf,
                    mlp,
                    w_h: blocks.take("fusion.w_h", dims.p, dims.k + dims.p)?,
                    w_re: blocks.take("fusion.w_re", 1, dims.p)?,
                    b_re: blocks.scalar("fusion.b_re")?,
                    gamma: blocks.scalar("fusion.gamma")?,
                    fallback_raw: blocks.scalar("fusion.fallback_raw")?,
                })
            }
        };
        if !blocks.0.is_empty() {
            let extra: Vec<&String> = blocks.0.keys().collect();
            return Err(CheckpointError::Corrupt(format!(
                "unexpected blocks {extra:?}"
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn scalar(x: f64) -> DenseMatrix {
    DenseMatrix::from_vec(1, 1, vec![x]).expect("1x1")
}

fn row(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("row vector")
}

fn mf_blocks(p: &MfParams, prefix: &str) -> Vec<(String, DenseMatrix)> {
    let mut out: Vec<(String, DenseMatrix)> = [
        ("w", &p.w),
        ("z_rating", &p.z_rating),
        ("e", &p.e),
        ("z_joint", &p.z_joint),
        ("f", &p.f),
        ("w_mf1", &p.w_mf1),
        ("w_mf2", &p.w_mf2),
        ("w_h_mf", &p.w_h),
        ("w_m", &p.w_m),
    ]
    .into_iter()
    .map(|(n, m)| (format!("{prefix}{n}"), m.clone()))
    .collect();
    out.push((format!("{prefix}b_m"), scalar(p.b_m)));
    out
}

fn mlp_blocks(p: &MlpParams, prefix: &str) -> Vec<(String, DenseMatrix)> {
    let mut out: Vec<(String, DenseMatrix)> = vec![
        ("user_rating_emb".into(), p.user_rating_emb.clone()),
        ("user_rel_emb".into(), p.user_rel_emb.clone()),
        ("prod_rating_emb".into(), p.prod_rating_emb.clone()),
        ("prod_rel_emb".into(), p.prod_rel_emb.clone()),
        ("fusion_w_user".into(), p.fusion_w_user.clone()),
        ("fusion_b_user".into(), row(&p.fusion_b_user)),
        ("fusion_w_prod".into(), p.fusion_w_prod.clone()),
        ("fusion_b_prod".into(), row(&p.fusion_b_prod)),
    ];
    for (l, layer) in p.tower.iter().enumerate() {
        out.push((format!("tower.{l}.w"), layer.w.clone()));
        out.push((format!("tower.{l}.b"), row(&layer.b)));
    }
    out.push(("w_h_mlp".into(), p.w_h.clone()));
    out.push(("w_mlp".into(), p.w_out.clone()));
    out.push(("b_mlp".into(), scalar(p.b_out)));
    out.into_iter()
        .map(|(n, m)| (format!("{prefix}{n}"), m))
        .collect()
}

#[derive(Default)]
struct Blocks(BTreeMap<String, DenseMatrix>);

impl Blocks {
    fn take(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<DenseMatrix, CheckpointError> {
        let m = self.take_any(name)?;
        if m.shape() != (rows, cols) {
            return Err(CheckpointError::Shape {
                name: name.to_owned(),
                rows: m.rows(),
                cols: m.cols(),
                want_rows: rows,
                want_cols: cols,
            });
        }
        Ok(m)
    }

    fn take_any(&mut self, name: &str) -> Result<DenseMatrix, CheckpointError> {
        self.0
            .remove(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_owned()))
    }

    fn scalar(&mut self, name: &str) -> Result<f64, CheckpointError> {
        Ok(self.take(name, 1, 1)?.get(0, 0))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.take(name, 1, len)?.into_vec())
    }

    fn mf(&mut self, pre: &str, d: &Dims) -> Result<MfParams, CheckpointError> {
        Ok(MfParams {
            w: self.take(&format!("{pre}w"), d.n, d.k)?,
            z_rating: self.take(&format!("{pre}z_rating"), d.m, d.k)?,
            e: self.take(&format!("{pre}e"), d.n, d.k)?,
            z_joint: self.take(&format!("{pre}z_joint"), d.m, d.k)?,
            f: self.take(&format!("{pre}f"), d.m, d.k)?,
            w_mf1: self.take(&format!("{pre}w_mf1"), d.k, d.k)?,
            w_mf2: self.take(&format!("{pre}w_mf2"), d.k, d.k)?,
            w_h: self.take(&format!("{pre}w_h_mf"), d.k, d.p)?,
            w_m: self.take(&format!("{pre}w_m"), 1, d.p)?,
            b_m: self.scalar(&format!("{pre}b_m"))?,
        })
    }

    fn mlp(&mut self, pre: &str, d: &Dims) -> Result<MlpParams, CheckpointError> {
        let mut tower = Vec::new();
        let mut input = 2 * d.k;
        while self
            .0
            .contains_key(&format!("{pre}tower.{}.w", tower.len()))
        {
            let l = tower.len();
            let w = self.take_any(&format!("{pre}tower.{l}.w"))?;
            if w.cols() != input {
                return Err(CheckpointError::Shape {
                    name: format!("{pre}tower.{l}.w"),
                    rows: w.rows(),
                    cols: w.cols(),
                    want_rows: w.rows(),
                    want_cols: input,
                });
            }
            let b = self.vector(&format!("{pre}tower.{l}.b"), w.rows())?;
            input = w.rows();
            tower.push(Layer { w, b });
        }
        if tower.is_empty() || input != d.p {
            return Err(CheckpointError::Corrupt(format!(
                "tower does not end at p = {}",
                d.p
            )));
        }
        Ok(MlpParams {
            user_rating_emb: self.take(&format!("{pre}user_rating_emb"), d.n, d.k)?,
            user_rel_emb: self.take(&format!("{pre}user_rel_emb"), d.n, d.k)?,
            prod_rating_emb: self.take(&format!("{pre}prod_rating_emb"), d.m, d.k)?,
            prod_rel_emb: self.take(&format!("{pre}prod_rel_emb"), d.m, d.k)?,
            fusion_w_user: self.take(&format!("{pre}fusion_w_user"), d.k, d.k)?,
            fusion_b_user: self.vector(&format!("{pre}fusion_b_user"), d.k)?,
            fusion_w_prod: self.take(&format!("{pre}fusion_w_prod"), d.k, d.k)?,
            fusion_b_prod: self.vector(&format!("{pre}fusion_b_prod"), d.k)?,
            tower,
            w_h: self.take(&format!("{pre}w_h_mlp"), d.p, d.p)?,
            w_out: self.take(&format!("{pre}w_mlp"), 1, d.p)?,
            b_out: self.scalar(&format!("{pre}b_mlp"))?,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| CheckpointError::Corrupt("dimension overflows usize".into()))
}
