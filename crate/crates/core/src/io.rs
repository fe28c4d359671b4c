//! On-disk formats: the binary tensor file, multi-tensor checkpoints with
//! a plain-text manifest, and the CSV number formatting shared by every
//! emitted table.
//!
//! Tensor file layout: magic "FERA", u32 version = 1, u8 dtype
//! (0 = f32, 1 = f64), u32 ndim, ndim x u32 dims, then the little-endian
//! row-major payload.

use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::real::Real;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"FERA";
pub const TENSOR_VERSION: u32 = 1;

/// Payload of a stored tensor in its native precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Convert to the requested precision (f64 -> f32 rounds).
    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of_f64(x)).collect(),
        }
    }
}

/// Serialize one tensor record into a writer; returns bytes written.
pub fn write_tensor<W: Write, T: Real>(w: &mut W, dims: &[usize], data: &[T]) -> Result<usize> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(FeraError::Shape(format!(
            "tensor data length {} != dims {:?}",
            data.len(),
            dims
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE])?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let elem = if T::DTYPE == 0 { 4 } else { 8 };
    for v in data {
        if T::DTYPE == 0 {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        } else {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(4 + 4 + 1 + 4 + 4 * dims.len() + elem * data.len())
}

/// Deserialize one tensor record from a reader.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, TensorData)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(FeraError::Parse("bad tensor magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(FeraError::Parse(format!("unsupported version {version}")));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let dtype = b1[0];
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut b4)?;
        dims.push(u32::from_le_bytes(b4) as usize);
    }
    let numel: usize = dims.iter().product();
    let data = match dtype {
        0 => {
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut b4)?;
                v.push(f32::from_le_bytes(b4));
            }
            TensorData::F32(v)
        }
        1 => {
            let mut b8 = [0u8; 8];
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut b8)?;
                v.push(f64::from_le_bytes(b8));
            }
            TensorData::F64(v)
        }
        other => return Err(FeraError::Parse(format!("unknown dtype {other}"))),
    };
    Ok((dims, data))
}

/// Write a field to a standalone tensor file.
pub fn save_field<T: Real>(path: &Path, f: &Field<T>) -> Result<()> {
    let (c, h, w) = f.shape();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut file, &[c, h, w], f.data())?;
    Ok(())
}

/// Read a field from a standalone tensor file (any stored precision).
pub fn load_field<T: Real>(path: &Path) -> Result<Field<T>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, data) = read_tensor(&mut file)?;
    if dims.len() != 3 {
        return Err(FeraError::Parse(format!(
            "expected a 3-d field, got dims {dims:?}"
        )));
    }
    Field::from_vec(dims[0], dims[1], dims[2], data.to_vec())
}

/// Streaming writer for a multi-tensor checkpoint: tensor records are
/// concatenated into one file, and `<path>.manifest` lists
/// `name dims byte_offset` per record.
pub struct CheckpointWriter {
    file: std::io::BufWriter<std::fs::File>,
    manifest_path: std::path::PathBuf,
    entries: Vec<(String, Vec<usize>, usize)>,
    offset: usize,
}

impl CheckpointWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
            manifest_path: manifest_path(path),
            entries: Vec::new(),
            offset: 0,
        })
    }

    pub fn add<T: Real>(&mut self, name: &str, dims: &[usize], data: &[T]) -> Result<()> {
        if name.contains(char::is_whitespace) {
            return Err(FeraError::Parse(format!(
                "tensor name `{name}` may not contain whitespace"
            )));
        }
        let start = self.offset;
        self.offset += write_tensor(&mut self.file, dims, data)?;
        self.entries.push((name.to_string(), dims.to_vec(), start));
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        let mut m = String::new();
        for (name, dims, off) in &self.entries {
            let dims_s = dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            m.push_str(&format!("{name} {dims_s} {off}\n"));
        }
        std::fs::write(&self.manifest_path, m)?;
        Ok(())
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    std::path::PathBuf::from(p)
}

/// A fully loaded checkpoint, keyed by tensor name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    tensors: BTreeMap<String, (Vec<usize>, TensorData)>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(manifest_path(path))?;
        let bytes = std::fs::read(path)?;
        let mut tensors = BTreeMap::new();
        for line in manifest.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(FeraError::Parse(format!("bad manifest line `{line}`")));
            }
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| FeraError::Parse(format!("bad offset in `{line}`")))?;
            if offset >= bytes.len() {
                return Err(FeraError::Parse(format!("offset {offset} out of range")));
            }
            let mut cursor = &bytes[offset..];
            let (dims, data) = read_tensor(&mut cursor)?;
            let declared: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| FeraError::Parse(format!("bad dims in `{line}`"))))
                .collect::<Result<_>>()?;
            if declared != dims {
                return Err(FeraError::Parse(format!(
                    "manifest dims {declared:?} disagree with record dims {dims:?} for {}",
                    parts[0]
                )));
            }
            tensors.insert(parts[0].to_string(), (dims, data));
        }
        Ok(Self { tensors })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let (dims, data) = self
            .tensors
            .get(name)
            .ok_or_else(|| FeraError::Lookup(format!("checkpoint has no tensor `{name}`")))?;
        Ok((dims.clone(), data.to_vec()))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let (dims, data) = self.get::<f64>(name)?;
        if dims.iter().product::<usize>() != 1 {
            return Err(FeraError::Parse(format!("tensor `{name}` is not a scalar")));
        }
        Ok(data[0])
    }
}

/// Write a model checkpoint: base denoiser layers, optional expert factors
/// under `expert{m}/layer{id}/...`, optional router, plus scalar metadata.
pub fn save_model(
    path: &Path,
    denoiser: &crate::diffusion::DenoiserParams<f32>,
    experts: Option<&crate::adapters::ExpertBank<f32>>,
    router: Option<&crate::routing::RouterParams<f32>>,
) -> Result<()> {
    use crate::diffusion::CONV_K;
    let mut w = CheckpointWriter::create(path)?;
    for (i, l) in denoiser.layers.iter().enumerate() {
        w.add(
            &format!("base/layer{i}/weight"),
            &[l.cout, l.cin, CONV_K, CONV_K],
            &l.weight,
        )?;
        w.add(&format!("base/layer{i}/bias"), &[l.cout], &l.bias)?;
        w.add(
            &format!("base/layer{i}/proj"),
            &[l.cout, denoiser.config.emb_dim],
            &l.proj,
        )?;
    }
    if let Some(bank) = experts {
        w.add::<f64>("meta/lora_scale", &[1], &[bank.scale()])?;
        for (mi, ex) in bank.experts.iter().enumerate() {
            for (li, layer) in ex.layers.iter().enumerate() {
                let shape = bank.attachment[li];
                w.add(
                    &format!("expert{mi}/layer{}/down", shape.id),
                    &[ex.rank, shape.in_features],
                    &layer.down,
                )?;
                w.add(
                    &format!("expert{mi}/layer{}/up", shape.id),
                    &[shape.out_features, ex.rank],
                    &layer.up,
                )?;
            }
        }
    }
    if let Some(r) = router {
        w.add::<f64>("meta/tau", &[1], &[r.tau])?;
        w.add("router/w1", &[r.hidden, r.n_inputs], &r.w1)?;
        w.add("router/b1", &[r.hidden], &r.b1)?;
        w.add("router/w2", &[r.m, r.hidden], &r.w2)?;
        w.add("router/b2", &[r.m], &r.b2)?;
    }
    w.finish()
}

/// Rebuild the denoiser from a checkpoint; the config is recovered from
/// the stored tensor shapes.
pub fn load_denoiser(ck: &Checkpoint) -> Result<crate::diffusion::DenoiserParams<f32>> {
    use crate::diffusion::{ConvLayer, DenoiserConfig, DenoiserParams, N_LAYERS};
    let mut layers = Vec::with_capacity(N_LAYERS);
    let mut emb_dim = 0;
    for i in 0..N_LAYERS {
        let (wd, weight) = ck.get::<f32>(&format!("base/layer{i}/weight"))?;
        let (_, bias) = ck.get::<f32>(&format!("base/layer{i}/bias"))?;
        let (pd, proj) = ck.get::<f32>(&format!("base/layer{i}/proj"))?;
        if wd.len() != 4 {
            return Err(FeraError::Parse(format!(
                "layer {i} weight dims {wd:?} are not 4-d"
            )));
        }
        emb_dim = pd[1];
        layers.push(ConvLayer {
            cin: wd[1],
            cout: wd[0],
            weight,
            bias,
            proj,
        });
    }
    let config = DenoiserConfig {
        channels: layers[0].cin,
        hidden: layers[0].cout,
        emb_dim,
    };
    Ok(DenoiserParams { config, layers })
}

/// Rebuild the expert bank (if the checkpoint has one) against the given
/// attachment, which must match the stored factor shapes.
pub fn load_experts(
    ck: &Checkpoint,
    attachment: &[crate::adapters::LayerShape],
) -> Result<Option<crate::adapters::ExpertBank<f32>>> {
    use crate::adapters::{ExpertBank, LoraExpert, LoraLayer};
    if !ck.contains("expert0/layer0/down") {
        return Ok(None);
    }
    let scale = ck.get_scalar("meta/lora_scale")?;
    let mut experts = Vec::new();
    let mut mi = 0;
    while ck.contains(&format!("expert{mi}/layer0/down")) {
        let mut layers = Vec::new();
        let mut rank = 0;
        for shape in attachment {
            let (dd, down) = ck.get::<f32>(&format!("expert{mi}/layer{}/down", shape.id))?;
            let (ud, up) = ck.get::<f32>(&format!("expert{mi}/layer{}/up", shape.id))?;
            if dd[1] != shape.in_features || ud[0] != shape.out_features {
                return Err(FeraError::Parse(format!(
                    "expert {mi} layer {} factor shapes {dd:?}/{ud:?} do not match attachment",
                    shape.id
                )));
            }
            rank = dd[0];
            layers.push(LoraLayer { down, up });
        }
        experts.push(LoraExpert {
            rank,
            scale,
            layers,
        });
        mi += 1;
    }
    Ok(Some(ExpertBank {
        attachment: attachment.to_vec(),
        experts,
    }))
}

/// Rebuild the router (if the checkpoint has one).
pub fn load_router(ck: &Checkpoint) -> Result<Option<crate::routing::RouterParams<f32>>> {
    use crate::routing::RouterParams;
    if !ck.contains("router/w1") {
        return Ok(None);
    }
    let tau = ck.get_scalar("meta/tau")?;
    let (w1d, w1) = ck.get::<f32>("router/w1")?;
    let (_, b1) = ck.get::<f32>("router/b1")?;
    let (w2d, w2) = ck.get::<f32>("router/w2")?;
    let (_, b2) = ck.get::<f32>("router/b2")?;
    Ok(Some(RouterParams {
        n_inputs: w1d[1],
        hidden: w1d[0],
        m: w2d[0],
        w1,
        b1,
        w2,
        b2,
        tau,
    }))
}

/// Format a number with 9 significant digits, as every emitted CSV does.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{x:.8e}")
}

/// Minimal CSV builder: comma-separated, LF line endings, header mandatory.
pub struct Csv {
    buf: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self {
            buf,
            cols: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.cols, "csv row arity");
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}
