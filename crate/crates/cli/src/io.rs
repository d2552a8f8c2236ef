//! On-disk formats: checkpoints, activation dumps, schema-tagged CSV and run
//! manifests.
//!
//! All binary formats are little-endian. Checkpoints end in a SHA-256 of every
//! preceding byte; activation dumps have a fixed 64-byte header so row ranges
//! can be read without touching the rest of the file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tslab::model::Model;
use tslab::numerics::Matrix;
use tslab::Transformer;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSLBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ACTIVATION_MAGIC: &[u8; 8] = b"TSLBACTD";
pub const ACTIVATION_VERSION: u32 = 1;
pub const ACTIVATION_HEADER_LEN: usize = 64;
pub const CSV_SCHEMA_PREFIX: &str = "# schema: ";

const DTYPE_F32: u8 = 0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

// ----------------------------------------------------------------------------
// Checkpoints

/// Tensors other than the input embedding, output head and LoRA adapters.
pub fn is_backbone(name: &str) -> bool {
    name != "tok_embed" && name != "head" && !name.starts_with("lora.")
}

/// SHA-256 over name, shape and f32 bytes of every backbone tensor.
pub fn backbone_hash(model: &Transformer) -> String {
    let mut h = Sha256::new();
    for (name, m) in model.params.named() {
        if !is_backbone(&name) {
            continue;
        }
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u32).to_le_bytes());
        h.update((m.cols() as u32).to_le_bytes());
        for x in m.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// The stored config is `cfg` with the model's own architecture and, when
/// adapters are attached, their LoRA settings.
pub fn encode_checkpoint(model: &Transformer, cfg: &ExperimentConfig) -> Vec<u8> {
    let mut cfg = cfg.clone();
    cfg.model = model.config.clone();
    if let Some(l) = &model.params.lora {
        cfg.trainer.regime.lora = l.config.clone();
    }
    let meta = cfg.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let named = model.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::artifact(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer,
    pub config: ExperimentConfig,
}

/// Parses a checkpoint; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CliError::artifact(path, "not a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut c = Cursor { bytes: body, pos: 8, path };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::artifact(path, format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::artifact(path, "checksum mismatch"));
    }
    let meta_len = c.u32()? as usize;
    let meta = std::str::from_utf8(c.take(meta_len)?).map_err(|_| CliError::artifact(path, "meta is not utf-8"))?;
    let config: ExperimentConfig = toml::from_str(meta).map_err(|e| CliError::artifact(path, e.to_string()))?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| CliError::artifact(path, "bad tensor name"))?;
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CliError::artifact(path, format!("tensor {name}: unknown dtype {dtype}")));
        }
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| CliError::artifact(path, e.to_string()))?;
        tensors.push((name, m));
    }
    if c.pos != body.len() {
        return Err(CliError::artifact(path, "trailing bytes"));
    }
    let mut model = Model::init(config.model.clone()).map_err(|e| CliError::artifact(path, e.to_string()))?;
    if tensors.iter().any(|(n, _)| n.starts_with("lora.")) {
        model.params.attach_lora(config.trainer.regime.lora.clone(), 0.0, 0);
    }
    model.params.load_named(&tensors).map_err(|e| CliError::artifact(path, e.to_string()))?;
    Ok(Checkpoint { model, config })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}

// ----------------------------------------------------------------------------
// Activation dumps

/// Dump header: `dims` is `[items, d]` or `[items, positions, d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationHeader {
    pub dims: Vec<usize>,
}

impl ActivationHeader {
    /// Values per item.
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn items(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }
}

/// Dumps `m` (rows ordered item-major) with the given dims, whose product must
/// equal the element count.
pub fn encode_activations(m: &Matrix<f64>, dims: &[usize]) -> Vec<u8> {
    assert!((2..=3).contains(&dims.len()), "dump dims must be 2 or 3, got {dims:?}");
    assert_eq!(dims.iter().product::<usize>(), m.data().len(), "dims {dims:?} vs {:?}", m.shape());
    assert_eq!(*dims.last().unwrap(), m.cols());
    let mut out = Vec::with_capacity(ACTIVATION_HEADER_LEN + m.data().len() * 4);
    out.extend_from_slice(ACTIVATION_MAGIC);
    out.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    out.extend_from_slice(&(DTYPE_F32 as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.resize(ACTIVATION_HEADER_LEN, 0);
    for &x in m.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn parse_activation_header(h: &[u8], path: &Path) -> Result<ActivationHeader> {
    if h.len() < ACTIVATION_HEADER_LEN || &h[..8] != ACTIVATION_MAGIC {
        return Err(CliError::artifact(path, "not an activation dump"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().expect("4 bytes"));
    let u64_at = |i: usize| u64::from_le_bytes(h[i..i + 8].try_into().expect("8 bytes")) as usize;
    let version = u32_at(8);
    if version != ACTIVATION_VERSION {
        return Err(CliError::artifact(path, format!("activation version {version}, expected {ACTIVATION_VERSION}")));
    }
    if u32_at(12) != DTYPE_F32 as u32 {
        return Err(CliError::artifact(path, "unknown activation dtype"));
    }
    let ndim = u32_at(16) as usize;
    if !(2..=3).contains(&ndim) {
        return Err(CliError::artifact(path, format!("unsupported rank {ndim}")));
    }
    Ok(ActivationHeader { dims: (0..ndim).map(|i| u64_at(24 + 8 * i)).collect() })
}

pub fn read_activation_header(path: &Path) -> Result<ActivationHeader> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = [0u8; ACTIVATION_HEADER_LEN];
    f.read_exact(&mut h).map_err(|_| CliError::artifact(path, "truncated header"))?;
    let header = parse_activation_header(&h, path)?;
    let body = f.metadata().map_err(|e| CliError::io(path, e))?.len() as usize - ACTIVATION_HEADER_LEN;
    if body != header.dims.iter().product::<usize>() * 4 {
        return Err(CliError::artifact(path, format!("body of {body} bytes does not match dims {:?}", header.dims)));
    }
    Ok(header)
}

/// Items `start..start + count` as a `(count · positions) × d` matrix, read
/// without loading the rest of the file.
pub fn read_activation_items(path: &Path, start: usize, count: usize) -> Result<Matrix<f64>> {
    let header = read_activation_header(path)?;
    if start + count > header.items() {
        return Err(CliError::artifact(path, format!("items {start}..{} exceed {}", start + count, header.items())));
    }
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let offset = ACTIVATION_HEADER_LEN + start * header.item_len() * 4;
    f.seek(SeekFrom::Start(offset as u64)).map_err(|e| CliError::io(path, e))?;
    let mut raw = vec![0u8; count * header.item_len() * 4];
    f.read_exact(&mut raw).map_err(|_| CliError::artifact(path, "truncated body"))?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let cols = header.cols();
    Matrix::new(count * header.item_len() / cols, cols, data).map_err(|e| CliError::artifact(path, e.to_string()))
}

pub fn read_activations(path: &Path) -> Result<Matrix<f64>> {
    let header = read_activation_header(path)?;
    read_activation_items(path, 0, header.items())
}

// ----------------------------------------------------------------------------
// CSV

/// A CSV file with a `# schema: name` comment line above the header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: &str, header: &[&str]) -> Self {
        Self { schema: schema.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width for {}", self.schema);
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CSV_SCHEMA_PREFIX}{}\n", self.schema).into_bytes();
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.flush().expect("in-memory write");
        drop(w);
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let first = text.lines().next().unwrap_or("");
        let schema = first
            .strip_prefix(CSV_SCHEMA_PREFIX)
            .ok_or_else(|| CliError::artifact(path, "missing schema line"))?
            .trim()
            .to_string();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| CliError::artifact(path, e.to_string()))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::artifact(path, e.to_string()))?;
        Ok(Self { schema, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "---".into(), fmt_f64)
}

// ----------------------------------------------------------------------------
// Run directories and manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub checkpoint_format: u32,
    pub activation_format: u32,
    pub seed: u64,
    pub config_sha256: String,
    /// Role-qualified input name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub backbone_sha256: BTreeMap<String, String>,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `<root>/<name>` and writes the resolved config into it.
    pub fn create(cfg: &ExperimentConfig, name: &str, command: &str) -> Result<Self> {
        let path = cfg.output_root().join(name);
        std::fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let toml = cfg.to_toml();
        let mut run = Self {
            path,
            manifest: Manifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                checkpoint_format: CHECKPOINT_VERSION,
                activation_format: ACTIVATION_VERSION,
                seed: cfg.seed,
                config_sha256: sha256_hex(toml.as_bytes()),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                backbone_sha256: BTreeMap::new(),
            },
        };
        run.write("config.toml", toml.as_bytes())?;
        Ok(run)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(name);
        write_bytes(&p, bytes)?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(p)
    }

    pub fn write_csv(&mut self, name: &str, table: &CsvTable) -> Result<PathBuf> {
        self.write(name, &table.to_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("json serializes");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_checkpoint(&mut self, name: &str, model: &Transformer, cfg: &ExperimentConfig) -> Result<PathBuf> {
        self.manifest.backbone_sha256.insert(name.into(), backbone_hash(model));
        self.write(name, &encode_checkpoint(model, cfg))
    }

    /// Reads an input file and records its hash under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.manifest.inputs.insert(role.into(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn input_checkpoint(&mut self, role: &str, path: &Path) -> Result<Transformer> {
        let bytes = self.input(role, path)?;
        let ckpt = decode_checkpoint(&bytes, path)?;
        self.manifest.backbone_sha256.insert(role.into(), backbone_hash(&ckpt.model));
        Ok(ckpt.model)
    }

    pub fn input_csv(&mut self, role: &str, path: &Path) -> Result<CsvTable> {
        let bytes = self.input(role, path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::artifact(path, "not utf-8"))?;
        CsvTable::parse(&text, path)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn finish(self) -> Result<Manifest> {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("json serializes");
        s.push('\n');
        write_bytes(&self.path.join("manifest.json"), s.as_bytes())?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tslab::model::ModelConfig;

    fn tiny() -> Transformer {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 16, vocab_size: 9, max_positions: 8, ..ModelConfig::default() };
        Model::init(cfg).unwrap()
    }

    fn enc(m: &Transformer) -> Vec<u8> {
        encode_checkpoint(m, &ExperimentConfig::default())
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let p = Path::new("x.ckpt");
        let mut bytes = enc(&tiny());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes, p), Err(CliError::Artifact { .. })));
        let mut bytes = enc(&tiny());
        bytes[8] = 9;
        let e = decode_checkpoint(&bytes, p).unwrap_err();
        assert!(e.to_string().contains("version 9"), "{e}");
        assert_eq!(e.exit_code(), crate::error::EXIT_ARTIFACT);
    }

    #[test]
    fn csv_keeps_schema_line() {
        let mut t = CsvTable::new("demo/v1", &["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        let bytes = t.to_bytes();
        assert!(bytes.starts_with(b"# schema: demo/v1\na,b\n"));
        assert_eq!(CsvTable::parse(std::str::from_utf8(&bytes).unwrap(), Path::new("t")).unwrap(), t);
    }

    #[test]
    fn activation_header_is_64_bytes() {
        let m = Matrix::from_fn(6, 5, |i, j| (i * 5 + j) as f64);
        let bytes = encode_activations(&m, &[3, 2, 5]);
        assert_eq!(bytes.len(), 64 + 30 * 4);
        let h = parse_activation_header(&bytes, Path::new("a")).unwrap();
        assert_eq!(h.dims, vec![3, 2, 5]);
        assert_eq!((h.items(), h.item_len(), h.cols()), (3, 10, 5));
    }

    #[test]
    fn lora_checkpoint_round_trips() {
        let mut m = tiny();
        m.params.attach_lora(tslab::model::LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }, 0.5, 3);
        for (_, t) in m.params.named_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += i as f32 * 1e-3);
        }
        let back = decode_checkpoint(&enc(&m), Path::new("x")).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.config.trainer.regime.lora.rank, 2);
    }
}
