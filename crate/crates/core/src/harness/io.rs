//! Binary persistence.
//!
//! Two little-endian formats share the same framing rules:
//!
//! * `COIT` tensor container: magic, version `u32`, kind string, JSON
//!   metadata string, then named `rows×cols` f64 tensors. Used for network
//!   checkpoints, feature sequences, token stacks and dataset samples.
//! * `COIF` quantizer checkpoint: magic, version `u32`, `Q`, `K`, `H` as `u32`,
//!   dtype tag `u8` (0 = f64), then per layer the row-major `K×H` codebook
//!   and `K` usage counts, then the decoder and a JSON config trailer.
//!
//! Strings are a `u32` byte length followed by UTF-8. All writes go to a
//! temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::discrete::{DiscreteConfig, DiscreteModel};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::flow::{ChainMode, PriorMode};
use crate::harness::synth::SynthSample;
use crate::nn::NetConfig;
use crate::params::ParamLayout;
use crate::rvq::{Codebook, Decoder, RvqConfig, RvqModel, TokenStack};
use crate::semantic_ar::{LmConfig, SemanticLM};
use crate::vfnet::VectorFieldModel;

pub const TENSOR_MAGIC: &[u8; 4] = b"COIT";
pub const RVQ_MAGIC: &[u8; 4] = b"COIF";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], path: &Path) -> Result<()> {
    let found = r.take(4).map_err(|_| Error::BadMagic {
        path: path.to_owned(),
        expected: String::from_utf8_lossy(magic).into(),
        found: "<short file>".into(),
    })?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: String::from_utf8_lossy(magic).into(),
            found: String::from_utf8_lossy(found).into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        Tensor {
            name: name.into(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).expect("shape checked on load")
    }
}

/// Parsed `COIT` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub metadata: String,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new<M: Serialize>(kind: &str, metadata: &M, tensors: Vec<Tensor>) -> Result<Self> {
        Ok(TensorFile {
            kind: kind.into(),
            metadata: serde_json::to_string(metadata)?,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(TENSOR_MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.kind);
        w.str(&self.metadata);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u64(t.rows as u64);
            w.u64(t.cols as u64);
            w.f64s(t.data.iter().copied());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        check_header(&mut r, TENSOR_MAGIC, path)?;
        let kind = r.str()?;
        let metadata = r.str()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let data = r.f64s(len)?;
            tensors.push(Tensor {
                name,
                rows,
                cols,
                data,
            });
        }
        r.finish()?;
        Ok(TensorFile {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` file, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_str(&self.metadata)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }
}

fn params_to_tensors(layout: &ParamLayout, params: &[f64]) -> Vec<Tensor> {
    layout
        .slices()
        .iter()
        .map(|s| Tensor {
            name: s.name.clone(),
            rows: s.rows,
            cols: s.cols,
            data: params[s.range()].to_vec(),
        })
        .collect()
}

/// Reassembles a flat parameter vector, checking names and shapes against `layout`.
fn tensors_to_params(layout: &ParamLayout, file: &TensorFile) -> Result<Vec<f64>> {
    if file.tensors.len() != layout.slices().len() {
        return Err(Error::Format(format!(
            "{} tensors for a layout of {} slices",
            file.tensors.len(),
            layout.slices().len()
        )));
    }
    let mut params = Vec::with_capacity(layout.total());
    for (s, t) in layout.slices().iter().zip(&file.tensors) {
        if s.name != t.name || s.rows != t.rows || s.cols != t.cols {
            return Err(Error::Format(format!(
                "tensor `{}` {}×{} does not match slice `{}` {}×{}",
                t.name, t.rows, t.cols, s.name, s.rows, s.cols
            )));
        }
        params.extend_from_slice(&t.data);
    }
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    config: NetConfig,
    dim: usize,
    trained_with: Option<(ChainMode, PriorMode)>,
}

pub fn save_vfnet(model: &VectorFieldModel, path: &Path) -> Result<()> {
    let meta = FieldMeta {
        config: model.config().clone(),
        dim: model.dim(),
        trained_with: model.trained_with(),
    };
    TensorFile::new("vfnet", &meta, params_to_tensors(model.layout(), model.params()))?.save(path)
}

pub fn load_vfnet(path: &Path) -> Result<VectorFieldModel> {
    let f = TensorFile::load(path)?;
    f.expect_kind("vfnet")?;
    let meta: FieldMeta = f.meta()?;
    let probe = VectorFieldModel::init(&meta.config, meta.dim, 0)?;
    let params = tensors_to_params(probe.layout(), &f)?;
    let mut m = VectorFieldModel::from_params(&meta.config, meta.dim, params)?;
    m.set_trained_with(meta.trained_with);
    Ok(m)
}

pub fn save_lm(model: &SemanticLM, path: &Path) -> Result<()> {
    TensorFile::new("lm", model.config(), params_to_tensors(model.layout(), model.params()))?.save(path)
}

pub fn load_lm(path: &Path) -> Result<SemanticLM> {
    let f = TensorFile::load(path)?;
    f.expect_kind("lm")?;
    let config: LmConfig = f.meta()?;
    let probe = SemanticLM::init(&config, 0)?;
    SemanticLM::from_params(&config, tensors_to_params(probe.layout(), &f)?)
}

pub fn save_discrete(model: &DiscreteModel, path: &Path) -> Result<()> {
    TensorFile::new(
        "discrete",
        model.config(),
        params_to_tensors(model.layout(), model.params()),
    )?
    .save(path)
}

pub fn load_discrete(path: &Path) -> Result<DiscreteModel> {
    let f = TensorFile::load(path)?;
    f.expect_kind("discrete")?;
    let config: DiscreteConfig = f.meta()?;
    let probe = DiscreteModel::init(&config, 0)?;
    DiscreteModel::from_params(&config, tensors_to_params(probe.layout(), &f)?)
}

#[derive(Serialize, Deserialize)]
struct FeatMeta {
    frame_rate: f64,
}

pub fn save_features(x: &FeatureSequence, path: &Path) -> Result<()> {
    TensorFile::new(
        "features",
        &FeatMeta {
            frame_rate: x.frame_rate(),
        },
        vec![Tensor::from_array("frames", x.frames())],
    )?
    .save(path)
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let f = TensorFile::load(path)?;
    f.expect_kind("features")?;
    let meta: FeatMeta = f.meta()?;
    FeatureSequence::with_frame_rate(f.get("frames")?.to_array(), meta.frame_rate)
}

#[derive(Serialize, Deserialize)]
struct TokenMeta {
    codebook_size: usize,
}

fn ids_to_row(ids: &[u32]) -> Vec<f64> {
    ids.iter().map(|&v| v as f64).collect()
}

fn row_to_ids(row: &[f64], what: &str) -> Result<Vec<u32>> {
    row.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Format(format!("{what}: `{v}` is not a token id")))
            }
        })
        .collect()
}

/// Token stack stored as a `Q×T` tensor.
pub fn save_tokens(stack: &TokenStack, codebook_size: usize, path: &Path) -> Result<()> {
    let data = stack.layers().iter().flat_map(|l| ids_to_row(l)).collect();
    TensorFile::new(
        "tokens",
        &TokenMeta { codebook_size },
        vec![Tensor {
            name: "layers".into(),
            rows: stack.num_layers(),
            cols: stack.len(),
            data,
        }],
    )?
    .save(path)
}

pub fn load_tokens(path: &Path) -> Result<(TokenStack, usize)> {
    let f = TensorFile::load(path)?;
    f.expect_kind("tokens")?;
    let meta: TokenMeta = f.meta()?;
    let t = f.get("layers")?;
    let layers = (0..t.rows)
        .map(|r| row_to_ids(&t.data[r * t.cols..(r + 1) * t.cols], "tokens"))
        .collect::<Result<Vec<_>>>()?;
    Ok((TokenStack::new(layers, meta.codebook_size)?, meta.codebook_size))
}

/// Plain id sequence stored as a `1×n` tensor.
pub fn save_ids(ids: &[u32], path: &Path) -> Result<()> {
    TensorFile::new(
        "ids",
        &(),
        vec![Tensor {
            name: "ids".into(),
            rows: 1,
            cols: ids.len(),
            data: ids_to_row(ids),
        }],
    )?
    .save(path)
}

pub fn load_ids(path: &Path) -> Result<Vec<u32>> {
    let f = TensorFile::load(path)?;
    f.expect_kind("ids")?;
    row_to_ids(&f.get("ids")?.data, "ids")
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    speaker_id: usize,
    frame_rate: f64,
}

pub fn save_sample(s: &SynthSample, path: &Path) -> Result<()> {
    let states = s.semantic_states.iter().map(|&v| v as f64).collect();
    TensorFile::new(
        "sample",
        &SampleMeta {
            speaker_id: s.speaker_id,
            frame_rate: s.features.frame_rate(),
        },
        vec![
            Tensor::from_array("features", s.features.frames()),
            Tensor::from_array("teacher", s.teacher_semantic.frames()),
            Tensor {
                name: "states".into(),
                rows: 1,
                cols: s.len(),
                data: states,
            },
        ],
    )?
    .save(path)
}

pub fn load_sample(path: &Path) -> Result<SynthSample> {
    let f = TensorFile::load(path)?;
    f.expect_kind("sample")?;
    let meta: SampleMeta = f.meta()?;
    let features = FeatureSequence::with_frame_rate(f.get("features")?.to_array(), meta.frame_rate)?;
    let teacher = FeatureSequence::with_frame_rate(f.get("teacher")?.to_array(), meta.frame_rate)?;
    let states: Vec<usize> = row_to_ids(&f.get("states")?.data, "states")?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    if states.len() != features.len() {
        return Err(Error::Format("states and features differ in length".into()));
    }
    teacher.check_same_shape(&features, "teacher vs features")?;
    Ok(SynthSample {
        semantic_states: states,
        speaker_id: meta.speaker_id,
        features,
        teacher_semantic: teacher,
    })
}

/// Writes `sample_00000.coit`, `sample_00001.coit`, … under `dir`.
pub fn save_dataset(samples: &[SynthSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(s, &dir.join(format!("sample_{i:05}.coit")))?;
    }
    Ok(())
}

/// Loads every `*.coit` file of `dir` in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "coit"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no samples in {}", dir.display())));
    }
    paths.iter().map(|p| load_sample(p)).collect()
}

pub fn rvq_to_bytes(model: &RvqModel) -> Result<Vec<u8>> {
    model.validate()?;
    let (q, k, h) = (model.num_layers(), model.codebook_size(), model.dim());
    let mut w = Writer::default();
    w.buf.extend_from_slice(RVQ_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(q as u32);
    w.u32(k as u32);
    w.u32(h as u32);
    w.u8(DTYPE_F64);
    for cb in &model.codebooks {
        w.f64s(cb.vectors.iter().copied());
        w.f64s(cb.usage_counts.iter().copied());
    }
    match &model.decoder {
        Decoder::Identity => w.u8(0),
        Decoder::Affine { weight, bias } => {
            w.u8(1);
            w.f64s(weight.iter().copied());
            w.f64s(bias.iter().copied());
        }
    }
    w.str(&serde_json::to_string(&model.config)?);
    Ok(w.buf)
}

pub fn rvq_from_bytes(bytes: &[u8], path: &Path) -> Result<RvqModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_header(&mut r, RVQ_MAGIC, path)?;
    let q = r.u32()? as usize;
    let k = r.u32()? as usize;
    let h = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let mut codebooks = Vec::with_capacity(q.min(1 << 12));
    for _ in 0..q {
        let vectors = Array2::from_shape_vec((k, h), r.f64s(k * h)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let usage_counts = r.f64s(k)?;
        codebooks.push(Codebook {
            vectors,
            usage_counts,
        });
    }
    let decoder = match r.u8()? {
        0 => Decoder::Identity,
        1 => Decoder::Affine {
            weight: Array2::from_shape_vec((h, h), r.f64s(h * h)?)
                .map_err(|e| Error::Format(e.to_string()))?,
            bias: Array1::from_vec(r.f64s(h)?),
        },
        tag => return Err(Error::Format(format!("unknown decoder tag {tag}"))),
    };
    let config: RvqConfig = serde_json::from_str(&r.str()?)?;
    r.finish()?;
    if config.num_layers != q || config.codebook_size != k || config.dim != h {
        return Err(Error::Format("config trailer disagrees with header".into()));
    }
    let model = RvqModel {
        config,
        codebooks,
        decoder,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_rvq(model: &RvqModel, path: &Path) -> Result<()> {
    write_atomic(path, &rvq_to_bytes(model)?)
}

pub fn load_rvq(path: &Path) -> Result<RvqModel> {
    rvq_from_bytes(&fs::read(path)?, path)
}
