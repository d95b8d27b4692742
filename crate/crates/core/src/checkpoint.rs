//! Model checkpoints: a line-oriented text header, one blank line, then the
//! raw little-endian `f32` payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapters::{Adapter, AdapterKind};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::finetune::LinearProbe;
use crate::model::MantisModel;
use crate::tensor::Tensor;

pub const MAGIC: &str = "ts-mantis-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// A model together with the optional channel adapter that feeds it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MantisModel,
    pub adapter: Option<Adapter>,
    /// Logistic probe fitted on frozen embeddings, used instead of the head.
    pub probe: Option<LinearProbe>,
    /// Original label text of each class the head predicts.
    pub class_names: Vec<String>,
}

/// One entry of the tensor directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

fn arch_line(c: &ModelConfig) -> String {
    format!(
        "arch input_length={} patch_count={} token_dim={} conv_channels={} conv_kernel={} conv_stride={} \
         conv_padding={} scalar_scales={} stat_dim={} use_differential={} num_layers={} num_heads={} \
         mlp_hidden={} dropout={} projector_dim={} norm_eps={} layer_norm_eps={}",
        c.input_length,
        c.patch_count,
        c.token_dim,
        c.conv_channels,
        c.conv_kernel,
        c.conv_stride,
        c.conv_padding,
        c.scalar_scales,
        c.stat_dim,
        c.use_differential,
        c.num_layers,
        c.num_heads,
        c.mlp_hidden,
        c.dropout,
        c.projector_dim,
        c.norm_eps,
        c.layer_norm_eps
    )
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn unknown(what: &str, line: usize) -> Error {
    Error::Version(format!(
        "unknown {what} on header line {line}; the file may come from a newer format version"
    ))
}

fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("bad value `{v}`")))
}

fn key_values<'a>(fields: &[&'a str], line: usize) -> Result<Vec<(&'a str, &'a str)>> {
    fields
        .iter()
        .map(|f| {
            f.split_once('=')
                .ok_or_else(|| bad(line, format!("expected key=value, got `{f}`")))
        })
        .collect()
}

fn parse_arch(fields: &[&str], line: usize) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let mut seen = 0;
    for (k, v) in key_values(fields, line)? {
        match k {
            "input_length" => c.input_length = num(v, line)?,
            "patch_count" => c.patch_count = num(v, line)?,
            "token_dim" => c.token_dim = num(v, line)?,
            "conv_channels" => c.conv_channels = num(v, line)?,
            "conv_kernel" => c.conv_kernel = num(v, line)?,
            "conv_stride" => c.conv_stride = num(v, line)?,
            "conv_padding" => c.conv_padding = num(v, line)?,
            "scalar_scales" => c.scalar_scales = num(v, line)?,
            "stat_dim" => c.stat_dim = num(v, line)?,
            "use_differential" => c.use_differential = num(v, line)?,
            "num_layers" => c.num_layers = num(v, line)?,
            "num_heads" => c.num_heads = num(v, line)?,
            "mlp_hidden" => c.mlp_hidden = num(v, line)?,
            "dropout" => c.dropout = num(v, line)?,
            "projector_dim" => c.projector_dim = num(v, line)?,
            "norm_eps" => c.norm_eps = num(v, line)?,
            "layer_norm_eps" => c.layer_norm_eps = num(v, line)?,
            _ => return Err(unknown(&format!("architecture field `{k}`"), line)),
        }
        seen += 1;
    }
    if seen != 17 {
        return Err(bad(line, format!("architecture line has {seen} of 17 fields")));
    }
    c.validate()?;
    Ok(c)
}

fn adapter_tensors(a: &Adapter) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    if !a.weights.is_empty() {
        out.push(("adapter.weights".into(), vec![a.d_new, a.d], a.weights.clone()));
    }
    if !a.means.is_empty() {
        out.push(("adapter.means".into(), vec![a.d], a.means.clone()));
    }
    if !a.indices.is_empty() {
        out.push((
            "adapter.indices".into(),
            vec![a.d_new],
            a.indices.iter().map(|&i| i as f32).collect(),
        ));
    }
    out
}

/// Serialises a checkpoint. Tensors are written in name order.
pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let model = &ck.model;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    if let Some(a) = &ck.adapter {
        tensors.extend(adapter_tensors(a));
    }
    if let Some(p) = &ck.probe {
        tensors.push(("probe.bias".into(), vec![p.num_classes], p.bias.clone()));
        tensors.push(("probe.weights".into(), vec![p.num_classes, p.dim], p.weights.clone()));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    let mut header = format!("{MAGIC} {FORMAT_VERSION}\n{}\n", arch_line(&model.config));
    if model.projector.is_some() {
        header.push_str("projector\n");
    }
    if let Some(h) = &model.head {
        writeln!(header, "head input_dim={} num_classes={}", h.input_dim, h.num_classes).expect("string write");
    }
    if let Some(a) = &ck.adapter {
        writeln!(header, "adapter kind={} d={} d_new={}", a.kind, a.d, a.d_new).expect("string write");
    }
    if let Some(p) = &ck.probe {
        writeln!(header, "probe dim={} num_classes={}", p.dim, p.num_classes).expect("string write");
    }
    if !ck.class_names.is_empty() {
        header.push_str("classes");
        for c in &ck.class_names {
            header.push('\t');
            header.push_str(c);
        }
        header.push('\n');
    }
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let bytes = data.len() * 4;
        writeln!(header, "tensor {name} {} {offset} {bytes}", dims.join(",")).expect("string write");
        offset += bytes;
    }
    header.push('\n');

    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header {
    config: ModelConfig,
    projector: bool,
    head: Option<(usize, usize)>,
    adapter: Option<(AdapterKind, usize, usize)>,
    probe: Option<(usize, usize)>,
    class_names: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Integrity("empty checkpoint".into()))?;
    match first.split_once(' ') {
        Some((MAGIC, v)) if v == FORMAT_VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(Error::Version(format!(
                "checkpoint format version {v}, this build reads {FORMAT_VERSION}"
            )))
        }
        _ => return Err(Error::Integrity("not a checkpoint file".into())),
    }
    let mut config = None;
    let mut projector = false;
    let mut head = None;
    let mut adapter = None;
    let mut probe = None;
    let mut class_names = Vec::new();
    let mut tensors = Vec::new();
    for (no, line) in lines {
        if let Some(rest) = line.strip_prefix("classes") {
            class_names = rest.split('\t').skip(1).map(String::from).collect();
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        match fields[0] {
            "arch" => config = Some(parse_arch(&fields[1..], no)?),
            "projector" => projector = true,
            "head" => head = Some(dim_and_classes(&fields[1..], "input_dim", no)?),
            "probe" => probe = Some(dim_and_classes(&fields[1..], "dim", no)?),
            "adapter" => {
                let (mut kind, mut d, mut d_new) = (None, None, None);
                for (key, v) in key_values(&fields[1..], no)? {
                    match key {
                        "kind" => kind = Some(v.parse::<AdapterKind>()?),
                        "d" => d = Some(num(v, no)?),
                        "d_new" => d_new = Some(num(v, no)?),
                        _ => return Err(unknown(&format!("adapter field `{key}`"), no)),
                    }
                }
                match (kind, d, d_new) {
                    (Some(k), Some(d), Some(n)) => adapter = Some((k, d, n)),
                    _ => return Err(bad(no, "incomplete adapter record")),
                }
            }
            "tensor" => {
                if fields.len() != 5 {
                    return Err(bad(no, "tensor record needs name, shape, offset and length"));
                }
                let shape = fields[2]
                    .split(',')
                    .map(|d| num::<usize>(d, no))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push(TensorEntry {
                    name: fields[1].to_string(),
                    shape,
                    offset: num(fields[3], no)?,
                    bytes: num(fields[4], no)?,
                });
            }
            other => return Err(unknown(&format!("record `{other}`"), no)),
        }
    }
    Ok(Header {
        config: config.ok_or_else(|| Error::Integrity("checkpoint has no architecture line".into()))?,
        projector,
        head,
        adapter,
        probe,
        class_names,
        tensors,
    })
}

fn dim_and_classes(fields: &[&str], dim_key: &str, no: usize) -> Result<(usize, usize)> {
    let (mut dim, mut k) = (None, None);
    for (key, v) in key_values(fields, no)? {
        match key {
            "num_classes" => k = Some(num(v, no)?),
            _ if key == dim_key => dim = Some(num(v, no)?),
            _ => return Err(unknown(&format!("field `{key}`"), no)),
        }
    }
    Ok((
        dim.ok_or_else(|| bad(no, format!("record without {dim_key}")))?,
        k.ok_or_else(|| bad(no, "record without num_classes"))?,
    ))
}

/// Reads the tensor directory and architecture without materialising a model.
pub fn read_directory(bytes: &[u8]) -> Result<(ModelConfig, Vec<TensorEntry>)> {
    let (header, _) = split(bytes)?;
    let h = parse_header(header)?;
    Ok((h.config, h.tensors))
}

/// The validated header text, tensor directory included.
pub fn read_header(bytes: &[u8]) -> Result<String> {
    let (header, _) = split(bytes)?;
    parse_header(header)?;
    Ok(header.to_string())
}

fn split(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Integrity("header is not terminated by a blank line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Integrity("header is not valid UTF-8".into()))?;
    Ok((header, &bytes[end + 2..]))
}

fn read_floats(payload: &[u8], e: &TensorEntry) -> Result<Vec<f32>> {
    let expect = e.shape.iter().product::<usize>() * 4;
    if e.bytes != expect {
        return Err(Error::Integrity(format!(
            "tensor `{}` declares {} bytes but its shape needs {expect}",
            e.name, e.bytes
        )));
    }
    let chunk = payload.get(e.offset..e.offset + e.bytes).ok_or_else(|| {
        Error::Integrity(format!(
            "payload is truncated: tensor `{}` needs bytes {}..{} of {}",
            e.name,
            e.offset,
            e.offset + e.bytes,
            payload.len()
        ))
    })?;
    Ok(chunk
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = split(bytes)?;
    let h = parse_header(header)?;
    let mut model = MantisModel::new(h.config.clone(), 0)?;
    if h.projector {
        model.attach_projector(0);
    }
    if let Some((dim, k)) = h.head {
        model.attach_head(dim, k, 0)?;
    }
    let mut pending: Vec<&TensorEntry> = h.tensors.iter().collect();
    let mut take = |name: &str| -> Result<Option<Vec<f32>>> {
        match pending.iter().position(|e| e.name == name) {
            Some(i) => {
                let e = pending.swap_remove(i);
                Ok(Some(read_floats(payload, e)?))
            }
            None => Ok(None),
        }
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        let declared = h.tensors.iter().find(|e| e.name == name).map(|e| e.shape.clone());
        match declared {
            Some(s) if s != shape => {
                return Err(Error::Integrity(format!(
                    "tensor `{name}` has shape {s:?}, the architecture needs {shape:?}"
                )))
            }
            None => return Err(Error::Integrity(format!("tensor `{name}` is missing"))),
            _ => {}
        }
        let data = take(&name)?.expect("declared");
        let t = model.params.get_mut(id);
        let requires_grad = t.requires_grad;
        *t = Tensor::new(&shape, data)?.with_grad(requires_grad);
    }
    let adapter = match h.adapter {
        None => None,
        Some((kind, d, d_new)) => {
            let mut a = Adapter {
                kind,
                d,
                d_new,
                weights: Vec::new(),
                means: Vec::new(),
                indices: Vec::new(),
            };
            if kind == AdapterKind::VarSelector {
                let idx = take("adapter.indices")?
                    .ok_or_else(|| Error::Integrity("tensor `adapter.indices` is missing".into()))?;
                a.indices = idx.iter().map(|&v| v as usize).collect();
                if a.indices.len() != d_new || a.indices.iter().any(|&i| i >= d) {
                    return Err(Error::Integrity("adapter indices do not fit the adapter shape".into()));
                }
            } else {
                a.weights = take("adapter.weights")?
                    .ok_or_else(|| Error::Integrity("tensor `adapter.weights` is missing".into()))?;
                if a.weights.len() != d * d_new {
                    return Err(Error::Integrity("adapter weights do not fit the adapter shape".into()));
                }
            }
            if kind == AdapterKind::Pca {
                a.means = take("adapter.means")?
                    .ok_or_else(|| Error::Integrity("tensor `adapter.means` is missing".into()))?;
            }
            Some(a)
        }
    };
    let probe = match h.probe {
        None => None,
        Some((dim, k)) => {
            let mut read = |name: &str, len: usize| -> Result<Vec<f32>> {
                let v = take(name)?.ok_or_else(|| Error::Integrity(format!("tensor `{name}` is missing")))?;
                if v.len() != len {
                    return Err(Error::Integrity(format!(
                        "tensor `{name}` does not fit the probe shape"
                    )));
                }
                Ok(v)
            };
            Some(LinearProbe {
                dim,
                num_classes: k,
                weights: read("probe.weights", dim * k)?,
                bias: read("probe.bias", k)?,
                iterations: 0,
            })
        }
    };
    if let Some(extra) = pending.first() {
        return Err(Error::Integrity(format!(
            "tensor `{}` does not belong to the declared architecture",
            extra.name
        )));
    }
    Ok(Checkpoint {
        model,
        adapter,
        probe,
        class_names: h.class_names,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{fit_pca, fit_var_selector, Design};

    fn tiny() -> Checkpoint {
        let mut model = MantisModel::new(ModelConfig::tiny(), 3).unwrap();
        model.attach_head(32, 3, 4).unwrap();
        Checkpoint {
            model,
            adapter: None,
            probe: None,
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    fn assert_same_params(a: &MantisModel, b: &MantisModel) {
        assert_eq!(a.params.len(), b.params.len());
        for (_, name, t) in a.params.iter() {
            let other = b.params.get(b.params.find(name).unwrap());
            assert_eq!(t.shape(), other.shape());
            let x: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> = other.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = tiny();
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_same_params(&ck.model, &back.model);
        assert_eq!(back.class_names, ck.class_names);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn adapters_round_trip() {
        let design = Design {
            rows: 4,
            cols: 3,
            data: vec![1.0, 0.0, 2.0, 0.5, 1.0, 1.0, 3.0, 2.0, 0.0, 1.0, 1.0, 1.0],
        };
        for adapter in [fit_pca(&design, 2).unwrap(), fit_var_selector(&design, 2).unwrap()] {
            let ck = Checkpoint {
                adapter: Some(adapter.clone()),
                ..tiny()
            };
            let back = from_bytes(&to_bytes(&ck)).unwrap();
            assert_eq!(back.adapter.unwrap(), adapter);
        }
    }

    #[test]
    fn probe_round_trips() {
        let probe = LinearProbe {
            dim: 4,
            num_classes: 2,
            weights: vec![0.5, -1.25, 3.0, 1e-7, 2.0, 0.0, -0.1, 7.5],
            bias: vec![0.25, -0.25],
            iterations: 0,
        };
        let ck = Checkpoint {
            probe: Some(probe.clone()),
            ..tiny()
        };
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.probe, Some(probe));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = to_bytes(&tiny());
        let cut = &bytes[..bytes.len() - 10];
        match from_bytes(cut) {
            Err(Error::Integrity(msg)) => {
                assert!(msg.contains("vit.") || msg.contains("tokenizer."), "{msg}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_version_errors() {
        let bytes = to_bytes(&tiny());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bumped = text.replacen(&format!("{MAGIC} 1"), &format!("{MAGIC} 2"), 1);
        assert!(matches!(from_bytes(bumped.as_bytes()), Err(Error::Version(_))));
        let extra = text.replacen("\narch ", "\ncompression zstd\narch ", 1);
        assert!(matches!(from_bytes(extra.as_bytes()), Err(Error::Version(_))));
        let field = text.replacen("dropout=", "future_knob=1 dropout=", 1);
        assert!(matches!(from_bytes(field.as_bytes()), Err(Error::Version(_))));
    }

    #[test]
    fn one_corrupt_byte_touches_one_tensor() {
        let ck = tiny();
        let mut bytes = to_bytes(&ck);
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        let back = from_bytes(&bytes).unwrap();
        let changed = ck
            .model
            .params
            .iter()
            .filter(|(_, name, t)| {
                let other = back.model.params.get(back.model.params.find(name).unwrap());
                t.data()
                    .iter()
                    .zip(other.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .count();
        assert_eq!(changed, 1);
    }
}
