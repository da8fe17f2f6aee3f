use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use super::nonlinear::LayerNormAffine;
use super::tensor::{IbertError, QuantTensor};

/// Weights of one Linear module. `weight` is `in × out`; `bias` is at
/// `bias_scale`; the output is requantized to `out_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: QuantTensor,
    pub bias: Vec<i32>,
    pub bias_scale: f64,
    pub out_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub affine: LayerNormAffine,
    pub out_scale: f64,
}

/// Everything one encoder needs. Activation scales are per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub input_scale: f64,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub context_scale: f64,
    pub attn_out: LinearParams,
    pub ln1: NormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub ln2: NormParams,
}

impl EncoderParams {
    pub fn output_scale(&self) -> f64 {
        self.ln2.out_scale
    }

    fn linears(&self) -> [(&'static str, &LinearParams); 6] {
        [
            ("q", &self.query),
            ("k", &self.key),
            ("v", &self.value),
            ("out", &self.attn_out),
            ("ffn1", &self.ffn1),
            ("ffn2", &self.ffn2),
        ]
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<(), IbertError> {
        let (h, f) = (cfg.hidden, cfg.ffn);
        let want = [
            ("q", h, h),
            ("k", h, h),
            ("v", h, h),
            ("out", h, h),
            ("ffn1", h, f),
            ("ffn2", f, h),
        ];
        for ((name, p), (_, i, o)) in self.linears().into_iter().zip(want) {
            if (p.weight.rows, p.weight.cols) != (i, o) || p.bias.len() != o {
                return Err(IbertError::Model(format!(
                    "{name}: weight {}x{} with {} biases, expected {i}x{o}",
                    p.weight.rows,
                    p.weight.cols,
                    p.bias.len()
                )));
            }
        }
        for (name, n) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            if n.affine.gamma.len() != h || n.affine.beta.len() != h {
                return Err(IbertError::Model(format!(
                    "{name}: width {} expected {h}",
                    n.affine.gamma.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub encoders: Vec<EncoderParams>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), IbertError> {
        self.config.validate()?;
        if self.encoders.len() != self.config.layers {
            return Err(IbertError::Model(format!(
                "{} encoders for a {}-layer config",
                self.encoders.len(),
                self.config.layers
            )));
        }
        for (l, e) in self.encoders.iter().enumerate() {
            e.check(&self.config)
                .map_err(|err| IbertError::Model(format!("encoder {l}: {err}")))?;
        }
        for (l, pair) in self.encoders.windows(2).enumerate() {
            if pair[0].output_scale() != pair[1].input_scale {
                return Err(IbertError::Model(format!(
                    "encoder {} input scale differs from encoder {l} output",
                    l + 1
                )));
            }
        }
        Ok(())
    }
}

/// Activation scale used by the synthetic generator for every INT8
/// activation except softmax probabilities.
pub const SYNTHETIC_ACT_SCALE: f64 = 1.0 / 32.0;

/// Random but well-conditioned parameters: uniform INT8 weights with scales
/// chosen so activations stay within a few dozen codes.
pub fn generate(config: &EncoderConfig, seed: u64) -> Result<ModelParams, IbertError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = SYNTHETIC_ACT_SCALE;
    let linear = |rng: &mut ChaCha8Rng, i: usize, o: usize| {
        let w_scale = 1.0 / (128.0 * (i as f64).sqrt());
        let data: Vec<i8> = (0..i * o).map(|_| rng.gen()).collect();
        let bias_scale = act * w_scale;
        // Real-valued bias in ±0.25.
        let lim = (0.25 / bias_scale) as i32;
        LinearParams {
            weight: QuantTensor {
                rows: i,
                cols: o,
                data,
                scale: w_scale,
            },
            bias: (0..o).map(|_| rng.gen_range(-lim..=lim)).collect(),
            bias_scale,
            out_scale: act,
        }
    };
    let norm = |rng: &mut ChaCha8Rng, n: usize| NormParams {
        affine: LayerNormAffine {
            gamma: (0..n).map(|_| rng.gen_range(40..=88)).collect(),
            gamma_scale: 1.0 / 64.0,
            beta: (0..n).map(|_| rng.gen_range(-800..=800)).collect(),
            beta_scale: 1.0 / 4096.0,
        },
        out_scale: act,
    };
    let (h, f) = (config.hidden, config.ffn);
    let encoders = (0..config.layers)
        .map(|_| EncoderParams {
            input_scale: act,
            query: linear(&mut rng, h, h),
            key: linear(&mut rng, h, h),
            value: linear(&mut rng, h, h),
            context_scale: act,
            attn_out: linear(&mut rng, h, h),
            ln1: norm(&mut rng, h),
            ffn1: linear(&mut rng, h, f),
            ffn2: linear(&mut rng, f, h),
            ln2: norm(&mut rng, h),
        })
        .collect();
    let m = ModelParams {
        config: config.clone(),
        encoders,
    };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Parameter archive: a flat list of named tensors.

const ARCHIVE_MAGIC: &[u8; 8] = b"GALAMDL1";

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    I8 {
        dims: Vec<u32>,
        scale: f64,
        data: Vec<i8>,
    },
    I32 {
        dims: Vec<u32>,
        scale: f64,
        data: Vec<i32>,
    },
    Scalar(f64),
    Json(String),
}

fn entries_of(model: &ModelParams) -> Result<BTreeMap<String, Entry>, IbertError> {
    let mut out = BTreeMap::new();
    let cfg = serde_json::to_string(&model.config).map_err(|e| IbertError::Model(e.to_string()))?;
    out.insert("config".to_string(), Entry::Json(cfg));
    for (l, e) in model.encoders.iter().enumerate() {
        let p = format!("encoder.{l}");
        out.insert(format!("{p}.input_scale"), Entry::Scalar(e.input_scale));
        out.insert(format!("{p}.context_scale"), Entry::Scalar(e.context_scale));
        for (name, lin) in e.linears() {
            let w = &lin.weight;
            out.insert(
                format!("{p}.{name}.weight"),
                Entry::I8 {
                    dims: vec![w.rows as u32, w.cols as u32],
                    scale: w.scale,
                    data: w.data.clone(),
                },
            );
            out.insert(
                format!("{p}.{name}.bias"),
                Entry::I32 {
                    dims: vec![lin.bias.len() as u32],
                    scale: lin.bias_scale,
                    data: lin.bias.clone(),
                },
            );
            out.insert(
                format!("{p}.{name}.out_scale"),
                Entry::Scalar(lin.out_scale),
            );
        }
        for (name, n) in [("ln1", &e.ln1), ("ln2", &e.ln2)] {
            let a = &n.affine;
            out.insert(
                format!("{p}.{name}.gamma"),
                Entry::I8 {
                    dims: vec![a.gamma.len() as u32],
                    scale: a.gamma_scale,
                    data: a.gamma.clone(),
                },
            );
            out.insert(
                format!("{p}.{name}.beta"),
                Entry::I32 {
                    dims: vec![a.beta.len() as u32],
                    scale: a.beta_scale,
                    data: a.beta.clone(),
                },
            );
            out.insert(format!("{p}.{name}.out_scale"), Entry::Scalar(n.out_scale));
        }
    }
    Ok(out)
}

pub fn write_archive(w: &mut impl Write, model: &ModelParams) -> Result<(), IbertError> {
    let entries = entries_of(model)?;
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, e) in &entries {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let (tag, dims, scale, bytes): (u8, &[u32], f64, Vec<u8>) = match e {
            Entry::I8 { dims, scale, data } => {
                (0, dims, *scale, data.iter().map(|&v| v as u8).collect())
            }
            Entry::I32 { dims, scale, data } => (
                1,
                dims,
                *scale,
                data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            Entry::Scalar(v) => (2, &[], *v, Vec::new()),
            Entry::Json(s) => (3, &[], 0.0, s.as_bytes().to_vec()),
        };
        w.write_all(&[tag, dims.len() as u8])?;
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&scale.to_le_bytes())?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], IbertError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| IbertError::Model("archive truncated".into()))?;
    Ok(b)
}

fn read_entries(r: &mut impl Read) -> Result<BTreeMap<String, Entry>, IbertError> {
    if &read_exact::<8>(r)? != ARCHIVE_MAGIC {
        return Err(IbertError::Model("not a model archive (bad magic)".into()));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| IbertError::Model("archive truncated".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| IbertError::Model("entry name is not UTF-8".into()))?;
        let [tag, nd] = read_exact::<2>(r)?;
        let dims: Vec<u32> = (0..nd)
            .map(|_| read_exact(r).map(u32::from_le_bytes))
            .collect::<Result<_, _>>()?;
        let scale = f64::from_le_bytes(read_exact(r)?);
        let n = u64::from_le_bytes(read_exact(r)?) as usize;
        let mut bytes = Vec::new();
        r.take(n as u64).read_to_end(&mut bytes)?;
        if bytes.len() != n {
            return Err(IbertError::Model(format!("entry {name} truncated")));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let e = match tag {
            0 if n == numel => Entry::I8 {
                dims,
                scale,
                data: bytes.iter().map(|&b| b as i8).collect(),
            },
            1 if n == 4 * numel => Entry::I32 {
                dims,
                scale,
                data: bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            },
            2 => Entry::Scalar(scale),
            3 => Entry::Json(
                String::from_utf8(bytes).map_err(|_| IbertError::Model("bad JSON entry".into()))?,
            ),
            _ => {
                return Err(IbertError::Model(format!(
                    "entry {name}: bad type tag or size"
                )))
            }
        };
        out.insert(name, e);
    }
    Ok(out)
}

struct Lookup(BTreeMap<String, Entry>);

impl Lookup {
    fn take(&mut self, name: &str) -> Result<Entry, IbertError> {
        self.0
            .remove(name)
            .ok_or_else(|| IbertError::Model(format!("missing tensor {name}")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64, IbertError> {
        match self.take(name)? {
            Entry::Scalar(v) => Ok(v),
            _ => Err(IbertError::Model(format!("{name} is not a scalar"))),
        }
    }

    fn i8(&mut self, name: &str) -> Result<(Vec<u32>, f64, Vec<i8>), IbertError> {
        match self.take(name)? {
            Entry::I8 { dims, scale, data } => Ok((dims, scale, data)),
            _ => Err(IbertError::Model(format!("{name} is not an INT8 tensor"))),
        }
    }

    fn i32(&mut self, name: &str) -> Result<(f64, Vec<i32>), IbertError> {
        match self.take(name)? {
            Entry::I32 { scale, data, .. } => Ok((scale, data)),
            _ => Err(IbertError::Model(format!("{name} is not an INT32 tensor"))),
        }
    }

    fn linear(&mut self, p: &str) -> Result<LinearParams, IbertError> {
        let (dims, scale, data) = self.i8(&format!("{p}.weight"))?;
        let [rows, cols] = dims[..] else {
            return Err(IbertError::Model(format!("{p}.weight is not 2-D")));
        };
        let (bias_scale, bias) = self.i32(&format!("{p}.bias"))?;
        Ok(LinearParams {
            weight: QuantTensor::new(rows as usize, cols as usize, data, scale)?,
            bias,
            bias_scale,
            out_scale: self.scalar(&format!("{p}.out_scale"))?,
        })
    }

    fn norm(&mut self, p: &str) -> Result<NormParams, IbertError> {
        let (_, gamma_scale, gamma) = self.i8(&format!("{p}.gamma"))?;
        let (beta_scale, beta) = self.i32(&format!("{p}.beta"))?;
        Ok(NormParams {
            affine: LayerNormAffine {
                gamma,
                gamma_scale,
                beta,
                beta_scale,
            },
            out_scale: self.scalar(&format!("{p}.out_scale"))?,
        })
    }
}

pub fn read_archive(r: &mut impl Read) -> Result<ModelParams, IbertError> {
    let mut t = Lookup(read_entries(r)?);
    let config: EncoderConfig = match t.take("config")? {
        Entry::Json(s) => {
            serde_json::from_str(&s).map_err(|e| IbertError::Model(format!("config: {e}")))?
        }
        _ => return Err(IbertError::Model("config entry is not JSON".into())),
    };
    let mut encoders = Vec::new();
    for l in 0..config.layers {
        let p = format!("encoder.{l}");
        encoders.push(EncoderParams {
            input_scale: t.scalar(&format!("{p}.input_scale"))?,
            query: t.linear(&format!("{p}.q"))?,
            key: t.linear(&format!("{p}.k"))?,
            value: t.linear(&format!("{p}.v"))?,
            context_scale: t.scalar(&format!("{p}.context_scale"))?,
            attn_out: t.linear(&format!("{p}.out"))?,
            ln1: t.norm(&format!("{p}.ln1"))?,
            ffn1: t.linear(&format!("{p}.ffn1"))?,
            ffn2: t.linear(&format!("{p}.ffn2"))?,
            ln2: t.norm(&format!("{p}.ln2"))?,
        });
    }
    let m = ModelParams { config, encoders };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Model filesystem: one directory per module with raw little-endian blobs
// and a `key = value` metadata file.

pub const MODULES: [&str; 8] = ["q", "k", "v", "out", "ffn1", "ffn2", "ln1", "ln2"];

pub fn encoder_dir(l: usize) -> String {
    format!("encoder_{l:02}")
}

fn write_meta(path: &Path, pairs: &[(&str, String)]) -> Result<(), IbertError> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>, IbertError> {
    let text = fs::read_to_string(path)
        .map_err(|e| IbertError::Model(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn meta_get<T: std::str::FromStr>(
    m: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T, IbertError> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IbertError::Model(format!("{}: missing or bad `{key}`", path.display())))
}

fn read_blob(path: &Path) -> Result<Vec<u8>, IbertError> {
    fs::read(path).map_err(|e| IbertError::Model(format!("{}: {e}", path.display())))
}

/// Write `model` under `root`. Re-writing the same model yields a
/// byte-identical tree.
pub fn write_model_fs(root: &Path, model: &ModelParams) -> Result<(), IbertError> {
    model.validate()?;
    fs::create_dir_all(root)?;
    let cfg = serde_json::to_string_pretty(&model.config)
        .map_err(|e| IbertError::Model(e.to_string()))?;
    fs::write(root.join("model.json"), cfg + "\n")?;
    for (l, e) in model.encoders.iter().enumerate() {
        let dir = root.join(encoder_dir(l));
        fs::create_dir_all(&dir)?;
        write_meta(
            &dir.join("meta.txt"),
            &[
                ("input_scale", format!("{:?}", e.input_scale)),
                ("context_scale", format!("{:?}", e.context_scale)),
            ],
        )?;
        for (name, lin) in e.linears() {
            let d = dir.join(name);
            fs::create_dir_all(&d)?;
            fs::write(d.join("weight.bin"), lin.weight.to_bytes())?;
            fs::write(
                d.join("bias.bin"),
                lin.bias
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<_>>(),
            )?;
            write_meta(
                &d.join("meta.txt"),
                &[
                    ("kind", "linear".into()),
                    ("rows", lin.weight.rows.to_string()),
                    ("cols", lin.weight.cols.to_string()),
                    ("weight_scale", format!("{:?}", lin.weight.scale)),
                    ("bias_scale", format!("{:?}", lin.bias_scale)),
                    ("out_scale", format!("{:?}", lin.out_scale)),
                ],
            )?;
        }
        for (name, n) in [("ln1", &e.ln1), ("ln2", &e.ln2)] {
            let d = dir.join(name);
            fs::create_dir_all(&d)?;
            let a = &n.affine;
            fs::write(
                d.join("gamma.bin"),
                a.gamma.iter().map(|&v| v as u8).collect::<Vec<_>>(),
            )?;
            fs::write(
                d.join("beta.bin"),
                a.beta
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<_>>(),
            )?;
            write_meta(
                &d.join("meta.txt"),
                &[
                    ("kind", "layernorm".into()),
                    ("width", a.gamma.len().to_string()),
                    ("gamma_scale", format!("{:?}", a.gamma_scale)),
                    ("beta_scale", format!("{:?}", a.beta_scale)),
                    ("out_scale", format!("{:?}", n.out_scale)),
                ],
            )?;
        }
    }
    Ok(())
}

pub fn read_model_config(root: &Path) -> Result<EncoderConfig, IbertError> {
    let path = root.join("model.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| IbertError::Model(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| IbertError::Model(format!("{}: {e}", path.display())))
}

fn read_linear(d: &Path) -> Result<LinearParams, IbertError> {
    let meta = read_meta(&d.join("meta.txt"))?;
    let rows: usize = meta_get(&meta, "rows", d)?;
    let cols: usize = meta_get(&meta, "cols", d)?;
    let weight = read_blob(&d.join("weight.bin"))?;
    let bias = read_blob(&d.join("bias.bin"))?;
    if weight.len() != rows * cols || bias.len() != 4 * cols {
        return Err(IbertError::Model(format!(
            "{}: blob sizes do not match {rows}x{cols}",
            d.display()
        )));
    }
    Ok(LinearParams {
        weight: QuantTensor::new(
            rows,
            cols,
            weight.iter().map(|&b| b as i8).collect(),
            meta_get(&meta, "weight_scale", d)?,
        )?,
        bias: bias
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        bias_scale: meta_get(&meta, "bias_scale", d)?,
        out_scale: meta_get(&meta, "out_scale", d)?,
    })
}

fn read_norm(d: &Path) -> Result<NormParams, IbertError> {
    let meta = read_meta(&d.join("meta.txt"))?;
    let width: usize = meta_get(&meta, "width", d)?;
    let gamma = read_blob(&d.join("gamma.bin"))?;
    let beta = read_blob(&d.join("beta.bin"))?;
    if gamma.len() != width || beta.len() != 4 * width {
        return Err(IbertError::Model(format!(
            "{}: blob sizes do not match width {width}",
            d.display()
        )));
    }
    Ok(NormParams {
        affine: LayerNormAffine {
            gamma: gamma.iter().map(|&b| b as i8).collect(),
            gamma_scale: meta_get(&meta, "gamma_scale", d)?,
            beta: beta
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            beta_scale: meta_get(&meta, "beta_scale", d)?,
        },
        out_scale: meta_get(&meta, "out_scale", d)?,
    })
}

pub fn read_encoder(
    root: &Path,
    cfg: &EncoderConfig,
    l: usize,
) -> Result<EncoderParams, IbertError> {
    let dir = root.join(encoder_dir(l));
    let meta = read_meta(&dir.join("meta.txt"))?;
    let e = EncoderParams {
        input_scale: meta_get(&meta, "input_scale", &dir)?,
        query: read_linear(&dir.join("q"))?,
        key: read_linear(&dir.join("k"))?,
        value: read_linear(&dir.join("v"))?,
        context_scale: meta_get(&meta, "context_scale", &dir)?,
        attn_out: read_linear(&dir.join("out"))?,
        ln1: read_norm(&dir.join("ln1"))?,
        ffn1: read_linear(&dir.join("ffn1"))?,
        ffn2: read_linear(&dir.join("ffn2"))?,
        ln2: read_norm(&dir.join("ln2"))?,
    };
    e.check(cfg)
        .map_err(|err| IbertError::Model(format!("{}: {err}", dir.display())))?;
    Ok(e)
}

pub fn read_model_fs(root: &Path) -> Result<ModelParams, IbertError> {
    let config = read_model_config(root)?;
    let encoders = (0..config.layers)
        .map(|l| read_encoder(root, &config, l))
        .collect::<Result<_, _>>()?;
    let m = ModelParams { config, encoders };
    m.validate()?;
    Ok(m)
}

/// Archive → model filesystem.
pub fn import_model(archive: &Path, out: &Path) -> Result<ModelParams, IbertError> {
    let mut f = fs::File::open(archive)
        .map_err(|e| IbertError::Model(format!("{}: {e}", archive.display())))?;
    let model = read_archive(&mut std::io::BufReader::new(&mut f))?;
    write_model_fs(out, &model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(root).unwrap().display().to_string(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn archive_round_trip() {
        let m = generate(&EncoderConfig::tiny(), 7).unwrap();
        let mut buf = Vec::new();
        write_archive(&mut buf, &m).unwrap();
        assert_eq!(read_archive(&mut buf.as_slice()).unwrap(), m);
        assert!(read_archive(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn import_is_idempotent() {
        let m = generate(&EncoderConfig::tiny(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let arc = dir.path().join("m.bin");
        write_archive(&mut fs::File::create(&arc).unwrap(), &m).unwrap();
        let fs_root = dir.path().join("fs");
        import_model(&arc, &fs_root).unwrap();
        let first = tree(&fs_root);
        import_model(&arc, &fs_root).unwrap();
        assert_eq!(tree(&fs_root), first);
        assert_eq!(read_model_fs(&fs_root).unwrap(), m);
        for l in 0..3 {
            for module in MODULES {
                assert!(fs_root
                    .join(encoder_dir(l))
                    .join(module)
                    .join("meta.txt")
                    .is_file());
            }
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let m = generate(&EncoderConfig::tiny(), 1).unwrap();
        let mut full = Vec::new();
        write_archive(&mut full, &m).unwrap();
        let name = b"encoder.1.ffn2.bias";
        let pos = full.windows(name.len()).position(|w| w == name).unwrap();
        // Corrupt the name so the lookup misses.
        full[pos + name.len() - 1] = b'X';
        let err = read_archive(&mut full.as_slice()).unwrap_err().to_string();
        assert!(err.contains("encoder.1.ffn2.bias"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut m = generate(&EncoderConfig::tiny(), 1).unwrap();
        m.encoders[2].ffn1.bias.pop();
        assert!(m.validate().is_err());
        let mut buf = Vec::new();
        assert!(write_archive(&mut buf, &m).is_ok());
        assert!(read_archive(&mut buf.as_slice()).is_err());
    }
}
