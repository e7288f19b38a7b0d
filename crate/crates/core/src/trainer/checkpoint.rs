//! Binary model container.
//!
//! Layout, all integers little-endian:
//! `"SRGN"`, `u32` version, `u64` total file length, `u32` metadata length
//! and JSON metadata,
//! `u32` tensor count, then per tensor `u32` name length + UTF-8 name,
//! `u32` rank, `rank x u64` dims, `f64` values; finally a `u64` checksum
//! (first eight bytes of SHA-256 over everything before it).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, ModelBundle, OptimizerStates, TrainConfig};
use crate::error::{Error, Result};
use crate::ndgrad::{Activation, MlpParams, Tensor};
use crate::srgan::{DiscParams, EncParams, GenParams, PostParams};
use crate::srn::SrnParams;

pub const MAGIC: &[u8; 4] = b"SRGN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    config: TrainConfig,
    d_v: usize,
    d_s: usize,
    seen: Vec<usize>,
    has_srn: bool,
    iteration: u64,
    /// Adam step counters keyed by network name.
    adam_steps: BTreeMap<String, u64>,
}

/// Metadata of a rectifier-only file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SrnMeta {
    kind: String,
    config: TrainConfig,
    d_s: usize,
    adam_step: u64,
}

const KIND_BUNDLE: &str = "bundle";
const KIND_SRN: &str = "srn";

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

type NetEntry<'a> = (
    &'static str,
    Vec<String>,
    Vec<&'a Tensor>,
    Option<&'a AdamState>,
);

/// Every tensor of the bundle under a stable name.
fn named_tensors(b: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    let nets: Vec<NetEntry> = {
        let mut v = Vec::new();
        if let Some(s) = &b.srn {
            v.push((
                "srn",
                s.mlp.tensor_names("srn"),
                s.mlp.tensors(),
                b.opt.srn.as_ref(),
            ));
        }
        v.push((
            "gen",
            b.gen.mlp.tensor_names("gen"),
            b.gen.mlp.tensors(),
            Some(&b.opt.gen),
        ));
        v.push((
            "disc",
            b.disc.tensor_names("disc"),
            b.disc.tensors(),
            Some(&b.opt.disc),
        ));
        v.push((
            "enc",
            b.enc.mlp.tensor_names("enc"),
            b.enc.mlp.tensors(),
            Some(&b.opt.enc),
        ));
        v.push((
            "post",
            b.post.mlp.tensor_names("post"),
            b.post.mlp.tensors(),
            Some(&b.opt.post),
        ));
        v
    };
    for (net, names, ts, state) in nets {
        for (n, t) in names.iter().zip(&ts) {
            out.push((n.clone(), *t));
        }
        if let Some(s) = state {
            for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
                out.push((format!("opt.{net}.m{i}"), m));
                out.push((format!("opt.{net}.v{i}"), v));
            }
        }
    }
    out
}

pub fn to_bytes(b: &ModelBundle) -> Result<Vec<u8>> {
    let mut adam_steps = BTreeMap::new();
    if let Some(s) = &b.opt.srn {
        adam_steps.insert("srn".to_string(), s.step);
    }
    for (n, s) in [
        ("gen", &b.opt.gen),
        ("disc", &b.opt.disc),
        ("enc", &b.opt.enc),
        ("post", &b.opt.post),
    ] {
        adam_steps.insert(n.to_string(), s.step);
    }
    let meta = Meta {
        kind: KIND_BUNDLE.into(),
        config: b.config.clone(),
        d_v: b.d_v,
        d_s: b.d_s,
        seen: b.seen.clone(),
        has_srn: b.srn.is_some(),
        iteration: b.iteration,
        adam_steps,
    };
    encode(&meta, named_tensors(b))
}

fn encode(meta: &impl Serialize, tensors: Vec<(String, &Tensor)>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let total = (out.len() + 8) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let (meta, tensors) = decode(bytes)?;
    let meta: Meta = parse_meta(&meta, KIND_BUNDLE)?;
    assemble(meta, tensors)
}

fn parse_meta<T: for<'de> Deserialize<'de>>(raw: &[u8], kind: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let k: Kind =
        serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if k.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} file, found {}",
            k.kind
        )));
    }
    serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
}

fn decode(bytes: &[u8]) -> Result<(Vec<u8>, BTreeMap<String, Tensor>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {FORMAT_VERSION}"
        )));
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if (bytes.len() as u64) < declared {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if declared != bytes.len() as u64
        || checksum(body) != u64::from_le_bytes(tail.try_into().unwrap())
    {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: HEADER_LEN,
    };
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?.to_vec();
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok((meta, tensors))
}

fn assemble(meta: Meta, mut tensors: BTreeMap<String, Tensor>) -> Result<ModelBundle> {
    let c = &meta.config;
    c.validate()?;
    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if !t.same_shape(like) {
            return Err(Error::dim(
                format!("checkpoint tensor {name}"),
                format!("{:?}", like.shape()),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(t)
    };
    let mut fill = |net: &str,
                    names: Vec<String>,
                    dst: Vec<&mut Tensor>,
                    step: Option<u64>|
     -> Result<Option<AdamState>> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, (n, d)) in names.iter().zip(dst).enumerate() {
            *d = take(n, d)?;
            if step.is_some() {
                m.push(take(&format!("opt.{net}.m{i}"), d)?);
                v.push(take(&format!("opt.{net}.v{i}"), d)?);
            }
        }
        Ok(step.map(|step| AdamState { step, m, v }))
    };
    let step = |n: &str| -> Result<u64> {
        meta.adam_steps
            .get(n)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {n}")))
    };

    let (d_v, d_s, k) = (meta.d_v, meta.d_s, meta.seen.len());
    let (mut srn, mut srn_opt) = (None, None);
    if meta.has_srn {
        let mut p = SrnParams::zeros(d_s, c.srn_hidden)?;
        let names = p.mlp.tensor_names("srn");
        srn_opt = fill(
            "srn",
            names,
            p.mlp.tensors_mut(),
            meta.adam_steps.get("srn").copied(),
        )?;
        srn = Some(p);
    }
    let mut gen = GenParams::zeros(d_s, c.d_z, c.gen_hidden, d_v)?;
    let names = gen.mlp.tensor_names("gen");
    let gen_opt = fill("gen", names, gen.mlp.tensors_mut(), Some(step("gen")?))?.unwrap();
    let mut disc = DiscParams::zeros(d_v, c.disc_hidden, k)?;
    let names = disc.tensor_names("disc");
    let disc_opt = fill("disc", names, disc.tensors_mut(), Some(step("disc")?))?.unwrap();
    let mut enc = EncParams {
        mlp: MlpParams::zeros(
            &[d_v, c.enc_hidden, c.d_z],
            &[Activation::LeakyRelu, Activation::Linear],
            None,
        )?,
    };
    let names = enc.mlp.tensor_names("enc");
    let enc_opt = fill("enc", names, enc.mlp.tensors_mut(), Some(step("enc")?))?.unwrap();
    let mut post = PostParams {
        mlp: MlpParams::zeros(
            &[d_v, c.enc_hidden, 2 * d_s + c.d_z],
            &[Activation::LeakyRelu, Activation::Linear],
            None,
        )?,
    };
    let names = post.mlp.tensor_names("post");
    let post_opt = fill("post", names, post.mlp.tensors_mut(), Some(step("post")?))?.unwrap();
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(ModelBundle {
        config: meta.config,
        d_v,
        d_s,
        seen: meta.seen,
        srn,
        gen,
        disc,
        enc,
        post,
        opt: OptimizerStates {
            srn: srn_opt,
            gen: gen_opt,
            disc: disc_opt,
            enc: enc_opt,
            post: post_opt,
        },
        iteration: meta.iteration,
    })
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// A trained rectifier with its optimiser state and the config that made it.
pub fn srn_to_bytes(
    config: &TrainConfig,
    params: &SrnParams,
    state: &AdamState,
) -> Result<Vec<u8>> {
    let meta = SrnMeta {
        kind: KIND_SRN.into(),
        config: config.clone(),
        d_s: params.d_s(),
        adam_step: state.step,
    };
    let mut tensors: Vec<(String, &Tensor)> = params
        .mlp
        .tensor_names("srn")
        .into_iter()
        .zip(params.mlp.tensors())
        .collect();
    for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
        tensors.push((format!("opt.srn.m{i}"), m));
        tensors.push((format!("opt.srn.v{i}"), v));
    }
    encode(&meta, tensors)
}

pub fn srn_from_bytes(bytes: &[u8]) -> Result<(TrainConfig, SrnParams, AdamState)> {
    let (meta, mut tensors) = decode(bytes)?;
    let meta: SrnMeta = parse_meta(&meta, KIND_SRN)?;
    meta.config.validate()?;
    let mut p = SrnParams::zeros(meta.d_s, meta.config.srn_hidden)?;
    let names = p.mlp.tensor_names("srn");
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (i, (n, d)) in names.iter().zip(p.mlp.tensors_mut()).enumerate() {
        for (key, dst) in [
            (n.clone(), None),
            (format!("opt.srn.m{i}"), Some(&mut m)),
            (format!("opt.srn.v{i}"), Some(&mut v)),
        ] {
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if !t.same_shape(d) {
                return Err(Error::dim(
                    format!("checkpoint tensor {key}"),
                    format!("{:?}", d.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            match dst {
                Some(list) => list.push(t),
                None => *d = t,
            }
        }
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok((
        meta.config,
        p,
        AdamState {
            step: meta.adam_step,
            m,
            v,
        },
    ))
}

pub fn save_srn(
    config: &TrainConfig,
    params: &SrnParams,
    state: &AdamState,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, srn_to_bytes(config, params, state)?).map_err(|e| Error::io(path, e))
}

pub fn load_srn(path: impl AsRef<Path>) -> Result<(TrainConfig, SrnParams, AdamState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    srn_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srn::SrnParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(with_srn: bool) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TrainConfig {
            d_z: 3,
            srn_hidden: 5,
            gen_hidden: 6,
            disc_hidden: 4,
            enc_hidden: 7,
            ..TrainConfig::default()
        };
        let srn = with_srn.then(|| {
            let p = SrnParams::init(4, 5, &mut rng).unwrap();
            let mut s = AdamState::new(&p.mlp.tensors());
            s.step = 11;
            s.m[0].data_mut()[0] = 0.25;
            (p, s)
        });
        let mut b = ModelBundle::init(&cfg, 6, 4, &[0, 2, 3], srn, &mut rng).unwrap();
        b.opt.gen.step = 7;
        b.opt.gen.v[1].data_mut()[2] = 1.5e-9;
        b.iteration = 42;
        b
    }

    #[test]
    fn round_trip_is_exact() {
        for with_srn in [true, false] {
            let b = bundle(with_srn);
            let back = from_bytes(&to_bytes(&b).unwrap()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = to_bytes(&bundle(true)).unwrap();
        let i = bytes.len() - 100;
        bytes[i] ^= 0x01;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let bytes = to_bytes(&bundle(false)).unwrap();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(from_bytes(&m).unwrap_err().to_string().contains("magic"));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(from_bytes(&v).unwrap_err().to_string().contains("version"));
        let t = &bytes[..bytes.len() / 2];
        assert!(from_bytes(t).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn srn_file_round_trip_and_kind_check() {
        let b = bundle(true);
        let (p, s) = (b.srn.clone().unwrap(), b.opt.srn.clone().unwrap());
        let bytes = srn_to_bytes(&b.config, &p, &s).unwrap();
        let (cfg, p2, s2) = srn_from_bytes(&bytes).unwrap();
        assert_eq!((cfg, p2, s2), (b.config.clone(), p, s));
        assert!(from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("expected a bundle"));
        assert!(srn_from_bytes(&to_bytes(&b).unwrap()).is_err());
    }
}
