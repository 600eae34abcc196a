//! Network checkpoints: a JSON manifest plus one binary blob.
//!
//! The blob is a concatenation of OXT1 records, one per parameter and per
//! running-statistics vector. The manifest maps each name to the byte range
//! of its record. Parameter names carry a `gen.` or `disc.` prefix, so a
//! generator and a discriminator can share one checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mode, NetKind, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{oxt, Tensor};

pub const FORMAT: &str = "oxygan-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    /// Byte offset of the OXT1 record within the blob.
    pub offset: u64,
    /// Byte length of the record.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub iteration: u64,
    pub network: NetworkConfig,
    pub networks: Vec<NetKind>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub entries: Vec<Entry>,
}

/// A loaded checkpoint. Networks come back in eval mode.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub generator: Option<Network>,
    pub discriminator: Option<Network>,
}

fn stat_entries(net: &Network) -> impl Iterator<Item = (String, Tensor)> + '_ {
    net.stat_names().iter().zip(net.running_stats()).flat_map(|(name, s)| {
        let n = s.mean.len();
        [
            (format!("{name}_mean"), Tensor::from_parts(vec![n], s.mean.clone())),
            (format!("{name}_var"), Tensor::from_parts(vec![n], s.var.clone())),
        ]
    })
}

/// Serializes networks into (manifest, blob) without touching the disk.
pub fn encode(nets: &[&Network], iteration: u64, config_hash: &str, blob_name: &str) -> Result<(Manifest, Vec<u8>)> {
    let first = nets.first().ok_or_else(|| Error::Contract("checkpoint of zero networks".into()))?;
    if nets.iter().any(|n| n.config() != first.config()) {
        return Err(Error::Contract("networks in one checkpoint must share a config".into()));
    }
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for net in nets {
        let params = net.param_names().iter().cloned().zip(net.params().iter().cloned());
        for (name, t) in params.chain(stat_entries(net)) {
            let offset = blob.len() as u64;
            oxt::write(&t, &mut blob).expect("writing to a Vec cannot fail");
            entries.push(Entry {
                name,
                dims: t.dims().to_vec(),
                offset,
                len: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        iteration,
        network: first.config().clone(),
        networks: nets.iter().map(|n| n.kind()).collect(),
        blob: blob_name.to_string(),
        entries,
    };
    Ok((manifest, blob))
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save(dir: &Path, stem: &str, nets: &[&Network], iteration: u64, config_hash: &str) -> Result<PathBuf> {
    let blob_name = format!("{stem}.bin");
    let (manifest, blob) = encode(nets, iteration, config_hash, &blob_name)?;
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, blob).map_err(|e| Error::io("writing checkpoint blob", &blob_path, e))?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io("writing checkpoint manifest", &path, e))?;
    Ok(path)
}

fn restore(kind: NetKind, config: &NetworkConfig, records: &mut HashMap<String, Tensor>) -> Result<Network> {
    let mut net = match kind {
        NetKind::Generator => Network::generator(config, 0)?,
        NetKind::Discriminator => Network::discriminator(config, 0)?,
    };
    let mut take = |name: &str, dims: &[usize]| -> Result<Tensor> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks entry {name:?}")))?;
        if t.dims() != dims {
            return Err(Error::shape("checkpoint entry", dims, t.dims()));
        }
        Ok(t)
    };
    let names = net.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let dims = net.params()[i].dims().to_vec();
        net.params_mut()[i] = take(name, &dims)?;
    }
    let stat_names = net.stat_names().to_vec();
    for (i, name) in stat_names.iter().enumerate() {
        let n = net.running_stats()[i].mean.len();
        let mean = take(&format!("{name}_mean"), &[n])?.into_data();
        let var = take(&format!("{name}_var"), &[n])?.into_data();
        let s = &mut net.running_stats_mut()[i];
        s.mean = mean;
        s.var = var;
    }
    net.set_mode(Mode::Eval);
    Ok(net)
}

/// Rebuilds networks from a manifest and its blob.
pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Checkpoint> {
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    manifest.network.validate()?;
    let mut records = HashMap::new();
    for e in &manifest.entries {
        let start = usize::try_from(e.offset).map_err(|_| Error::Format("entry offset overflows".into()))?;
        let end = start
            .checked_add(e.len as usize)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::Format(format!("entry {:?} exceeds the blob", e.name)))?;
        let (t, used) = oxt::parse(&blob[start..end])?;
        if used != end - start || t.dims() != e.dims.as_slice() {
            return Err(Error::Format(format!("entry {:?} does not match its record", e.name)));
        }
        if records.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry {:?}", e.name)));
        }
    }
    let mut generator = None;
    let mut discriminator = None;
    for &kind in &manifest.networks {
        let net = restore(kind, &manifest.network, &mut records)?;
        match kind {
            NetKind::Generator => generator = Some(net),
            NetKind::Discriminator => discriminator = Some(net),
        }
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected entry {name:?}")));
    }
    Ok(Checkpoint {
        manifest,
        generator,
        discriminator,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io("reading checkpoint manifest", path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint given the path of its manifest.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io("reading checkpoint blob", &blob_path, e))?;
    decode(manifest, &blob)
}
