//! Network directories: `network.json` plus one structured-value directory
//! or tensor file per weight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, ToyBlock, ToyNetwork};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::procrustes::{load_factor, save_factor};
use crate::structured::{load_structured, save_structured};
use crate::tensorfile::{read_tensor, write_tensor, Tensor};

const MANIFEST: &str = "network.json";
const FORMAT: &str = "pkit-toy-network-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    activation: Activation,
    kept_cols: usize,
    b_in: bool,
    b_out: bool,
    skip: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    vocab: usize,
    hidden: usize,
    blocks: Vec<BlockEntry>,
}

fn write_vec(path: &Path, v: &Option<Vec<f64>>) -> Result<()> {
    match v {
        Some(v) if !v.is_empty() => write_tensor(path, &Tensor::from_vec(v)),
        _ => Ok(()),
    }
}

fn read_vec(path: &Path, present: bool) -> Result<Option<Vec<f64>>> {
    if !present {
        return Ok(None);
    }
    let t = read_tensor(path)?;
    if t.dims().len() != 1 {
        return Err(Error::InvalidTensor(format!("{} is not a vector", path.display())));
    }
    Ok(Some(t.data().to_vec()))
}

pub fn save_network(dir: &Path, net: &ToyNetwork) -> Result<()> {
    net.validate()?;
    fs::create_dir_all(dir)?;
    save_structured(&dir.join("embedding"), &net.embedding)?;
    save_structured(&dir.join("head"), &net.head)?;
    let mut blocks = Vec::with_capacity(net.depth());
    for (i, b) in net.blocks.iter().enumerate() {
        let bdir = dir.join(format!("block_{}", i + 1));
        fs::create_dir_all(&bdir)?;
        save_structured(&bdir.join("w_in"), &b.w_in)?;
        save_structured(&bdir.join("w_out"), &b.w_out)?;
        if b.w_kept.ncols() > 0 {
            write_tensor(&bdir.join("w_kept.pkt"), &Tensor::from_matrix(&b.w_kept))?;
        }
        write_vec(&bdir.join("b_in.pkt"), &b.b_in)?;
        write_vec(&bdir.join("b_out.pkt"), &b.b_out)?;
        if let Some(s) = &b.skip {
            save_factor(&bdir.join("skip"), s)?;
        }
        blocks.push(BlockEntry {
            activation: b.activation,
            kept_cols: b.w_kept.ncols(),
            b_in: b.b_in.is_some(),
            b_out: b.b_out.is_some(),
            skip: b.skip.is_some(),
        });
    }
    let manifest = Manifest { format: FORMAT.into(), vocab: net.vocab(), hidden: net.hidden(), blocks };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<ToyNetwork> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(Error::InvalidConfig(format!("unknown network format {:?}", manifest.format)));
    }
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for (i, e) in manifest.blocks.iter().enumerate() {
        let bdir = dir.join(format!("block_{}", i + 1));
        let w_kept = if e.kept_cols > 0 {
            read_tensor(bdir.join("w_kept.pkt"))?.to_matrix()?
        } else {
            Mat::zeros(manifest.hidden, 0)
        };
        blocks.push(ToyBlock {
            activation: e.activation,
            w_in: load_structured(&bdir.join("w_in"))?,
            w_kept,
            b_in: read_vec(&bdir.join("b_in.pkt"), e.b_in)?,
            w_out: load_structured(&bdir.join("w_out"))?,
            b_out: read_vec(&bdir.join("b_out.pkt"), e.b_out)?,
            skip: if e.skip { Some(load_factor(&bdir.join("skip"))?) } else { None },
        });
    }
    let net = ToyNetwork {
        embedding: load_structured(&dir.join("embedding"))?,
        blocks,
        head: load_structured(&dir.join("head"))?,
    };
    if net.vocab() != manifest.vocab || net.hidden() != manifest.hidden {
        return Err(Error::InvalidConfig("network weights do not match the manifest".into()));
    }
    net.validate()?;
    Ok(net)
}
