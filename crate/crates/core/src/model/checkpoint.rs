use std::path::Path;

use naturalize_autodiff::Float;

use super::{ArchSpec, HNetParams};
use crate::format::{assign_all, FormatError, Reader, Writer};

pub const HNET_MAGIC: &[u8; 4] = b"HNET";
pub const HNET_VERSION: u32 = 1;

pub(crate) fn write_arch(w: &mut Writer, arch: &ArchSpec) {
    w.field(&[arch.input_size]);
    w.field(&arch.channels);
    w.field(&[arch.transformer_blocks]);
    w.field(&[arch.bottleneck_ratio]);
}

pub(crate) fn read_arch(r: &mut Reader) -> Result<ArchSpec, FormatError> {
    let scalar = |v: Vec<usize>, what: &str| match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(FormatError::Malformed(format!("{what}: expected one value, found {}", v.len()))),
    };
    let input_size = scalar(r.field()?, "input size")?;
    let channels = r.field()?;
    let transformer_blocks = scalar(r.field()?, "transformer blocks")?;
    let bottleneck_ratio = scalar(r.field()?, "bottleneck ratio")?;
    let arch = ArchSpec { input_size, channels, transformer_blocks, bottleneck_ratio };
    arch.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(arch)
}

pub fn encode_checkpoint<T: Float>(params: &HNetParams<T>) -> Vec<u8> {
    let mut w = Writer::new(HNET_MAGIC, HNET_VERSION);
    write_arch(&mut w, &params.arch);
    w.tensors(params.state());
    w.finish()
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<HNetParams<T>, FormatError> {
    let mut r = Reader::open(bytes, HNET_MAGIC, HNET_VERSION)?;
    let arch = read_arch(&mut r)?;
    let tensors = r.tensors()?;
    r.finish()?;
    let stored: u128 = tensors.iter().map(|t| t.len() as u128).sum();
    if arch.state_len() != Some(stored) {
        return Err(FormatError::Malformed(format!("{stored} stored values do not fit the declared architecture")));
    }
    let mut params = HNetParams::init(&arch, 0).map_err(|e| FormatError::Malformed(e.to_string()))?;
    assign_all(params.state_mut(), tensors, "HNET")?;
    Ok(params)
}

pub fn save_checkpoint<T: Float>(params: &HNetParams<T>, path: impl AsRef<Path>) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_checkpoint(params))?)
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<HNetParams<T>, FormatError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires it to match `arch`.
pub fn load_checkpoint_for<T: Float>(path: impl AsRef<Path>, arch: &ArchSpec) -> Result<HNetParams<T>, FormatError> {
    let params = load_checkpoint(path)?;
    if &params.arch != arch {
        return Err(FormatError::ArchMismatch(format!("checkpoint has {:?}, run expects {:?}", params.arch, arch)));
    }
    Ok(params)
}
