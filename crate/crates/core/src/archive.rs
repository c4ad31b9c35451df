//! On-disk artifact format, plus checkpoint save/load.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8  bytes  magic "DRIFTPRN"
//! u16       format version (currently 1)
//! u16       payload kind (1 = checkpoint, 2 = source statistics)
//! 32 bytes  architecture hash of the producing NetworkSpec
//! u32       section count
//! per section:
//!   u16 + bytes   section name (utf-8)
//!   4 × u32       tensor shape (n, c, h, w)
//!   numel × f32   payload values
//! ```
//!
//! Values are stored at 32-bit precision; states are passed through the same
//! quantization when created, so a save/load round trip is bit-exact. Every
//! read tracks its byte offset and reports it when the file ends early.

use std::path::Path;

use crate::detector::{NetworkSpec, NetworkState, BN_NAMES, CONSIDERED_BN, PARAM_NAMES};
use crate::error::Error;
use crate::tensor::{Real, Shape4, Tensor4};

pub const MAGIC: &[u8; 8] = b"DRIFTPRN";
pub const FORMAT_VERSION: u16 = 1;
pub const KIND_CHECKPOINT: u16 = 1;
pub const KIND_SOURCE_STATS: u16 = 2;

/// Serialize named tensors with the producing architecture's hash.
pub fn write_archive(
    path: &Path,
    kind: u16,
    spec_hash: &[u8; 32],
    sections: &[(String, Tensor4)],
) -> Result<(), Error> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    buf.extend_from_slice(spec_hash);
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, tensor) in sections {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize);
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        let s = tensor.shape();
        for d in [s.n, s.c, s.h, s.w] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.pos + n > self.data.len() {
            return Err(Error::Archive(format!(
                "archive truncated at byte {}: needed {} bytes for {}, {} left",
                self.pos,
                n,
                what,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Read an archive, verifying magic, version, kind, and (when given) the
/// architecture hash. Returns the named tensors in file order.
pub fn read_archive(
    path: &Path,
    expected_kind: u16,
    expected_hash: Option<&[u8; 32]>,
) -> Result<Vec<(String, Tensor4)>, Error> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Archive(format!("bad magic {:02x?}, not an artifact file", magic)));
    }
    let version = r.u16("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Archive(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = r.u16("payload kind")?;
    if kind != expected_kind {
        return Err(Error::Archive(format!(
            "payload kind {kind} does not match expected {expected_kind}"
        )));
    }
    let hash: [u8; 32] = r.take(32, "architecture hash")?.try_into().unwrap();
    if let Some(expect) = expected_hash {
        if &hash != expect {
            return Err(Error::Archive(
                "architecture mismatch: archive was produced by a different network spec".into(),
            ));
        }
    }
    let count = r.u32("section count")? as usize;
    let mut sections = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("section name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
            .map_err(|e| Error::Archive(format!("section {i} name is not utf-8: {e}")))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32("shape header")? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = shape.numel();
        let raw = r.take(numel * 4, &format!("section `{name}` payload"))?;
        let mut values = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as Real;
            if !v.is_finite() {
                return Err(Error::Archive(format!(
                    "section `{name}` holds a non-finite value {v}"
                )));
            }
            values.push(v);
        }
        sections.push((name, Tensor4::from_raw_unchecked(shape, values)));
    }
    if r.pos != data.len() {
        return Err(Error::Archive(format!(
            "{} trailing bytes after the last section",
            data.len() - r.pos
        )));
    }
    Ok(sections)
}

fn vector_tensor(v: &[Real]) -> Tensor4 {
    Tensor4::from_raw_unchecked(Shape4::vector(v.len()), v.to_vec())
}

/// Write the full network state: every parameter, the running normalization
/// statistics, and the pretrained scale snapshots.
pub fn save_checkpoint(path: &Path, state: &NetworkState) -> Result<(), Error> {
    let mut sections: Vec<(String, Tensor4)> = Vec::new();
    for (id, name) in PARAM_NAMES.iter().enumerate() {
        sections.push((name.to_string(), state.param(id as u32).clone()));
    }
    for (bn, name) in BN_NAMES.iter().enumerate() {
        sections.push((format!("{name}.mean"), vector_tensor(state.bn_mean(bn))));
        sections.push((format!("{name}.var"), vector_tensor(state.bn_var(bn))));
    }
    for (l, &bn) in CONSIDERED_BN.iter().enumerate() {
        sections.push((format!("{}.gamma0", BN_NAMES[bn]), vector_tensor(state.gamma0(l))));
    }
    write_archive(path, KIND_CHECKPOINT, &state.spec.spec_hash(), &sections)
}

/// Load a checkpoint produced for exactly this spec: the architecture hash
/// must match and every section must carry the shape the spec dictates.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<NetworkState, Error> {
    let sections = read_archive(path, KIND_CHECKPOINT, Some(&spec.spec_hash()))?;
    let mut by_name: std::collections::BTreeMap<String, Tensor4> = sections.into_iter().collect();
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Archive(format!("checkpoint is missing section `{name}`")))
    };
    let mut state = NetworkState::init(spec.clone(), 0)?;
    for (id, name) in PARAM_NAMES.iter().enumerate() {
        let t = take(name)?;
        if t.shape() != state.param(id as u32).shape() {
            return Err(Error::Archive(format!(
                "section `{name}` shape {} does not match expected {}",
                t.shape(),
                state.param(id as u32).shape()
            )));
        }
        state.set_param(id as u32, t);
    }
    for (bn, name) in BN_NAMES.iter().enumerate() {
        let mean = take(&format!("{name}.mean"))?;
        let var = take(&format!("{name}.var"))?;
        let expect = state.bn_mean(bn).len();
        if mean.data().len() != expect || var.data().len() != expect {
            return Err(Error::Archive(format!(
                "section `{name}.mean/var` length {} does not match {expect} channels",
                mean.data().len()
            )));
        }
        state.set_bn_stats(bn, mean.data().to_vec(), var.data().to_vec());
    }
    let mut gamma0 = Vec::new();
    for &bn in CONSIDERED_BN.iter() {
        gamma0.push(take(&format!("{}.gamma0", BN_NAMES[bn]))?.data().to_vec());
    }
    state.restore_gamma0(gamma0)?;
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Archive(format!("checkpoint has unexpected section `{name}`")));
    }
    Ok(state)
}

/// Write frozen source statistics for the given architecture. Values pass
/// through the same 32-bit storage as checkpoints; counts survive exactly up
/// to 2^24, far beyond anything a desk-scale run collects.
pub fn save_source_stats(
    path: &Path,
    spec: &NetworkSpec,
    stats: &crate::stats::SourceStats,
) -> Result<(), Error> {
    let mut sections: Vec<(String, Tensor4)> = Vec::new();
    for (l, t) in stats.image_mean.iter().enumerate() {
        sections.push((format!("image_mean.{l}"), t.clone()));
    }
    for (l, t) in stats.roi_mean.iter().enumerate() {
        sections.push((format!("roi_mean.{l}"), t.clone()));
    }
    sections.push(("global_mean".into(), vector_tensor(&stats.global_mean)));
    sections.push(("global_var".into(), vector_tensor(&stats.global_var)));
    for (k, v) in stats.class_mean.iter().enumerate() {
        sections.push((format!("class_mean.{k}"), vector_tensor(v)));
    }
    for (k, v) in stats.class_var.iter().enumerate() {
        sections.push((format!("class_var.{k}"), vector_tensor(v)));
    }
    let counts: Vec<Real> = stats.class_count.iter().map(|&c| c as Real).collect();
    sections.push(("class_count".into(), vector_tensor(&counts)));
    let seen = vec![stats.images_seen as Real, stats.rois_seen as Real];
    sections.push(("seen".into(), vector_tensor(&seen)));
    write_archive(path, KIND_SOURCE_STATS, &spec.spec_hash(), &sections)
}

/// Load source statistics produced for exactly this architecture.
pub fn load_source_stats(
    path: &Path,
    spec: &NetworkSpec,
) -> Result<crate::stats::SourceStats, Error> {
    let sections = read_archive(path, KIND_SOURCE_STATS, Some(&spec.spec_hash()))?;
    let mut by_name: std::collections::BTreeMap<String, Tensor4> = sections.into_iter().collect();
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Archive(format!("statistics file is missing section `{name}`")))
    };
    let layers = CONSIDERED_BN.len();
    let mut image_mean = Vec::with_capacity(layers);
    let mut roi_mean = Vec::with_capacity(layers);
    for l in 0..layers {
        image_mean.push(take(&format!("image_mean.{l}"))?);
        roi_mean.push(take(&format!("roi_mean.{l}"))?);
    }
    let global_mean = take("global_mean")?.data().to_vec();
    let global_var = take("global_var")?.data().to_vec();
    let mut class_mean = Vec::with_capacity(spec.classes);
    let mut class_var = Vec::with_capacity(spec.classes);
    for k in 0..spec.classes {
        class_mean.push(take(&format!("class_mean.{k}"))?.data().to_vec());
        class_var.push(take(&format!("class_var.{k}"))?.data().to_vec());
    }
    let class_count: Vec<u64> =
        take("class_count")?.data().iter().map(|&c| c as u64).collect();
    if class_count.len() != spec.classes {
        return Err(Error::Archive(format!(
            "statistics hold {} class counts for a {}-class network",
            class_count.len(),
            spec.classes
        )));
    }
    let seen = take("seen")?;
    if seen.data().len() != 2 {
        return Err(Error::Archive("malformed `seen` counter section".into()));
    }
    let (images_seen, rois_seen) = (seen.data()[0] as u64, seen.data()[1] as u64);
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Archive(format!("statistics file has unexpected section `{name}`")));
    }
    Ok(crate::stats::SourceStats {
        image_mean,
        roi_mean,
        global_mean,
        global_var,
        class_mean,
        class_var,
        class_count,
        images_seen,
        rois_seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::default();
        spec.image_size = 16;
        spec.widths = [4, 4, 8, 8];
        spec.fc_dim = 16;
        spec
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dp");
        let spec = small_spec();
        let mut state = NetworkState::init(spec.clone(), 42).unwrap();
        // perturb a few things so the round trip is non-trivial
        state.considered_gamma_mut(1)[0] = 0.031_25;
        state.quantize_f32();
        state.capture_gamma0();
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path, &spec).unwrap();
        for id in 0..PARAM_NAMES.len() as u32 {
            let a = state.param(id).data();
            let b = loaded.param(id).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {id}");
            }
        }
        for bn in 0..6 {
            assert_eq!(state.bn_mean(bn), loaded.bn_mean(bn));
            assert_eq!(state.bn_var(bn), loaded.bn_var(bn));
        }
        for l in 0..4 {
            assert_eq!(state.gamma0(l), loaded.gamma0(l));
        }
    }

    #[test]
    fn source_stats_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.dp");
        let spec = small_spec();
        // values chosen exactly representable at 32 bits, like real collected
        // stats after the storage pass
        let plane = |v: Real| Tensor4::from_raw_unchecked(Shape4::new(1, 2, 2, 2), vec![v; 8]);
        let stats = crate::stats::SourceStats {
            image_mean: (0..4).map(|l| plane(0.25 * l as Real)).collect(),
            roi_mean: (0..4).map(|l| plane(1.5 + l as Real)).collect(),
            global_mean: vec![0.5, -0.75, 2.0],
            global_var: vec![1.0, 0.25, 4.0],
            class_mean: vec![vec![0.125; 3]; 3],
            class_var: vec![vec![2.5; 3]; 3],
            class_count: vec![10, 0, 123_456],
            images_seen: 500,
            rois_seen: 1377,
        };
        save_source_stats(&path, &spec, &stats).unwrap();
        let loaded = load_source_stats(&path, &spec).unwrap();
        assert_eq!(loaded, stats);

        let mut other = spec.clone();
        other.fc_dim = 32;
        assert!(matches!(load_source_stats(&path, &other), Err(Error::Archive(_))));
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dp");
        let spec = small_spec();
        let mut state = NetworkState::init(spec.clone(), 1).unwrap();
        state.quantize_f32();
        save_checkpoint(&path, &state).unwrap();
        let full = std::fs::read(&path).unwrap();
        // cut the file off in the middle of a payload
        std::fs::write(&path, &full[..full.len() / 3]).unwrap();
        match load_checkpoint(&path, &spec) {
            Err(Error::Archive(msg)) => {
                assert!(msg.contains("truncated at byte"), "message was: {msg}");
            }
            other => panic!("expected archive error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn wrong_spec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dp");
        let spec = small_spec();
        let mut state = NetworkState::init(spec.clone(), 1).unwrap();
        state.quantize_f32();
        save_checkpoint(&path, &state).unwrap();
        let mut other = spec.clone();
        other.widths = [4, 8, 8, 8];
        match load_checkpoint(&path, &other) {
            Err(Error::Archive(msg)) => assert!(msg.contains("architecture"), "message: {msg}"),
            other => panic!("expected architecture error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bad_magic_and_wrong_kind_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.dp");
        std::fs::write(&path, b"NOTANARCHIVEFILE....").unwrap();
        assert!(matches!(
            read_archive(&path, KIND_CHECKPOINT, None),
            Err(Error::Archive(_))
        ));
        let spec = small_spec();
        let mut state = NetworkState::init(spec, 1).unwrap();
        state.quantize_f32();
        save_checkpoint(&path, &state).unwrap();
        match read_archive(&path, KIND_SOURCE_STATS, None) {
            Err(Error::Archive(msg)) => assert!(msg.contains("kind"), "message: {msg}"),
            other => panic!("expected kind error, got {:?}", other.map(|v| v.len())),
        }
    }
}
