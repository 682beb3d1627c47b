//! Weight stores, 2D-to-volumetric weight transfer, and checkpoints.
//!
//! A weight store is an ordered list of named tensors in a single file,
//! entry order reflecting network depth. ACSW layout, integers
//! little-endian:
//!
//! ```text
//! magic    4 bytes  "ACSW"
//! version  u32      currently 1
//! length   u64      manifest byte count
//! manifest text     first line: origin tag; then one line per entry:
//!                   name, extents joined by 'x', byte offset into the
//!                   blob, and optionally the word "frozen"
//! blob              all entry values, f32 little-endian, contiguous
//! ```
//!
//! Two initialization strategies read a store into a network whose k=3
//! kernels are 2D-shaped. Both walk the trainable weight tensors in depth
//! order and never consume a store entry twice; layers left over are
//! redrawn from the Kaiming distribution and the decision for every
//! weight is recorded in a report.
//!
//! * [`transfer_matching`] copies entries of exactly matching shape.
//! * [`transfer_all`] slices leading channels out of larger entries, for
//!   the encoder's k=3 convolutions only.
//!
//! Checkpoints reuse the container with origin `"checkpoint"`, covering
//! every parameter (frozen ones marked) plus the norm running statistics.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Params;
use crate::ops::kaiming_fill;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"ACSW";
const VERSION: u32 = 1;

/// Slope of the activation assumed by fallback initialization.
const FALLBACK_SLOPE: f64 = 0.01;

/// One named tensor in a store.
#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    values: Vec<f32>,
}

impl StoreEntry {
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// An ordered collection of named tensors with an origin tag.
#[derive(Debug, Clone)]
pub struct WeightStore {
    pub origin: String,
    entries: Vec<StoreEntry>,
}

impl WeightStore {
    pub fn new(origin: impl Into<String>) -> WeightStore {
        WeightStore { origin: origin.into(), entries: Vec::new() }
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry. Names key lookups and appear one per manifest
    /// line, so they must be unique and free of whitespace.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<f32>,
        frozen: bool,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::format(format!("store entry name {name:?} unusable")));
        }
        if self.get(&name).is_some() {
            return Err(Error::format(format!("duplicate store entry {name}")));
        }
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 || n != values.len() {
            return Err(Error::shape(format!(
                "store entry {name}: shape {shape:?} against {} values",
                values.len()
            )));
        }
        self.entries.push(StoreEntry { name, shape: shape.to_vec(), frozen, values });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(&self.origin);
        manifest.push('\n');
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {offset}", e.name, dims.join("x")));
            if e.frozen {
                manifest.push_str(" frozen");
            }
            manifest.push('\n');
            offset += 4 * e.values.len();
        }
        let mut buf = Vec::with_capacity(16 + manifest.len() + offset);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(manifest.as_bytes());
        for e in &self.entries {
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<WeightStore> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("read {}: {e}", path.display())))?;
        Self::parse(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    fn parse(bytes: &[u8]) -> Result<WeightStore> {
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(Error::format("not a weight store (bad magic)".to_string()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(format!("unsupported store version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::format("manifest truncated".to_string()));
        }
        let manifest = std::str::from_utf8(&bytes[16..16 + mlen])
            .map_err(|_| Error::format("manifest is not utf-8".to_string()))?;
        let blob = &bytes[16 + mlen..];
        let mut lines = manifest.lines();
        let origin = lines.next().unwrap_or("").trim().to_string();
        let mut store = WeightStore::new(origin);
        let mut expect_offset = 0usize;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(d), Some(o)) => (n, d, o),
                _ => return Err(Error::format(format!("manifest line {line:?} malformed"))),
            };
            let frozen = match parts.next() {
                None => false,
                Some("frozen") => true,
                Some(tok) => {
                    return Err(Error::format(format!("manifest token {tok:?} unknown")))
                }
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::format(format!("entry {name}: bad shape {dims:?}")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::format(format!("entry {name}: bad offset {offset:?}")))?;
            if offset != expect_offset {
                return Err(Error::format(format!(
                    "entry {name}: offset {offset} breaks contiguous order (expected {expect_offset})"
                )));
            }
            let count: usize = shape.iter().product();
            let end = offset + 4 * count;
            if end > blob.len() {
                return Err(Error::format(format!("entry {name}: blob truncated")));
            }
            let values = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.push(name, &shape, values, frozen)?;
            expect_offset = end;
        }
        if expect_offset != blob.len() {
            return Err(Error::format(format!(
                "blob holds {} bytes beyond the manifest's {expect_offset}",
                blob.len() - expect_offset
            )));
        }
        Ok(store)
    }
}

/// How one target weight was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Bit-exact copy of an identically shaped entry.
    Exact,
    /// Leading-channel slice of a larger entry.
    Slice,
    /// Redrawn from the Kaiming distribution.
    Kaiming,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Exact => "exact",
            Strategy::Slice => "slice",
            Strategy::Kaiming => "kaiming",
        })
    }
}

/// The decision made for one target weight tensor.
#[derive(Debug, Clone)]
pub struct MatchDecision {
    pub target: String,
    pub strategy: Strategy,
    /// Consumed store entry, absent for kaiming.
    pub source: Option<String>,
    /// Output- and input-channel ranges taken from the source.
    pub ranges: Option<[Range<usize>; 2]>,
}

/// Every decision of one transfer run, in network depth order. Each
/// trainable conv, transpose, and linear weight of the target appears
/// exactly once.
#[derive(Debug, Clone, Default)]
pub struct MatchReport {
    pub decisions: Vec<MatchDecision>,
}

impl MatchReport {
    pub fn decision(&self, target: &str) -> Option<&MatchDecision> {
        self.decisions.iter().find(|d| d.target == target)
    }

    /// (exact, slice, kaiming) totals.
    pub fn strategy_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for d in &self.decisions {
            match d.strategy {
                Strategy::Exact => c.0 += 1,
                Strategy::Slice => c.1 += 1,
                Strategy::Kaiming => c.2 += 1,
            }
        }
        c
    }
}

/// What the transfer walk can do with one parameter tensor.
enum TargetClass {
    /// Conv or linear weight a 2D store entry could initialize:
    /// out/in channels plus kernel extent (0 for linear weights).
    Matchable { out: usize, inp: usize, k: usize },
    /// Conv weight no 2D entry can fill (3D kernels, transposes);
    /// always redrawn, with this fan-in.
    Fallback { fan_in: usize },
    /// Not a weight (biases, norm affines); left untouched.
    Skip,
}

fn classify(name: &str, t: &Tensor) -> TargetClass {
    if !name.ends_with(".weight") {
        return TargetClass::Skip;
    }
    let e = t.shape();
    match e.len() {
        2 => TargetClass::Matchable { out: e[0], inp: e[1], k: 0 },
        4 if e[2] == e[3] => TargetClass::Matchable { out: e[0], inp: e[1], k: e[2] },
        5 if e[2] * e[3] * e[4] == 1 => TargetClass::Matchable { out: e[0], inp: e[1], k: 1 },
        // Transposed weights lay out as [in, out, spatial...].
        5 if name.ends_with(".up.weight") => TargetClass::Fallback { fan_in: e[0] * e[2] * e[3] * e[4] },
        _ => {
            let spatial: usize = e[2..].iter().product();
            TargetClass::Fallback { fan_in: e[1] * spatial }
        }
    }
}

fn fan_in_of(inp: usize, k: usize) -> usize {
    if k == 0 {
        inp
    } else {
        inp * k * k
    }
}

/// Entry shape an exact match requires for a target of this geometry.
/// k=1 volumetric kernels hold one value per channel pair, exactly like
/// a k=1 planar entry, so they are exchangeable.
fn exact_compatible(e: &StoreEntry, out: usize, inp: usize, k: usize) -> bool {
    match k {
        0 => e.shape == [out, inp],
        k => e.shape == [out, inp, k, k],
    }
}

fn slice_compatible(e: &StoreEntry, out: usize, inp: usize, k: usize) -> bool {
    e.shape.len() == 4 && e.shape[0] >= out && e.shape[1] >= inp && e.shape[2] == k && e.shape[3] == k
}

/// Copies the leading [0..out, 0..inp] channel block of a k-square entry
/// into a target laid out [out, inp, k, k] or [out, inp, 1, 1, 1].
fn copy_slice(t: &mut Tensor, e: &StoreEntry, out: usize, inp: usize, k: usize) {
    let si = e.shape[1];
    let kk = k * k;
    let dst = t.data_mut();
    for o in 0..out {
        for i in 0..inp {
            let d = (o * inp + i) * kk;
            let s = (o * si + i) * kk;
            dst[d..d + kk].copy_from_slice(&e.values[s..s + kk]);
        }
    }
}

/// Initializes every trainable weight from identically shaped store
/// entries where possible. Each target takes the earliest unconsumed
/// entry of its exact shape; everything unmatched is redrawn from the
/// Kaiming distribution. Biases and norm affines keep their built
/// values; frozen tensors are not touched.
pub fn transfer_matching<P: Params>(
    net: &mut P,
    store: &WeightStore,
    rng: &mut ChaCha8Rng,
) -> MatchReport {
    let mut consumed = vec![false; store.entries.len()];
    let mut report = MatchReport::default();
    net.visit_params_mut(&mut |name, t, frozen| {
        if frozen {
            return;
        }
        match classify(name, t) {
            TargetClass::Skip => {}
            TargetClass::Fallback { fan_in } => {
                kaiming_fill(t.data_mut(), fan_in, FALLBACK_SLOPE, rng);
                report.decisions.push(MatchDecision {
                    target: name.to_string(),
                    strategy: Strategy::Kaiming,
                    source: None,
                    ranges: None,
                });
            }
            TargetClass::Matchable { out, inp, k } => {
                let hit = store
                    .entries
                    .iter()
                    .enumerate()
                    .find(|(i, e)| !consumed[*i] && exact_compatible(e, out, inp, k));
                let decision = match hit {
                    Some((i, e)) => {
                        consumed[i] = true;
                        t.data_mut().copy_from_slice(&e.values);
                        MatchDecision {
                            target: name.to_string(),
                            strategy: Strategy::Exact,
                            source: Some(e.name.clone()),
                            ranges: Some([0..out, 0..inp]),
                        }
                    }
                    None => {
                        kaiming_fill(t.data_mut(), fan_in_of(inp, k), FALLBACK_SLOPE, rng);
                        MatchDecision {
                            target: name.to_string(),
                            strategy: Strategy::Kaiming,
                            source: None,
                            ranges: None,
                        }
                    }
                };
                report.decisions.push(decision);
            }
        }
    });
    report
}

/// Initializes the encoder's k=3 convolutions by slicing leading channels
/// out of store entries at least as wide, walking both sides in depth
/// order; every other trainable weight is redrawn and flagged kaiming in
/// the report. Equal shapes degenerate to a full copy but still count as
/// slices.
pub fn transfer_all<P: Params>(
    net: &mut P,
    store: &WeightStore,
    rng: &mut ChaCha8Rng,
) -> MatchReport {
    let mut consumed = vec![false; store.entries.len()];
    let mut report = MatchReport::default();
    net.visit_params_mut(&mut |name, t, frozen| {
        if frozen {
            return;
        }
        let sliceable = name.starts_with("encoder.")
            && name.contains(".block.")
            && name.ends_with(".conv.weight");
        match classify(name, t) {
            TargetClass::Skip => {}
            TargetClass::Fallback { fan_in } => {
                kaiming_fill(t.data_mut(), fan_in, FALLBACK_SLOPE, rng);
                report.decisions.push(MatchDecision {
                    target: name.to_string(),
                    strategy: Strategy::Kaiming,
                    source: None,
                    ranges: None,
                });
            }
            TargetClass::Matchable { out, inp, k } => {
                let hit = if sliceable && k >= 2 {
                    store
                        .entries
                        .iter()
                        .enumerate()
                        .find(|(i, e)| !consumed[*i] && slice_compatible(e, out, inp, k))
                } else {
                    None
                };
                let decision = match hit {
                    Some((i, e)) => {
                        consumed[i] = true;
                        copy_slice(t, e, out, inp, k);
                        MatchDecision {
                            target: name.to_string(),
                            strategy: Strategy::Slice,
                            source: Some(e.name.clone()),
                            ranges: Some([0..out, 0..inp]),
                        }
                    }
                    None => {
                        kaiming_fill(t.data_mut(), fan_in_of(inp, k), FALLBACK_SLOPE, rng);
                        MatchDecision {
                            target: name.to_string(),
                            strategy: Strategy::Kaiming,
                            source: None,
                            ranges: None,
                        }
                    }
                };
                report.decisions.push(decision);
            }
        }
    });
    report
}

/// Draws one parameter tensor from the Kaiming-normal distribution with
/// fan-in taken as the product of all extents past the first.
pub fn kaiming_init(shape: &[usize], rng: &mut ChaCha8Rng, slope: f64) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!("kaiming init: degenerate shape {shape:?}")));
    }
    let mut t = Tensor::zeros(shape);
    let fan_in: usize = shape[1..].iter().product();
    kaiming_fill(t.data_mut(), fan_in.max(1), slope, rng);
    Ok(t)
}

/// Writes every parameter (frozen ones marked) and every norm running
/// statistic of the network into a store with origin `"checkpoint"`.
pub fn save_checkpoint<P: Params>(net: &P, path: &Path) -> Result<()> {
    checkpoint_store(net).and_then(|s| s.save(path))
}

/// The in-memory form of [`save_checkpoint`].
pub fn checkpoint_store<P: Params>(net: &P) -> Result<WeightStore> {
    let mut rows: Vec<(String, Vec<usize>, Vec<f32>, bool)> = Vec::new();
    net.visit_params(&mut |name, t, frozen| {
        rows.push((name.to_string(), t.shape().to_vec(), t.data().to_vec(), frozen));
    });
    net.visit_buffers(&mut |name, data| {
        rows.push((name.to_string(), vec![data.len()], data.to_vec(), false));
    });
    let mut store = WeightStore::new("checkpoint");
    for (name, shape, values, frozen) in rows {
        store.push(name, &shape, values, frozen)?;
    }
    Ok(store)
}

/// Restores a checkpoint into an already built network. Every network
/// tensor must find a store entry of its name, shape, and frozen flag,
/// and every store entry must be used; the first mismatch aborts with
/// its name.
pub fn load_checkpoint<P: Params>(net: &mut P, path: &Path) -> Result<()> {
    let store = WeightStore::load(path)?;
    load_from_store(net, &store)
}

/// The in-memory form of [`load_checkpoint`].
pub fn load_from_store<P: Params>(net: &mut P, store: &WeightStore) -> Result<()> {
    let mut used: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut fail: Option<Error> = None;
    let mut restore = |name: &str, shape: &[usize], dst: &mut [f32], frozen: bool| {
        if fail.is_some() {
            return;
        }
        let entry = match store.get(name) {
            Some(e) => e,
            None => {
                fail = Some(Error::format(format!("checkpoint lacks entry {name}")));
                return;
            }
        };
        if entry.shape != shape {
            fail = Some(Error::shape(format!(
                "checkpoint entry {name}: shape {:?} does not fit {shape:?}",
                entry.shape
            )));
            return;
        }
        if entry.frozen != frozen {
            fail = Some(Error::format(format!(
                "checkpoint entry {name}: frozen flag {} does not match the network",
                entry.frozen
            )));
            return;
        }
        dst.copy_from_slice(&entry.values);
        used.insert(name.to_string());
    };
    net.visit_params_mut(&mut |name, t, frozen| {
        let shape = t.shape().to_vec();
        restore(name, &shape, t.data_mut(), frozen);
    });
    net.visit_buffers_mut(&mut |name, data| {
        let shape = [data.len()];
        restore(name, &shape, data, false);
    });
    if let Some(e) = fail {
        return Err(e);
    }
    if used.len() != store.len() {
        let extra = store
            .entries
            .iter()
            .find(|e| !used.contains(&e.name))
            .map(|e| e.name.as_str())
            .unwrap_or("?");
        return Err(Error::format(format!(
            "checkpoint holds {} entries the network lacks (such as {extra})",
            store.len() - used.len()
        )));
    }
    Ok(())
}

/// A deterministic store shaped like the canonical 18-layer residual 2D
/// classifier: the 7x7 stem, four basic-block stages of widths
/// 64/128/256/512 (each widening stage opening with a strided conv and a
/// 1x1 downsample), and the final fully connected row. 21 entries, values
/// drawn Kaiming-normal from the seed.
pub fn resnet18_fixture(seed: u64) -> WeightStore {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new("resnet18-imagenet");
    let mut add = |store: &mut WeightStore, name: String, shape: &[usize]| {
        let fan_in: usize = shape[1..].iter().product();
        let mut values = vec![0.0f32; shape.iter().product()];
        kaiming_fill(&mut values, fan_in, 0.0, &mut rng);
        store.push(name, shape, values, false).expect("fixture entries are well formed");
    };
    add(&mut store, "conv1.weight".to_string(), &[64, 3, 7, 7]);
    for block in 0..2 {
        for conv in 1..=2 {
            add(&mut store, format!("layer1.{block}.conv{conv}.weight"), &[64, 64, 3, 3]);
        }
    }
    for (layer, width) in [(2usize, 128usize), (3, 256), (4, 512)] {
        let prev = width / 2;
        add(&mut store, format!("layer{layer}.0.conv1.weight"), &[width, prev, 3, 3]);
        add(&mut store, format!("layer{layer}.0.conv2.weight"), &[width, width, 3, 3]);
        add(&mut store, format!("layer{layer}.0.downsample.0.weight"), &[width, prev, 1, 1]);
        add(&mut store, format!("layer{layer}.1.conv1.weight"), &[width, width, 3, 3]);
        add(&mut store, format!("layer{layer}.1.conv2.weight"), &[width, width, 3, 3]);
    }
    add(&mut store, "fc.weight".to_string(), &[1000, 512]);
    store
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::network::{default_plan, ConvKind, Jcs, NetworkPlan, NormKind, Segmenter, Variant};

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    fn param_clone<P: Params>(net: &P, name: &str) -> Tensor {
        let mut out = None;
        net.visit_params(&mut |n, t, _| {
            if n == name {
                out = Some(t.clone());
            }
        });
        out.unwrap_or_else(|| panic!("parameter {name} not found"))
    }

    fn state_bits<P: Params>(net: &P) -> Vec<(String, Vec<u32>)> {
        let mut v = Vec::new();
        net.visit_params(&mut |n, t, _| v.push((n.to_string(), bits(t.data()))));
        net.visit_buffers(&mut |n, d| v.push((format!("buffer {n}"), bits(d))));
        v
    }

    fn narrow_plan(kind: ConvKind, norm: NormKind) -> NetworkPlan {
        let variant = match kind {
            ConvKind::ThreeD => Variant::Baseline,
            ConvKind::Acs => Variant::Acs,
        };
        let mut plan = default_plan(variant, kind, norm);
        for (st, ch) in plan.encoder_stages.iter_mut().zip([2, 3, 4, 4, 5, 5]) {
            st.channels = ch;
        }
        for d in plan.decoder_stages.iter_mut() {
            d.channels = plan.encoder_stages[d.skip_stage].channels;
        }
        plan
    }

    #[test]
    fn store_roundtrips_bit_exact() {
        let mut store = WeightStore::new("unit-test");
        store
            .push("a.weight", &[2, 3], vec![1.5, -0.0, f32::NAN, 3.0e-41, -2.25, 7.0], false)
            .unwrap();
        store.push("b.running_mean", &[4], vec![0.0, 1.0, 2.0, 3.0], true).unwrap();
        store.push("c.conv.weight", &[2, 2, 1, 1], vec![9.0, 8.0, 7.0, 6.0], false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.acsw");
        store.save(&path).unwrap();
        let back = WeightStore::load(&path).unwrap();

        assert_eq!(back.origin, "unit-test");
        assert_eq!(back.len(), 3);
        for (a, b) in store.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.frozen, b.frozen);
            assert_eq!(bits(&a.values), bits(&b.values));
        }

        let empty = WeightStore::new("nothing");
        let path = dir.path().join("e.acsw");
        empty.save(&path).unwrap();
        let back = WeightStore::load(&path).unwrap();
        assert_eq!(back.origin, "nothing");
        assert!(back.is_empty());
    }

    #[test]
    fn store_rejects_bad_pushes() {
        let mut store = WeightStore::new("o");
        store.push("a.weight", &[2], vec![1.0, 2.0], false).unwrap();
        assert!(store.push("a.weight", &[2], vec![1.0, 2.0], false).is_err());
        assert!(store.push("has space", &[1], vec![0.0], false).is_err());
        assert!(store.push("", &[1], vec![0.0], false).is_err());
        assert!(store.push("b", &[3], vec![0.0], false).is_err());
        assert!(store.push("c", &[0], vec![], false).is_err());
        assert!(store.push("d", &[], vec![], false).is_err());
        assert_eq!(store.len(), 1);
    }

    fn raw_file(manifest: &str, blob: &[f32]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(manifest.as_bytes());
        for v in blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    #[test]
    fn store_load_rejects_malformed_bytes() {
        let good = raw_file("o\na.weight 2 0\n", &[1.0, 2.0]);
        assert!(WeightStore::parse(&good).is_ok());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(WeightStore::parse(&bad).is_err(), "magic");

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(WeightStore::parse(&bad).is_err(), "version");

        let mut bad = good.clone();
        bad[8] = 255;
        assert!(WeightStore::parse(&bad).is_err(), "manifest length past file end");

        assert!(WeightStore::parse(&good[..good.len() - 2]).is_err(), "truncated blob");

        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0, 0, 0]);
        assert!(WeightStore::parse(&bad).is_err(), "trailing bytes");

        let cases: &[(&str, &[f32], &str)] = &[
            ("o\na.weight 1 0\nb.weight 1 8\n", &[0.0, 0.0, 0.0], "offset gap"),
            ("o\na.weight 1 0\nb.weight 1 0\n", &[0.0], "overlapping offsets"),
            ("o\na.weight 1 0\na.weight 1 4\n", &[0.0, 0.0], "duplicate name"),
            ("o\na.weight 1x0 0\n", &[], "zero extent"),
            ("o\na.weight 1 0 fred\n", &[0.0], "unknown token"),
            ("o\na.weight one 0\n", &[0.0], "unparsable shape"),
            ("o\na.weight 1\n", &[0.0], "missing offset"),
        ];
        for (manifest, blob, what) in cases {
            assert!(WeightStore::parse(&raw_file(manifest, blob)).is_err(), "{what}");
        }
    }

    #[test]
    fn fixture_matches_published_layout() {
        let store = resnet18_fixture(11);
        assert_eq!(store.origin, "resnet18-imagenet");
        assert_eq!(store.len(), 21);
        let shape = |name: &str| store.get(name).map(|e| e.shape.clone());
        assert_eq!(store.entries()[0].name, "conv1.weight");
        assert_eq!(shape("conv1.weight"), Some(vec![64, 3, 7, 7]));
        assert_eq!(store.entries()[1].name, "layer1.0.conv1.weight");
        assert_eq!(shape("layer1.0.conv1.weight"), Some(vec![64, 64, 3, 3]));
        assert_eq!(store.entries()[7].name, "layer2.0.downsample.0.weight");
        assert_eq!(shape("layer2.0.downsample.0.weight"), Some(vec![128, 64, 1, 1]));
        assert_eq!(shape("layer4.1.conv2.weight"), Some(vec![512, 512, 3, 3]));
        assert_eq!(store.entries()[20].name, "fc.weight");
        assert_eq!(shape("fc.weight"), Some(vec![1000, 512]));
        assert!(store.entries().iter().all(|e| !e.frozen));

        let again = resnet18_fixture(11);
        for (a, b) in store.entries().iter().zip(again.entries()) {
            assert_eq!(bits(&a.values), bits(&b.values), "{}", a.name);
        }
        let other = resnet18_fixture(12);
        assert_ne!(bits(&store.entries()[0].values), bits(&other.entries()[0].values));
    }

    #[test]
    fn matching_copies_equal_shapes_in_depth_order() {
        let plan = default_plan(Variant::Acs, ConvKind::Acs, NormKind::Instance);
        let mut net = Segmenter::build(&plan, 3).unwrap();
        let store = resnet18_fixture(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = transfer_matching(&mut net, &store, &mut rng);

        assert_eq!(report.decisions.len(), 33);
        assert_eq!(report.strategy_counts(), (8, 0, 25));

        let expected = [
            ("encoder.1.block.1.conv.weight", "layer1.0.conv1.weight"),
            ("encoder.2.block.0.conv.weight", "layer2.0.conv1.weight"),
            ("encoder.2.block.1.conv.weight", "layer2.0.conv2.weight"),
            ("encoder.3.block.0.conv.weight", "layer3.0.conv1.weight"),
            ("encoder.3.block.1.conv.weight", "layer3.0.conv2.weight"),
            ("decoder.1.block.1.conv.weight", "layer3.1.conv1.weight"),
            ("decoder.2.block.1.conv.weight", "layer2.1.conv1.weight"),
            ("decoder.3.block.1.conv.weight", "layer1.0.conv2.weight"),
        ];
        for (target, source) in expected {
            let d = report.decision(target).unwrap_or_else(|| panic!("no decision for {target}"));
            assert_eq!(d.strategy, Strategy::Exact, "{target}");
            assert_eq!(d.source.as_deref(), Some(source), "{target}");
            let got = param_clone(&net, target);
            assert_eq!(bits(got.data()), bits(store.get(source).unwrap().values()), "{target}");
        }

        let mut sources: Vec<&str> =
            report.decisions.iter().filter_map(|d| d.source.as_deref()).collect();
        sources.sort_unstable();
        let before = sources.len();
        sources.dedup();
        assert_eq!(sources.len(), before, "a store entry was consumed twice");

        for kaiming in ["encoder.0.block.0.conv.weight", "encoder.1.proj.weight", "head.weight"] {
            let d = report.decision(kaiming).unwrap();
            assert_eq!(d.strategy, Strategy::Kaiming, "{kaiming}");
            assert!(d.source.is_none());
        }
        assert!(report.decision("decoder.0.up.weight").is_some());
        assert!(report.decision("encoder.0.block.0.norm.gamma").is_none());
        assert!(report.decision("head.bias").is_none());
    }

    #[test]
    fn matching_leaves_biases_and_norms_untouched() {
        let plan = default_plan(Variant::Acs, ConvKind::Acs, NormKind::Instance);
        let mut net = Segmenter::build(&plan, 3).unwrap();
        let pristine = Segmenter::build(&plan, 3).unwrap();
        let store = resnet18_fixture(11);
        transfer_matching(&mut net, &store, &mut ChaCha8Rng::seed_from_u64(5));
        for name in [
            "encoder.0.block.0.norm.gamma",
            "encoder.0.block.0.norm.beta",
            "encoder.1.proj.bias",
            "decoder.0.up.bias",
            "head.bias",
        ] {
            let a = param_clone(&net, name);
            let b = param_clone(&pristine, name);
            assert_eq!(bits(a.data()), bits(b.data()), "{name}");
        }
        let a = param_clone(&net, "head.weight");
        let b = param_clone(&pristine, "head.weight");
        assert_ne!(bits(a.data()), bits(b.data()), "head.weight should be redrawn");
    }

    fn assert_leading_slice(t: &Tensor, e: &StoreEntry) {
        let (out, inp, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let si = e.shape[1];
        let kk = k * k;
        for o in 0..out {
            for i in 0..inp {
                let d = (o * inp + i) * kk;
                let s = (o * si + i) * kk;
                assert_eq!(bits(&t.data()[d..d + kk]), bits(&e.values()[s..s + kk]));
            }
        }
    }

    #[test]
    fn transfer_all_slices_every_encoder_conv() {
        let plan = default_plan(Variant::Acs, ConvKind::Acs, NormKind::Instance);
        let mut net = Segmenter::build(&plan, 3).unwrap();
        let store = resnet18_fixture(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = transfer_all(&mut net, &store, &mut rng);

        assert_eq!(report.strategy_counts(), (0, 12, 21));

        let expected = [
            ("encoder.0.block.0.conv.weight", "layer1.0.conv1.weight"),
            ("encoder.0.block.1.conv.weight", "layer1.0.conv2.weight"),
            ("encoder.1.block.0.conv.weight", "layer1.1.conv1.weight"),
            ("encoder.1.block.1.conv.weight", "layer1.1.conv2.weight"),
            ("encoder.2.block.0.conv.weight", "layer2.0.conv1.weight"),
            ("encoder.2.block.1.conv.weight", "layer2.0.conv2.weight"),
            ("encoder.3.block.0.conv.weight", "layer3.0.conv1.weight"),
            ("encoder.3.block.1.conv.weight", "layer3.0.conv2.weight"),
            ("encoder.4.block.0.conv.weight", "layer4.0.conv1.weight"),
            ("encoder.4.block.1.conv.weight", "layer4.0.conv2.weight"),
            ("encoder.5.block.0.conv.weight", "layer4.1.conv1.weight"),
            ("encoder.5.block.1.conv.weight", "layer4.1.conv2.weight"),
        ];
        for (target, source) in expected {
            let d = report.decision(target).unwrap_or_else(|| panic!("no decision for {target}"));
            assert_eq!(d.strategy, Strategy::Slice, "{target}");
            assert_eq!(d.source.as_deref(), Some(source), "{target}");
            let t = param_clone(&net, target);
            assert_eq!(
                d.ranges,
                Some([0..t.shape()[0], 0..t.shape()[1]]),
                "{target}"
            );
            assert_leading_slice(&t, store.get(source).unwrap());
        }

        for d in &report.decisions {
            if d.target.starts_with("encoder.") && d.target.contains(".block.") {
                assert_eq!(d.strategy, Strategy::Slice, "{} fell back", d.target);
            } else {
                assert_eq!(d.strategy, Strategy::Kaiming, "{}", d.target);
            }
        }
    }

    #[test]
    fn volumetric_kernels_always_fall_back() {
        let plan = default_plan(Variant::Baseline, ConvKind::ThreeD, NormKind::Instance);
        let store = resnet18_fixture(11);

        let mut net = Segmenter::build(&plan, 3).unwrap();
        let report = transfer_matching(&mut net, &store, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(report.strategy_counts(), (0, 0, 28));

        let mut net = Segmenter::build(&plan, 3).unwrap();
        let report = transfer_all(&mut net, &store, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(report.strategy_counts(), (0, 0, 28));
    }

    #[test]
    fn kaiming_init_is_seeded_and_scaled() {
        let shape = [64usize, 64, 3, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = kaiming_init(&shape, &mut rng, 0.01).unwrap();
        let n = t.data().len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expect = (2.0 / (1.0 + 0.01f64 * 0.01) / 576.0).sqrt();
        assert!(mean.abs() < expect * 0.05, "mean {mean}");
        assert!((var.sqrt() - expect).abs() < expect * 0.02, "std {} vs {expect}", var.sqrt());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let again = kaiming_init(&shape, &mut rng, 0.01).unwrap();
        assert_eq!(bits(t.data()), bits(again.data()));

        assert!(kaiming_init(&[], &mut rng, 0.0).is_err());
        assert!(kaiming_init(&[4, 0], &mut rng, 0.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrips_params_and_buffers() {
        let plan = narrow_plan(ConvKind::Acs, NormKind::Batch);
        let mut net = Segmenter::build(&plan, 3).unwrap();
        let mut tick = 0.0f32;
        net.visit_buffers_mut(&mut |_, d| {
            for v in d {
                tick += 0.25;
                *v = tick;
            }
        });

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.acsw");
        save_checkpoint(&net, &path).unwrap();

        let mut other = Segmenter::build(&plan, 99).unwrap();
        assert_ne!(state_bits(&net), state_bits(&other));
        load_checkpoint(&mut other, &path).unwrap();
        assert_eq!(state_bits(&net), state_bits(&other));

        let store = WeightStore::load(&path).unwrap();
        assert_eq!(store.origin, "checkpoint");
        assert!(store.entries().iter().any(|e| e.name.ends_with(".norm.running_mean")));
    }

    #[test]
    fn checkpoint_preserves_frozen_flags() {
        let mut plan = narrow_plan(ConvKind::Acs, NormKind::Instance);
        plan.variant = Variant::Jcs;
        plan.se_reduction = 1;
        plan.classifier_hidden = 3;
        let net = Jcs::build(&plan, 3).unwrap();
        let store = checkpoint_store(&net).unwrap();

        let frozen: Vec<&str> = store
            .entries()
            .iter()
            .filter(|e| e.frozen)
            .map(|e| e.name.as_str())
            .collect();
        assert!(!frozen.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("classifier.")));

        let mut other = Jcs::build(&plan, 99).unwrap();
        load_from_store(&mut other, &store).unwrap();
        assert_eq!(state_bits(&net), state_bits(&other));

        let mut tampered = store.clone();
        let idx = tampered.entries.iter().position(|e| e.frozen).unwrap();
        tampered.entries[idx].frozen = false;
        let mut other = Jcs::build(&plan, 99).unwrap();
        let err = load_from_store(&mut other, &tampered).unwrap_err();
        assert!(err.to_string().contains("frozen"), "{err}");
    }

    #[test]
    fn checkpoint_mismatches_name_the_offender() {
        let plan = narrow_plan(ConvKind::Acs, NormKind::Instance);
        let net = Segmenter::build(&plan, 3).unwrap();
        let store = checkpoint_store(&net).unwrap();

        let mut wide = narrow_plan(ConvKind::Acs, NormKind::Instance);
        wide.encoder_stages[0].channels = 3;
        wide.decoder_stages.last_mut().unwrap().channels = 3;
        let mut other = Segmenter::build(&wide, 3).unwrap();
        let err = load_from_store(&mut other, &store).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");

        let mut missing = store.clone();
        missing.entries.retain(|e| e.name != "head.bias");
        let mut other = Segmenter::build(&plan, 3).unwrap();
        let err = load_from_store(&mut other, &missing).unwrap_err();
        assert!(err.to_string().contains("head.bias"), "{err}");

        let mut extra = store.clone();
        extra.push("ghost.weight", &[1], vec![0.0], false).unwrap();
        let mut other = Segmenter::build(&plan, 3).unwrap();
        let err = load_from_store(&mut other, &extra).unwrap_err();
        assert!(err.to_string().contains("ghost.weight"), "{err}");
    }

    #[test]
    fn transfer_then_forward_reproduces_bitwise() {
        let run = || {
            let plan = narrow_plan(ConvKind::Acs, NormKind::Instance);
            let mut net = Segmenter::build(&plan, 4).unwrap();
            let store = resnet18_fixture(11);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let report = transfer_all(&mut net, &store, &mut rng);
            let mut data_rng = ChaCha8Rng::seed_from_u64(7);
            let n = 4 * 33 * 33 * 33;
            let x = Tensor::new(
                &[4, 33, 33, 33],
                (0..n).map(|_| rand::Rng::gen_range(&mut data_rng, -1.0..1.0)).collect(),
            )
            .unwrap();
            let y = net.infer(&x).unwrap();
            (report.strategy_counts(), bits(y.data()))
        };
        let (counts_a, bits_a) = run();
        let (counts_b, bits_b) = run();
        assert_eq!(counts_a.1, 12, "narrow encoder convs still fit inside the store entries");
        assert_eq!(counts_a, counts_b);
        assert_eq!(bits_a, bits_b);
    }
}
