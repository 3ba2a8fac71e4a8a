//! Magnitude-based unstructured pruning, tickets and the relative ℓ2
//! trajectory distance.
//!
//! Ties at the pruning threshold are broken by registry order and then by
//! flat index: among equal magnitudes the earlier coordinate is pruned first.

use std::cmp::Ordering;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{self, Checkpoint, ModelSpec, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// One threshold over all prunable weights pooled together.
    #[default]
    Global,
    /// A separate threshold per parameter entry.
    Layerwise,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl MaskEntry {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::contract(format!(
                "mask shape {shape:?} does not hold {} bits",
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// `true` keeps the coordinate, `false` prunes it.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Binary keep/prune pattern aligned with the prunable entries of a
/// [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask {
    entries: IndexMap<String, MaskEntry>,
}

impl Mask {
    pub fn all_ones(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .filter(|(_, p)| p.prunable)
            .map(|(n, p)| (n.to_string(), MaskEntry::ones(p.value.shape())))
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, MaskEntry)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MaskEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.bits.len()).sum()
    }

    pub fn pruned(&self) -> usize {
        self.total() - self.entries.values().map(MaskEntry::kept).sum::<usize>()
    }

    /// Fraction of masked coordinates that are pruned.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.pruned() as f64 / total as f64
        }
    }

    /// Fails unless the mask covers exactly the prunable entries of `params`
    /// with matching shapes.
    pub fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        let prunable: Vec<_> = params.iter().filter(|(_, p)| p.prunable).collect();
        if prunable.len() != self.entries.len() {
            return Err(Error::contract(format!(
                "mask has {} entries but the model has {} prunable entries",
                self.entries.len(),
                prunable.len()
            )));
        }
        for ((name, p), (mname, entry)) in prunable.into_iter().zip(&self.entries) {
            if name != mname || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::contract(format!(
                    "mask entry `{mname}` {:?} does not align with `{name}` {:?}",
                    entry.shape,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// True if every coordinate pruned here is also pruned in `later`.
    pub fn is_refined_by(&self, later: &Mask) -> bool {
        self.entries.len() == later.entries.len()
            && self.entries.iter().zip(&later.entries).all(|((a, ea), (b, eb))| {
                a == b && ea.bits.iter().zip(&eb.bits).all(|(x, y)| *x || !*y)
            })
    }
}

struct Candidate {
    magnitude: f32,
    entry: usize,
    index: usize,
}

fn by_magnitude(a: &Candidate, b: &Candidate) -> Ordering {
    a.magnitude
        .total_cmp(&b.magnitude)
        .then(a.entry.cmp(&b.entry))
        .then(a.index.cmp(&b.index))
}

/// Prunes `floor(ratio·N)` coordinates with the smallest magnitudes, where
/// N counts the prunable weights in scope.
pub fn magnitude_prune(params: &ParamSet, ratio: f64, scope: Scope) -> Result<Mask> {
    check_ratio(ratio)?;
    let counts = target_counts(params, ratio, scope)?;
    prune_to_counts(params, &counts, scope, None)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("pruning ratio must lie in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Number of coordinates to prune: one count for global scope, or one per
/// prunable entry for layerwise scope.
fn target_counts(params: &ParamSet, ratio: f64, scope: Scope) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = params
        .iter()
        .filter(|(_, p)| p.prunable)
        .map(|(_, p)| p.value.len())
        .collect();
    if sizes.is_empty() {
        return Err(Error::contract("no prunable parameters"));
    }
    Ok(match scope {
        Scope::Global => vec![(ratio * sizes.iter().sum::<usize>() as f64).floor() as usize],
        Scope::Layerwise => sizes.iter().map(|&n| (ratio * n as f64).floor() as usize).collect(),
    })
}

/// Builds a mask pruning exactly `counts` coordinates. Coordinates already
/// pruned by `prior` are pruned first, so masks only ever lose ones.
fn prune_to_counts(params: &ParamSet, counts: &[usize], scope: Scope, prior: Option<&Mask>) -> Result<Mask> {
    let prunable: Vec<(&str, &nn::Param)> = params.iter().filter(|(_, p)| p.prunable).collect();
    if prunable.is_empty() {
        return Err(Error::contract("no prunable parameters"));
    }
    if let Some(m) = prior {
        m.check_aligned(params)?;
    }
    let mut bits: Vec<Vec<bool>> = prunable.iter().map(|(_, p)| vec![true; p.value.len()]).collect();

    let groups: Vec<Vec<usize>> = match scope {
        Scope::Global => vec![(0..prunable.len()).collect()],
        Scope::Layerwise => (0..prunable.len()).map(|i| vec![i]).collect(),
    };
    for (group, &count) in groups.iter().zip(counts) {
        let mut forced = 0;
        let mut pool = Vec::new();
        for &e in group {
            let (name, p) = prunable[e];
            let prior_bits = prior.and_then(|m| m.get(name)).map(|m| m.bits());
            for (i, w) in p.value.data().iter().enumerate() {
                if prior_bits.is_some_and(|b| !b[i]) {
                    bits[e][i] = false;
                    forced += 1;
                } else {
                    pool.push(Candidate {
                        magnitude: w.abs(),
                        entry: e,
                        index: i,
                    });
                }
            }
        }
        if count < forced {
            return Err(Error::contract(format!(
                "cannot prune {count} coordinates: {forced} are already pruned"
            )));
        }
        let extra = count - forced;
        if extra > 0 {
            pool.select_nth_unstable_by(extra - 1, by_magnitude);
            for c in &pool[..extra] {
                bits[c.entry][c.index] = false;
            }
        }
    }

    let mut entries = IndexMap::new();
    for ((name, p), b) in prunable.into_iter().zip(bits) {
        entries.insert(name.to_string(), MaskEntry::new(p.value.shape().to_vec(), b)?);
    }
    Ok(Mask { entries })
}

/// Zeroes pruned coordinates of the prunable entries; other entries are
/// left untouched.
pub fn apply_mask(params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    let mut out = params.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(params: &mut ParamSet, mask: &Mask) -> Result<()> {
    mask.check_aligned(params)?;
    for (name, p) in params.iter_mut() {
        if let Some(entry) = mask.get(name) {
            for (w, &keep) in p.value.data_mut().iter_mut().zip(entry.bits()) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Largest magnitude found at a pruned coordinate; 0 when the mask holds.
pub fn max_pruned_magnitude(params: &ParamSet, mask: &Mask) -> f64 {
    let mut worst = 0.0f64;
    for (name, entry) in mask.iter() {
        if let Some(p) = params.get(name) {
            for (w, &keep) in p.value.data().iter().zip(entry.bits()) {
                if !keep {
                    worst = worst.max(w.abs() as f64);
                }
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Natural,
    FgsmAt,
    PgdAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ratio: f64,
    pub scope: Scope,
    pub source_mode: SourceMode,
    pub source_lr: f64,
    /// 1 for one-shot pruning.
    pub rounds: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    #[serde(default)]
    pub note: String,
}

/// Saved initialization with the mask applied, plus the mask itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub spec: ModelSpec,
    pub init: ParamSet,
    pub mask: Mask,
    pub provenance: Provenance,
}

impl Ticket {
    /// The random-reinitialization control: same mask on a fresh init.
    pub fn reinitialized(&self, seed: u64) -> Result<Ticket> {
        let fresh = nn::init(&self.spec, seed)?;
        let mut provenance = self.provenance.clone();
        provenance.init_seed = seed;
        provenance.note = "random reinitialization control".into();
        Ok(Ticket {
            spec: self.spec.clone(),
            init: apply_mask(&fresh, &self.mask)?,
            mask: self.mask.clone(),
            provenance,
        })
    }
}

/// Mask from the magnitudes of `trained`, applied to `init`.
pub fn make_ticket(
    spec: &ModelSpec,
    init: &ParamSet,
    trained: &ParamSet,
    ratio: f64,
    scope: Scope,
    provenance: Provenance,
) -> Result<Ticket> {
    init.check_aligned(trained)?;
    let mask = magnitude_prune(trained, ratio, scope)?;
    Ok(Ticket {
        spec: spec.clone(),
        init: apply_mask(init, &mask)?,
        mask,
        provenance,
    })
}

/// Per-round ratio `r` with `(1 - r)^rounds = 1 - target`.
pub fn per_round_ratio(target: f64, rounds: usize) -> f64 {
    1.0 - (1.0 - target).powf(1.0 / rounds as f64)
}

/// Repeated train → prune → reset. `train` receives the masked init and the
/// current mask and returns trained weights. Returns the final ticket and
/// the mask after every round.
pub fn iterative_prune<F>(
    spec: &ModelSpec,
    init: &ParamSet,
    mut train: F,
    target_ratio: f64,
    rounds: usize,
    scope: Scope,
    provenance: Provenance,
) -> Result<(Ticket, Vec<Mask>)>
where
    F: FnMut(&ParamSet, &Mask, usize) -> Result<ParamSet>,
{
    check_ratio(target_ratio)?;
    if rounds == 0 {
        return Err(Error::contract("iterative pruning needs at least one round"));
    }
    let r = per_round_ratio(target_ratio, rounds);
    let mut mask = Mask::all_ones(init);
    let mut current = init.clone();
    let mut history = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let trained = train(&current, &mask, round)?;
        init.check_aligned(&trained)?;
        let cumulative = if round == rounds {
            target_ratio
        } else {
            1.0 - (1.0 - r).powi(round as i32)
        };
        let counts = target_counts(init, cumulative, scope)?;
        mask = prune_to_counts(&trained, &counts, scope, Some(&mask))?;
        current = apply_mask(init, &mask)?;
        history.push(mask.clone());
    }
    let provenance = Provenance { rounds, ..provenance };
    Ok((
        Ticket {
            spec: spec.clone(),
            init: current,
            mask,
            provenance,
        },
        history,
    ))
}

/// `‖w_f − w_p‖₂ / ‖w_f‖₂` over the concatenation of every parameter.
pub fn relative_distance(full: &ParamSet, pruned: &ParamSet) -> Result<f64> {
    full.check_aligned(pruned)?;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for ((_, a), (_, b)) in full.iter().zip(pruned.iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            let (x, y) = (*x as f64, *y as f64);
            diff += (x - y) * (x - y);
            norm += x * x;
        }
    }
    if norm == 0.0 {
        return Err(Error::contract("relative distance undefined: ‖w_f‖ = 0"));
    }
    Ok((diff / norm).sqrt())
}

/// Per-epoch relative distances between two trajectories, truncated to the
/// common length.
pub fn distance_series(full: &[ParamSet], pruned: &[ParamSet]) -> Result<Vec<f64>> {
    full.iter()
        .zip(pruned)
        .map(|(f, p)| relative_distance(f, p))
        .collect()
}

const TICKET_MAGIC: &[u8; 4] = b"BTKT";
const TICKET_VERSION: u16 = 1;

impl Ticket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TICKET_MAGIC, TICKET_VERSION);
        let ck = Checkpoint {
            spec: self.spec.clone(),
            seed: self.provenance.init_seed,
            params: self.init.clone(),
        };
        w.bytes(&ck.to_bytes());
        w.u32(self.mask.entries.len() as u32);
        for (name, entry) in &self.mask.entries {
            w.str(name);
            w.shape(&entry.shape);
            w.bytes(&pack_bits(&entry.bits));
        }
        w.str(&serde_json::to_string(&self.provenance).expect("provenance serializes"));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, TICKET_MAGIC, TICKET_VERSION, origin)?;
        let ck = Checkpoint::from_bytes(r.bytes()?, origin)?;
        let n = r.u32()? as usize;
        let mut entries = IndexMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let shape = r.shape()?;
            let len: usize = shape.iter().product();
            let bits = unpack_bits(r.bytes()?, len).ok_or_else(|| r.invalid("mask bitset length"))?;
            entries.insert(name, MaskEntry::new(shape, bits)?);
        }
        let provenance: Provenance = serde_json::from_str(&r.str()?)?;
        r.expect_end()?;
        let mask = Mask { entries };
        mask.check_aligned(&ck.params)
            .map_err(|e| r.invalid(&e.to_string()))?;
        Ok(Ticket {
            spec: ck.spec,
            init: ck.params,
            mask,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// LSB-first: element `i` lives in bit `i % 8` of byte `i / 8`.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Option<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    Some((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}
