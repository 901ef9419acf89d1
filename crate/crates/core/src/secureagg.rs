//! Pairwise-mask secure aggregation (Protocol 0 of Bonawitz et al.).
//!
//! Every unordered pair of parties shares a 64-bit seed. For each round and
//! coordinate both parties expand it into two integers in `[0, b)`, one per
//! direction: `u(a→b)` and `u(b→a)`. Party `m` sends
//! `y_m = q_m + Σ_{m'≠m} (u(m→m') − u(m'→m))`; the perturbations cancel in
//! the sum, so the server recovers `Σ q_m` and nothing else.
//!
//! Values are plain `i64`; only the wire encoding is narrowed to
//! [`share_width`](crate::metrics::share_width) bits.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::metrics::share_width;
use crate::pbm::QuantizedValue;

const MASK_DOMAIN: &[u8; 11] = b"pbmvfl.mask";

#[derive(Debug, Error)]
pub enum SecAggError {
    #[error("party {party} has no seed shared with party {peer}")]
    MissingSeed { party: usize, peer: usize },
    #[error("party id {party} out of range for {m} parties")]
    UnknownParty { party: usize, m: usize },
    #[error("secret {q} outside [0, {b}]")]
    SecretOutOfRange { q: u32, b: u32 },
    #[error("coordinate {coord:?}: missing share from party {party}")]
    MissingShare { party: usize, coord: Coord },
    #[error("coordinate {coord:?}: duplicate share from party {party}")]
    DuplicateShare { party: usize, coord: Coord },
    #[error("shares disagree on round or coordinate")]
    Misaligned,
    #[error("unmasked sum {sum} outside [0, {max}]")]
    Corrupt { sum: i64, max: i64 },
    #[error("masked value {y} does not fit in {width} bits")]
    Overflow { y: i64, width: u32 },
    #[error("channel closed")]
    ChannelClosed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Seed known only to parties `party_a < party_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseSeed {
    pub party_a: usize,
    pub party_b: usize,
    pub seed: u64,
}

impl PairwiseSeed {
    fn involves(&self, party: usize) -> Option<usize> {
        if self.party_a == party {
            Some(self.party_b)
        } else if self.party_b == party {
            Some(self.party_a)
        } else {
            None
        }
    }
}

/// Which of the two directed mask values a stream produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `u(party_a → party_b)`
    AtoB,
    /// `u(party_b → party_a)`
    BtoA,
}

/// Position of a value within a round: sample index and embedding coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub sample: u32,
    pub dim: u16,
}

impl Coord {
    fn counter(self) -> u64 {
        (u64::from(self.sample) << 16) | u64::from(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedShare {
    pub party: usize,
    pub y: i64,
    pub round: u32,
    pub coord: Coord,
}

/// Trusted-dealer setup: one independent seed per unordered pair.
#[derive(Debug, Clone)]
pub struct SeedBook {
    m: usize,
    seeds: Vec<PairwiseSeed>,
}

impl SeedBook {
    pub fn deal<R: RngCore + ?Sized>(m: usize, rng: &mut R) -> Self {
        let mut seeds = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for a in 0..m {
            for b in a + 1..m {
                seeds.push(PairwiseSeed {
                    party_a: a,
                    party_b: b,
                    seed: rng.next_u64(),
                });
            }
        }
        Self { m, seeds }
    }

    pub fn parties(&self) -> usize {
        self.m
    }

    /// The seed material held by `party`.
    pub fn for_party(&self, party: usize) -> Vec<PairwiseSeed> {
        self.seeds
            .iter()
            .filter(|s| s.involves(party).is_some())
            .copied()
            .collect()
    }
}

fn stream_key(seed: &PairwiseSeed, direction: Direction, round: u32) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.seed.to_le_bytes());
    key[8..12].copy_from_slice(&round.to_le_bytes());
    key[12] = match direction {
        Direction::AtoB => 0,
        Direction::BtoA => 1,
    };
    key[13..24].copy_from_slice(MASK_DOMAIN);
    key
}

/// Mask value for one coordinate, uniform on `[0, b)`.
pub fn mask_value(seed: &PairwiseSeed, direction: Direction, round: u32, counter: u64, b: u32) -> u64 {
    let mut rng = ChaCha20Rng::from_seed(stream_key(seed, direction, round));
    rng.set_stream(counter);
    rng.random_range(0..u64::from(b.max(1)))
}

/// The first `count` mask values of one directed stream.
pub fn derive_mask_stream(seed: &PairwiseSeed, direction: Direction, round: u32, count: usize, b: u32) -> Vec<u64> {
    (0..count as u64)
        .map(|k| mask_value(seed, direction, round, k, b))
        .collect()
}

/// Net perturbation `Σ_{m'≠m} (u(m→m') − u(m'→m))` for `party` at one coordinate.
fn perturbation(
    party: usize,
    seeds: &[PairwiseSeed],
    m: usize,
    round: u32,
    counter: u64,
    b: u32,
) -> Result<i64, SecAggError> {
    let mut total = 0i64;
    for peer in (0..m).filter(|&p| p != party) {
        let seed = seeds
            .iter()
            .find(|s| s.involves(party) == Some(peer))
            .ok_or(SecAggError::MissingSeed { party, peer })?;
        let (out, inc) = if party == seed.party_a {
            (Direction::AtoB, Direction::BtoA)
        } else {
            (Direction::BtoA, Direction::AtoB)
        };
        let u_out = mask_value(seed, out, round, counter, b) as i64;
        let u_in = mask_value(seed, inc, round, counter, b) as i64;
        total += u_out - u_in;
    }
    Ok(total)
}

/// Masks one quantized secret.
pub fn mask(
    q: QuantizedValue,
    party: usize,
    seeds: &[PairwiseSeed],
    m: usize,
    round: u32,
    coord: Coord,
    b: u32,
) -> Result<MaskedShare, SecAggError> {
    if party >= m {
        return Err(SecAggError::UnknownParty { party, m });
    }
    if q.get() > b {
        return Err(SecAggError::SecretOutOfRange { q: q.get(), b });
    }
    let p = perturbation(party, seeds, m, round, coord.counter(), b)?;
    Ok(MaskedShare {
        party,
        y: i64::from(q.get()) + p,
        round,
        coord,
    })
}

/// Sums the `m` shares of one coordinate; the masks cancel exactly.
pub fn unmask_sum(shares: &[MaskedShare], m: usize, b: u32) -> Result<u64, SecAggError> {
    let Some(first) = shares.first() else {
        return Err(SecAggError::MissingShare {
            party: 0,
            coord: Coord { sample: 0, dim: 0 },
        });
    };
    let mut seen = vec![false; m];
    let mut sum = 0i64;
    for share in shares {
        if share.round != first.round || share.coord != first.coord {
            return Err(SecAggError::Misaligned);
        }
        let slot = seen
            .get_mut(share.party)
            .ok_or(SecAggError::UnknownParty { party: share.party, m })?;
        if *slot {
            return Err(SecAggError::DuplicateShare {
                party: share.party,
                coord: share.coord,
            });
        }
        *slot = true;
        sum += share.y;
    }
    if let Some(party) = seen.iter().position(|s| !s) {
        return Err(SecAggError::MissingShare {
            party,
            coord: first.coord,
        });
    }
    let max = i64::from(b) * m as i64;
    if !(0..=max).contains(&sum) {
        return Err(SecAggError::Corrupt { sum, max });
    }
    Ok(sum as u64)
}

/// Masked values bit-packed at [`share_width`] bits each.
///
/// Values are stored offset by `(M-1)·b` so the encoding is non-negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedShares {
    pub width: u32,
    pub len: usize,
    pub bytes: Vec<u8>,
}

impl PackedShares {
    pub fn bit_len(&self) -> u64 {
        self.len as u64 * u64::from(self.width)
    }
}

fn share_offset(m: usize, b: u32) -> i64 {
    (m as i64 - 1) * i64::from(b)
}

pub fn pack_shares(ys: &[i64], m: usize, b: u32) -> Result<PackedShares, SecAggError> {
    let width = share_width(m, b);
    let offset = share_offset(m, b);
    let limit = 1u64 << width;
    let mut bytes = vec![0u8; (ys.len() * width as usize).div_ceil(8)];
    let mut bit = 0usize;
    for &y in ys {
        let enc = y + offset;
        if enc < 0 || enc as u64 >= limit {
            return Err(SecAggError::Overflow { y, width });
        }
        let enc = enc as u64;
        for i in 0..width as usize {
            if (enc >> i) & 1 == 1 {
                bytes[(bit + i) / 8] |= 1 << ((bit + i) % 8);
            }
        }
        bit += width as usize;
    }
    Ok(PackedShares {
        width,
        len: ys.len(),
        bytes,
    })
}

pub fn unpack_shares(packed: &PackedShares, m: usize, b: u32) -> Vec<i64> {
    let offset = share_offset(m, b);
    let width = packed.width as usize;
    (0..packed.len)
        .map(|k| {
            let mut enc = 0u64;
            for i in 0..width {
                let bit = k * width + i;
                if (packed.bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                    enc |= 1 << i;
                }
            }
            enc as i64 - offset
        })
        .collect()
}

/// One party's upstream message for a round.
#[derive(Debug, Clone)]
pub struct ShareBatch {
    pub party: usize,
    pub round: u32,
    pub coords: Vec<Coord>,
    pub payload: PackedShares,
}

impl ShareBatch {
    pub fn shares(&self, m: usize, b: u32) -> Vec<MaskedShare> {
        unpack_shares(&self.payload, m, b)
            .into_iter()
            .zip(&self.coords)
            .map(|(y, &coord)| MaskedShare {
                party: self.party,
                y,
                round: self.round,
                coord,
            })
            .collect()
    }
}

/// In-process party→server queue with a bit meter.
pub struct CommChannel {
    tx: Sender<ShareBatch>,
    rx: Receiver<ShareBatch>,
    meter: Arc<AtomicU64>,
}

/// Sending half handed to a party. Every payload bit is metered.
#[derive(Clone)]
pub struct ChannelSender {
    tx: Sender<ShareBatch>,
    meter: Arc<AtomicU64>,
}

impl ChannelSender {
    pub fn send(&self, batch: ShareBatch) -> Result<(), SecAggError> {
        self.meter.fetch_add(batch.payload.bit_len(), Ordering::Relaxed);
        self.tx.send(batch).map_err(|_| SecAggError::ChannelClosed)
    }
}

impl Default for CommChannel {
    fn default() -> Self {
        Self::new()
    }
}

impl CommChannel {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            tx,
            rx,
            meter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn sender(&self) -> ChannelSender {
        ChannelSender {
            tx: self.tx.clone(),
            meter: Arc::clone(&self.meter),
        }
    }

    /// All batches delivered so far.
    pub fn drain(&self) -> Vec<ShareBatch> {
        self.rx.try_iter().collect()
    }

    /// Bits metered since the previous call.
    pub fn take_bits(&self) -> u64 {
        self.meter.swap(0, Ordering::Relaxed)
    }
}

/// Server side of a round: recovers `Σ q_m` for every coordinate, in the
/// coordinate order of the batches. Arrival order of batches is irrelevant.
pub fn aggregate_round(batches: &[ShareBatch], m: usize, b: u32) -> Result<Vec<u64>, SecAggError> {
    let mut by_party: BTreeMap<usize, &ShareBatch> = BTreeMap::new();
    for batch in batches {
        if batch.party >= m {
            return Err(SecAggError::UnknownParty { party: batch.party, m });
        }
        if by_party.insert(batch.party, batch).is_some() {
            let coord = batch.coords.first().copied().unwrap_or(Coord { sample: 0, dim: 0 });
            return Err(SecAggError::DuplicateShare {
                party: batch.party,
                coord,
            });
        }
    }
    let reference = by_party.values().next().ok_or(SecAggError::MissingShare {
        party: 0,
        coord: Coord { sample: 0, dim: 0 },
    })?;
    for party in 0..m {
        if !by_party.contains_key(&party) {
            let coord = reference.coords.first().copied().unwrap_or(Coord { sample: 0, dim: 0 });
            return Err(SecAggError::MissingShare { party, coord });
        }
    }
    let unpacked: Vec<Vec<MaskedShare>> = by_party.values().map(|batch| batch.shares(m, b)).collect();
    let n = reference.coords.len();
    if unpacked.iter().any(|s| s.len() != n) {
        return Err(SecAggError::Misaligned);
    }
    let mut column = Vec::with_capacity(m);
    (0..n)
        .map(|k| {
            column.clear();
            column.extend(unpacked.iter().map(|s| s[k]));
            unmask_sum(&column, m, b)
        })
        .collect()
}

/// Fixed-width little-endian transcript record (20 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptRecord {
    pub round: u32,
    pub party: u16,
    pub sample: u32,
    pub coord: u16,
    pub y: i64,
}

impl TranscriptRecord {
    pub const SIZE: usize = 20;

    pub fn from_share(share: &MaskedShare) -> Self {
        Self {
            round: share.round,
            party: share.party as u16,
            sample: share.coord.sample,
            coord: share.coord.dim,
            y: share.y,
        }
    }

    pub fn to_bytes(&self) -> [u8; Self::SIZE] {
        let mut out = [0u8; Self::SIZE];
        out[0..4].copy_from_slice(&self.round.to_le_bytes());
        out[4..6].copy_from_slice(&self.party.to_le_bytes());
        out[6..10].copy_from_slice(&self.sample.to_le_bytes());
        out[10..12].copy_from_slice(&self.coord.to_le_bytes());
        out[12..20].copy_from_slice(&self.y.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8; Self::SIZE]) -> Self {
        Self {
            round: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            party: u16::from_le_bytes(buf[4..6].try_into().unwrap()),
            sample: u32::from_le_bytes(buf[6..10].try_into().unwrap()),
            coord: u16::from_le_bytes(buf[10..12].try_into().unwrap()),
            y: i64::from_le_bytes(buf[12..20].try_into().unwrap()),
        }
    }
}

pub fn write_transcript<W: Write>(mut w: W, records: &[TranscriptRecord]) -> io::Result<()> {
    for r in records {
        w.write_all(&r.to_bytes())?;
    }
    Ok(())
}

pub fn read_transcript<R: Read>(mut r: R) -> io::Result<Vec<TranscriptRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % TranscriptRecord::SIZE != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "transcript length is not a multiple of the record size",
        ));
    }
    Ok(buf
        .chunks_exact(TranscriptRecord::SIZE)
        .map(|c| TranscriptRecord::from_bytes(c.try_into().unwrap()))
        .collect())
}
