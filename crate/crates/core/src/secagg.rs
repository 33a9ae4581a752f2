//! Simulated secure aggregation over `(ℤ_M)^l`.
//!
//! Clients submit residues mod `M`; the server only learns their sum mod `M`.
//! In clipped mode the modulus covers a high-probability window
//! `[offset, offset + M)` of the true sum rather than all of `[0, nm]`.
//! Each client subtracts its part of `offset` before reducing, and the server
//! adds `offset` back. A sum that falls outside the window wraps and decodes
//! to the wrong value; the simulator knows the true sum and counts those.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PbmError, Result};

const MAGIC: &[u8; 4] = b"PBMS";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    modulus: u64,
    coords: usize,
}

impl GroupSpec {
    pub fn new(modulus: u64, coords: usize) -> Result<Self> {
        if modulus < 2 {
            return Err(PbmError::invalid(format!(
                "modulus must be at least 2, got {modulus}"
            )));
        }
        if coords == 0 {
            return Err(PbmError::invalid("group needs at least one coordinate"));
        }
        Ok(Self { modulus, coords })
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    /// Bits per residue, `⌈log₂ M⌉`.
    pub fn bits_per_coord(&self) -> u32 {
        bits_for_modulus(self.modulus)
    }

    /// Total bits per update, `l · ⌈log₂ M⌉`.
    pub fn bits(&self) -> u64 {
        self.coords as u64 * u64::from(self.bits_per_coord())
    }
}

pub fn bits_for_modulus(modulus: u64) -> u32 {
    64 - (modulus - 1).leading_zeros()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupVector {
    spec: GroupSpec,
    residues: Vec<u64>,
}

impl GroupVector {
    pub fn new(residues: Vec<u64>, spec: GroupSpec) -> Result<Self> {
        if residues.len() != spec.coords {
            return Err(PbmError::DimensionMismatch {
                expected: spec.coords,
                actual: residues.len(),
            });
        }
        if let Some(r) = residues.iter().find(|&&r| r >= spec.modulus) {
            return Err(PbmError::invalid(format!(
                "residue {r} not reduced mod {}",
                spec.modulus
            )));
        }
        Ok(Self { spec, residues })
    }

    pub fn spec(&self) -> GroupSpec {
        self.spec
    }

    pub fn residues(&self) -> &[u64] {
        &self.residues
    }
}

/// `2^⌈log₂(nm + 1)⌉`, the smallest power of two holding every sum in `[0, nm]`.
pub fn default_modulus(n: usize, m: u32) -> Result<u64> {
    if n == 0 || m == 0 {
        return Err(PbmError::invalid("n and m must be at least 1"));
    }
    let top = (n as u64)
        .checked_mul(u64::from(m))
        .and_then(|nm| nm.checked_add(1));
    top.and_then(u64::checked_next_power_of_two)
        .ok_or_else(|| PbmError::invalid("n*m too large for a 64-bit modulus"))
}

/// Coordinatewise sum mod `M`.
pub fn aggregate(updates: &[GroupVector]) -> Result<GroupVector> {
    let first = updates
        .first()
        .ok_or_else(|| PbmError::invalid("nothing to aggregate"))?;
    let spec = first.spec;
    if updates.iter().any(|u| u.spec != spec) {
        return Err(PbmError::MixedSpecs);
    }
    let mut acc = vec![0u64; spec.coords];
    for u in updates {
        for (a, &r) in acc.iter_mut().zip(&u.residues) {
            // Both sides are < M ≤ 2^63 when M fits the default construction,
            // but use u128 so any u64 modulus is safe.
            *a = ((u128::from(*a) + u128::from(r)) % u128::from(spec.modulus)) as u64;
        }
    }
    Ok(GroupVector {
        spec,
        residues: acc,
    })
}

/// How the group is sized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Default modulus, no wrap possible.
    Full,
    /// Window of `nmθ + s·√(nm)` around the expected sum.
    Clipped { safety_c: f64 },
}

/// Group plus the offset the server adds back after reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub spec: GroupSpec,
    pub offset: i64,
    pub clipped: bool,
}

impl Channel {
    pub fn new(n: usize, m: u32, theta: f64, coords: usize, mode: AggregationMode) -> Result<Self> {
        match mode {
            AggregationMode::Full => Ok(Self {
                spec: GroupSpec::new(default_modulus(n, m)?, coords)?,
                offset: 0,
                clipped: false,
            }),
            AggregationMode::Clipped { safety_c } => {
                let (spec, offset) = clipped_spec(n, m, theta, safety_c, coords)?;
                Ok(Self {
                    spec,
                    offset,
                    clipped: true,
                })
            }
        }
    }

    /// Client `i`'s share of the offset; the parts sum to `offset` over `n` clients.
    pub fn client_offset(&self, client: usize, n: usize) -> i64 {
        let n = n as i64;
        let base = self.offset.div_euclid(n);
        let extra = self.offset.rem_euclid(n);
        base + i64::from((client as i64) < extra)
    }

    /// Residues `(z_j − o_i) mod M` for client `i`.
    pub fn client_residues(&self, shares: &[u32], client: usize, n: usize) -> Result<GroupVector> {
        let o = self.client_offset(client, n);
        let m = self.spec.modulus as i128;
        let residues = shares
            .iter()
            .map(|&z| (i128::from(z) - i128::from(o)).rem_euclid(m) as u64)
            .collect();
        GroupVector::new(residues, self.spec)
    }

    /// Sum the server reads off the aggregate: `S mod M + offset`.
    pub fn recover(&self, agg: &GroupVector) -> Result<Vec<i64>> {
        if agg.spec != self.spec {
            return Err(PbmError::MixedSpecs);
        }
        Ok(agg
            .residues
            .iter()
            .map(|&r| r as i64 + self.offset)
            .collect())
    }

    /// Whether a true sum lies outside the window the group can represent.
    pub fn wraps(&self, true_sum: u64) -> bool {
        let s = true_sum as i128;
        let lo = i128::from(self.offset);
        s < lo || s >= lo + i128::from(self.spec.modulus)
    }
}

/// Clipped group for sums of `n` draws of `Binom(m, ·)` with `θ`:
/// `M = ⌈nmθ + s·√(nm)⌉ + 1`, `offset = ⌊nm(1−θ)/2 − s·√(nm/4)⌋`.
pub fn clipped_spec(
    n: usize,
    m: u32,
    theta: f64,
    safety_c: f64,
    coords: usize,
) -> Result<(GroupSpec, i64)> {
    if !(safety_c > 0.0 && safety_c.is_finite()) {
        return Err(PbmError::invalid(format!(
            "safety constant must be positive, got {safety_c}"
        )));
    }
    if n == 0 || m == 0 || !(0.0..=0.25).contains(&theta) {
        return Err(PbmError::invalid(
            "clipping needs n, m >= 1 and theta in [0, 1/4]",
        ));
    }
    let nm = n as f64 * f64::from(m);
    let modulus = (nm * theta + safety_c * nm.sqrt()).ceil() + 1.0;
    let offset = (nm * (1.0 - theta) / 2.0 - safety_c * (nm / 4.0).sqrt()).floor();
    Ok((GroupSpec::new(modulus as u64, coords)?, offset as i64))
}

/// Fixed-width little-endian packing: bit `b` of value `i` goes to stream
/// position `i·width + b`, and stream position `p` is bit `p mod 8` of byte `p / 8`.
pub fn pack(values: &[u64], width: u32) -> Vec<u8> {
    assert!((1..=64).contains(&width));
    let total_bits = values.len() as u64 * u64::from(width);
    let mut out = vec![0u8; total_bits.div_ceil(8) as usize];
    let mut pos = 0u64;
    for &v in values {
        debug_assert!(width == 64 || v >> width == 0);
        for b in 0..width {
            if (v >> b) & 1 == 1 {
                out[(pos / 8) as usize] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack(bytes: &[u8], width: u32, count: usize) -> Result<Vec<u64>> {
    assert!((1..=64).contains(&width));
    let needed = (count as u64 * u64::from(width)).div_ceil(8) as usize;
    if bytes.len() < needed {
        return Err(PbmError::Format(format!(
            "packed data has {} bytes, need {needed}",
            bytes.len()
        )));
    }
    let mut pos = 0u64;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = 0u64;
        for b in 0..width {
            if (bytes[(pos / 8) as usize] >> (pos % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            pos += 1;
        }
        values.push(v);
    }
    Ok(values)
}

/// Container for the packed updates of one round.
///
/// Layout (little endian): `"PBMS"`, version `u32`, `n u64`, `coords u64`,
/// `modulus u64`, `mode u8` (0 full, 1 clipped), `offset i64`, `seed u64`,
/// `m u32`, `theta f64`, `c_prime f64`, then `n` records of
/// `⌈coords·⌈log₂ M⌉ / 8⌉` bytes each.
#[derive(Clone, Debug, PartialEq)]
pub struct ShareFile {
    pub channel: Channel,
    pub seed: u64,
    pub m: u32,
    pub theta: f64,
    pub c_prime: f64,
    pub updates: Vec<GroupVector>,
}

impl ShareFile {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let spec = self.channel.spec;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.updates.len() as u64).to_le_bytes())?;
        out.write_all(&(spec.coords as u64).to_le_bytes())?;
        out.write_all(&spec.modulus.to_le_bytes())?;
        out.write_all(&[u8::from(self.channel.clipped)])?;
        out.write_all(&self.channel.offset.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&self.m.to_le_bytes())?;
        out.write_all(&self.theta.to_le_bytes())?;
        out.write_all(&self.c_prime.to_le_bytes())?;
        for u in &self.updates {
            if u.spec != spec {
                return Err(PbmError::MixedSpecs);
            }
            out.write_all(&pack(&u.residues, spec.bits_per_coord()))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PbmError::Format("not a share file".into()));
        }
        let version = u32::from_le_bytes(read_array(input)?);
        if version != FORMAT_VERSION {
            return Err(PbmError::Format(format!(
                "unsupported share file version {version}"
            )));
        }
        let n = u64::from_le_bytes(read_array(input)?) as usize;
        let coords = u64::from_le_bytes(read_array(input)?) as usize;
        let modulus = u64::from_le_bytes(read_array(input)?);
        let [mode] = read_array::<1, _>(input)?;
        if mode > 1 {
            return Err(PbmError::Format(format!("unknown aggregation mode {mode}")));
        }
        let offset = i64::from_le_bytes(read_array(input)?);
        let seed = u64::from_le_bytes(read_array(input)?);
        let m = u32::from_le_bytes(read_array(input)?);
        let theta = f64::from_le_bytes(read_array(input)?);
        let c_prime = f64::from_le_bytes(read_array(input)?);
        let spec = GroupSpec::new(modulus, coords).map_err(|e| PbmError::Format(e.to_string()))?;
        let width = spec.bits_per_coord();
        let record = (coords as u64 * u64::from(width)).div_ceil(8) as usize;
        let mut buf = vec![0u8; record];
        let mut updates = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            let residues = unpack(&buf, width, coords)?;
            updates.push(
                GroupVector::new(residues, spec).map_err(|e| PbmError::Format(e.to_string()))?,
            );
        }
        Ok(Self {
            channel: Channel {
                spec,
                offset,
                clipped: mode == 1,
            },
            seed,
            m,
            theta,
            c_prime,
            updates,
        })
    }
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gv(residues: Vec<u64>, modulus: u64) -> GroupVector {
        let spec = GroupSpec::new(modulus, residues.len()).unwrap();
        GroupVector::new(residues, spec).unwrap()
    }

    #[test]
    fn default_modulus_examples() {
        assert_eq!(default_modulus(1000, 16).unwrap(), 16384);
        assert_eq!(default_modulus(1000, 2).unwrap(), 2048);
        assert_eq!(default_modulus(1000, 4).unwrap(), 4096);
        assert_eq!(default_modulus(1000, 6).unwrap(), 8192);
        assert_eq!(default_modulus(1, 1).unwrap(), 2);
        // nm = 8 is itself a power of two, and the sum 8 must still fit.
        assert_eq!(default_modulus(2, 4).unwrap(), 16);
        assert_eq!(bits_for_modulus(2), 1);
        assert_eq!(bits_for_modulus(16384), 14);
        assert_eq!(bits_for_modulus(4694), 13);
    }

    #[test]
    fn aggregate_examples() {
        let a = gv(vec![3], 5);
        assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(aggregate(&[a, gv(vec![4], 5)]).unwrap().residues(), &[2]);
        assert!(matches!(
            aggregate(&[gv(vec![1], 5), gv(vec![1], 7)]),
            Err(PbmError::MixedSpecs)
        ));
        assert!(aggregate(&[]).is_err());
        assert!(GroupVector::new(vec![5], GroupSpec::new(5, 1).unwrap()).is_err());
    }

    #[test]
    fn clipped_paper_setting_saves_a_bit() {
        let (spec, offset) = clipped_spec(1000, 16, 0.25, 30f64.sqrt(), 1).unwrap();
        assert_eq!(
            spec.modulus(),
            (4000.0 + 30f64.sqrt() * 16000f64.sqrt()).ceil() as u64 + 1
        );
        assert!(spec.modulus() < 1 << 14);
        assert!(spec.bits_per_coord() <= 13);
        assert_eq!(
            offset,
            (6000.0 - 30f64.sqrt() * 4000f64.sqrt()).floor() as i64
        );
    }

    #[test]
    fn offsets_split_across_clients() {
        let ch = Channel {
            spec: GroupSpec::new(11, 1).unwrap(),
            offset: 23,
            clipped: true,
        };
        let parts: Vec<i64> = (0..5).map(|i| ch.client_offset(i, 5)).collect();
        assert_eq!(parts.iter().sum::<i64>(), 23);
        assert!(parts.iter().all(|&o| o == 4 || o == 5));
        let neg = Channel {
            spec: GroupSpec::new(11, 1).unwrap(),
            offset: -7,
            clipped: true,
        };
        assert_eq!((0..3).map(|i| neg.client_offset(i, 3)).sum::<i64>(), -7);
    }

    #[test]
    fn clipped_channel_recovers_in_window_sums() {
        let ch = Channel::new(4, 10, 0.25, 2, AggregationMode::Clipped { safety_c: 1.0 }).unwrap();
        let shares = [[5u32, 7], [4, 6], [6, 3], [5, 5]];
        let updates: Vec<_> = shares
            .iter()
            .enumerate()
            .map(|(i, s)| ch.client_residues(s, i, 4).unwrap())
            .collect();
        let got = ch.recover(&aggregate(&updates).unwrap()).unwrap();
        assert_eq!(got, vec![20, 21]);
        assert!(!ch.wraps(20) && !ch.wraps(21));
        assert!(ch.wraps(0) && ch.wraps(40));
    }

    #[test]
    fn share_file_roundtrip() {
        let ch = Channel::new(3, 4, 0.25, 5, AggregationMode::Full).unwrap();
        let updates = (0..3)
            .map(|i| {
                ch.client_residues(&[0, 1, 2, 3, 4].map(|z: u32| (z + i as u32) % 5), i, 3)
                    .unwrap()
            })
            .collect();
        let file = ShareFile {
            channel: ch,
            seed: 9,
            m: 4,
            theta: 0.25,
            c_prime: 1.5,
            updates,
        };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        // 49 header bytes, then 5 residues of 4 bits per client.
        assert_eq!(buf.len(), 4 + 4 + 8 * 3 + 1 + 8 * 2 + 4 + 8 * 2 + 3 * 3);
        assert_eq!(ShareFile::read_from(&mut buf.as_slice()).unwrap(), file);
        buf.truncate(buf.len() - 1);
        assert!(ShareFile::read_from(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn pack_roundtrip(width in 1u32..=64, raw in prop::collection::vec(any::<u64>(), 0..40)) {
            let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
            let vals: Vec<u64> = raw.iter().map(|v| v & mask).collect();
            let bytes = pack(&vals, width);
            prop_assert_eq!(bytes.len() as u64, (vals.len() as u64 * u64::from(width)).div_ceil(8));
            prop_assert_eq!(unpack(&bytes, width, vals.len()).unwrap(), vals);
        }

        #[test]
        fn no_wrap_with_default_modulus(n in 1usize..40, m in 1u32..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let ch = Channel::new(n, m, 0.25, 3, AggregationMode::Full).unwrap();
            let shares: Vec<Vec<u32>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..=m)).collect()).collect();
            let updates: Vec<_> = shares.iter().enumerate().map(|(i, s)| ch.client_residues(s, i, n).unwrap()).collect();
            let got = ch.recover(&aggregate(&updates).unwrap()).unwrap();
            for j in 0..3 {
                let truth: u32 = shares.iter().map(|s| s[j]).sum();
                prop_assert_eq!(got[j], i64::from(truth));
            }
        }

        #[test]
        fn aggregation_ignores_order(residues in prop::collection::vec(prop::collection::vec(0u64..97, 4), 1..12),
                                     rot in 0usize..12) {
            let updates: Vec<_> = residues.iter().map(|r| gv(r.clone(), 97)).collect();
            let mut shuffled = updates.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            shuffled.reverse();
            prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&shuffled).unwrap());
            // Associativity: fold of partial sums equals the flat sum.
            let (left, right) = updates.split_at(len / 2);
            let mut parts = Vec::new();
            if !left.is_empty() { parts.push(aggregate(left).unwrap()); }
            if !right.is_empty() { parts.push(aggregate(right).unwrap()); }
            prop_assert_eq!(aggregate(&parts).unwrap(), aggregate(&updates).unwrap());
        }
    }
}
