//! Binary persistence of orchestrator state.
//!
//! Layout: 4-byte magic, u16 version, payload length, payload, CRC-32 of the
//! payload. Floats are stored as raw little-endian bits so a load restores
//! profile rows, archived rows and availability samples bit-exact.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::availability::SmpModel;
use crate::model::{Availability, DeviceId, EntryMask, InterferencePair, ProfileRow};
use crate::orchestrator::{ArchivedDevice, OrchestratorState};

pub const MAGIC: [u8; 4] = *b"UESN";
pub const VERSION: u16 = 1;

#[derive(Debug)]
pub enum SnapshotError {
    Io(io::Error),
    /// Not a snapshot file at all.
    BadMagic,
    VersionMismatch { found: u16, expected: u16 },
    /// Truncation or checksum failure.
    CorruptSnapshot(String),
}

impl fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "snapshot io: {e}"),
            Self::BadMagic => write!(f, "not a state snapshot (bad magic)"),
            Self::VersionMismatch { found, expected } => {
                write!(f, "snapshot version {found}, reader expects {expected}")
            }
            Self::CorruptSnapshot(msg) => write!(f, "corrupt snapshot: {msg}"),
        }
    }
}

impl Error for SnapshotError {}

impl From<io::Error> for SnapshotError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
    fn row(&mut self, row: &ProfileRow) {
        self.u32(row.task_count() as u32);
        for (pair, mask) in row.entries().iter().zip(row.masks()) {
            self.f64(pair.slope);
            self.f64(pair.intercept);
            self.u8(match mask {
                EntryMask::Measured => 0,
                EntryMask::Reconstructed => 1,
                EntryMask::Missing => 2,
            });
        }
    }
    fn smp(&mut self, smp: &SmpModel) {
        self.f64s(smp.up_samples());
        self.f64s(smp.down_samples());
        self.u8(match smp.current_state {
            Availability::Up => 0,
            Availability::Down => 1,
        });
        self.f64(smp.current_age);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], SnapshotError> {
        if self.pos + len > self.buf.len() {
            return Err(SnapshotError::CorruptSnapshot("payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, SnapshotError> {
        let len = self.u64()? as usize;
        if len > self.buf.len() {
            return Err(SnapshotError::CorruptSnapshot("length field too large".into()));
        }
        (0..len).map(|_| self.f64()).collect()
    }
    fn row(&mut self) -> Result<ProfileRow, SnapshotError> {
        let n = self.u32()? as usize;
        if n == 0 || n > 4096 {
            return Err(SnapshotError::CorruptSnapshot(format!("row width {n}")));
        }
        let mut row = ProfileRow::empty(n);
        for i in 1..=n {
            for j in 1..=n {
                let slope = self.f64()?;
                let intercept = self.f64()?;
                let mask = match self.u8()? {
                    0 => EntryMask::Measured,
                    1 => EntryMask::Reconstructed,
                    2 => EntryMask::Missing,
                    other => {
                        return Err(SnapshotError::CorruptSnapshot(format!("mask byte {other}")))
                    }
                };
                row.set(i, j, InterferencePair { slope, intercept }, mask);
            }
        }
        Ok(row)
    }
    fn smp(&mut self) -> Result<SmpModel, SnapshotError> {
        let up = self.f64s()?;
        let down = self.f64s()?;
        let state = match self.u8()? {
            0 => Availability::Up,
            1 => Availability::Down,
            other => return Err(SnapshotError::CorruptSnapshot(format!("state byte {other}"))),
        };
        let age = self.f64()?;
        Ok(SmpModel::from_samples(up, down, state, age))
    }
}

fn encode_payload(state: &OrchestratorState) -> Vec<u8> {
    let mut enc = Enc { buf: Vec::new() };
    enc.u32(state.task_count() as u32);
    // live devices: row + delay + counts + availability model
    enc.u64(state.matrix.len() as u64);
    for (id, row) in state.matrix.rows() {
        enc.u32(id.0);
        enc.row(row);
        enc.f64(state.delays[&id]);
        let counts = state.counts.row(id).expect("counts row in sync");
        enc.u64(counts.len() as u64);
        for &c in counts {
            enc.u32(c);
        }
        enc.smp(&state.smp[&id]);
    }
    // archived devices
    enc.u64(state.saved.len() as u64);
    for (id, archived) in &state.saved {
        enc.u32(id.0);
        enc.row(&archived.row);
        enc.f64(archived.delay);
        enc.smp(&archived.smp);
    }
    enc.buf
}

/// Task count recorded in a snapshot's payload, without restoring it.
pub fn task_count(path: &Path) -> Result<usize, SnapshotError> {
    let payload = read_validated(path)?;
    let mut dec = Dec { buf: &payload, pos: 0 };
    Ok(dec.u32()? as usize)
}

fn decode_payload(payload: &[u8], state: &mut OrchestratorState) -> Result<(), SnapshotError> {
    let mut dec = Dec { buf: payload, pos: 0 };
    let n = dec.u32()? as usize;
    if n != state.task_count() {
        return Err(SnapshotError::CorruptSnapshot(format!(
            "snapshot holds {n}-task rows, state expects {}",
            state.task_count()
        )));
    }
    let live = dec.u64()?;
    for _ in 0..live {
        let id = DeviceId(dec.u32()?);
        let row = dec.row()?;
        let delay = dec.f64()?;
        let count_len = dec.u64()? as usize;
        let mut counts = Vec::with_capacity(count_len);
        for _ in 0..count_len {
            counts.push(dec.u32()?);
        }
        let smp = dec.smp()?;
        state.register_device(id, row, delay, smp);
        for (task, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                state.counts.increment(id, task + 1);
            }
        }
    }
    let saved = dec.u64()?;
    for _ in 0..saved {
        let id = DeviceId(dec.u32()?);
        let row = dec.row()?;
        let delay = dec.f64()?;
        let smp = dec.smp()?;
        state.saved.insert(id, ArchivedDevice { row, delay, smp });
    }
    if dec.pos != payload.len() {
        return Err(SnapshotError::CorruptSnapshot("trailing bytes".into()));
    }
    Ok(())
}

/// Writes the orchestrator's matrix, per-device counts, availability models
/// and archived rows.
pub fn save(state: &OrchestratorState, path: &Path) -> Result<(), SnapshotError> {
    let payload = encode_payload(state);
    let mut out = Vec::with_capacity(payload.len() + 18);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_validated(path: &Path) -> Result<Vec<u8>, SnapshotError> {
    let data = fs::read(path)?;
    if data.len() < 18 {
        return Err(SnapshotError::CorruptSnapshot("file shorter than header".into()));
    }
    if data[0..4] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = u16::from_le_bytes(data[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(SnapshotError::VersionMismatch { found: version, expected: VERSION });
    }
    let len = u64::from_le_bytes(data[6..14].try_into().unwrap()) as usize;
    if data.len() != 14 + len + 4 {
        return Err(SnapshotError::CorruptSnapshot(format!(
            "expected {} bytes, file has {}",
            14 + len + 4,
            data.len()
        )));
    }
    let payload = &data[14..14 + len];
    let stored_crc = u32::from_le_bytes(data[14 + len..].try_into().unwrap());
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(SnapshotError::CorruptSnapshot(format!(
            "crc {actual_crc:#010x} != stored {stored_crc:#010x}"
        )));
    }
    Ok(payload.to_vec())
}

/// Restores a snapshot into `state`, which must be empty and share the
/// snapshot's task count.
pub fn load(path: &Path, state: &mut OrchestratorState) -> Result<(), SnapshotError> {
    let payload = read_validated(path)?;
    decode_payload(&payload, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::CompositionMode;
    use crate::model::HyperParams;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn populated_state() -> OrchestratorState {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 3;
        let mut state = OrchestratorState::new(n, CompositionMode::Additive, HyperParams::default());
        for id in 0..4u32 {
            let pairs = (0..n * n)
                .map(|_| InterferencePair {
                    slope: rng.random_range(0.0..0.1),
                    intercept: rng.random_range(0.1..0.6),
                })
                .collect();
            let row = ProfileRow::from_pairs(n, pairs);
            let smp = SmpModel::from_samples(
                (0..50).map(|_| rng.random_range(10.0..5000.0)).collect(),
                (0..20).map(|_| rng.random_range(1.0..600.0)).collect(),
                Availability::Up,
                rng.random_range(0.0..100.0),
            );
            state.register_device(DeviceId(id), row, rng.random_range(0.0..0.05), smp);
        }
        state.note_dispatch(DeviceId(1), 2);
        state.note_dispatch(DeviceId(1), 2);
        state.note_dispatch(DeviceId(3), 1);
        state.device_exit(DeviceId(2)).unwrap();
        state
    }

    fn states_equal(a: &OrchestratorState, b: &OrchestratorState) -> bool {
        a.matrix == b.matrix
            && a.counts == b.counts
            && a.delays == b.delays
            && a.saved == b.saved
            && a.smp == b.smp
    }

    #[test]
    fn round_trip_restores_state_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.snap");
        let state = populated_state();
        save(&state, &path).unwrap();
        let mut restored =
            OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        load(&path, &mut restored).unwrap();
        assert!(states_equal(&state, &restored));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.snap");
        save(&populated_state(), &path).unwrap();
        let data = fs::read(&path).unwrap();
        fs::write(&path, &data[..data.len() - 7]).unwrap();
        let mut state = OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        assert!(matches!(
            load(&path, &mut state),
            Err(SnapshotError::CorruptSnapshot(_))
        ));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.snap");
        save(&populated_state(), &path).unwrap();
        let mut data = fs::read(&path).unwrap();
        let mid = data.len() / 2;
        data[mid] ^= 0x40;
        fs::write(&path, &data).unwrap();
        let mut state = OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        assert!(matches!(
            load(&path, &mut state),
            Err(SnapshotError::CorruptSnapshot(_))
        ));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.snap");
        save(&populated_state(), &path).unwrap();
        let mut data = fs::read(&path).unwrap();
        data[4] = 99;
        fs::write(&path, &data).unwrap();
        let mut state = OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        assert!(matches!(
            load(&path, &mut state),
            Err(SnapshotError::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn foreign_file_rejected_by_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.bin");
        fs::write(&path, b"not a snapshot at all, much longer than header").unwrap();
        let mut state = OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        assert!(matches!(load(&path, &mut state), Err(SnapshotError::BadMagic)));
    }

    #[test]
    fn crc_reference_vector() {
        // standard check value for the IEEE polynomial
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
