//! Standard MIDI File reading and writing, reduced to single-track note events.
//!
//! Only what the tokenizer needs survives parsing: note-on/note-off pairs
//! from the first track that contains notes, the ticks-per-quarter
//! resolution, and the first time signature seen. Everything else
//! (controllers, pitch bend, SysEx, tempo) is skipped.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A sounding note with absolute tick timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_ticks: u32,
    pub duration_ticks: u32,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset_ticks: u32, duration_ticks: u32, velocity: u8) -> Self {
        Self {
            pitch,
            onset_ticks,
            duration_ticks,
            velocity,
        }
    }

    pub fn end_ticks(&self) -> u32 {
        self.onset_ticks.saturating_add(self.duration_ticks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u8,
    /// Actual note value of the beat (4 = quarter), not the SMF power-of-two exponent.
    pub denominator: u8,
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self {
            numerator: 4,
            denominator: 4,
        }
    }
}

impl TimeSignature {
    pub fn bar_ticks(&self, ticks_per_quarter: u16) -> u32 {
        u32::from(ticks_per_quarter) * 4 * u32::from(self.numerator) / u32::from(self.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("ticks_per_quarter must be positive")]
    ZeroResolution,
    #[error("note {index}: {reason}")]
    InvalidNote { index: usize, reason: &'static str },
    #[error("notes are not sorted by (onset, pitch) at index {index}")]
    Unsorted { index: usize },
    #[error("note {index} ends at tick {end}, beyond score length {length}")]
    BeyondLength { index: usize, end: u32, length: u32 },
}

/// A single-track piece: notes sorted by `(onset_ticks, pitch)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub ticks_per_quarter: u16,
    pub notes: Vec<NoteEvent>,
    pub length_ticks: u32,
    #[serde(default)]
    pub time_signature: TimeSignature,
}

impl Score {
    /// Builds a score from unordered notes; length is the latest note end.
    pub fn new(ticks_per_quarter: u16, mut notes: Vec<NoteEvent>) -> Self {
        sort_notes(&mut notes);
        let length_ticks = notes.iter().map(NoteEvent::end_ticks).max().unwrap_or(0);
        Self {
            ticks_per_quarter,
            notes,
            length_ticks,
            time_signature: TimeSignature::default(),
        }
    }

    pub fn empty(ticks_per_quarter: u16) -> Self {
        Self::new(ticks_per_quarter, Vec::new())
    }

    pub fn with_length(mut self, length_ticks: u32) -> Self {
        self.length_ticks = self.length_ticks.max(length_ticks);
        self
    }

    pub fn bar_ticks(&self) -> u32 {
        self.time_signature.bar_ticks(self.ticks_per_quarter)
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.ticks_per_quarter == 0 {
            return Err(ScoreError::ZeroResolution);
        }
        for (index, note) in self.notes.iter().enumerate() {
            if note.pitch > 127 {
                return Err(ScoreError::InvalidNote {
                    index,
                    reason: "pitch above 127",
                });
            }
            if !(1..=127).contains(&note.velocity) {
                return Err(ScoreError::InvalidNote {
                    index,
                    reason: "velocity outside 1..=127",
                });
            }
            if note.duration_ticks == 0 {
                return Err(ScoreError::InvalidNote {
                    index,
                    reason: "zero duration",
                });
            }
            if u64::from(note.onset_ticks) + u64::from(note.duration_ticks)
                > u64::from(self.length_ticks)
            {
                return Err(ScoreError::BeyondLength {
                    index,
                    end: note.end_ticks(),
                    length: self.length_ticks,
                });
            }
            if index > 0 {
                let prev = &self.notes[index - 1];
                if (prev.onset_ticks, prev.pitch) > (note.onset_ticks, note.pitch) {
                    return Err(ScoreError::Unsorted { index });
                }
            }
        }
        Ok(())
    }

    /// Re-times the score to another resolution, rounding to the nearest tick.
    pub fn rescaled(&self, ticks_per_quarter: u16) -> Score {
        if ticks_per_quarter == self.ticks_per_quarter {
            return self.clone();
        }
        let from = u64::from(self.ticks_per_quarter);
        let to = u64::from(ticks_per_quarter);
        let scale = |t: u32| -> u32 { ((u64::from(t) * to + from / 2) / from) as u32 };
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let onset = scale(n.onset_ticks);
                let end = scale(n.end_ticks()).max(onset + 1);
                NoteEvent::new(n.pitch, onset, end - onset, n.velocity)
            })
            .collect();
        let mut out = Score::new(ticks_per_quarter, notes).with_length(scale(self.length_ticks));
        out.time_signature = self.time_signature;
        out
    }
}

pub(crate) fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(|n| (n.onset_ticks, n.pitch, n.duration_ticks, n.velocity));
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MidiError {
    #[error("unexpected end of data at byte {offset} while reading {context}")]
    UnexpectedEof { offset: usize, context: &'static str },
    #[error("expected chunk `{expected}` at byte {offset}, found {found:?}")]
    BadChunkId {
        offset: usize,
        expected: &'static str,
        found: [u8; 4],
    },
    #[error("header chunk at byte {offset} declares length {length}, expected at least 6")]
    BadHeaderLength { offset: usize, length: u32 },
    #[error("chunk at byte {offset} declares {declared} bytes but only {available} remain")]
    ChunkOverrun {
        offset: usize,
        declared: u32,
        available: usize,
    },
    #[error("event at byte {offset} runs past the end of its track chunk")]
    EventOverrun { offset: usize },
    #[error("unsupported SMF format {format}")]
    UnsupportedFormat { format: u16 },
    #[error("unsupported time division {division:#06x} (SMPTE timing or zero resolution)")]
    UnsupportedDivision { division: u16 },
    #[error("variable-length quantity at byte {offset} exceeds four bytes")]
    VlqTooLong { offset: usize },
    #[error("data byte expected at byte {offset}, found status {byte:#04x}")]
    BadDataByte { offset: usize, byte: u8 },
    #[error("running status used at byte {offset} with no previous status")]
    MissingRunningStatus { offset: usize },
    #[error("invalid status byte {byte:#04x} at byte {offset}")]
    BadStatus { offset: usize, byte: u8 },
    #[error("header declares {declared} tracks but only {found} were present")]
    MissingTracks { declared: u16, found: usize },
    #[error("absolute tick overflow at byte {offset}")]
    TickOverflow { offset: usize },
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::UnexpectedEof {
                offset: self.bytes.len(),
                context,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, MidiError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, MidiError> {
        let b = self.take(4, context)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self, context: &'static str) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let byte = self.u8(context)?;
            value = (value << 7) | u32::from(byte & 0x7f);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::VlqTooLong { offset: start })
    }

    fn data_byte(&mut self, context: &'static str) -> Result<u8, MidiError> {
        let offset = self.pos;
        let byte = self.u8(context)?;
        if byte & 0x80 != 0 {
            return Err(MidiError::BadDataByte { offset, byte });
        }
        Ok(byte)
    }
}

#[derive(Default)]
struct TrackContent {
    notes: Vec<NoteEvent>,
    end_ticks: u32,
    time_signature: Option<TimeSignature>,
}

/// Parses a format 0 or 1 Standard MIDI File.
///
/// Notes come from the first track that contains any. A note-on with
/// velocity 0 is a note-off, a repeated note-on on a sounding
/// (channel, pitch) closes the earlier note, and notes still open at the end
/// of the track are closed there.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut reader = Reader::new(bytes);
    let header_offset = reader.pos;
    let id = reader.take(4, "header chunk id")?;
    if id != b"MThd" {
        return Err(MidiError::BadChunkId {
            offset: header_offset,
            expected: "MThd",
            found: [id[0], id[1], id[2], id[3]],
        });
    }
    let header_len = reader.u32("header length")?;
    if header_len < 6 {
        return Err(MidiError::BadHeaderLength {
            offset: header_offset,
            length: header_len,
        });
    }
    if (header_len as usize) > reader.remaining() {
        return Err(MidiError::ChunkOverrun {
            offset: header_offset,
            declared: header_len,
            available: reader.remaining(),
        });
    }
    let header = reader.take(header_len as usize, "header body")?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat { format });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(MidiError::UnsupportedDivision { division });
    }

    let mut tracks = Vec::new();
    while tracks.len() < usize::from(ntracks) && reader.remaining() > 0 {
        let offset = reader.pos;
        let id = reader.take(4, "chunk id")?;
        let id = [id[0], id[1], id[2], id[3]];
        let len = reader.u32("chunk length")?;
        if len as usize > reader.remaining() {
            return Err(MidiError::ChunkOverrun {
                offset,
                declared: len,
                available: reader.remaining(),
            });
        }
        let body_offset = reader.pos;
        let body = reader.take(len as usize, "chunk body")?;
        if &id == b"MTrk" {
            tracks.push(parse_track(body, body_offset)?);
        }
    }
    if tracks.len() < usize::from(ntracks) {
        return Err(MidiError::MissingTracks {
            declared: ntracks,
            found: tracks.len(),
        });
    }

    let time_signature = tracks
        .iter()
        .find_map(|t| t.time_signature)
        .unwrap_or_default();
    let chosen = tracks
        .iter_mut()
        .position(|t| !t.notes.is_empty())
        .or(if tracks.is_empty() { None } else { Some(0) });
    let (notes, end_ticks) = match chosen {
        Some(i) => (std::mem::take(&mut tracks[i].notes), tracks[i].end_ticks),
        None => (Vec::new(), 0),
    };
    let mut score = Score::new(division, notes).with_length(end_ticks);
    score.time_signature = time_signature;
    Ok(score)
}

fn parse_track(body: &[u8], base_offset: usize) -> Result<TrackContent, MidiError> {
    let mut reader = Reader::new(body);
    let at = |r: &Reader<'_>| base_offset + r.pos;
    // Open notes per (channel, pitch): onset tick and velocity.
    let mut open: Vec<Option<(u32, u8)>> = vec![None; 16 * 128];
    let mut content = TrackContent::default();
    let mut tick: u32 = 0;
    let mut running: Option<u8> = None;

    let overrun = |e: MidiError, offset: usize| match e {
        MidiError::UnexpectedEof { .. } => MidiError::EventOverrun { offset },
        other => other,
    };

    while reader.remaining() > 0 {
        let event_offset = at(&reader);
        let delta = reader
            .vlq("delta time")
            .map_err(|e| relocate(e, base_offset))
            .map_err(|e| overrun(e, event_offset))?;
        tick = tick
            .checked_add(delta)
            .ok_or(MidiError::TickOverflow { offset: event_offset })?;

        let status_offset = at(&reader);
        let first = reader
            .u8("status")
            .map_err(|e| overrun(e, event_offset))?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let status = running.ok_or(MidiError::MissingRunningStatus {
                offset: status_offset,
            })?;
            (status, Some(first))
        };

        match status {
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = usize::from(status & 0x0f);
                let next_data = |r: &mut Reader<'_>, pending: &mut Option<u8>| {
                    if let Some(b) = pending.take() {
                        Ok(b)
                    } else {
                        r.data_byte("channel message data")
                            .map_err(|e| relocate(e, base_offset))
                            .map_err(|e| overrun(e, event_offset))
                    }
                };
                let mut pending = first_data;
                let a = next_data(&mut reader, &mut pending)?;
                let b = if matches!(kind, 0xc0 | 0xd0) {
                    0
                } else {
                    next_data(&mut reader, &mut pending)?
                };
                let slot = channel * 128 + usize::from(a);
                match kind {
                    0x90 if b > 0 => {
                        if let Some((onset, velocity)) = open[slot].take() {
                            content.notes.push(close_note(a, onset, tick, velocity));
                        }
                        open[slot] = Some((tick, b));
                    }
                    0x80 | 0x90 => {
                        if let Some((onset, velocity)) = open[slot].take() {
                            content.notes.push(close_note(a, onset, tick, velocity));
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = reader
                    .vlq("sysex length")
                    .map_err(|e| relocate(e, base_offset))
                    .map_err(|e| overrun(e, event_offset))?;
                reader
                    .take(len as usize, "sysex data")
                    .map_err(|e| overrun(e, event_offset))?;
            }
            0xff => {
                running = None;
                let kind = reader
                    .u8("meta type")
                    .map_err(|e| overrun(e, event_offset))?;
                let len = reader
                    .vlq("meta length")
                    .map_err(|e| relocate(e, base_offset))
                    .map_err(|e| overrun(e, event_offset))?;
                let data = reader
                    .take(len as usize, "meta data")
                    .map_err(|e| overrun(e, event_offset))?;
                match kind {
                    0x2f => break,
                    0x58 if data.len() >= 2 && data[1] <= 7 && data[0] > 0 => {
                        content.time_signature.get_or_insert(TimeSignature {
                            numerator: data[0],
                            denominator: 1u8 << data[1],
                        });
                    }
                    _ => {}
                }
            }
            byte => {
                return Err(MidiError::BadStatus {
                    offset: status_offset,
                    byte,
                })
            }
        }
    }

    for (slot, entry) in open.iter_mut().enumerate() {
        if let Some((onset, velocity)) = entry.take() {
            content
                .notes
                .push(close_note((slot % 128) as u8, onset, tick, velocity));
        }
    }
    content.end_ticks = tick;
    sort_notes(&mut content.notes);
    Ok(content)
}

fn relocate(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::VlqTooLong { offset } => MidiError::VlqTooLong {
            offset: offset + base,
        },
        MidiError::BadDataByte { offset, byte } => MidiError::BadDataByte {
            offset: offset + base,
            byte,
        },
        other => other,
    }
}

fn close_note(pitch: u8, onset: u32, end: u32, velocity: u8) -> NoteEvent {
    // Zero-length pairs keep a one-tick duration so the note survives.
    NoteEvent::new(pitch, onset, end.saturating_sub(onset).max(1), velocity)
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7f) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Serializes a score as a format-0 SMF.
///
/// Same-pitch notes that overlap in time are spread over separate channels
/// so that parsing the result yields the original notes.
pub fn write_midi(score: &Score) -> Vec<u8> {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    struct Ev {
        tick: u32,
        // note-offs sort before note-ons on the same tick
        on: bool,
        channel: u8,
        pitch: u8,
        velocity: u8,
    }

    let mut busy_until = vec![[0u32; 128]; 16];
    let mut events = Vec::with_capacity(score.notes.len() * 2);
    for note in &score.notes {
        let p = usize::from(note.pitch);
        let channel = (0..16)
            .find(|&c| busy_until[c][p] <= note.onset_ticks)
            .unwrap_or(0);
        busy_until[channel][p] = note.end_ticks();
        let channel = channel as u8;
        events.push(Ev {
            tick: note.onset_ticks,
            on: true,
            channel,
            pitch: note.pitch,
            velocity: note.velocity,
        });
        events.push(Ev {
            tick: note.end_ticks(),
            on: false,
            channel,
            pitch: note.pitch,
            velocity: 64,
        });
    }
    events.sort();

    let mut track = Vec::with_capacity(events.len() * 4 + 16);
    if score.time_signature != TimeSignature::default() {
        let ts = score.time_signature;
        write_vlq(&mut track, 0);
        let exponent = ts.denominator.max(1).trailing_zeros() as u8;
        track.extend_from_slice(&[0xff, 0x58, 0x04, ts.numerator, exponent, 24, 8]);
    }
    let mut last = 0u32;
    for ev in &events {
        write_vlq(&mut track, ev.tick - last);
        last = ev.tick;
        let status = if ev.on { 0x90 } else { 0x80 } | ev.channel;
        track.extend_from_slice(&[status, ev.pitch, ev.velocity]);
    }
    write_vlq(&mut track, score.length_ticks.max(last) - last);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

impl fmt::Display for NoteEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pitch {} @ {} for {} vel {}",
            self.pitch, self.onset_ticks, self.duration_ticks, self.velocity
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(tpq: u16, track: &[u8]) -> Vec<u8> {
        let mut out = b"MThd\0\0\0\x06\0\0\0\x01".to_vec();
        out.extend_from_slice(&tpq.to_be_bytes());
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(track);
        out
    }

    #[test]
    fn single_note() {
        let bytes = smf(
            480,
            &[0x00, 0x90, 60, 96, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00],
        );
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.ticks_per_quarter, 480);
        assert_eq!(score.notes, vec![NoteEvent::new(60, 0, 480, 96)]);
        assert_eq!(score.length_ticks, 480);
    }

    #[test]
    fn empty_track() {
        let score = parse_midi(&smf(96, &[0x00, 0xff, 0x2f, 0x00])).unwrap();
        assert!(score.notes.is_empty());
        let empty = Score::empty(96);
        let bytes = write_midi(&empty);
        assert!(bytes.ends_with(&[0x00, 0xff, 0x2f, 0x00]));
        assert_eq!(parse_midi(&bytes).unwrap(), empty);
    }

    #[test]
    fn running_status_and_velocity_zero() {
        // note-on, then running-status note-on with velocity 0 as the off
        let bytes = smf(480, &[0x00, 0x90, 64, 70, 0x60, 64, 0, 0x00, 0xff, 0x2f, 0x00]);
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(64, 0, 96, 70)]);
    }

    #[test]
    fn retrigger_closes_previous_note() {
        let bytes = smf(
            480,
            &[
                0x00, 0x90, 60, 80, 0x60, 0x90, 60, 90, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00,
            ],
        );
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(
            score.notes,
            vec![NoteEvent::new(60, 0, 96, 80), NoteEvent::new(60, 96, 96, 90)]
        );
    }

    #[test]
    fn unmatched_note_closed_at_track_end() {
        let bytes = smf(480, &[0x00, 0x90, 62, 50, 0x81, 0x40, 0xff, 0x2f, 0x00]);
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(62, 0, 192, 50)]);
    }

    #[test]
    fn simultaneous_notes_have_zero_delta() {
        let score = Score::new(
            480,
            vec![NoteEvent::new(60, 0, 240, 90), NoteEvent::new(64, 0, 240, 90)],
        );
        let bytes = write_midi(&score);
        let track = &bytes[22..];
        // delta 0, note-on C; delta 0, note-on E
        assert_eq!(&track[..8], &[0x00, 0x90, 60, 90, 0x00, 0x90, 64, 90]);
    }

    #[test]
    fn overlapping_same_pitch_survives_round_trip() {
        let score = Score::new(
            480,
            vec![NoteEvent::new(60, 0, 480, 90), NoteEvent::new(60, 240, 480, 70)],
        );
        assert_eq!(parse_midi(&write_midi(&score)).unwrap(), score);
    }

    #[test]
    fn structured_errors() {
        assert!(matches!(
            parse_midi(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0"),
            Err(MidiError::BadChunkId { offset: 0, .. })
        ));
        assert!(matches!(
            parse_midi(b"MThd\0\0\0\x06\0\0"),
            Err(MidiError::ChunkOverrun { offset: 0, .. })
        ));
        let mut bad_vlq = smf(480, &[0xff, 0xff, 0xff, 0xff, 0x7f]);
        assert!(matches!(
            parse_midi(&bad_vlq),
            Err(MidiError::VlqTooLong { offset: 22 })
        ));
        bad_vlq.truncate(bad_vlq.len() - 2);
        assert!(parse_midi(&bad_vlq).is_err());
        assert!(matches!(
            parse_midi(&smf(480, &[0x00, 0x90, 60])),
            Err(MidiError::EventOverrun { offset: 22 })
        ));
        let mut smpte = smf(480, &[0x00, 0xff, 0x2f, 0x00]);
        smpte[12] = 0xe7;
        assert!(matches!(
            parse_midi(&smpte),
            Err(MidiError::UnsupportedDivision { .. })
        ));
    }

    #[test]
    fn time_signature_is_kept() {
        let mut score = Score::new(480, vec![NoteEvent::new(60, 0, 480, 90)]);
        score.time_signature = TimeSignature {
            numerator: 3,
            denominator: 4,
        };
        assert_eq!(score.bar_ticks(), 1440);
        assert_eq!(parse_midi(&write_midi(&score)).unwrap(), score);
    }

    #[test]
    fn rescale_keeps_order_and_bounds() {
        let score = Score::new(
            480,
            vec![NoteEvent::new(60, 0, 120, 90), NoteEvent::new(62, 130, 5, 90)],
        );
        let half = score.rescaled(220);
        half.validate().unwrap();
        assert_eq!(half.notes[1].onset_ticks, 60);
    }
}
