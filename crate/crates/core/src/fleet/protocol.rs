//! Wire format: `tag: u8`, `len: u32 LE`, `len` body bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{AlarmContext, AlarmRecord};
use crate::synth::Category;

pub const HEADER_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    AlarmUpload = 1,
    OtaPush = 2,
    OtaAck = 3,
    MetricsReport = 4,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::AlarmUpload,
        MessageKind::OtaPush,
        MessageKind::OtaAck,
        MessageKind::MetricsReport,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or(DecodeError::UnknownTag(tag))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes after the message")]
    TrailingBytes(usize),
    #[error("malformed {kind:?} body: {reason}")]
    Body { kind: MessageKind, reason: String },
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.body.len());
    out.push(m.kind.tag());
    out.extend_from_slice(&(m.body.len() as u32).to_le_bytes());
    out.extend_from_slice(&m.body);
    out
}

/// Decodes one message from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let kind = MessageKind::from_tag(bytes[0])?;
    let len = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
    let end = HEADER_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or(DecodeError::Truncated {
            needed: HEADER_LEN.saturating_add(len),
            got: bytes.len(),
        })?;
    Ok((
        Message {
            kind,
            body: bytes[HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}

/// Decodes exactly one message.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - used));
    }
    Ok(m)
}

/// Bounds-checked little-endian reader over a message body.
struct Reader<'a> {
    kind: MessageKind,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(m: &'a Message, expect: MessageKind) -> Result<Self, DecodeError> {
        if m.kind != expect {
            return Err(DecodeError::Body {
                kind: m.kind,
                reason: format!("expected a {expect:?} message"),
            });
        }
        Ok(Reader { kind: m.kind, buf: &m.body, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(DecodeError::Truncated {
            needed: HEADER_LEN + self.pos.saturating_add(n),
            got: HEADER_LEN + self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self) -> Result<Vec<f32>, DecodeError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.bad("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.bad("string is not UTF-8"))
    }

    fn bad(&self, reason: &str) -> DecodeError {
        DecodeError::Body {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::TrailingBytes(self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn alarm_upload(r: &AlarmRecord) -> Message {
    let mut b = Vec::new();
    b.extend_from_slice(&r.device_id.to_le_bytes());
    b.extend_from_slice(&r.timestamp_ns.to_le_bytes());
    b.extend_from_slice(&r.context.trace_id.to_le_bytes());
    b.extend_from_slice(&r.context.frame_index.to_le_bytes());
    let id = r.context.profile_id.as_bytes();
    let id = &id[..id.len().min(u16::MAX as usize)];
    b.extend_from_slice(&(id.len() as u16).to_le_bytes());
    b.extend_from_slice(id);
    b.push(r.context.category.index() as u8);
    b.extend_from_slice(&r.model_version.to_le_bytes());
    put_f32s(&mut b, &r.frame);
    put_f32s(&mut b, &r.vector);
    Message {
        kind: MessageKind::AlarmUpload,
        body: b,
    }
}

pub fn read_alarm_upload(m: &Message) -> Result<AlarmRecord, DecodeError> {
    let mut r = Reader::new(m, MessageKind::AlarmUpload)?;
    let device_id = r.u32()?;
    let timestamp_ns = r.u64()?;
    let trace_id = r.u64()?;
    let frame_index = r.u32()?;
    let profile_id = r.string()?;
    let cat = r.u8()? as usize;
    let category = *Category::ALL.get(cat).ok_or_else(|| r.bad("unknown category"))?;
    let model_version = r.u64()?;
    let frame = r.f32s()?;
    let vector = r.f32s()?;
    r.finish()?;
    Ok(AlarmRecord {
        device_id,
        timestamp_ns,
        context: AlarmContext {
            trace_id,
            frame_index,
            profile_id,
            category,
        },
        model_version,
        frame,
        vector,
    })
}

/// The body is a model file.
pub fn ota_push(model_file: Vec<u8>) -> Message {
    Message {
        kind: MessageKind::OtaPush,
        body: model_file,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtaAck {
    pub device_id: u32,
    pub version: u64,
}

pub fn ota_ack(a: &OtaAck) -> Message {
    let mut b = Vec::with_capacity(12);
    b.extend_from_slice(&a.device_id.to_le_bytes());
    b.extend_from_slice(&a.version.to_le_bytes());
    Message {
        kind: MessageKind::OtaAck,
        body: b,
    }
}

pub fn read_ota_ack(m: &Message) -> Result<OtaAck, DecodeError> {
    let mut r = Reader::new(m, MessageKind::OtaAck)?;
    let a = OtaAck {
        device_id: r.u32()?,
        version: r.u64()?,
    };
    r.finish()?;
    Ok(a)
}

/// One segment of device operation. Label-derived counts are simulation
/// instrumentation, standing in for field confirmation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub device_id: u32,
    pub version: u64,
    pub segment: u32,
    pub start_ns: u64,
    pub frames: u32,
    pub normal_frames: u32,
    pub alarms: u32,
    pub true_alarms: u32,
    pub arc_event: bool,
    pub missed: bool,
}

impl SegmentMetrics {
    pub fn false_alarms(&self) -> u32 {
        self.alarms - self.true_alarms
    }
}

pub fn metrics_report(s: &SegmentMetrics) -> Message {
    let mut b = Vec::with_capacity(42);
    b.extend_from_slice(&s.device_id.to_le_bytes());
    b.extend_from_slice(&s.version.to_le_bytes());
    b.extend_from_slice(&s.segment.to_le_bytes());
    b.extend_from_slice(&s.start_ns.to_le_bytes());
    b.extend_from_slice(&s.frames.to_le_bytes());
    b.extend_from_slice(&s.normal_frames.to_le_bytes());
    b.extend_from_slice(&s.alarms.to_le_bytes());
    b.extend_from_slice(&s.true_alarms.to_le_bytes());
    b.push(s.arc_event as u8 | (s.missed as u8) << 1);
    Message {
        kind: MessageKind::MetricsReport,
        body: b,
    }
}

pub fn read_metrics_report(m: &Message) -> Result<SegmentMetrics, DecodeError> {
    let mut r = Reader::new(m, MessageKind::MetricsReport)?;
    let mut s = SegmentMetrics {
        device_id: r.u32()?,
        version: r.u64()?,
        segment: r.u32()?,
        start_ns: r.u64()?,
        frames: r.u32()?,
        normal_frames: r.u32()?,
        alarms: r.u32()?,
        true_alarms: r.u32()?,
        ..SegmentMetrics::default()
    };
    let flags = r.u8()?;
    if flags > 3 {
        return Err(r.bad("unknown flag bits"));
    }
    if s.true_alarms > s.alarms || s.normal_frames > s.frames {
        return Err(r.bad("inconsistent counts"));
    }
    s.arc_event = flags & 1 != 0;
    s.missed = flags & 2 != 0;
    r.finish()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_message() -> impl Strategy<Value = Message> {
        (0usize..4, proptest::collection::vec(any::<u8>(), 0..64)).prop_map(|(k, body)| Message {
            kind: MessageKind::ALL[k],
            body,
        })
    }

    #[test]
    fn empty_metrics_frame_is_header_only() {
        let m = Message {
            kind: MessageKind::MetricsReport,
            body: Vec::new(),
        };
        let b = encode_message(&m);
        assert_eq!(b, vec![4, 0, 0, 0, 0]);
        assert_eq!(decode_message(&b).unwrap(), m);
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode_message(&[9, 0, 0, 0, 0]), Err(DecodeError::UnknownTag(9)));
        assert_eq!(decode_message(&[1, 0, 0]), Err(DecodeError::Truncated { needed: 5, got: 3 }));
        assert_eq!(decode_message(&[1, 2, 0, 0, 0, 7]), Err(DecodeError::Truncated { needed: 7, got: 6 }));
        assert_eq!(decode_message(&[1, 0, 0, 0, 0, 7]), Err(DecodeError::TrailingBytes(1)));
        assert!(matches!(decode_message(&[1, 255, 255, 255, 255]), Err(DecodeError::Truncated { .. })));
    }

    #[test]
    fn typed_bodies_round_trip() {
        let rec = AlarmRecord {
            device_id: 7,
            timestamp_ns: 123_456,
            context: AlarmContext {
                trace_id: 99,
                frame_index: 12,
                profile_id: "inv-b".into(),
                category: Category::HarmonicGrid,
            },
            model_version: 3,
            frame: vec![1.0, -2.5],
            vector: vec![0.25; 5],
        };
        let bytes = encode_message(&alarm_upload(&rec));
        assert_eq!(read_alarm_upload(&decode_message(&bytes).unwrap()).unwrap(), rec);

        let ack = OtaAck { device_id: 2, version: 9 };
        assert_eq!(read_ota_ack(&ota_ack(&ack)).unwrap(), ack);

        let s = SegmentMetrics {
            device_id: 1,
            version: 2,
            segment: 3,
            start_ns: 4,
            frames: 100,
            normal_frames: 70,
            alarms: 5,
            true_alarms: 4,
            arc_event: true,
            missed: false,
        };
        assert_eq!(read_metrics_report(&metrics_report(&s)).unwrap(), s);
        assert!(read_ota_ack(&metrics_report(&s)).is_err());
    }

    #[test]
    fn truncated_bodies_are_errors() {
        let ack = ota_ack(&OtaAck { device_id: 2, version: 9 });
        for n in 0..ack.body.len() {
            let cut = Message {
                kind: ack.kind,
                body: ack.body[..n].to_vec(),
            };
            assert!(matches!(read_ota_ack(&cut), Err(DecodeError::Truncated { .. })));
        }
    }

    proptest! {
        #[test]
        fn frames_round_trip(m in arb_message()) {
            let b = encode_message(&m);
            prop_assert_eq!(b.len(), HEADER_LEN + m.body.len());
            prop_assert_eq!(decode_message(&b).unwrap(), m);
        }

        #[test]
        fn every_truncation_is_an_error(m in arb_message()) {
            let b = encode_message(&m);
            for n in 0..b.len() {
                let is_truncated = matches!(decode_message(&b[..n]), Err(DecodeError::Truncated { .. }));
                prop_assert!(is_truncated);
            }
        }

        #[test]
        fn arbitrary_bytes_never_panic(b in proptest::collection::vec(any::<u8>(), 0..80)) {
            if let Ok(m) = decode_message(&b) {
                let _ = read_alarm_upload(&m);
                let _ = read_ota_ack(&m);
                let _ = read_metrics_report(&m);
            }
        }
    }
}
