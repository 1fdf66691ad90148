//! Trace replay frontend: parses textual traces, specializes events against a
//! spec and streams them into the queue.
//!
//! One event per line, whitespace separated, `#` starts a comment. Ids, sizes
//! and pointer types are decimal; addresses and values are hex without `0x`.
//!
//! ```text
//! prog_start <pid>                  prog_end <pid>
//! fn_enter <fid>                    fn_exit <fid>
//! loop_invoke <lid>                 loop_iter <lid>        loop_exit <lid>
//! load <iid> <addr> <val> <size>    store <iid> <addr> <val> <size>
//! ptr_create <iid> <addr> <type>
//! heap_alloc <iid> <addr> <size>    heap_free <iid> <addr>
//! stack_alloc <iid> <addr> <size>   stack_free <iid> <addr>
//! global_init <oid> <addr> <size>
//! ```

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::event::{encode_into, Arg, Event, EventError, EventKind, EventSpec, MAX_EVENT_WORDS};
use crate::queue::{Producer, QueueError};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("trace does not start with prog_start")]
    MissingProgramStart,
    #[error("line {line}: prog_start may only appear first")]
    MisplacedProgramStart { line: usize },
    #[error("line {line}: event after prog_end")]
    AfterProgramEnd { line: usize },
    #[error("trace ends without prog_end")]
    MissingProgramEnd,
    #[error("read error: {0}")]
    Io(#[from] io::Error),
}

fn syntax(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Syntax {
        line,
        reason: reason.into(),
    }
}

fn dec<T: std::str::FromStr>(line: usize, field: &str, what: &str) -> Result<T, TraceError> {
    field
        .parse()
        .map_err(|_| syntax(line, format!("malformed decimal {what} `{field}`")))
}

fn hex(line: usize, field: &str, what: &str) -> Result<u64, TraceError> {
    if field.is_empty() || field.starts_with('+') {
        return Err(syntax(line, format!("malformed hex {what} `{field}`")));
    }
    u64::from_str_radix(field, 16).map_err(|_| syntax(line, format!("malformed hex {what} `{field}`")))
}

/// Parses one non-empty, comment-stripped trace line.
pub fn parse_line(line: usize, content: &str) -> Result<Event, TraceError> {
    let mut fields = content.split_whitespace();
    let mnemonic = fields.next().ok_or_else(|| syntax(line, "empty line"))?;
    let kind = EventKind::from_mnemonic(mnemonic)
        .ok_or_else(|| syntax(line, format!("unknown event `{mnemonic}`")))?;
    let rest: Vec<&str> = fields.collect();
    let arity = match kind {
        EventKind::Load | EventKind::Store => 4,
        EventKind::PointerCreate | EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit => 3,
        EventKind::HeapFree | EventKind::StackFree => 2,
        _ => 1,
    };
    if rest.len() != arity {
        return Err(syntax(
            line,
            format!("`{mnemonic}` takes {arity} fields, found {}", rest.len()),
        ));
    }
    let id: u32 = dec(line, rest[0], "id")?;
    let ev = match kind {
        EventKind::Load | EventKind::Store => Event {
            kind,
            ..Event::load(
                id,
                hex(line, rest[1], "address")?,
                hex(line, rest[2], "value")?,
                dec(line, rest[3], "size")?,
            )
        },
        EventKind::PointerCreate => {
            Event::pointer_create(id, hex(line, rest[1], "address")?, dec(line, rest[2], "type")?)
        }
        EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit => Event::alloc(
            kind,
            id,
            hex(line, rest[1], "address")?,
            dec(line, rest[2], "size")?,
        ),
        EventKind::HeapFree | EventKind::StackFree => {
            Event::free(kind, id, hex(line, rest[1], "address")?)
        }
        _ => Event::bare(kind, id),
    };
    ev.validate().map_err(|e| match e {
        EventError::Invalid { reason, .. } => syntax(line, reason),
        other => syntax(line, other.to_string()),
    })?;
    Ok(ev)
}

/// Parses and validates a whole trace.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<Event>, TraceError> {
    let mut events = Vec::new();
    let mut ended = false;
    for (idx, text) in reader.lines().enumerate() {
        let text = text?;
        let line = idx + 1;
        let content = text.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let ev = parse_line(line, content)?;
        if ended {
            return Err(TraceError::AfterProgramEnd { line });
        }
        match ev.kind {
            EventKind::ProgramStart if !events.is_empty() => {
                return Err(TraceError::MisplacedProgramStart { line })
            }
            EventKind::ProgramStart => {}
            _ if events.is_empty() => return Err(TraceError::MissingProgramStart),
            EventKind::ProgramEnd => ended = true,
            _ => {}
        }
        events.push(ev);
    }
    if events.is_empty() {
        return Err(TraceError::MissingProgramStart);
    }
    if !ended {
        return Err(TraceError::MissingProgramEnd);
    }
    Ok(events)
}

pub fn parse_trace_str(text: &str) -> Result<Vec<Event>, TraceError> {
    parse_trace(text.as_bytes())
}

/// Renders one event in trace syntax (no trailing newline).
pub fn format_event(ev: &Event) -> String {
    let mut s = String::new();
    let name = ev.kind.mnemonic().unwrap_or("stream_end");
    let id = ev.primary_id;
    let _ = match ev.kind {
        EventKind::Load | EventKind::Store => write!(
            s,
            "{name} {id} {:X} {:X} {}",
            ev.address, ev.value, ev.size
        ),
        EventKind::PointerCreate => write!(s, "{name} {id} {:X} {}", ev.address, ev.type_id),
        EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit => {
            write!(s, "{name} {id} {:X} {}", ev.address, ev.size)
        }
        EventKind::HeapFree | EventKind::StackFree => write!(s, "{name} {id} {:X}", ev.address),
        _ => write!(s, "{name} {id}"),
    };
    s
}

pub fn write_trace<W: Write>(mut out: W, events: &[Event]) -> io::Result<()> {
    for ev in events {
        writeln!(out, "{}", format_event(ev))?;
    }
    Ok(())
}

/// Drops events the event spec does not want and zeroes arguments it does not carry.
/// `size` travels in the header, so it is always kept.
#[inline]
pub fn specialize(ev: &Event, spec: &EventSpec) -> Option<Event> {
    if !spec.wants(ev.kind) {
        return None;
    }
    let mut out = *ev;
    if !spec.wants_arg(ev.kind, Arg::Address) {
        out.address = 0;
    }
    if !spec.wants_arg(ev.kind, Arg::Value) {
        out.value = 0;
    }
    if !spec.wants_arg(ev.kind, Arg::TypeId) {
        out.type_id = 0;
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayCounts {
    pub emitted: u64,
    pub dropped: u64,
    /// Words written to the queue, including the stream-end word.
    pub words: u64,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// Encodes every wanted event into the queue, then the stream end, then
/// closes the producer.
pub fn replay<'a, I>(events: I, spec: &EventSpec, producer: &mut Producer) -> Result<ReplayCounts, ReplayError>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut counts = ReplayCounts::default();
    let mut buf = [0u64; MAX_EVENT_WORDS];
    for ev in events {
        if ev.kind == EventKind::StreamEnd {
            break;
        }
        if !spec.wants(ev.kind) {
            counts.dropped += 1;
            continue;
        }
        let n = encode_into(ev, spec, &mut buf)?;
        producer.produce(&buf[..n])?;
        counts.emitted += 1;
        counts.words += n as u64;
    }
    producer.end_stream()?;
    producer.close()?;
    counts.words += 1;
    Ok(counts)
}

/// Encoded size in words of `events` under `spec`, stream end included.
pub fn stream_words(events: &[Event], spec: &EventSpec) -> u64 {
    1 + events
        .iter()
        .filter_map(|e| spec.word_count(e.kind))
        .map(|n| n as u64)
        .sum::<u64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::decode_event;
    use crate::queue::{self, QueueConfig};

    #[test]
    fn parses_minimal_trace() {
        let evs = parse_trace_str("prog_start 1\nload 7 1000 2A 4\nprog_end 1").unwrap();
        assert_eq!(
            evs,
            vec![
                Event::bare(EventKind::ProgramStart, 1),
                Event::load(7, 0x1000, 0x2A, 4),
                Event::bare(EventKind::ProgramEnd, 1),
            ]
        );
    }

    #[test]
    fn trace_errors() {
        assert!(matches!(parse_trace_str(""), Err(TraceError::MissingProgramStart)));
        assert!(matches!(
            parse_trace_str("load 7 ZZ 0 4"),
            Err(TraceError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace_str("load 7 10 0 4\nprog_end 1"),
            Err(TraceError::MissingProgramStart)
        ));
        assert!(matches!(
            parse_trace_str("prog_start 1\nprog_end 1\nload 1 0 0 1"),
            Err(TraceError::AfterProgramEnd { line: 3 })
        ));
        assert!(matches!(
            parse_trace_str("prog_start 1\nprog_start 1\nprog_end 1"),
            Err(TraceError::MisplacedProgramStart { line: 2 })
        ));
        assert!(matches!(
            parse_trace_str("prog_start 1\nload 1 0 0 3\nprog_end 1"),
            Err(TraceError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_trace_str("prog_start 1\nload 1 0 0\nprog_end 1"),
            Err(TraceError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_trace_str("prog_start 1\nload 1 0x10 0 4\nprog_end 1"),
            Err(TraceError::Syntax { line: 2, .. })
        ));
        assert!(matches!(parse_trace_str("prog_start 1\n"), Err(TraceError::MissingProgramEnd)));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let evs = parse_trace_str("# header\n\nprog_start 1 # go\n  \nprog_end 1\n").unwrap();
        assert_eq!(evs.len(), 2);
    }

    #[test]
    fn format_round_trips() {
        let evs = vec![
            Event::bare(EventKind::ProgramStart, 1),
            Event::bare(EventKind::FunctionEntry, 4),
            Event::bare(EventKind::LoopInvoke, 2),
            Event::bare(EventKind::LoopIter, 2),
            Event::store(3, 0xDEAD_BEEF, 0xFFFF_FFFF_FFFF_FFFF, 8),
            Event::load(4, 0x10, 0, 1),
            Event::pointer_create(5, 0x18, 65535),
            Event::alloc(EventKind::HeapAlloc, 6, 0x100, 16),
            Event::alloc(EventKind::StackAlloc, 7, 0x200, 8),
            Event::alloc(EventKind::GlobalInit, 8, 0x300, 4),
            Event::free(EventKind::HeapFree, 9, 0x100),
            Event::free(EventKind::StackFree, 10, 0x200),
            Event::bare(EventKind::LoopExit, 2),
            Event::bare(EventKind::FunctionExit, 4),
            Event::bare(EventKind::ProgramEnd, 1),
        ];
        let mut text = Vec::new();
        write_trace(&mut text, &evs).unwrap();
        assert_eq!(parse_trace(&text[..]).unwrap(), evs);
    }

    #[test]
    fn specialize_examples() {
        let listing = EventSpec::new("vp").with(EventKind::Load, &[Arg::Value]);
        assert_eq!(specialize(&Event::store(1, 2, 3, 4), &listing), None);
        assert_eq!(
            specialize(&Event::load(9, 0x40, 7, 4), &listing),
            Some(Event::load(9, 0, 7, 4))
        );
        let full = EventSpec::full("f");
        let ev = Event::pointer_create(1, 0x10, 3);
        assert_eq!(specialize(&ev, &full), Some(ev));
    }

    #[test]
    fn replay_counts_and_order() {
        let text = "prog_start 1\nload 7 1000 2A 4\nprog_end 1";
        let evs = parse_trace_str(text).unwrap();
        let full = EventSpec::full("f");
        let (mut p, mut cs) = queue::create(QueueConfig::new(4096, 1)).unwrap();
        let counts = replay(&evs, &full, &mut p).unwrap();
        assert_eq!((counts.emitted, counts.dropped), (3, 0));
        let chunk = cs[0].next_chunk().unwrap().unwrap().to_vec();
        assert_eq!(chunk.len() as u64, counts.words);
        assert_eq!(counts.words, stream_words(&evs, &full));
        let mut pos = 0;
        let mut decoded = Vec::new();
        while pos < chunk.len() {
            let (ev, n) = decode_event(&chunk[pos..], &full).unwrap();
            decoded.push(ev);
            pos += n;
        }
        assert_eq!(decoded.last(), Some(&Event::STREAM_END));
        decoded.pop();
        assert_eq!(decoded, evs);
    }

    #[test]
    fn replay_drops_stores_under_listing_spec() {
        let mut evs = vec![Event::bare(EventKind::ProgramStart, 1)];
        for i in 0..5 {
            evs.push(Event::load(1, 8 * i, i, 8));
            evs.push(Event::store(2, 8 * i, i, 8));
        }
        evs.push(Event::bare(EventKind::ProgramEnd, 1));
        let spec = EventSpec::parse("module: vp\nevent load: value\nevent prog_end:").unwrap();
        let (mut p, _cs) = queue::create(QueueConfig::default()).unwrap();
        let counts = replay(&evs, &spec, &mut p).unwrap();
        assert_eq!((counts.emitted, counts.dropped), (7, 5));
    }
}
