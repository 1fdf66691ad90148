//! Event taxonomy, event specifications and the fixed-width wire codec.
//!
//! Every event travels as a run of 64-bit words. The first word is a packed
//! header:
//!
//! ```text
//!  63                32 31                 8 7        0
//! +--------------------+--------------------+----------+
//! |     primary id     |        size        |   kind   |
//! +--------------------+--------------------+----------+
//! ```
//!
//! followed by one word per argument the [`EventSpec`] asks for, in the order
//! the event spec lists them. `size` is always carried by the header and never emits
//! a word of its own. [`EventKind::StreamEnd`] is the single word `0`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest size representable in the 24-bit header field.
pub const MAX_EVENT_SIZE: u32 = (1 << 24) - 1;

/// Upper bound on the encoded length of one event (header + 3 arguments).
pub const MAX_EVENT_WORDS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("unknown event kind code {0}")]
    UnknownKindCode(u64),
    #[error("truncated event: need {needed} words, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("size {0} does not fit in 24 bits")]
    SizeOverflow(u64),
    #[error("event kind `{0}` is not wanted by the event spec")]
    NotWanted(EventKind),
    #[error("invalid {kind} event: {reason}")]
    Invalid { kind: EventKind, reason: &'static str },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("line {line}: unknown event `{name}`")]
    UnknownEvent { line: usize, name: String },
    #[error("line {line}: unknown argument `{name}`")]
    UnknownArgument { line: usize, name: String },
    #[error("line {line}: argument `{arg}` is not valid for `{kind}`")]
    InvalidArgument { line: usize, kind: EventKind, arg: Arg },
    #[error("line {line}: argument `{arg}` listed twice")]
    DuplicateArgument { line: usize, arg: Arg },
    #[error("line {line}: event `{kind}` declared twice")]
    DuplicateKind { line: usize, kind: EventKind },
    #[error("line {line}: `module:` declared twice")]
    DuplicateModule { line: usize },
    #[error("missing `module:` declaration")]
    MissingModule,
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

/// The closed set of profiling events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum EventKind {
    #[default]
    StreamEnd = 0,
    Load = 1,
    Store = 2,
    PointerCreate = 3,
    HeapAlloc = 4,
    HeapFree = 5,
    StackAlloc = 6,
    StackFree = 7,
    GlobalInit = 8,
    FunctionEntry = 9,
    FunctionExit = 10,
    LoopInvoke = 11,
    LoopIter = 12,
    LoopExit = 13,
    ProgramStart = 14,
    ProgramEnd = 15,
}

impl EventKind {
    pub const ALL: [EventKind; 16] = [
        EventKind::StreamEnd,
        EventKind::Load,
        EventKind::Store,
        EventKind::PointerCreate,
        EventKind::HeapAlloc,
        EventKind::HeapFree,
        EventKind::StackAlloc,
        EventKind::StackFree,
        EventKind::GlobalInit,
        EventKind::FunctionEntry,
        EventKind::FunctionExit,
        EventKind::LoopInvoke,
        EventKind::LoopIter,
        EventKind::LoopExit,
        EventKind::ProgramStart,
        EventKind::ProgramEnd,
    ];

    /// Kinds that change the context stack.
    pub const CONTEXT: [EventKind; 5] = [
        EventKind::FunctionEntry,
        EventKind::FunctionExit,
        EventKind::LoopInvoke,
        EventKind::LoopIter,
        EventKind::LoopExit,
    ];

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn from_code(code: u64) -> Result<Self, EventError> {
        match code {
            0..=15 => Ok(Self::ALL[code as usize]),
            _ => Err(EventError::UnknownKindCode(code)),
        }
    }

    /// Trace/spec mnemonic. `StreamEnd` has none.
    pub fn mnemonic(self) -> Option<&'static str> {
        Some(match self {
            EventKind::StreamEnd => return None,
            EventKind::Load => "load",
            EventKind::Store => "store",
            EventKind::PointerCreate => "ptr_create",
            EventKind::HeapAlloc => "heap_alloc",
            EventKind::HeapFree => "heap_free",
            EventKind::StackAlloc => "stack_alloc",
            EventKind::StackFree => "stack_free",
            EventKind::GlobalInit => "global_init",
            EventKind::FunctionEntry => "fn_enter",
            EventKind::FunctionExit => "fn_exit",
            EventKind::LoopInvoke => "loop_invoke",
            EventKind::LoopIter => "loop_iter",
            EventKind::LoopExit => "loop_exit",
            EventKind::ProgramStart => "prog_start",
            EventKind::ProgramEnd => "prog_end",
        })
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.mnemonic() == Some(s))
    }

    /// Arguments (besides the primary id) this kind carries.
    pub fn valid_args(self) -> &'static [Arg] {
        use Arg::*;
        match self {
            EventKind::Load | EventKind::Store => &[Address, Value, Size],
            EventKind::PointerCreate => &[Address, TypeId],
            EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit => {
                &[Address, Size]
            }
            EventKind::HeapFree | EventKind::StackFree => &[Address],
            _ => &[],
        }
    }

    pub fn is_context(self) -> bool {
        Self::CONTEXT.contains(&self)
    }

    pub fn is_memory_access(self) -> bool {
        matches!(self, EventKind::Load | EventKind::Store)
    }

    pub fn is_allocation(self) -> bool {
        matches!(
            self,
            EventKind::HeapAlloc | EventKind::StackAlloc | EventKind::GlobalInit
        )
    }

    pub fn is_deallocation(self) -> bool {
        matches!(self, EventKind::HeapFree | EventKind::StackFree)
    }

    /// Always wanted regardless of what a spec lists.
    pub fn is_implicit(self) -> bool {
        matches!(
            self,
            EventKind::StreamEnd | EventKind::ProgramStart | EventKind::ProgramEnd
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic().unwrap_or("stream_end"))
    }
}

/// An optional event argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arg {
    Address,
    Value,
    Size,
    TypeId,
}

impl Arg {
    pub fn name(self) -> &'static str {
        match self {
            Arg::Address => "address",
            Arg::Value => "value",
            Arg::Size => "size",
            Arg::TypeId => "type_id",
        }
    }
}

impl FromStr for Arg {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "address" => Ok(Arg::Address),
            "value" => Ok(Arg::Value),
            "size" => Ok(Arg::Size),
            "type_id" => Ok(Arg::TypeId),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One dynamic program occurrence.
///
/// Fields a kind does not define are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Event {
    pub kind: EventKind,
    pub primary_id: u32,
    pub address: u64,
    pub value: u64,
    pub size: u32,
    pub type_id: u16,
}

impl Event {
    pub const STREAM_END: Event = Event {
        kind: EventKind::StreamEnd,
        primary_id: 0,
        address: 0,
        value: 0,
        size: 0,
        type_id: 0,
    };

    pub fn bare(kind: EventKind, primary_id: u32) -> Self {
        Event {
            kind,
            primary_id,
            ..Event::STREAM_END
        }
    }

    pub fn load(instr: u32, address: u64, value: u64, size: u32) -> Self {
        Event {
            kind: EventKind::Load,
            primary_id: instr,
            address,
            value,
            size,
            type_id: 0,
        }
    }

    pub fn store(instr: u32, address: u64, value: u64, size: u32) -> Self {
        Event {
            kind: EventKind::Store,
            ..Event::load(instr, address, value, size)
        }
    }

    pub fn pointer_create(instr: u32, address: u64, type_id: u16) -> Self {
        Event {
            kind: EventKind::PointerCreate,
            primary_id: instr,
            address,
            type_id,
            ..Event::STREAM_END
        }
    }

    /// `kind` must be one of the allocation kinds.
    pub fn alloc(kind: EventKind, id: u32, address: u64, size: u32) -> Self {
        debug_assert!(kind.is_allocation());
        Event {
            kind,
            primary_id: id,
            address,
            size,
            ..Event::STREAM_END
        }
    }

    /// `kind` must be one of the deallocation kinds.
    pub fn free(kind: EventKind, instr: u32, address: u64) -> Self {
        debug_assert!(kind.is_deallocation());
        Event {
            kind,
            primary_id: instr,
            address,
            ..Event::STREAM_END
        }
    }

    pub fn arg(&self, arg: Arg) -> u64 {
        match arg {
            Arg::Address => self.address,
            Arg::Value => self.value,
            Arg::Size => self.size as u64,
            Arg::TypeId => self.type_id as u64,
        }
    }

    /// Checks the per-kind field invariants.
    pub fn validate(&self) -> Result<(), EventError> {
        let kind = self.kind;
        let invalid = |reason| Err(EventError::Invalid { kind, reason });
        let args = kind.valid_args();
        if !args.contains(&Arg::Address) && self.address != 0 {
            return invalid("address must be zero");
        }
        if !args.contains(&Arg::Value) && self.value != 0 {
            return invalid("value must be zero");
        }
        if !args.contains(&Arg::TypeId) && self.type_id != 0 {
            return invalid("type_id must be zero");
        }
        if !args.contains(&Arg::Size) && self.size != 0 {
            return invalid("size must be zero");
        }
        if kind.is_memory_access() && !matches!(self.size, 1 | 2 | 4 | 8) {
            return invalid("access size must be 1, 2, 4 or 8");
        }
        if kind.is_allocation() && self.size == 0 {
            return invalid("allocation size must be at least 1");
        }
        if self.size > MAX_EVENT_SIZE {
            return invalid("size exceeds 24 bits");
        }
        if kind == EventKind::StreamEnd && self.primary_id != 0 {
            return invalid("stream end carries no id");
        }
        Ok(())
    }
}

/// Ordered argument list for one kind; at most three entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct ArgList {
    args: [Option<Arg>; 3],
    len: u8,
    /// Number of words the arguments occupy (`size` occupies none).
    words: u8,
}

impl ArgList {
    fn as_slice(&self) -> impl Iterator<Item = Arg> + '_ {
        self.args[..self.len as usize].iter().map(|a| a.unwrap())
    }

    fn push(&mut self, arg: Arg) {
        self.args[self.len as usize] = Some(arg);
        self.len += 1;
        if arg != Arg::Size {
            self.words += 1;
        }
    }

    fn contains(&self, arg: Arg) -> bool {
        self.as_slice().any(|a| a == arg)
    }
}

/// Which event kinds, and which of their arguments, a consumer needs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventSpec {
    module_name: String,
    slots: [Option<ArgList>; 16],
}

impl EventSpec {
    /// A spec wanting only the implicit kinds.
    pub fn new(module_name: impl Into<String>) -> Self {
        let mut slots = [None; 16];
        for kind in EventKind::ALL.into_iter().filter(|k| k.is_implicit()) {
            slots[kind.code() as usize] = Some(ArgList::default());
        }
        EventSpec {
            module_name: module_name.into(),
            slots,
        }
    }

    /// Every kind with every legal argument, in canonical order.
    pub fn full(module_name: impl Into<String>) -> Self {
        let mut spec = Self::new(module_name);
        for kind in EventKind::ALL {
            spec.want(kind, kind.valid_args()).expect("canonical args are valid");
        }
        spec
    }

    /// Adds `kind` with `args` (replacing an earlier declaration).
    pub fn want(&mut self, kind: EventKind, args: &[Arg]) -> Result<&mut Self, SpecError> {
        let mut list = ArgList::default();
        for &arg in args {
            if !kind.valid_args().contains(&arg) {
                return Err(SpecError::InvalidArgument { line: 0, kind, arg });
            }
            if list.contains(arg) {
                return Err(SpecError::DuplicateArgument { line: 0, arg });
            }
            list.push(arg);
        }
        self.slots[kind.code() as usize] = Some(list);
        Ok(self)
    }

    pub fn with(mut self, kind: EventKind, args: &[Arg]) -> Self {
        self.want(kind, args).expect("invalid spec declaration");
        self
    }

    pub fn module_name(&self) -> &str {
        &self.module_name
    }

    #[inline]
    pub fn wants(&self, kind: EventKind) -> bool {
        self.slots[kind.code() as usize].is_some()
    }

    /// Wanted arguments of `kind` in spec order; empty when unwanted.
    pub fn args(&self, kind: EventKind) -> Vec<Arg> {
        self.slots[kind.code() as usize]
            .as_ref()
            .map(|l| l.as_slice().collect())
            .unwrap_or_default()
    }

    pub fn wants_arg(&self, kind: EventKind, arg: Arg) -> bool {
        self.slots[kind.code() as usize].is_some_and(|l| l.contains(arg))
    }

    /// Encoded length of a `kind` event, or `None` if unwanted.
    #[inline]
    pub fn word_count(&self, kind: EventKind) -> Option<usize> {
        self.slots[kind.code() as usize].map(|l| 1 + l.words as usize)
    }

    pub fn wanted_kinds(&self) -> impl Iterator<Item = EventKind> + '_ {
        EventKind::ALL.into_iter().filter(|&k| self.wants(k))
    }

    /// True when every event and argument `other` wants is also wanted here.
    pub fn covers(&self, other: &EventSpec) -> bool {
        other.wanted_kinds().all(|kind| {
            self.wants(kind)
                && other
                    .args(kind)
                    .into_iter()
                    .all(|arg| arg == Arg::Size || self.wants_arg(kind, arg))
        })
    }

    /// Renders the event spec in the line-based grammar accepted by [`EventSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("module: {}\n", self.module_name);
        for kind in self.wanted_kinds() {
            let Some(name) = kind.mnemonic() else { continue };
            let args = self.args(kind);
            if kind.is_implicit() && args.is_empty() {
                continue;
            }
            let args: Vec<&str> = args.iter().map(|a| a.name()).collect();
            if args.is_empty() {
                out.push_str(&format!("event {name}\n"));
            } else {
                out.push_str(&format!("event {name}: {}\n", args.join(", ")));
            }
        }
        out
    }

    /// Parses the line-based spec grammar:
    ///
    /// ```text
    /// module: vp
    /// event load: value     # comment
    /// event prog_end:
    /// ```
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut module: Option<String> = None;
        let mut declared = [false; 16];
        let mut spec = EventSpec::new(String::new());

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix("module:") {
                if module.is_some() {
                    return Err(SpecError::DuplicateModule { line });
                }
                let name = rest.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(SpecError::Syntax {
                        line,
                        reason: "module name must be a single word".into(),
                    });
                }
                module = Some(name.to_string());
                continue;
            }
            let Some(rest) = content.strip_prefix("event") else {
                return Err(SpecError::Syntax {
                    line,
                    reason: format!("expected `module:` or `event`, found `{content}`"),
                });
            };
            if !rest.starts_with(char::is_whitespace) {
                return Err(SpecError::Syntax {
                    line,
                    reason: "expected whitespace after `event`".into(),
                });
            }
            let (name, arg_text) = match rest.split_once(':') {
                Some((n, a)) => (n.trim(), a.trim()),
                None => (rest.trim(), ""),
            };
            let kind = EventKind::from_mnemonic(name).ok_or_else(|| SpecError::UnknownEvent {
                line,
                name: name.to_string(),
            })?;
            if std::mem::replace(&mut declared[kind.code() as usize], true) {
                return Err(SpecError::DuplicateKind { line, kind });
            }
            let mut args = Vec::new();
            if !arg_text.is_empty() {
                for piece in arg_text.split(',') {
                    let piece = piece.trim();
                    let arg: Arg = piece.parse().map_err(|_| SpecError::UnknownArgument {
                        line,
                        name: piece.to_string(),
                    })?;
                    args.push(arg);
                }
            }
            spec.want(kind, &args).map_err(|e| match e {
                SpecError::InvalidArgument { kind, arg, .. } => {
                    SpecError::InvalidArgument { line, kind, arg }
                }
                SpecError::DuplicateArgument { arg, .. } => {
                    SpecError::DuplicateArgument { line, arg }
                }
                other => other,
            })?;
        }

        spec.module_name = module.ok_or(SpecError::MissingModule)?;
        Ok(spec)
    }
}

impl FromStr for EventSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        Self::parse(s)
    }
}

#[inline]
fn header(ev: &Event) -> Result<u64, EventError> {
    if ev.size > MAX_EVENT_SIZE {
        return Err(EventError::SizeOverflow(ev.size as u64));
    }
    Ok(ev.kind.code() as u64 | (ev.size as u64) << 8 | (ev.primary_id as u64) << 32)
}

/// Encodes `ev` into `out`, returning the number of words written.
#[inline]
pub fn encode_into(
    ev: &Event,
    spec: &EventSpec,
    out: &mut [u64; MAX_EVENT_WORDS],
) -> Result<usize, EventError> {
    let list = spec.slots[ev.kind.code() as usize].ok_or(EventError::NotWanted(ev.kind))?;
    out[0] = header(ev)?;
    let mut n = 1;
    for arg in list.as_slice() {
        if arg != Arg::Size {
            out[n] = ev.arg(arg);
            n += 1;
        }
    }
    Ok(n)
}

/// Encodes one event under `spec`.
pub fn encode_event(ev: &Event, spec: &EventSpec) -> Result<Vec<u64>, EventError> {
    let mut buf = [0u64; MAX_EVENT_WORDS];
    let n = encode_into(ev, spec, &mut buf)?;
    Ok(buf[..n].to_vec())
}

/// Decodes the event starting at `words[0]`; returns it with the number of
/// words consumed. Arguments the event spec does not carry come back zero.
#[inline]
pub fn decode_event(words: &[u64], spec: &EventSpec) -> Result<(Event, usize), EventError> {
    let &hdr = words.first().ok_or(EventError::Truncated {
        needed: 1,
        available: 0,
    })?;
    let kind = EventKind::from_code(hdr & 0xFF)?;
    let mut ev = Event {
        kind,
        primary_id: (hdr >> 32) as u32,
        size: ((hdr >> 8) & MAX_EVENT_SIZE as u64) as u32,
        ..Event::STREAM_END
    };
    let Some(list) = spec.slots[kind.code() as usize] else {
        return Ok((ev, 1));
    };
    let needed = 1 + list.words as usize;
    if words.len() < needed {
        return Err(EventError::Truncated {
            needed,
            available: words.len(),
        });
    }
    let mut n = 1;
    for arg in list.as_slice() {
        match arg {
            Arg::Size => continue,
            Arg::Address => ev.address = words[n],
            Arg::Value => ev.value = words[n],
            Arg::TypeId => ev.type_id = words[n] as u16,
        }
        n += 1;
    }
    Ok((ev, n))
}

/// Iterates the events of a chunk of whole encoded events.
pub struct EventDecoder<'a> {
    words: &'a [u64],
    spec: &'a EventSpec,
}

impl<'a> EventDecoder<'a> {
    pub fn new(words: &'a [u64], spec: &'a EventSpec) -> Self {
        EventDecoder { words, spec }
    }
}

impl Iterator for EventDecoder<'_> {
    type Item = Result<Event, EventError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.words.is_empty() {
            return None;
        }
        match decode_event(self.words, self.spec) {
            Ok((ev, n)) => {
                self.words = &self.words[n..];
                Some(Ok(ev))
            }
            Err(e) => {
                self.words = &[];
                Some(Err(e))
            }
        }
    }
}
