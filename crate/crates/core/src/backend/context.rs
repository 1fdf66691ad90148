//! Context tracking for one backend worker.
//!
//! The manager keeps the live frame stack (functions, loop invocations and
//! loop iterations) and interns every stack that ever becomes current into a
//! trie: a [`ContextId`] is the trie node of the stack, so identical stacks
//! (iteration counters ignored) always share an id and ids are handed out in
//! order of first appearance. Encoding is a field read; decoding walks parent
//! links.
//!
//! Separately, every loop invocation and iteration is recorded as a
//! [`LoopPoint`] in a persistent tree, so that the iteration coordinates of an
//! old access can be compared with the current ones long after the stack moved
//! on.

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::event::{Event, EventKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("pop of {found:?} {found_id} does not match the top frame {expected}")]
    Mismatch {
        found: FrameType,
        found_id: u32,
        expected: String,
    },
    #[error("loop_iter {0} without an enclosing loop_invoke")]
    IterWithoutInvoke(u32),
    #[error("more than 2^32 - 2 distinct contexts")]
    TooManyContexts,
    #[error("unknown context id {0}")]
    UnknownId(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameType {
    Function,
    LoopInvocation,
    LoopIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextFrame {
    pub frame_type: FrameType,
    pub id: u32,
    /// Only meaningful for `LoopIteration` frames; zero in decoded stacks.
    pub iteration: u64,
}

impl ContextFrame {
    pub fn new(frame_type: FrameType, id: u32) -> Self {
        ContextFrame {
            frame_type,
            id,
            iteration: 0,
        }
    }
}

/// Compact encoding of a frame stack; `0` is the empty stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContextId(pub u32);

impl std::fmt::Display for ContextId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// A node of the loop-iteration tree; `LoopPoint(0)` is "outside every loop".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LoopPoint(pub u32);

/// Which loops count as targets for loop-level attribution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LoopFilter {
    #[default]
    All,
    None,
    /// Sorted loop ids.
    Only(Vec<u32>),
}

impl LoopFilter {
    pub fn only(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        LoopFilter::Only(ids)
    }

    #[inline]
    pub fn accepts(&self, loop_id: u32) -> bool {
        match self {
            LoopFilter::All => true,
            LoopFilter::None => false,
            LoopFilter::Only(ids) => ids.binary_search(&loop_id).is_ok(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, LoopFilter::None)
    }
}

/// The innermost loop invocation two loop points have in common.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedLoop {
    pub loop_id: u32,
    pub src_iteration: u64,
    pub dst_iteration: u64,
}

/// One level of an active loop nest at some moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopLevel {
    pub loop_id: u32,
    pub invocation: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy)]
struct TrieNode {
    parent: u32,
    frame: (FrameType, u32),
}

#[derive(Debug, Clone, Copy)]
struct PointNode {
    parent: u32,
    level: LoopLevel,
}

#[derive(Debug, Clone, Copy)]
struct ActiveFrame {
    frame: ContextFrame,
    /// Loop point current before this frame was pushed.
    point_before: u32,
}

const MAX_CONTEXTS: usize = u32::MAX as usize - 1;

#[derive(Debug, Clone)]
pub struct ContextManager {
    nodes: Vec<TrieNode>,
    children: FxHashMap<(u32, FrameType, u32), u32>,
    stack: Vec<ActiveFrame>,
    current: u32,
    points: Vec<PointNode>,
    point: u32,
    invocations: u64,
}

impl Default for ContextManager {
    fn default() -> Self {
        Self::new()
    }
}

impl ContextManager {
    pub fn new() -> Self {
        let root = TrieNode {
            parent: 0,
            frame: (FrameType::Function, 0),
        };
        let no_loop = PointNode {
            parent: 0,
            level: LoopLevel {
                loop_id: 0,
                invocation: 0,
                iteration: 0,
            },
        };
        ContextManager {
            nodes: vec![root],
            children: FxHashMap::default(),
            stack: Vec::new(),
            current: 0,
            points: vec![no_loop],
            point: 0,
            invocations: 0,
        }
    }

    fn intern(&mut self, parent: u32, frame: (FrameType, u32)) -> Result<u32, ContextError> {
        if let Some(&id) = self.children.get(&(parent, frame.0, frame.1)) {
            return Ok(id);
        }
        if self.nodes.len() > MAX_CONTEXTS {
            return Err(ContextError::TooManyContexts);
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(TrieNode { parent, frame });
        self.children.insert((parent, frame.0, frame.1), id);
        Ok(id)
    }

    fn new_point(&mut self, parent: u32, level: LoopLevel) -> u32 {
        let id = self.points.len() as u32;
        self.points.push(PointNode { parent, level });
        id
    }

    fn top_string(&self) -> String {
        match self.stack.last() {
            Some(f) => format!("{:?} {}", f.frame.frame_type, f.frame.id),
            None => "<empty>".to_string(),
        }
    }

    /// Pushes a frame. Pushing a `LoopIteration` advances the iteration of the
    /// loop whose invocation is on top: the first one after `LoopInvocation`
    /// keeps iteration 0 (iteration 0 starts at the invocation), later ones
    /// increment the counter.
    pub fn push(&mut self, frame_type: FrameType, id: u32) -> Result<(), ContextError> {
        match frame_type {
            FrameType::Function => {
                let node = self.intern(self.current, (frame_type, id))?;
                self.stack.push(ActiveFrame {
                    frame: ContextFrame::new(frame_type, id),
                    point_before: self.point,
                });
                self.current = node;
            }
            FrameType::LoopInvocation => {
                let node = self.intern(self.current, (frame_type, id))?;
                self.invocations += 1;
                let point = self.new_point(
                    self.point,
                    LoopLevel {
                        loop_id: id,
                        invocation: self.invocations,
                        iteration: 0,
                    },
                );
                self.stack.push(ActiveFrame {
                    frame: ContextFrame::new(frame_type, id),
                    point_before: self.point,
                });
                self.current = node;
                self.point = point;
            }
            FrameType::LoopIteration => match self.stack.last().map(|f| f.frame) {
                Some(ContextFrame {
                    frame_type: FrameType::LoopIteration,
                    id: top,
                    iteration,
                }) if top == id => {
                    let cur = self.points[self.point as usize];
                    let level = LoopLevel {
                        iteration: iteration + 1,
                        ..cur.level
                    };
                    self.point = self.new_point(cur.parent, level);
                    self.stack.last_mut().unwrap().frame.iteration = iteration + 1;
                }
                Some(ContextFrame {
                    frame_type: FrameType::LoopInvocation,
                    id: top,
                    ..
                }) if top == id => {
                    let node = self.intern(self.current, (frame_type, id))?;
                    self.stack.push(ActiveFrame {
                        frame: ContextFrame::new(frame_type, id),
                        point_before: self.point,
                    });
                    self.current = node;
                }
                _ => return Err(ContextError::IterWithoutInvoke(id)),
            },
        }
        Ok(())
    }

    /// Pops the top frame, which must match. Popping a `LoopInvocation` also
    /// drops its iteration frame.
    pub fn pop(&mut self, frame_type: FrameType, id: u32) -> Result<(), ContextError> {
        if frame_type == FrameType::LoopInvocation {
            if let Some(top) = self.stack.last() {
                if top.frame.frame_type == FrameType::LoopIteration && top.frame.id == id {
                    self.pop_top();
                }
            }
        }
        match self.stack.last() {
            Some(top) if top.frame.frame_type == frame_type && top.frame.id == id => {
                self.pop_top();
                Ok(())
            }
            _ => Err(ContextError::Mismatch {
                found: frame_type,
                found_id: id,
                expected: self.top_string(),
            }),
        }
    }

    fn pop_top(&mut self) {
        let top = self.stack.pop().expect("non-empty stack");
        self.current = self.nodes[self.current as usize].parent;
        if top.frame.frame_type == FrameType::LoopInvocation {
            self.point = top.point_before;
        }
    }

    /// Applies a context event; other kinds are ignored.
    pub fn apply(&mut self, ev: &Event) -> Result<(), ContextError> {
        let id = ev.primary_id;
        match ev.kind {
            EventKind::FunctionEntry => self.push(FrameType::Function, id),
            EventKind::FunctionExit => self.pop(FrameType::Function, id),
            EventKind::LoopInvoke => self.push(FrameType::LoopInvocation, id),
            EventKind::LoopIter => self.push(FrameType::LoopIteration, id),
            EventKind::LoopExit => self.pop(FrameType::LoopInvocation, id),
            _ => Ok(()),
        }
    }

    /// Id of the current stack.
    #[inline]
    pub fn encode(&self) -> ContextId {
        ContextId(self.current)
    }

    /// Frame stack (outermost first, iteration counters zeroed) behind `id`.
    pub fn decode(&self, id: ContextId) -> Result<Vec<ContextFrame>, ContextError> {
        if id.0 as usize >= self.nodes.len() {
            return Err(ContextError::UnknownId(id.0));
        }
        let mut frames = Vec::new();
        let mut n = id.0;
        while n != 0 {
            let node = self.nodes[n as usize];
            frames.push(ContextFrame::new(node.frame.0, node.frame.1));
            n = node.parent;
        }
        frames.reverse();
        Ok(frames)
    }

    /// Live stack including iteration counters.
    pub fn frames(&self) -> Vec<ContextFrame> {
        self.stack.iter().map(|f| f.frame).collect()
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    /// Number of ids issued so far, including the empty context.
    pub fn context_count(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn loop_point(&self) -> LoopPoint {
        LoopPoint(self.point)
    }

    /// Active loop levels at `point`, innermost first.
    pub fn loop_levels(&self, point: LoopPoint) -> impl Iterator<Item = LoopLevel> + '_ {
        let mut p = point.0;
        std::iter::from_fn(move || {
            if p == 0 {
                return None;
            }
            let node = self.points[p as usize];
            p = node.parent;
            Some(node.level)
        })
    }

    /// Innermost target loop active at `point`.
    pub fn innermost_loop(&self, point: LoopPoint, filter: &LoopFilter) -> Option<LoopLevel> {
        self.loop_levels(point).find(|l| filter.accepts(l.loop_id))
    }

    /// Innermost target-loop invocation active at both points.
    pub fn shared_loop(&self, src: LoopPoint, dst: LoopPoint, filter: &LoopFilter) -> Option<SharedLoop> {
        if src.0 == 0 || dst.0 == 0 {
            return None;
        }
        self.loop_levels(dst)
            .filter(|d| filter.accepts(d.loop_id))
            .find_map(|d| {
                self.loop_levels(src)
                    .find(|s| s.invocation == d.invocation)
                    .map(|s| SharedLoop {
                        loop_id: d.loop_id,
                        src_iteration: s.iteration,
                        dst_iteration: d.iteration,
                    })
            })
    }
}
