//! The nested migration task language. Programs are written in the same
//! notation they print in, e.g.
//! `ControlMessage(OH, MoveState(query, NH))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::simnet::SimTime;

/// A node addressed by role (resolved per migration) or by name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    OldHost,
    NewHost,
    Upstream,
    Downstream,
    Coordinator,
    Node(String),
}

impl Role {
    fn parse(name: &str) -> Role {
        match name {
            "OH" => Role::OldHost,
            "NH" => Role::NewHost,
            "Upstream" | "US" => Role::Upstream,
            "DS" | "Downstream" => Role::Downstream,
            "C" | "Coordinator" => Role::Coordinator,
            other => Role::Node(other.to_string()),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::OldHost => f.write_str("OH"),
            Role::NewHost => f.write_str("NH"),
            Role::Upstream => f.write_str("Upstream"),
            Role::Downstream => f.write_str("DS"),
            Role::Coordinator => f.write_str("C"),
            Role::Node(n) => f.write_str(n),
        }
    }
}

/// Which streams a task applies to, relative to the migrating query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamSel {
    /// `Streams(query)`: the query's input streams.
    Inputs,
    /// `OutputStreams(query)`.
    Outputs,
    /// `Streams(Upstream)`: the streams the executing upstream sends to the query.
    UpstreamInputs,
}

impl fmt::Display for StreamSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamSel::Inputs => f.write_str("Streams(query)"),
            StreamSel::Outputs => f.write_str("OutputStreams(query)"),
            StreamSel::UpstreamInputs => f.write_str("Streams(Upstream)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TimeRef {
    /// Resolved by the old host when it forwards the enclosing message.
    TakeoverTime,
    At(SimTime),
}

impl fmt::Display for TimeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeRef::TakeoverTime => f.write_str("TakeoverTime(query)"),
            TimeRef::At(t) => write!(f, "Time({}.{:09})", t.as_nanos() / 1_000_000_000, t.as_nanos() % 1_000_000_000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MoveKind {
    State,
    Immutable,
    Incremental,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ControlTask {
    ControlMessage { target: Role, tasks: Vec<ControlTask> },
    BufferStreams { at: Option<Role>, streams: StreamSel },
    StopStreams { at: Option<Role>, streams: StreamSel },
    StartStreams { streams: StreamSel },
    Resume { streams: StreamSel },
    Redirect { streams: StreamSel, from: Role, to: Role },
    AddNextHop { streams: StreamSel, node: Role },
    RemoveNextHop { streams: StreamSel, node: Role },
    Move { kind: MoveKind, dst: Role },
    ReplicateCheckpoint { dst: Role },
    Schedule { task: Box<ControlTask>, time: TimeRef },
    StartQuery,
    StopQuery,
    RequestMigration,
}

impl ControlTask {
    pub fn cm(target: Role, tasks: Vec<ControlTask>) -> Self {
        ControlTask::ControlMessage { target, tasks }
    }

    pub fn move_state(kind: MoveKind, dst: Role) -> Self {
        ControlTask::Move { kind, dst }
    }

    pub fn schedule(task: ControlTask, time: TimeRef) -> Self {
        ControlTask::Schedule { task: Box::new(task), time }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlTask::ControlMessage { .. } => "ControlMessage",
            ControlTask::BufferStreams { .. } => "BufferStreams",
            ControlTask::StopStreams { .. } => "StopStreams",
            ControlTask::StartStreams { .. } => "StartStreams",
            ControlTask::Resume { .. } => "Resume",
            ControlTask::Redirect { .. } => "Redirect",
            ControlTask::AddNextHop { .. } => "AddNextHop",
            ControlTask::RemoveNextHop { .. } => "RemoveNextHop",
            ControlTask::Move { kind: MoveKind::State, .. } => "MoveState",
            ControlTask::Move { kind: MoveKind::Immutable, .. } => "MoveImmutableState",
            ControlTask::Move { kind: MoveKind::Incremental, .. } => "MoveIncrementalState",
            ControlTask::ReplicateCheckpoint { .. } => "ReplicateCheckpoint",
            ControlTask::Schedule { .. } => "Schedule",
            ControlTask::StartQuery => "StartQuery",
            ControlTask::StopQuery => "StopQuery",
            ControlTask::RequestMigration => "RequestMigration",
        }
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ControlTask)) {
        f(self);
        match self {
            ControlTask::ControlMessage { tasks, .. } => tasks.iter().for_each(|t| t.visit(f)),
            ControlTask::Schedule { task, .. } => task.visit(f),
            _ => {}
        }
    }

    pub fn uses_takeover_time(&self) -> bool {
        let mut found = false;
        self.visit(&mut |t| found |= matches!(t, ControlTask::Schedule { time: TimeRef::TakeoverTime, .. }));
        found
    }

    /// Replaces every `TakeoverTime(query)` with a concrete time.
    pub fn resolve_takeover(&mut self, at: SimTime) {
        match self {
            ControlTask::ControlMessage { tasks, .. } => tasks.iter_mut().for_each(|t| t.resolve_takeover(at)),
            ControlTask::Schedule { task, time } => {
                if *time == TimeRef::TakeoverTime {
                    *time = TimeRef::At(at);
                }
                task.resolve_takeover(at);
            }
            _ => {}
        }
    }

    fn args(&self) -> Vec<Arg<'_>> {
        match self {
            ControlTask::ControlMessage { target, tasks } => {
                let mut v = vec![Arg::Role(target)];
                v.extend(tasks.iter().map(Arg::Task));
                v
            }
            ControlTask::BufferStreams { at, streams } | ControlTask::StopStreams { at, streams } => {
                let mut v: Vec<Arg> = at.iter().map(Arg::Role).collect();
                v.push(Arg::Streams(*streams));
                v
            }
            ControlTask::StartStreams { streams } | ControlTask::Resume { streams } => vec![Arg::Streams(*streams)],
            ControlTask::Redirect { streams, from, to } => vec![Arg::Streams(*streams), Arg::Role(from), Arg::Role(to)],
            ControlTask::AddNextHop { streams, node } | ControlTask::RemoveNextHop { streams, node } => {
                vec![Arg::Streams(*streams), Arg::Role(node)]
            }
            ControlTask::Move { dst, .. } => vec![Arg::Query, Arg::Role(dst)],
            ControlTask::ReplicateCheckpoint { dst } => vec![Arg::Role(dst)],
            ControlTask::Schedule { task, time } => vec![Arg::Task(task), Arg::Time(*time)],
            ControlTask::StartQuery | ControlTask::StopQuery | ControlTask::RequestMigration => vec![Arg::Query],
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, indent: Option<usize>) -> fmt::Result {
        write!(f, "{}(", self.name())?;
        let args = self.args();
        let nested = indent.is_some() && matches!(self, ControlTask::ControlMessage { .. });
        for (i, a) in args.iter().enumerate() {
            if nested && i > 0 {
                writeln!(f, ",")?;
                write!(f, "{:width$}", "", width = (indent.unwrap_or(0) + 1) * 2)?;
            } else if i > 0 {
                f.write_str(", ")?;
            }
            match a {
                Arg::Role(r) => write!(f, "{r}")?,
                Arg::Streams(s) => write!(f, "{s}")?,
                Arg::Time(t) => write!(f, "{t}")?,
                Arg::Query => f.write_str("query")?,
                Arg::Task(t) => t.write(f, indent.map(|d| d + 1))?,
            }
        }
        f.write_str(")")
    }
}

enum Arg<'a> {
    Role(&'a Role),
    Streams(StreamSel),
    Time(TimeRef),
    Query,
    Task(&'a ControlTask),
}

/// `{}` prints on one line; `{:#}` breaks nested control messages over
/// indented lines.
impl fmt::Display for ControlTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(f, f.alternate().then_some(0))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    name: String,
    offset: usize,
    args: Option<Vec<Term>>,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { offset, message: message.into() })
    }

    /// Skips whitespace, commas and `#` comments.
    fn skip(&mut self) {
        while self.pos < self.src.len() {
            match self.src[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' | b',' => self.pos += 1,
                b'#' => {
                    while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        self.skip();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || b"_-.".contains(&self.src[self.pos])) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.src.get(self.pos) {
                Some(c) => self.err(start, format!("unexpected '{}'", *c as char)),
                None => self.err(start, "unexpected end of input"),
            };
        }
        let name = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        if self.src.get(self.pos) != Some(&b'(') {
            return Ok(Term { name, offset: start, args: None });
        }
        self.pos += 1;
        let mut args = Vec::new();
        loop {
            self.skip();
            match self.src.get(self.pos) {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(Term { name, offset: start, args: Some(args) });
                }
                None => return self.err(self.pos, format!("unclosed '(' of {name}")),
                _ => args.push(self.term()?),
            }
        }
    }

    fn program(&mut self) -> Result<Vec<Term>, ParseError> {
        let mut out = Vec::new();
        loop {
            self.skip();
            if self.pos >= self.src.len() {
                return Ok(out);
            }
            out.push(self.term()?);
        }
    }
}

fn fail<T>(t: &Term, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { offset: t.offset, message: message.into() })
}

fn role(t: &Term) -> Result<Role, ParseError> {
    if t.args.is_some() {
        return fail(t, format!("expected a node or role, found {}(...)", t.name));
    }
    Ok(Role::parse(&t.name))
}

fn streams(t: &Term) -> Result<StreamSel, ParseError> {
    let arg = match t.args.as_deref() {
        Some([a]) if a.args.is_none() => a.name.as_str(),
        _ => return fail(t, "expected Streams(query), Streams(Upstream) or OutputStreams(query)"),
    };
    match (t.name.as_str(), arg) {
        ("Streams", "Upstream" | "US") => Ok(StreamSel::UpstreamInputs),
        ("Streams", _) => Ok(StreamSel::Inputs),
        ("OutputStreams", _) => Ok(StreamSel::Outputs),
        _ => fail(t, format!("expected a stream selector, found {}", t.name)),
    }
}

fn time(t: &Term) -> Result<TimeRef, ParseError> {
    match (t.name.as_str(), t.args.as_deref()) {
        ("TakeoverTime", Some([_])) => Ok(TimeRef::TakeoverTime),
        ("Time", Some([v])) => match v.name.parse::<f64>() {
            Ok(secs) if secs >= 0.0 => Ok(TimeRef::At(parse_secs(&v.name).unwrap_or(SimTime::from_secs_f64(secs)))),
            _ => fail(v, "expected non-negative seconds"),
        },
        _ => fail(t, "expected TakeoverTime(query) or Time(seconds)"),
    }
}

/// Exact decimal seconds to nanoseconds for up to nine fractional digits.
fn parse_secs(s: &str) -> Option<SimTime> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 9 {
        return None;
    }
    let whole: u64 = int.parse().ok()?;
    let frac_ns: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<9}").parse().ok()? };
    Some(SimTime::from_nanos(whole.checked_mul(1_000_000_000)?.checked_add(frac_ns)?))
}

fn is_time(t: &Term) -> bool {
    matches!(t.name.as_str(), "TakeoverTime" | "Time")
}

fn task(t: &Term) -> Result<ControlTask, ParseError> {
    let Some(args) = t.args.as_deref() else {
        return fail(t, format!("expected a task, found bare '{}'", t.name));
    };
    let arity = |n: usize| -> Result<(), ParseError> {
        if args.len() == n {
            Ok(())
        } else {
            fail(t, format!("{} takes {n} argument(s), got {}", t.name, args.len()))
        }
    };
    let mv = |kind| -> Result<ControlTask, ParseError> {
        arity(2)?;
        Ok(ControlTask::Move { kind, dst: role(&args[1])? })
    };
    Ok(match t.name.as_str() {
        "ControlMessage" => {
            let Some((target, rest)) = args.split_first() else {
                return fail(t, "ControlMessage needs a target");
            };
            ControlTask::ControlMessage { target: role(target)?, tasks: rest.iter().map(task).collect::<Result<_, _>>()? }
        }
        "BufferStreams" | "StopStreams" => {
            let (at, s) = match args {
                [s] => (None, streams(s)?),
                [n, s] => (Some(role(n)?), streams(s)?),
                _ => return fail(t, format!("{} takes ([node,] streams)", t.name)),
            };
            if t.name == "BufferStreams" {
                ControlTask::BufferStreams { at, streams: s }
            } else {
                ControlTask::StopStreams { at, streams: s }
            }
        }
        "StartStreams" => {
            arity(1)?;
            ControlTask::StartStreams { streams: streams(&args[0])? }
        }
        "Resume" => {
            arity(1)?;
            ControlTask::Resume { streams: streams(&args[0])? }
        }
        "Redirect" => {
            arity(3)?;
            ControlTask::Redirect { streams: streams(&args[0])?, from: role(&args[1])?, to: role(&args[2])? }
        }
        "AddNextHop" => {
            arity(2)?;
            ControlTask::AddNextHop { streams: streams(&args[0])?, node: role(&args[1])? }
        }
        "RemoveNextHop" => {
            arity(2)?;
            ControlTask::RemoveNextHop { streams: streams(&args[0])?, node: role(&args[1])? }
        }
        "MoveState" => mv(MoveKind::State)?,
        "MoveImmutableState" => mv(MoveKind::Immutable)?,
        "MoveIncrementalState" => mv(MoveKind::Incremental)?,
        "ReplicateCheckpoint" => {
            arity(1)?;
            ControlTask::ReplicateCheckpoint { dst: role(&args[0])? }
        }
        "Schedule" => {
            arity(2)?;
            let (inner, at) = if is_time(&args[0]) { (&args[1], &args[0]) } else { (&args[0], &args[1]) };
            ControlTask::Schedule { task: Box::new(task(inner)?), time: time(at)? }
        }
        "StartQuery" | "StopQuery" | "RequestMigration" => {
            if args.len() > 1 {
                return fail(t, format!("{} takes (query)", t.name));
            }
            match t.name.as_str() {
                "StartQuery" => ControlTask::StartQuery,
                "StopQuery" => ControlTask::StopQuery,
                _ => ControlTask::RequestMigration,
            }
        }
        other => return fail(t, format!("unknown task '{other}'")),
    })
}

/// Parses a sequence of top-level tasks.
pub fn parse_program(src: &str) -> Result<Vec<ControlTask>, ParseError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    p.program()?.iter().map(task).collect()
}

impl FromStr for ControlTask {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut tasks = parse_program(s)?;
        match tasks.len() {
            1 => Ok(tasks.remove(0)),
            n => Err(ParseError { offset: 0, message: format!("expected exactly one task, found {n}") }),
        }
    }
}

impl Serialize for ControlTask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ControlTask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Renders a program one top-level task per line.
pub fn format_program(program: &[ControlTask], pretty: bool) -> String {
    program
        .iter()
        .map(|t| if pretty { format!("{t:#}") } else { t.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_listing_without_commas() {
        let src = "ControlMessage(OH
            ControlMessage(Upstream
                BufferStreams(Streams(query))
                StopStreams(Streams(query))
                Redirect(Streams(query), OH, NH)
                ControlMessage(OH, MoveState(query, NH))
                Resume(Streams(query))))";
        let t: ControlTask = src.parse().unwrap();
        assert_eq!(
            t.to_string(),
            "ControlMessage(OH, ControlMessage(Upstream, BufferStreams(Streams(query)), StopStreams(Streams(query)), \
             Redirect(Streams(query), OH, NH), ControlMessage(OH, MoveState(query, NH)), Resume(Streams(query))))"
        );
    }

    #[test]
    fn schedule_accepts_either_argument_order() {
        let a: ControlTask = "Schedule(TakeoverTime(query) StartStreams(Streams(query)))".parse().unwrap();
        let b: ControlTask = "Schedule(StartStreams(Streams(query)), TakeoverTime(query))".parse().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn takeover_resolution() {
        let mut t: ControlTask =
            "ControlMessage(Upstream, Schedule(RemoveNextHop(Streams(query), OH), TakeoverTime(query)))".parse().unwrap();
        assert!(t.uses_takeover_time());
        t.resolve_takeover(SimTime::from_millis(2500));
        assert!(!t.uses_takeover_time());
        assert!(t.to_string().contains("Time(2.500000000)"));
        let back: ControlTask = t.to_string().parse().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = "ControlMessage(OH, Teleport(query))".parse::<ControlTask>().unwrap_err();
        assert_eq!(e.offset, 19);
        assert!(e.message.contains("Teleport"));
        assert!("ControlMessage(OH".parse::<ControlTask>().is_err());
        assert!("Redirect(Streams(query), OH)".parse::<ControlTask>().is_err());
    }

    #[test]
    fn comments_and_named_nodes() {
        let p = parse_program("# bootstrap\nControlMessage(hostB, ReplicateCheckpoint(NH))\nControlMessage(OH, StopQuery(query))").unwrap();
        assert_eq!(p.len(), 2);
        assert!(matches!(&p[0], ControlTask::ControlMessage { target: Role::Node(n), .. } if n == "hostB"));
    }

    #[test]
    fn pretty_form_parses_back() {
        let t: ControlTask = "ControlMessage(OH, ControlMessage(NH, RequestMigration(query), BufferStreams(Streams(query))), MoveState(query, NH))"
            .parse()
            .unwrap();
        let pretty = format!("{t:#}");
        assert!(pretty.contains('\n'));
        assert_eq!(pretty.parse::<ControlTask>().unwrap(), t);
    }
}
