//! Static reading of a migration program: where each task executes, which
//! tasks get delegated, and how many control messages the program sends.

use std::collections::BTreeMap;

use thiserror::Error;

use super::task::{ControlTask, MoveKind, Role, StreamSel};
use crate::simnet::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoleError {
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("role {0} resolves to no node")]
    Empty(Role),
}

/// Concrete nodes behind the roles of one migration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleMap {
    pub old_host: NodeId,
    pub new_host: NodeId,
    /// Producers of the query's input streams.
    pub upstreams: Vec<NodeId>,
    pub downstreams: Vec<NodeId>,
    pub coordinator: NodeId,
    pub names: BTreeMap<String, NodeId>,
}

impl RoleMap {
    pub fn resolve(&self, role: &Role) -> Result<Vec<NodeId>, RoleError> {
        let nodes = match role {
            Role::OldHost => vec![self.old_host],
            Role::NewHost => vec![self.new_host],
            Role::Upstream => self.upstreams.clone(),
            Role::Downstream => self.downstreams.clone(),
            Role::Coordinator => vec![self.coordinator],
            Role::Node(name) => vec![*self.names.get(name).ok_or_else(|| RoleError::UnknownNode(name.clone()))?],
        };
        if nodes.is_empty() {
            return Err(RoleError::Empty(role.clone()));
        }
        Ok(nodes)
    }

    pub fn resolve_one(&self, role: &Role) -> Result<NodeId, RoleError> {
        self.resolve(role).map(|v| v[0])
    }

    pub fn is_upstream(&self, node: NodeId) -> bool {
        self.upstreams.contains(&node)
    }
}

/// Where a task runs once delegation is taken into account.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Local,
    /// Forwarded as a control message to this role.
    Delegate(RoleTarget),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleTarget {
    OldHost,
    Upstream,
}

impl RoleTarget {
    pub fn role(self) -> Role {
        match self {
            RoleTarget::OldHost => Role::OldHost,
            RoleTarget::Upstream => Role::Upstream,
        }
    }
}

/// Where a leaf task executes when issued at `node`. Route changes on the
/// query's inputs belong to upstream producers, except that `AddNextHop`
/// at the old host sets up forwarding of in-flight tuples. State and query
/// tasks addressed at another node run on the old host.
pub fn placement(task: &ControlTask, node: NodeId, roles: &RoleMap) -> Placement {
    let at_upstream = roles.is_upstream(node);
    match task {
        ControlTask::Redirect { .. } | ControlTask::RemoveNextHop { .. } if !at_upstream => {
            Placement::Delegate(RoleTarget::Upstream)
        }
        ControlTask::AddNextHop { streams, .. } if !at_upstream => {
            if node == roles.old_host && *streams != StreamSel::UpstreamInputs {
                Placement::Local
            } else {
                Placement::Delegate(RoleTarget::Upstream)
            }
        }
        ControlTask::Move { .. } | ControlTask::ReplicateCheckpoint { .. } if node != roles.old_host => {
            Placement::Delegate(RoleTarget::OldHost)
        }
        _ => Placement::Local,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoveSite {
    pub kind: MoveKind,
    pub dst: NodeId,
    /// A route change on the query's inputs precedes this move, so the old
    /// host must first see the corresponding markers from every upstream.
    pub after_route_change: bool,
    /// No later move targets the same node.
    pub is_final: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramAnalysis {
    /// Control messages sent, delegations included.
    pub control_messages: u64,
    /// Upstreams feed both hosts at some point.
    pub parallel: bool,
    pub moves: Vec<MoveSite>,
    pub starts_query: Vec<NodeId>,
    pub replicates: bool,
}

impl ProgramAnalysis {
    pub fn new(program: &[ControlTask], roles: &RoleMap) -> Result<Self, RoleError> {
        let mut w = Walker { roles, a: ProgramAnalysis::empty(), route_changed: false };
        for t in program {
            w.walk(roles.coordinator, t)?;
        }
        let mut a = w.a;
        for i in 0..a.moves.len() {
            let dst = a.moves[i].dst;
            a.moves[i].is_final = !a.moves[i + 1..].iter().any(|m| m.dst == dst);
        }
        Ok(a)
    }

    fn empty() -> Self {
        ProgramAnalysis { control_messages: 0, parallel: false, moves: Vec::new(), starts_query: Vec::new(), replicates: false }
    }

    pub fn move_site(&self, kind: MoveKind, dst: NodeId) -> Option<&MoveSite> {
        self.moves.iter().find(|m| m.kind == kind && m.dst == dst)
    }

    pub fn moves_state_to(&self, node: NodeId) -> bool {
        self.moves.iter().any(|m| m.dst == node)
    }

    /// Some move from the old host pauses its processing.
    pub fn has_pausing_move(&self) -> bool {
        !self.parallel && self.moves.iter().any(|m| m.kind != MoveKind::Immutable)
    }

    pub fn pauses(&self, kind: MoveKind) -> bool {
        !self.parallel && kind != MoveKind::Immutable
    }
}

struct Walker<'a> {
    roles: &'a RoleMap,
    a: ProgramAnalysis,
    route_changed: bool,
}

impl Walker<'_> {
    fn walk(&mut self, node: NodeId, task: &ControlTask) -> Result<(), RoleError> {
        match task {
            ControlTask::ControlMessage { target, tasks } => {
                for t in self.roles.resolve(target)? {
                    self.a.control_messages += 1;
                    for sub in tasks {
                        self.walk(t, sub)?;
                    }
                }
                return Ok(());
            }
            ControlTask::Schedule { task, .. } => return self.walk(node, task),
            ControlTask::BufferStreams { at: Some(r), .. } | ControlTask::StopStreams { at: Some(r), .. } => {
                let targets = self.roles.resolve(r)?;
                if targets != [node] {
                    for t in targets {
                        self.a.control_messages += 1;
                        self.leaf(t, task)?;
                    }
                    return Ok(());
                }
            }
            _ => {}
        }
        match placement(task, node, self.roles) {
            Placement::Local => self.leaf(node, task),
            Placement::Delegate(target) => {
                for t in self.roles.resolve(&target.role())? {
                    self.a.control_messages += 1;
                    self.walk(t, task)?;
                }
                Ok(())
            }
        }
    }

    fn leaf(&mut self, node: NodeId, task: &ControlTask) -> Result<(), RoleError> {
        match task {
            ControlTask::Redirect { .. } | ControlTask::RemoveNextHop { .. } => self.route_changed = true,
            ControlTask::AddNextHop { node: n, .. } => {
                if self.roles.is_upstream(node) {
                    self.route_changed = true;
                    if self.roles.resolve(n)?.iter().any(|x| *x != self.roles.old_host) {
                        self.a.parallel = true;
                    }
                }
            }
            ControlTask::Move { kind, dst } => {
                let dst = self.roles.resolve_one(dst)?;
                self.a.moves.push(MoveSite { kind: *kind, dst, after_route_change: self.route_changed, is_final: false });
            }
            ControlTask::ReplicateCheckpoint { dst } => {
                self.roles.resolve_one(dst)?;
                self.a.replicates = true;
            }
            ControlTask::StartQuery => self.a.starts_query.push(node),
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::task::parse_program;

    fn roles() -> RoleMap {
        RoleMap {
            old_host: NodeId(1),
            new_host: NodeId(2),
            upstreams: vec![NodeId(0)],
            downstreams: vec![NodeId(3)],
            coordinator: NodeId(4),
            names: BTreeMap::new(),
        }
    }

    #[test]
    fn all_at_once_counts_and_moves() {
        let p = parse_program(
            "ControlMessage(OH ControlMessage(NH, RequestMigration(query), BufferStreams(Streams(query)) StopStreams(Streams(query)))
             ControlMessage(Upstream, Redirect(Streams(query), OH, NH)) MoveState(query, NH) AddNextHop(Streams(query), NH))",
        )
        .unwrap();
        let a = ProgramAnalysis::new(&p, &roles()).unwrap();
        assert_eq!(a.control_messages, 3);
        assert!(!a.parallel);
        assert_eq!(a.moves.len(), 1);
        assert!(a.moves[0].after_route_change && a.moves[0].is_final);
        assert!(a.has_pausing_move());
    }

    #[test]
    fn delegated_redirect_is_counted() {
        let p = parse_program("ControlMessage(OH, Redirect(Streams(query), OH, NH), MoveIncrementalState(query, NH))").unwrap();
        let a = ProgramAnalysis::new(&p, &roles()).unwrap();
        assert_eq!(a.control_messages, 2);
        assert!(a.moves[0].after_route_change);
    }

    #[test]
    fn duplication_marks_parallel_track() {
        let p = parse_program(
            "ControlMessage(Upstream, AddNextHop(Streams(query), NH)) ControlMessage(NH, ControlMessage(OH, MoveImmutableState(query, NH)))",
        )
        .unwrap();
        let a = ProgramAnalysis::new(&p, &roles()).unwrap();
        assert!(a.parallel);
        assert_eq!(a.control_messages, 3);
        assert!(!a.pauses(MoveKind::State));
    }

    #[test]
    fn only_last_move_to_a_node_is_final() {
        let p = parse_program("ControlMessage(OH, MoveImmutableState(query, NH), Redirect(Streams(query), OH, NH), MoveIncrementalState(query, NH))")
            .unwrap();
        let a = ProgramAnalysis::new(&p, &roles()).unwrap();
        assert!(!a.moves[0].is_final && !a.moves[0].after_route_change);
        assert!(a.moves[1].is_final && a.moves[1].after_route_change);
    }

    #[test]
    fn unknown_node_rejected() {
        let p = parse_program("ControlMessage(ghost, StopQuery(query))").unwrap();
        assert_eq!(ProgramAnalysis::new(&p, &roles()), Err(RoleError::UnknownNode("ghost".into())));
    }
}
