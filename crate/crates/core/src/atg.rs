//! Application task graph: machines, tasks, ports, and logical links.
//!
//! The ATG is the authoritative configuration shared verbatim by every
//! process of an application and its QoS middleware. It is parsed once from a
//! text document and immutable afterwards, so it can be shared freely across
//! threads.
//!
//! File grammar (UTF-8, one declaration per line, `#` starts a comment):
//!
//! ```text
//! machine <name> host=<host> port=<int> [master]
//! task <var_name> machine=<machine_name> ports=<int> impl=<component_id>
//! link <task>.<port_int> <task>.<port_int>
//! ```
//!
//! Machine and task ranks are assigned by declaration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

/// A logical machine declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineDecl {
    pub rank: usize,
    pub name: String,
    pub host: String,
    pub base_port: u16,
    pub is_master: bool,
}

/// A task declaration, bound to one machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDecl {
    pub rank: usize,
    pub variable_name: String,
    pub machine_rank: usize,
    pub num_ports: usize,
    pub component_id: String,
}

/// One endpoint of a logical link: a task port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Endpoint {
    pub task_rank: usize,
    pub port_index: usize,
}

/// A point-to-point logical link between two task ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkDecl {
    pub link_id: usize,
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
}

/// The immutable application task graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atg {
    pub machines: Vec<MachineDecl>,
    pub tasks: Vec<TaskDecl>,
    pub links: Vec<LinkDecl>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AtgError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("duplicate name/rank: {0}")]
    Duplicate(String),
    #[error("exactly one master machine required, found {0}")]
    MasterCount(usize),
    #[error("self-links are not allowed: task {0} port {1} linked to itself")]
    SelfLink(usize, usize),
    #[error("port has no peer: task {0} port {1}")]
    NoPeer(usize, usize),
    #[error("unknown machine rank {0}")]
    UnknownMachine(usize),
    #[error("unknown task rank {0}")]
    UnknownTask(usize),
}

/// The resolved opposite endpoint of a connected task port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortPeer {
    pub peer_task_rank: usize,
    pub peer_port_index: usize,
    pub peer_machine_rank: usize,
    pub link_id: usize,
}

impl Atg {
    pub fn num_machines(&self) -> usize {
        self.machines.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn master_rank(&self) -> usize {
        self.machines
            .iter()
            .find(|m| m.is_master)
            .map(|m| m.rank)
            .expect("validated ATG has a master")
    }

    pub fn machine(&self, rank: usize) -> Result<&MachineDecl, AtgError> {
        self.machines.get(rank).ok_or(AtgError::UnknownMachine(rank))
    }

    pub fn task(&self, rank: usize) -> Result<&TaskDecl, AtgError> {
        self.tasks.get(rank).ok_or(AtgError::UnknownTask(rank))
    }

    /// Tasks mapped to a machine, in rank order.
    pub fn tasks_on(&self, machine_rank: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .filter(|t| t.machine_rank == machine_rank)
            .map(|t| t.rank)
            .collect()
    }

    /// Machines (excluding the argument) hosting at least one task linked to
    /// a task on the given machine. This set governs which remote attributes
    /// a QoS manager retrieves.
    pub fn peer_machine_set(&self, machine_rank: usize) -> Result<BTreeSet<usize>, AtgError> {
        self.machine(machine_rank)?;
        let mut peers = BTreeSet::new();
        for link in &self.links {
            let ma = self.tasks[link.endpoint_a.task_rank].machine_rank;
            let mb = self.tasks[link.endpoint_b.task_rank].machine_rank;
            if ma == machine_rank && mb != machine_rank {
                peers.insert(mb);
            }
            if mb == machine_rank && ma != machine_rank {
                peers.insert(ma);
            }
        }
        Ok(peers)
    }

    /// The opposite endpoint of a task port, with its machine and link.
    pub fn port_peer(&self, task_rank: usize, port_index: usize) -> Result<PortPeer, AtgError> {
        self.task(task_rank)?;
        for link in &self.links {
            let (here, there) = if link.endpoint_a.task_rank == task_rank
                && link.endpoint_a.port_index == port_index
            {
                (link.endpoint_a, link.endpoint_b)
            } else if link.endpoint_b.task_rank == task_rank
                && link.endpoint_b.port_index == port_index
            {
                (link.endpoint_b, link.endpoint_a)
            } else {
                continue;
            };
            let _ = here;
            return Ok(PortPeer {
                peer_task_rank: there.task_rank,
                peer_port_index: there.port_index,
                peer_machine_rank: self.tasks[there.task_rank].machine_rank,
                link_id: link.link_id,
            });
        }
        Err(AtgError::NoPeer(task_rank, port_index))
    }

    /// The lowest-ranked task on a machine launches the QoS manager there.
    pub fn launcher_task(&self, machine_rank: usize) -> Option<usize> {
        self.tasks_on(machine_rank).first().copied()
    }

    /// Canonical text form; `parse_atg(serialize_atg(atg))` is the identity.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for m in &self.machines {
            let master = if m.is_master { " master" } else { "" };
            writeln!(out, "machine {} host={} port={}{}", m.name, m.host, m.base_port, master)
                .unwrap();
        }
        for t in &self.tasks {
            writeln!(
                out,
                "task {} machine={} ports={} impl={}",
                t.variable_name, self.machines[t.machine_rank].name, t.num_ports, t.component_id
            )
            .unwrap();
        }
        for l in &self.links {
            writeln!(
                out,
                "link {}.{} {}.{}",
                self.tasks[l.endpoint_a.task_rank].variable_name,
                l.endpoint_a.port_index,
                self.tasks[l.endpoint_b.task_rank].variable_name,
                l.endpoint_b.port_index
            )
            .unwrap();
        }
        out
    }

    /// Checks every cross-reference and structural invariant.
    pub fn validate(&self) -> Result<(), AtgError> {
        let masters = self.machines.iter().filter(|m| m.is_master).count();
        if masters != 1 {
            return Err(AtgError::MasterCount(masters));
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.machines.iter().enumerate() {
            if m.rank != i {
                return Err(AtgError::Duplicate(format!("machine rank {}", m.rank)));
            }
            if !names.insert(m.name.clone()) {
                return Err(AtgError::Duplicate(format!("machine name {}", m.name)));
            }
        }
        let mut tnames = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.rank != i {
                return Err(AtgError::Duplicate(format!("task rank {}", t.rank)));
            }
            if !tnames.insert(t.variable_name.clone()) {
                return Err(AtgError::Duplicate(format!("task name {}", t.variable_name)));
            }
            if t.machine_rank >= self.machines.len() {
                return Err(AtgError::DanglingReference(format!(
                    "task {} references machine rank {}",
                    t.variable_name, t.machine_rank
                )));
            }
        }
        let mut seen_endpoints = BTreeSet::new();
        let mut endpoint_counts: BTreeMap<usize, usize> = BTreeMap::new();
        for link in &self.links {
            for ep in [link.endpoint_a, link.endpoint_b] {
                let task = self
                    .tasks
                    .get(ep.task_rank)
                    .ok_or_else(|| AtgError::DanglingReference(format!("task rank {}", ep.task_rank)))?;
                if ep.port_index >= task.num_ports {
                    return Err(AtgError::DanglingReference(format!(
                        "task {} port {} out of range (ports={})",
                        task.variable_name, ep.port_index, task.num_ports
                    )));
                }
                if !seen_endpoints.insert(ep) {
                    return Err(AtgError::Duplicate(format!(
                        "endpoint {}.{} appears in more than one link",
                        task.variable_name, ep.port_index
                    )));
                }
                *endpoint_counts.entry(ep.task_rank).or_default() += 1;
            }
            if link.endpoint_a.task_rank == link.endpoint_b.task_rank {
                return Err(AtgError::SelfLink(
                    link.endpoint_a.task_rank,
                    link.endpoint_a.port_index,
                ));
            }
        }
        // Every declared port must be an endpoint of exactly one link.
        for t in &self.tasks {
            let attached = endpoint_counts.get(&t.rank).copied().unwrap_or(0);
            if attached != t.num_ports {
                return Err(AtgError::DanglingReference(format!(
                    "task {} declares {} ports but {} link endpoints attach to it",
                    t.variable_name, t.num_ports, attached
                )));
            }
        }
        Ok(())
    }
}

fn kv<'a>(tok: &'a str, key: &str, line: usize) -> Result<&'a str, AtgError> {
    tok.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| AtgError::Syntax {
            line,
            msg: format!("expected `{}=<value>`, got `{}`", key, tok),
        })
}

fn parse_endpoint(
    tok: &str,
    task_ranks: &BTreeMap<String, usize>,
    line: usize,
) -> Result<Endpoint, AtgError> {
    let (name, port) = tok.rsplit_once('.').ok_or_else(|| AtgError::Syntax {
        line,
        msg: format!("expected `<task>.<port>`, got `{}`", tok),
    })?;
    let task_rank = *task_ranks
        .get(name)
        .ok_or_else(|| AtgError::DanglingReference(format!("line {}: unknown task {}", line, name)))?;
    let port_index = port.parse::<usize>().map_err(|_| AtgError::Syntax {
        line,
        msg: format!("bad port index `{}`", port),
    })?;
    Ok(Endpoint { task_rank, port_index })
}

/// Parses and validates an ATG document.
pub fn parse_atg(text: &str) -> Result<Atg, AtgError> {
    let mut machines: Vec<MachineDecl> = Vec::new();
    let mut tasks: Vec<TaskDecl> = Vec::new();
    let mut links: Vec<LinkDecl> = Vec::new();
    let mut machine_ranks: BTreeMap<String, usize> = BTreeMap::new();
    let mut task_ranks: BTreeMap<String, usize> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stmt = raw.split('#').next().unwrap_or("").trim();
        if stmt.is_empty() {
            continue;
        }
        let toks: Vec<&str> = stmt.split_whitespace().collect();
        match toks[0] {
            "machine" => {
                if toks.len() < 4 || toks.len() > 5 {
                    return Err(AtgError::Syntax {
                        line,
                        msg: "expected `machine <name> host=<host> port=<int> [master]`".into(),
                    });
                }
                let name = toks[1].to_string();
                let host = kv(toks[2], "host", line)?.to_string();
                let port = kv(toks[3], "port", line)?
                    .parse::<u16>()
                    .map_err(|_| AtgError::Syntax { line, msg: "bad port number".into() })?;
                let is_master = match toks.get(4) {
                    None => false,
                    Some(&"master") => true,
                    Some(other) => {
                        return Err(AtgError::Syntax {
                            line,
                            msg: format!("unexpected token `{}`", other),
                        })
                    }
                };
                let rank = machines.len();
                if machine_ranks.insert(name.clone(), rank).is_some() {
                    return Err(AtgError::Duplicate(format!("machine name {}", name)));
                }
                machines.push(MachineDecl { rank, name, host, base_port: port, is_master });
            }
            "task" => {
                if toks.len() != 5 {
                    return Err(AtgError::Syntax {
                        line,
                        msg: "expected `task <name> machine=<m> ports=<n> impl=<id>`".into(),
                    });
                }
                let variable_name = toks[1].to_string();
                let mname = kv(toks[2], "machine", line)?;
                let machine_rank = *machine_ranks.get(mname).ok_or_else(|| {
                    AtgError::DanglingReference(format!("line {}: unknown machine {}", line, mname))
                })?;
                let num_ports = kv(toks[3], "ports", line)?
                    .parse::<usize>()
                    .map_err(|_| AtgError::Syntax { line, msg: "bad port count".into() })?;
                let component_id = kv(toks[4], "impl", line)?.to_string();
                let rank = tasks.len();
                if task_ranks.insert(variable_name.clone(), rank).is_some() {
                    return Err(AtgError::Duplicate(format!("task name {}", variable_name)));
                }
                tasks.push(TaskDecl { rank, variable_name, machine_rank, num_ports, component_id });
            }
            "link" => {
                if toks.len() != 3 {
                    return Err(AtgError::Syntax {
                        line,
                        msg: "expected `link <task>.<port> <task>.<port>`".into(),
                    });
                }
                let a = parse_endpoint(toks[1], &task_ranks, line)?;
                let b = parse_endpoint(toks[2], &task_ranks, line)?;
                links.push(LinkDecl { link_id: links.len(), endpoint_a: a, endpoint_b: b });
            }
            other => {
                return Err(AtgError::Syntax {
                    line,
                    msg: format!("unknown declaration `{}`", other),
                });
            }
        }
    }

    let atg = Atg { machines, tasks, links };
    atg.validate()?;
    Ok(atg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three machines, four tasks: T1 on the master M1, T2 and T3 on M2,
    /// T4 on M3, with each worker task linked back to T1.
    pub(crate) fn fig1_doc() -> &'static str {
        "\
# manager-worker over three machines
machine m1 host=host-a port=7700 master
machine m2 host=host-b port=7710
machine m3 host=host-c port=7720
task t1 machine=m1 ports=3 impl=hub
task t2 machine=m2 ports=1 impl=leaf
task t3 machine=m2 ports=1 impl=leaf
task t4 machine=m3 ports=1 impl=leaf
link t1.0 t2.0
link t1.1 t3.0
link t1.2 t4.0
"
    }

    /// One manager with two ports, one worker on each of two other machines.
    pub(crate) fn fig2_doc() -> &'static str {
        "\
machine m1 host=host-a port=7700 master
machine m2 host=host-b port=7710
machine m3 host=host-c port=7720
task mgr machine=m1 ports=2 impl=manager
task w1 machine=m2 ports=1 impl=worker
task w2 machine=m3 ports=1 impl=worker
link mgr.0 w1.0
link mgr.1 w2.0
"
    }

    #[test]
    fn parses_three_machine_four_task_graph() {
        let atg = parse_atg(fig1_doc()).unwrap();
        assert_eq!(atg.num_machines(), 3);
        assert_eq!(atg.num_tasks(), 4);
        assert_eq!(atg.links.len(), 3);
        assert_eq!(atg.master_rank(), 0);
        assert_eq!(atg.tasks_on(1), vec![1, 2]);
    }

    #[test]
    fn degenerate_single_machine_graph_is_valid() {
        let atg = parse_atg(
            "machine solo host=localhost port=9000 master\ntask only machine=solo ports=0 impl=x\n",
        )
        .unwrap();
        assert_eq!(atg.num_machines(), 1);
        assert_eq!(atg.num_tasks(), 1);
        assert!(atg.links.is_empty());
    }

    #[test]
    fn out_of_range_port_is_dangling() {
        let doc = "\
machine m1 host=a port=1 master
machine m2 host=b port=2
task t1 machine=m1 ports=1 impl=x
task t2 machine=m2 ports=1 impl=x
link t1.5 t2.0
";
        match parse_atg(doc) {
            Err(AtgError::DanglingReference(_)) => {}
            other => panic!("expected dangling reference, got {:?}", other),
        }
    }

    #[test]
    fn zero_or_two_masters_rejected() {
        let none = "machine m1 host=a port=1\ntask t machine=m1 ports=0 impl=x\n";
        assert_eq!(parse_atg(none), Err(AtgError::MasterCount(0)));
        let two = "\
machine m1 host=a port=1 master
machine m2 host=b port=2 master
task t machine=m1 ports=0 impl=x
";
        assert_eq!(parse_atg(two), Err(AtgError::MasterCount(2)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let doc = "\
machine m1 host=a port=1 master
machine m1 host=b port=2
";
        assert!(matches!(parse_atg(doc), Err(AtgError::Duplicate(_))));
    }

    #[test]
    fn self_link_rejected() {
        let doc = "\
machine m1 host=a port=1 master
task t machine=m1 ports=2 impl=x
link t.0 t.1
";
        assert!(matches!(parse_atg(doc), Err(AtgError::SelfLink(0, 0))));
    }

    #[test]
    fn unattached_declared_port_rejected() {
        let doc = "\
machine m1 host=a port=1 master
task t machine=m1 ports=1 impl=x
";
        assert!(matches!(parse_atg(doc), Err(AtgError::DanglingReference(_))));
    }

    #[test]
    fn syntax_error_reports_line() {
        let doc = "machine m1 host=a port=1 master\nbogus decl\n";
        match parse_atg(doc) {
            Err(AtgError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {:?}", other),
        }
    }

    #[test]
    fn peer_set_of_master_is_both_worker_machines() {
        let atg = parse_atg(fig1_doc()).unwrap();
        let peers = atg.peer_machine_set(0).unwrap();
        assert_eq!(peers.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn peer_set_of_worker_machine_is_master_only() {
        let atg = parse_atg(fig1_doc()).unwrap();
        assert_eq!(atg.peer_machine_set(1).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(atg.peer_machine_set(2).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn peer_set_empty_when_all_tasks_colocated() {
        let doc = "\
machine m1 host=a port=1 master
machine m2 host=b port=2
task t1 machine=m1 ports=1 impl=x
task t2 machine=m1 ports=1 impl=x
link t1.0 t2.0
";
        let atg = parse_atg(doc).unwrap();
        assert!(atg.peer_machine_set(0).unwrap().is_empty());
        assert!(atg.peer_machine_set(1).unwrap().is_empty());
    }

    #[test]
    fn port_peer_resolves_manager_port_one() {
        let atg = parse_atg(fig2_doc()).unwrap();
        let peer = atg.port_peer(0, 1).unwrap();
        assert_eq!(peer.peer_task_rank, 2); // w2
        assert_eq!(peer.peer_port_index, 0);
        assert_eq!(peer.peer_machine_rank, 2); // m3
        assert_eq!(peer.link_id, 1);
    }

    #[test]
    fn port_peer_is_symmetric() {
        let atg = parse_atg(fig2_doc()).unwrap();
        let back = atg.port_peer(2, 0).unwrap();
        assert_eq!(back.peer_task_rank, 0);
        assert_eq!(back.peer_port_index, 1);
        assert_eq!(back.peer_machine_rank, 0);
    }

    #[test]
    fn unconnected_port_errors() {
        // Constructed directly: parse enforces attachment, manual graphs may not.
        let mut atg = parse_atg(fig2_doc()).unwrap();
        atg.tasks[0].num_ports = 3;
        assert_eq!(atg.port_peer(0, 2), Err(AtgError::NoPeer(0, 2)));
    }

    #[test]
    fn serialize_parse_round_trip() {
        for doc in [fig1_doc(), fig2_doc()] {
            let atg = parse_atg(doc).unwrap();
            let again = parse_atg(&atg.serialize()).unwrap();
            assert_eq!(atg, again);
        }
    }
}
