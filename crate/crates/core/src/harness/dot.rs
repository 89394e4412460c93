use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::agents::AgentSpec;
use crate::designer::CommTopology;
use crate::error::Result;

fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Graphviz rendering: one node per agent labelled `id: role`, edges labelled
/// with their weight to two decimals.
pub fn to_dot(topology: &CommTopology, agents: &[AgentSpec]) -> String {
    let mut s = String::from("digraph communication {\n");
    for i in 0..topology.n {
        let role = agents.get(i).map_or("agent", |a| a.role.as_str());
        let _ = writeln!(s, "  {i} [label={}];", quote(&format!("{i}: {role}")));
    }
    for e in &topology.edges {
        let _ = writeln!(s, "  {} -> {} [label=\"{:.2}\"];", e.from, e.to, e.weight);
    }
    s.push_str("}\n");
    s
}

pub fn export_dot(topology: &CommTopology, agents: &[AgentSpec], path: &Path) -> Result<()> {
    fs::write(path, to_dot(topology, agents))?;
    Ok(())
}
