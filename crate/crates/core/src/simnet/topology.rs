use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, SimError, STREAM_TOPOLOGY};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub hubs: Vec<String>,
    /// Undirected links, each stored with the smaller id first.
    pub edges: BTreeSet<(String, String)>,
    pub robots_per_hub: BTreeMap<String, Vec<String>>,
    pub data_parties: Vec<String>,
}

pub fn hub_id(i: usize) -> String {
    format!("hub{i}")
}

pub fn robot_id(hub: usize, r: usize) -> String {
    format!("hub{hub}-robot{r}")
}

pub fn party_id(hub: usize) -> String {
    format!("hub{hub}-data")
}

fn edge(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

/// Random spanning tree plus each remaining pair with probability `edge_density`.
pub fn build_topology(config: &ScenarioConfig) -> Result<Topology, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_TOPOLOGY);
    let hubs: Vec<String> = (0..config.num_hubs).map(hub_id).collect();
    let mut order: Vec<usize> = (0..config.num_hubs).collect();
    order.shuffle(&mut rng);
    let mut edges = BTreeSet::new();
    for pos in 1..order.len() {
        let parent = order[rng.gen_range(0..pos)];
        edges.insert(edge(&hubs[order[pos]], &hubs[parent]));
    }
    for i in 0..hubs.len() {
        for j in i + 1..hubs.len() {
            let e = edge(&hubs[i], &hubs[j]);
            if !edges.contains(&e) && rng.gen_bool(config.edge_density) {
                edges.insert(e);
            }
        }
    }
    let robots_per_hub = (0..config.num_hubs)
        .map(|h| (hub_id(h), (0..config.robots_per_hub).map(|r| robot_id(h, r)).collect()))
        .collect();
    Ok(Topology {
        hubs,
        edges,
        robots_per_hub,
        data_parties: (0..config.num_hubs).map(party_id).collect(),
    })
}

impl Topology {
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.hubs.first() else {
            return true;
        };
        let mut seen = BTreeSet::from([start.as_str()]);
        let mut stack = vec![start.as_str()];
        while let Some(h) = stack.pop() {
            for (a, b) in &self.edges {
                let next = if a == h {
                    b
                } else if b == h {
                    a
                } else {
                    continue;
                };
                if seen.insert(next.as_str()) {
                    stack.push(next);
                }
            }
        }
        seen.len() == self.hubs.len()
    }

    /// Robots in hub-major order.
    pub fn robots(&self) -> impl Iterator<Item = (&String, &String)> {
        self.robots_per_hub.iter().flat_map(|(h, rs)| rs.iter().map(move |r| (h, r)))
    }
}
