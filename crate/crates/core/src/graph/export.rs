//! The four files the circuit visualizer reads.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CircuitGraph, GraphEdge, GraphNode, LatentHits, PositionWeight};
use crate::error::{Error, Result};

pub const ACTIVATION_FILE: &str = "activation_indices.json";
pub const SEQUENCE_FILE: &str = "seq.txt";
pub const TOP_FILE: &str = "top_activations.json";
pub const WEIGHTS_FILE: &str = "virtual_weights.json";

#[derive(Serialize, Deserialize)]
struct ActiveLatent {
    layer: usize,
    latent: usize,
    activation: f32,
}

#[derive(Serialize, Deserialize)]
struct PositionEntry {
    position: usize,
    residue: String,
    latents: Vec<ActiveLatent>,
}

#[derive(Serialize, Deserialize)]
struct ActivationFile {
    n_layers: usize,
    positions: Vec<PositionEntry>,
}

#[derive(Serialize, Deserialize)]
struct TopFile {
    latents: Vec<LatentHits>,
}

#[derive(Serialize, Deserialize)]
struct LatentRef {
    layer: usize,
    latent: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Sign {
    Positive,
    Negative,
}

#[derive(Serialize, Deserialize)]
struct EdgeEntry {
    source: LatentRef,
    target: LatentRef,
    mean_weight: f32,
    sign: Sign,
    active_positions: usize,
    positions: Vec<PositionWeight>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    edges: Vec<EdgeEntry>,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: e.to_string(),
    })
}

/// Writes the graph as the visualizer's four files, creating `dir` if needed.
pub fn write_viz(graph: &CircuitGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let residues: Vec<char> = graph.sequence.chars().collect();
    let mut positions: Vec<PositionEntry> = residues
        .iter()
        .enumerate()
        .map(|(p, r)| PositionEntry {
            position: p,
            residue: r.to_string(),
            latents: Vec::new(),
        })
        .collect();
    for n in &graph.nodes {
        let entry = positions.get_mut(n.position).ok_or_else(|| {
            Error::InvalidInput(format!(
                "node at position {} beyond a sequence of length {}",
                n.position,
                residues.len()
            ))
        })?;
        entry.latents.push(ActiveLatent {
            layer: n.layer,
            latent: n.latent,
            activation: n.activation,
        });
    }
    for p in &mut positions {
        p.latents.sort_by_key(|a| (a.layer, a.latent));
    }
    write_json(
        dir,
        ACTIVATION_FILE,
        &ActivationFile {
            n_layers: graph.n_layers,
            positions,
        },
    )?;
    let seq_path = dir.join(SEQUENCE_FILE);
    fs::write(&seq_path, format!("{}\n", graph.sequence)).map_err(|e| Error::io(&seq_path, e))?;
    write_json(
        dir,
        TOP_FILE,
        &TopFile {
            latents: graph.top_activations.clone(),
        },
    )?;
    let edges = graph
        .edges
        .iter()
        .map(|e| EdgeEntry {
            source: LatentRef {
                layer: e.source_layer,
                latent: e.source_latent,
            },
            target: LatentRef {
                layer: e.target_layer,
                latent: e.target_latent,
            },
            mean_weight: e.mean_weight,
            sign: if e.mean_weight < 0.0 {
                Sign::Negative
            } else {
                Sign::Positive
            },
            active_positions: e.active_positions,
            positions: e.positions.clone(),
        })
        .collect();
    write_json(dir, WEIGHTS_FILE, &WeightsFile { edges })
}

/// Reads a graph back from the files in `dir`. The weights file is
/// optional; without it the graph has no edges.
pub fn read_viz(dir: &Path) -> Result<CircuitGraph> {
    let seq_path = dir.join(SEQUENCE_FILE);
    let sequence = fs::read_to_string(&seq_path)
        .map_err(|e| Error::io(&seq_path, e))?
        .trim()
        .to_string();
    let activations: ActivationFile = read_json(dir, ACTIVATION_FILE)?;
    if activations.positions.len() != sequence.chars().count() {
        return Err(Error::InvalidInput(format!(
            "{ACTIVATION_FILE} has {} positions for a sequence of length {}",
            activations.positions.len(),
            sequence.chars().count()
        )));
    }
    let mut nodes: Vec<GraphNode> = activations
        .positions
        .iter()
        .flat_map(|p| {
            p.latents.iter().map(move |a| GraphNode {
                layer: a.layer,
                latent: a.latent,
                position: p.position,
                activation: a.activation,
            })
        })
        .collect();
    nodes.sort_by_key(|n| (n.layer, n.position, n.latent));
    let top: TopFile = read_json(dir, TOP_FILE)?;
    let edges = if dir.join(WEIGHTS_FILE).exists() {
        let w: WeightsFile = read_json(dir, WEIGHTS_FILE)?;
        w.edges
            .into_iter()
            .map(|e| GraphEdge {
                source_layer: e.source.layer,
                source_latent: e.source.latent,
                target_layer: e.target.layer,
                target_latent: e.target.latent,
                mean_weight: e.mean_weight,
                active_positions: e.active_positions,
                positions: e.positions,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(CircuitGraph {
        sequence,
        n_layers: activations.n_layers,
        nodes,
        edges,
        top_activations: top.latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CorpusHit;

    fn sample() -> CircuitGraph {
        CircuitGraph {
            sequence: "MKVL".into(),
            n_layers: 2,
            nodes: vec![
                GraphNode {
                    layer: 0,
                    latent: 3,
                    position: 1,
                    activation: 1.5,
                },
                GraphNode {
                    layer: 0,
                    latent: 1,
                    position: 2,
                    activation: -0.25,
                },
                GraphNode {
                    layer: 1,
                    latent: 0,
                    position: 2,
                    activation: 2.0,
                },
            ],
            edges: vec![GraphEdge {
                source_layer: 0,
                source_latent: 3,
                target_layer: 1,
                target_latent: 0,
                mean_weight: -0.75,
                active_positions: 1,
                positions: vec![PositionWeight {
                    source_position: 1,
                    target_position: 2,
                    weight: -0.75,
                }],
            }],
            top_activations: vec![LatentHits {
                layer: 0,
                latent: 3,
                hits: vec![CorpusHit {
                    sequence_id: "s1".into(),
                    position: 4,
                    activation: 3.25,
                    window: "ACDEF".into(),
                    window_start: 2,
                }],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample();
        write_viz(&g, dir.path()).unwrap();
        assert_eq!(read_viz(dir.path()).unwrap(), g);
        let seq = std::fs::read_to_string(dir.path().join(SEQUENCE_FILE)).unwrap();
        let act: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(ACTIVATION_FILE)).unwrap(),
        )
        .unwrap();
        assert_eq!(act["positions"].as_array().unwrap().len(), seq.trim().len());
        let w: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(WEIGHTS_FILE)).unwrap())
                .unwrap();
        assert_eq!(w["edges"][0]["sign"], "negative");
    }

    #[test]
    fn empty_graph_writes_empty_collections() {
        let dir = tempfile::tempdir().unwrap();
        let g = CircuitGraph {
            sequence: "AC".into(),
            n_layers: 1,
            nodes: vec![],
            edges: vec![],
            top_activations: vec![],
        };
        write_viz(&g, dir.path()).unwrap();
        assert_eq!(read_viz(dir.path()).unwrap(), g);
        std::fs::remove_file(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert!(read_viz(dir.path()).unwrap().edges.is_empty());
    }

    #[test]
    fn unwritable_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        assert!(write_viz(&sample(), &file.join("sub")).is_err());
    }
}
