//! Single-file binary checkpoints for trained models.
//!
//! Layout: an 8-byte magic, a JSON metadata block (config, shapes, history,
//! the denoised view's triples), then every parameter tensor as raw
//! little-endian f64. Floats in the binary block round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::kg_embed::KgEmbeddingParams;
use crate::model::EmbeddingTables;
use crate::rwr::{AttentionMatrix, WalkConfig};
use crate::train::{EpochMetrics, TrainConfig, TrainedModel};

const MAGIC: &[u8; 8] = b"KGRECPT1";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    num_users: usize,
    num_items: usize,
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    layers: usize,
    step_dim: usize,
    guide_dim: usize,
    denoiser_entities: usize,
    history: Vec<EpochMetrics>,
    walk: WalkConfig,
    denoised: Option<DenoisedMeta>,
}

#[derive(Serialize, Deserialize)]
struct DenoisedMeta {
    num_items: usize,
    num_entities: usize,
    num_relations: usize,
    triples: Vec<(usize, usize, usize)>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

fn write_matrix(w: &mut impl Write, m: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for &x in m.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_vector(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for &x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| bad(path, "truncated file"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|_| bad(path, "truncated tensor data"))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_matrix(r: &mut impl Read, path: &Path) -> Result<Array2<f64>> {
    let rows = read_u64(r, path)? as usize;
    let cols = read_u64(r, path)? as usize;
    let data = read_f64s(r, rows * cols, path)?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(path, e.to_string()))
}

fn read_vector(r: &mut impl Read, path: &Path) -> Result<Vec<f64>> {
    let len = read_u64(r, path)? as usize;
    read_f64s(r, len, path)
}

/// Write a trained model to `path`, replacing any existing file.
pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    let t = &model.tables;
    let meta = Meta {
        config: model.config.clone(),
        num_users: t.user.nrows(),
        num_items: t.item.nrows(),
        num_entities: t.kg.entity_table.nrows(),
        num_relations: t.kg.relation_table.nrows(),
        dim: t.dim,
        layers: t.layers,
        step_dim: t.denoiser.step_dim,
        guide_dim: t.denoiser.guide_dim,
        denoiser_entities: t.denoiser.num_entities,
        history: model.history.clone(),
        walk: model.attention.cfg.clone(),
        denoised: model.denoised_kg.as_ref().map(|kg| DenoisedMeta {
            num_items: kg.num_items,
            num_entities: kg.num_entities,
            num_relations: kg.num_relations,
            triples: kg.triples.clone(),
        }),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| bad(path, e.to_string()))?;

    let file = File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut w = BufWriter::new(file);
    let io = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_matrix(&mut w, &t.user)?;
        write_matrix(&mut w, &t.item)?;
        write_matrix(&mut w, &t.kg.entity_table)?;
        write_matrix(&mut w, &t.kg.relation_table)?;
        write_matrix(&mut w, &t.kg.w)?;
        write_matrix(&mut w, &t.denoiser.w1)?;
        write_vector(&mut w, t.denoiser.b1.as_slice().unwrap())?;
        write_matrix(&mut w, &t.denoiser.w2)?;
        write_vector(&mut w, t.denoiser.b2.as_slice().unwrap())?;
        write_matrix(&mut w, &t.denoiser.step_table)?;
        write_vector(&mut w, &model.schedule.beta)?;
        write_vector(&mut w, &model.attention.values)?;
        w.flush()
    })()
    .map_err(io)
}

/// Load a model previously written by [`save`].
pub fn load(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad(path, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(bad(path, "not a model checkpoint (bad magic)"));
    }
    let json_len = read_u64(&mut r, path)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|_| bad(path, "truncated metadata"))?;
    let meta: Meta = serde_json::from_slice(&json).map_err(|e| bad(path, e.to_string()))?;

    let user = read_matrix(&mut r, path)?;
    let item = read_matrix(&mut r, path)?;
    let entity = read_matrix(&mut r, path)?;
    let relation = read_matrix(&mut r, path)?;
    let w = read_matrix(&mut r, path)?;
    let w1 = read_matrix(&mut r, path)?;
    let b1 = Array1::from_vec(read_vector(&mut r, path)?);
    let w2 = read_matrix(&mut r, path)?;
    let b2 = Array1::from_vec(read_vector(&mut r, path)?);
    let step_table = read_matrix(&mut r, path)?;
    let beta = read_vector(&mut r, path)?;
    let attention_values = read_vector(&mut r, path)?;

    for (name, got, want) in [
        ("user rows", user.nrows(), meta.num_users),
        ("item rows", item.nrows(), meta.num_items),
        ("entity rows", entity.nrows(), meta.num_entities),
        ("relation rows", relation.nrows(), meta.num_relations),
        ("user cols", user.ncols(), meta.dim),
    ] {
        if got != want {
            return Err(bad(path, format!("{name} mismatch: tensor has {got}, metadata says {want}")));
        }
    }

    let denoiser = DenoiserParams {
        w1,
        b1,
        w2,
        b2,
        step_table,
        num_entities: meta.denoiser_entities,
        step_dim: meta.step_dim,
        guide_dim: meta.guide_dim,
    };
    let tables = EmbeddingTables {
        user,
        item,
        kg: KgEmbeddingParams::new(entity, relation, w),
        denoiser,
        dim: meta.dim,
        layers: meta.layers,
    };
    let denoised_kg = match meta.denoised {
        Some(d) => Some(KnowledgeGraph::from_triples(d.num_items, d.num_entities, d.num_relations, &d.triples)?),
        None => None,
    };
    Ok(TrainedModel {
        tables,
        schedule: NoiseSchedule::from_betas(beta),
        attention: AttentionMatrix {
            num_users: meta.num_users,
            num_items: meta.num_items,
            values: attention_values,
            cfg: meta.walk,
        },
        denoised_kg,
        history: meta.history,
        config: meta.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use crate::train::train;

    fn small_model() -> TrainedModel {
        let spec = SyntheticSpec {
            num_users: 20,
            num_items: 15,
            num_entities: 10,
            num_clusters: 2,
            intra_cluster_prob: 0.5,
            noise_edge_prob: 0.02,
            relevant_relations_per_item: 2,
            noise_relations_per_item: 1,
            seed: 3,
        };
        let (graph, kg, _) = generate_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            dim: 6,
            num_paths: 4,
            path_length: 8,
            t_max: 3,
            denoiser_hidden: 12,
            step_dim: 4,
            top_n: 5,
            ..TrainConfig::default()
        };
        train(&graph, &kg, &cfg, None).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(model.tables, loaded.tables);
        assert_eq!(model.schedule, loaded.schedule);
        assert_eq!(model.attention.values, loaded.attention.values);
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.history.len(), loaded.history.len());
        for (a, b) in model.history.iter().zip(&loaded.history) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.bpr.to_bits(), b.bpr.to_bits());
        }
        match (&model.denoised_kg, &loaded.denoised_kg) {
            (Some(a), Some(b)) => assert_eq!(a.triples, b.triples),
            (None, None) => {}
            _ => panic!("denoised view mismatch"),
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
        assert!(load(&garbage).is_err());

        let model = small_model();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&cut).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load(Path::new("/nonexistent/never.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
