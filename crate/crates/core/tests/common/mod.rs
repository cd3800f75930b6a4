#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mmshift::ingest::{write_attention_records, write_embedding_matrix, Dtype, EmbeddingMatrix};
use mmshift::modality::SyntheticAttention;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const MODEL: &str = "toyvlm";
pub const D_V: usize = 4;
pub const D_Q: usize = 3;

pub fn tag(m: &str) -> String {
    format!("{m}:{MODEL}:PT")
}

/// `(dataset_id, role, shift magnitude, published accuracy, samples)`
pub const DATASETS: [(&str, &str, f64, Option<f64>, usize); 4] = [
    ("train", "ID-train", 0.0, None, 300),
    ("val", "ID-val", 0.0, Some(80.0), 120),
    ("near", "near-OOD", 1.0, Some(60.0), 120),
    ("far", "far-OOD", 4.0, Some(30.0), 120),
];

/// Writes V, Q and VQ embeddings, sample id lists, attention records for the
/// test sets, and a manifest into `dir`. Returns the manifest path.
pub fn write_corpus(dir: &Path, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let att = SyntheticAttention::default();
    let mut entries = Vec::new();
    for (id, role, shift, acc, n) in DATASETS {
        let v = Array2::from_shape_simple_fn((n, D_V), || -> f64 { StandardNormal.sample(&mut rng) }) + shift;
        let q = Array2::from_shape_simple_fn((n, D_Q), || -> f64 { StandardNormal.sample(&mut rng) }) + 0.5 * shift;
        let noise = Array2::from_shape_simple_fn((n, 2), || -> f64 { StandardNormal.sample(&mut rng) }) * 0.3;
        let vq = ndarray::concatenate![Axis(1), v.slice(ndarray::s![.., ..2]), q.slice(ndarray::s![.., ..2]), noise];
        let ids: Vec<String> = (0..n).map(|i| format!("{id}-{i:04}")).collect();
        for (m, data) in [("V", &v), ("Q", &q), ("VQ", &vq)] {
            let emb = EmbeddingMatrix::new(data.clone(), Dtype::F64).unwrap();
            write_embedding_matrix(&emb, dir.join(format!("{id}_{m}.emb"))).unwrap();
        }
        std::fs::write(dir.join(format!("{id}.ids")), ids.join("\n") + "\n").unwrap();
        let mut entry = serde_json::json!({
            "dataset_id": id,
            "role": role,
            "sample_ids_path": format!("{id}.ids"),
            "embedding_paths": {
                tag("V"): format!("{id}_V.emb"),
                tag("Q"): format!("{id}_Q.emb"),
                tag("VQ"): format!("{id}_VQ.emb"),
            },
        });
        if let Some(a) = acc {
            entry["published_accuracy"] = serde_json::json!(a);
        }
        if role != "ID-train" {
            let recs: Vec<_> = ids
                .iter()
                .enumerate()
                .map(|(i, sid)| {
                    let proxy = vq.row(i).dot(&vq.row(i)).sqrt() * 5.0;
                    att.record(sid, proxy, &mut rng).unwrap()
                })
                .collect();
            write_attention_records(&recs, dir.join(format!("{id}.att"))).unwrap();
            entry["attention_path"] = serde_json::json!(format!("{id}.att"));
        }
        entries.push(entry);
    }
    let manifest = serde_json::json!({ "joint_capable": [MODEL], "datasets": entries });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
