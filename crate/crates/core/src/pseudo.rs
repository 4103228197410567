//! Pseudo labels for an unlabeled client. Embeddings from the pre-trained
//! backbone are clustered, and the clusters become dense training labels.

use rayon::prelude::*;

use crate::clustering::{self, ClusterConfig, Partition};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{self, BackboneParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    /// Index of the source sample in the client dataset, per vector.
    pub sample_indices: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// What produced a pseudo-labeled set, including any samples it dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config: ClusterConfig,
    pub n_clusters_before_filter: usize,
    /// Client sample indices removed by the minimum-cluster-size filter.
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub dataset: Dataset,
    pub n_pseudo_ids: usize,
    pub provenance: Provenance,
    /// Client sample index of each surviving sample.
    pub kept: Vec<usize>,
    /// Full terminal partition, before filtering.
    pub partition: Partition,
}

pub fn extract_features(backbone: &BackboneParams, client_data: &Dataset) -> Result<EmbeddingSet> {
    if !client_data.is_empty() && client_data.dim != backbone.dims.d_in {
        return Err(Error::Shape(format!(
            "client data has dim {}, backbone expects {}",
            client_data.dim, backbone.dims.d_in
        )));
    }
    let vectors = client_data
        .samples
        .par_iter()
        .map(|s| model::forward_embed(backbone, &s.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingSet {
        sample_indices: (0..vectors.len()).collect(),
        vectors,
    })
}

/// Clusters the embeddings and labels `client_data` with the result.
///
/// Pseudo labels come from the terminal level of the constrained hierarchy.
/// Clusters smaller than `min_cluster_size` are dropped; survivors are
/// relabeled `0..C` in order of first appearance. Ground-truth identities in
/// `client_data` are never read.
pub fn generate_pseudo_labels(
    client_data: &Dataset,
    emb: &EmbeddingSet,
    cfg: &ClusterConfig,
) -> Result<PseudoLabeledSet> {
    if emb.is_empty() {
        return Err(Error::Size("no embeddings to cluster".into()));
    }
    if emb.sample_indices.len() != emb.vectors.len() {
        return Err(Error::Shape("embedding set has mismatched back-references".into()));
    }
    let hierarchy = clustering::c_finch(&emb.vectors, cfg)?;
    let partition = hierarchy.terminal().clone();
    let sizes = partition.cluster_sizes();

    let mut relabel = vec![usize::MAX; partition.n_clusters];
    let mut next = 0;
    let mut samples = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (pos, &cluster) in partition.labels.iter().enumerate() {
        let idx = emb.sample_indices[pos];
        if sizes[cluster] < cfg.min_cluster_size {
            dropped.push(idx);
            continue;
        }
        if relabel[cluster] == usize::MAX {
            relabel[cluster] = next;
            next += 1;
        }
        let src = client_data
            .samples
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("sample index {idx} out of range")))?;
        samples.push(Sample {
            features: src.features.clone(),
            identity: Some(relabel[cluster]),
            domain: src.domain,
        });
        kept.push(idx);
    }
    if samples.is_empty() {
        return Err(Error::EmptyResult(format!(
            "all {} clusters are smaller than min_cluster_size={}",
            partition.n_clusters, cfg.min_cluster_size
        )));
    }
    let dataset = Dataset::new(samples, client_data.dim, next, client_data.domain)?;
    Ok(PseudoLabeledSet {
        dataset,
        n_pseudo_ids: next,
        provenance: Provenance {
            config: *cfg,
            n_clusters_before_filter: partition.n_clusters,
            dropped,
        },
        kept,
        partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::model::BackboneDims;

    fn identity_backbone(dim: usize) -> BackboneParams {
        // relu(x) then identity: exact for non-negative inputs.
        let dims = BackboneDims {
            d_in: dim,
            d_h: dim,
            d_e: dim,
        };
        let mut p = BackboneParams::zeros(dims);
        for i in 0..dim {
            p.w1[i * dim + i] = 1.0;
            p.w2[i * dim + i] = 1.0;
        }
        p
    }

    fn dataset(points: &[[f64; 3]], ids: &[usize]) -> Dataset {
        let samples = points
            .iter()
            .zip(ids)
            .map(|(p, &id)| Sample {
                features: p.to_vec(),
                identity: Some(id),
                domain: Domain::Target,
            })
            .collect();
        Dataset::new(samples, 3, ids.iter().max().unwrap() + 1, Domain::Target).unwrap()
    }

    fn clustered_fixture() -> Dataset {
        dataset(
            &[
                [1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            &[0, 0, 1, 2, 1, 2],
        )
    }

    #[test]
    fn extract_preserves_cardinality_and_order() {
        let ds = clustered_fixture();
        let emb = extract_features(&identity_backbone(3), &ds).unwrap();
        assert_eq!(emb.len(), ds.len());
        assert_eq!(emb.vectors[0], emb.vectors[1]);
        let empty = Dataset::empty(3, Domain::Target);
        assert!(extract_features(&identity_backbone(3), &empty).unwrap().is_empty());
        assert!(extract_features(&identity_backbone(4), &ds).is_err());
    }

    #[test]
    fn separated_identities_recovered() {
        let ds = clustered_fixture();
        let emb = extract_features(&identity_backbone(3), &ds).unwrap();
        let out = generate_pseudo_labels(&ds, &emb, &ClusterConfig::default()).unwrap();
        assert_eq!(out.n_pseudo_ids, 3);
        let f = clustering::pairwise_f_score(
            &Partition::from_raw(&out.dataset.labels().unwrap()),
            &ds.labels().unwrap(),
        )
        .unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn tiny_threshold_gives_singletons() {
        let ds = dataset(
            &[[1.0, 0.1, 0.0], [1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.1, 0.0, 1.0]],
            &[0, 0, 1, 2],
        );
        let emb = extract_features(&identity_backbone(3), &ds).unwrap();
        let cfg = ClusterConfig {
            threshold_d: 1e-9,
            ..Default::default()
        };
        let out = generate_pseudo_labels(&ds, &emb, &cfg).unwrap();
        assert_eq!(out.n_pseudo_ids, 4);
        assert_eq!(out.dataset.labels().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn min_size_filter_drops_isolated_point() {
        let ds = dataset(&[[1.0, 0.0, 0.0], [1.0, 0.05, 0.0], [0.0, 0.0, 1.0]], &[0, 0, 1]);
        let emb = extract_features(&identity_backbone(3), &ds).unwrap();
        let cfg = ClusterConfig {
            min_cluster_size: 2,
            ..Default::default()
        };
        let out = generate_pseudo_labels(&ds, &emb, &cfg).unwrap();
        assert_eq!(out.provenance.dropped, vec![2]);
        assert_eq!(out.kept, vec![0, 1]);
        assert_eq!(out.dataset.len(), 2);

        let cfg = ClusterConfig {
            min_cluster_size: 10,
            ..Default::default()
        };
        assert!(matches!(
            generate_pseudo_labels(&ds, &emb, &cfg),
            Err(Error::EmptyResult(_))
        ));
    }

    #[test]
    fn output_ignores_true_identities() {
        let ds = clustered_fixture();
        let mut permuted = ds.clone();
        for s in permuted.samples.iter_mut() {
            s.identity = s.identity.map(|i| 2 - i);
        }
        let emb = extract_features(&identity_backbone(3), &ds).unwrap();
        let a = generate_pseudo_labels(&ds, &emb, &ClusterConfig::default()).unwrap();
        let b = generate_pseudo_labels(&permuted, &emb, &ClusterConfig::default()).unwrap();
        assert_eq!(a, b);
        let unlabeled = generate_pseudo_labels(&ds.unlabeled(), &emb, &ClusterConfig::default()).unwrap();
        assert_eq!(a, unlabeled);
    }
}
