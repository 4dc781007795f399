//! Pseudo-label retrieval: nearest triplet texts to a union image embedding.
//!
//! The scan is exact (full pass over the vocabulary, f64 cosine) and the
//! ordering is total: descending similarity, ties broken by ascending
//! vocabulary index. Results are therefore deterministic across runs.

use crate::data::TripletVocabulary;
use crate::embed::{cosine_sim, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedLabel {
    /// Index into the triplet vocabulary.
    pub index: usize,
    pub triplet: String,
    pub similarity: f64,
}

/// Top-`k` vocabulary entries by cosine to `u_img`. `k` larger than the
/// vocabulary is clamped; `k = 0` or an empty/unembedded vocabulary is an
/// error.
pub fn retrieve_pseudo_labels(
    u_img: &EmbeddingVector,
    vocab: &TripletVocabulary,
    k: usize,
) -> Result<Vec<RetrievedLabel>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "pseudo-label retrieval needs k >= 1".into(),
        ));
    }
    if vocab.is_empty() {
        return Err(Error::InvalidArgument(
            "pseudo-label retrieval over an empty triplet vocabulary".into(),
        ));
    }
    let embeddings = vocab.embeddings.as_ref().ok_or_else(|| {
        Error::MissingEmbedding("triplet vocabulary has no cached text embeddings".into())
    })?;
    if embeddings.len() != vocab.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "triplet vocabulary has {} entries but {} embeddings",
            vocab.entries.len(),
            embeddings.len()
        )));
    }

    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(vocab.entries.len());
    for (i, emb) in embeddings.iter().enumerate() {
        scored.push((i, cosine_sim(u_img, emb)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("cosine of valid vectors is never NaN")
            .then(a.0.cmp(&b.0))
    });
    Ok(scored
        .into_iter()
        .take(k.min(vocab.entries.len()))
        .map(|(index, similarity)| RetrievedLabel {
            index,
            triplet: vocab.entries[index].clone(),
            similarity,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_with(embeddings: Vec<Vec<f32>>) -> TripletVocabulary {
        TripletVocabulary {
            entries: (0..embeddings.len()).map(|i| format!("a rel{i} b")).collect(),
            embeddings: Some(embeddings.into_iter().map(EmbeddingVector::new).collect()),
        }
    }

    #[test]
    fn self_retrieval_ranks_the_matching_entry_first() {
        let vocab = vocab_with(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = EmbeddingVector::new(vec![0.0, 1.0]);
        let got = retrieve_pseudo_labels(&u, &vocab, 1).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].index, 1);
        assert!((got[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn five_entry_ordering_matches_hand_ranking() {
        // Cosines to (1, 0): 1.0, ~0.948, 0.8, 0.0, -1.0 after normalization.
        let vocab = vocab_with(vec![
            vec![2.0, 0.0],
            vec![3.0, 1.0],
            vec![0.8, 0.6],
            vec![0.0, 5.0],
            vec![-1.0, 0.0],
        ]);
        let u = EmbeddingVector::new(vec![1.0, 0.0]);
        let got = retrieve_pseudo_labels(&u, &vocab, 5).unwrap();
        let order: Vec<usize> = got.iter().map(|r| r.index).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
        let mut sims = got.iter().map(|r| r.similarity).collect::<Vec<_>>();
        sims.reverse();
        assert!(sims.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_break_by_vocabulary_index() {
        let vocab = vocab_with(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = EmbeddingVector::new(vec![0.0, 2.0]);
        let got = retrieve_pseudo_labels(&u, &vocab, 2).unwrap();
        assert_eq!(got[0].index, 0);
        assert_eq!(got[1].index, 2);
    }

    #[test]
    fn k_larger_than_vocabulary_clamps() {
        let vocab = vocab_with(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = EmbeddingVector::new(vec![1.0, 1.0]);
        let got = retrieve_pseudo_labels(&u, &vocab, 10).unwrap();
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn smaller_k_is_a_prefix_of_larger_k() {
        let vocab = vocab_with(vec![
            vec![0.9, 0.1],
            vec![0.5, 0.5],
            vec![-0.2, 0.7],
            vec![0.3, -0.4],
        ]);
        let u = EmbeddingVector::new(vec![0.7, 0.3]);
        let k2 = retrieve_pseudo_labels(&u, &vocab, 2).unwrap();
        let k4 = retrieve_pseudo_labels(&u, &vocab, 4).unwrap();
        assert_eq!(&k4[..2], &k2[..]);
    }

    #[test]
    fn error_cases() {
        let empty = TripletVocabulary::default();
        let u = EmbeddingVector::new(vec![1.0]);
        assert!(retrieve_pseudo_labels(&u, &empty, 1).is_err());

        let vocab = vocab_with(vec![vec![1.0]]);
        assert!(retrieve_pseudo_labels(&u, &vocab, 0).is_err());

        let no_emb = TripletVocabulary {
            entries: vec!["a p b".into()],
            embeddings: None,
        };
        assert!(matches!(
            retrieve_pseudo_labels(&u, &no_emb, 1),
            Err(Error::MissingEmbedding(_))
        ));
    }
}
