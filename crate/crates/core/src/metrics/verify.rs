use super::embedder::cosine;
use crate::error::{Error, Result};

/// Cosine scores of mated (genuine) and non-mated (impostor) comparisons.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreMatrix {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreMatrix {
    /// Scores every query against every gallery entry.
    pub fn between(queries: &[Vec<f32>], query_ids: &[usize], gallery: &[Vec<f32>], gallery_ids: &[usize]) -> Self {
        let mut s = ScoreMatrix::default();
        for (q, &qi) in queries.iter().zip(query_ids) {
            for (g, &gi) in gallery.iter().zip(gallery_ids) {
                let c = cosine(q, g);
                if qi == gi {
                    s.genuine.push(c)
                } else {
                    s.impostor.push(c)
                }
            }
        }
        s
    }
}

/// Percentage of queries whose most similar gallery entry (lowest index on
/// ties) carries their identity.
pub fn rank1(queries: &[Vec<f32>], query_ids: &[usize], gallery: &[Vec<f32>], gallery_ids: &[usize]) -> Result<f64> {
    if queries.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::Contract("embeddings and ids differ in length".into()));
    }
    if queries.is_empty() {
        return Err(Error::Contract("no queries".into()));
    }
    let mut hits = 0;
    for (q, &id) in queries.iter().zip(query_ids) {
        if !gallery_ids.contains(&id) {
            return Err(Error::Contract(format!("query identity {id} absent from gallery")));
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, g) in gallery.iter().enumerate() {
            let c = cosine(q, g);
            if c > best.0 {
                best = (c, j);
            }
        }
        hits += usize::from(gallery_ids[best.1] == id);
    }
    Ok(100.0 * hits as f64 / queries.len() as f64)
}

/// Verification rate (percent) at the smallest threshold admitting at most
/// a `far` fraction of impostors (`score ≥ τ` accepts).
pub fn vr_at_far(scores: &ScoreMatrix, far: f64) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::Contract(format!("FAR {far} outside (0, 1)")));
    }
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Contract("empty score list".into()));
    }
    let mut imp = scores.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far * imp.len() as f64 + 1e-9).floor() as usize;
    // walk distinct impostor values from the top while the accepted count stays allowed
    let mut tau = None;
    let mut i = 0;
    while i < imp.len() {
        let v = imp[i];
        let mut j = i;
        while j < imp.len() && imp[j] == v {
            j += 1;
        }
        if j > allowed {
            break;
        }
        tau = Some(v);
        i = j;
    }
    let accepted = match tau {
        Some(t) => scores.genuine.iter().filter(|&&g| g >= t).count(),
        None => scores.genuine.iter().filter(|&&g| g > imp[0]).count(),
    };
    Ok(100.0 * accepted as f64 / scores.genuine.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn unit(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn rank1_self_match_and_ties() {
        let g: Vec<_> = (0..4).map(|i| unit(i, 4)).collect();
        assert_eq!(rank1(&g, &[0, 1, 2, 3], &g, &[0, 1, 2, 3]).unwrap(), 100.0);
        // every gallery entry ties at zero similarity; index 0 wins
        let q = vec![unit(3, 4)];
        let gal = vec![unit(0, 4), unit(1, 4), unit(2, 4)];
        assert_eq!(rank1(&q, &[7], &gal, &[7, 8, 9]).unwrap(), 100.0);
        assert_eq!(rank1(&q, &[8], &gal, &[7, 8, 9]).unwrap(), 0.0);
        assert!(rank1(&q, &[5], &gal, &[7, 8, 9]).is_err());
    }

    #[test]
    fn rank1_hand_built_table() {
        // query i is closest to gallery i except query 3, closest to gallery 0
        let gal: Vec<_> = (0..4).map(|i| unit(i, 4)).collect();
        let q = vec![
            vec![1.0, 0.2, 0.0, 0.0],
            vec![0.0, 1.0, 0.3, 0.0],
            vec![0.1, 0.0, 1.0, 0.0],
            vec![0.9, 0.0, 0.0, 0.5],
        ];
        assert_eq!(rank1(&q, &[0, 1, 2, 3], &gal, &[0, 1, 2, 3]).unwrap(), 75.0);
    }

    #[test]
    fn vr_separable_inverted_and_hand_count() {
        let s = ScoreMatrix {
            genuine: vec![0.9; 5],
            impostor: vec![0.1; 200],
        };
        assert_eq!(vr_at_far(&s, 0.01).unwrap(), 100.0);
        assert_eq!(vr_at_far(&s, 0.001).unwrap(), 100.0);
        let inv = ScoreMatrix {
            genuine: vec![0.1; 5],
            impostor: vec![0.9; 200],
        };
        assert_eq!(vr_at_far(&inv, 0.01).unwrap(), 0.0);
        let hand = ScoreMatrix {
            genuine: vec![0.992, 0.5],
            impostor: (0..1000).map(|i| i as f64 / 1000.0).collect(),
        };
        assert_eq!(vr_at_far(&hand, 0.01).unwrap(), 50.0);
        assert!(vr_at_far(&hand, 1.0).is_err());
        assert!(vr_at_far(&ScoreMatrix::default(), 0.01).is_err());
    }

    fn random_unit(r: &mut rng::Prng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng::normal(r) as f32).collect()
    }

    /// Ranks by the full similarity table, sorting stably by descending score.
    fn brute_rank1(q: &[Vec<f32>], qi: &[usize], g: &[Vec<f32>], gi: &[usize]) -> f64 {
        let mut hits = 0;
        for (a, &id) in q.iter().zip(qi) {
            let mut order: Vec<(f64, usize)> = g.iter().enumerate().map(|(j, b)| (cosine(a, b), j)).collect();
            order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            hits += usize::from(gi[order[0].1] == id);
        }
        100.0 * hits as f64 / q.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank1_matches_brute_force(seed in 0u64..10_000, n in 1usize..100, ids in 1usize..10) {
            let mut r = rng::seeded(seed);
            let gi: Vec<usize> = (0..ids).collect();
            let g: Vec<_> = gi.iter().map(|_| random_unit(&mut r, 6)).collect();
            let qi: Vec<usize> = (0..n).map(|_| rng::below(&mut r, ids)).collect();
            let q: Vec<_> = qi.iter().map(|_| random_unit(&mut r, 6)).collect();
            prop_assert_eq!(rank1(&q, &qi, &g, &gi).unwrap(), brute_rank1(&q, &qi, &g, &gi));
        }

        #[test]
        fn vr_monotone_in_far(seed in 0u64..10_000) {
            let mut r = rng::seeded(seed);
            let s = ScoreMatrix {
                genuine: (0..50).map(|_| rng::uniform(&mut r)).collect(),
                impostor: (0..2000).map(|_| rng::uniform(&mut r) * 0.9).collect(),
            };
            prop_assert!(vr_at_far(&s, 0.01).unwrap() >= vr_at_far(&s, 0.001).unwrap());
        }
    }
}
