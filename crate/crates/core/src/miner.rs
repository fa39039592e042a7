//! Speaker vector pool and the k-nearest-impostor table used to pick hard
//! negative trials.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::corpus::TrainingSet;
use crate::error::{Error, Result};
use crate::nn::{read_file, ByteReader, ByteWriter, Tensor};
use crate::par;
use crate::scoring::cosine;

const POOL_MAGIC: &[u8; 4] = b"E2EV";

/// One pooled vector per training speaker, plus the number of refreshes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeakerVectorPool {
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub generation: u64,
}

impl SpeakerVectorPool {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Debug dump: magic, count, then per speaker its id and vector.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(POOL_MAGIC).u32(self.vectors.len() as u32);
        for (id, v) in &self.vectors {
            w.str(id).tensor(&Tensor::from_vec(v.clone()));
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(POOL_MAGIC)?;
        let n = r.u32()?;
        let mut pool = SpeakerVectorPool::default();
        for _ in 0..n {
            let id = r.str()?;
            let v = r.tensor()?.into_values();
            pool.vectors.insert(id, v);
        }
        r.expect_end()?;
        Ok(pool)
    }
}

/// Mean supervector of up to `n_enroll` randomly chosen utterances per
/// training speaker.
pub fn compute_pool_vectors<R, F>(
    set: &TrainingSet,
    n_enroll: usize,
    rng: &mut R,
    mut supervector: F,
) -> Result<BTreeMap<String, Vec<f64>>>
where
    R: Rng,
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if n_enroll == 0 {
        return Err(Error::InvalidArgument(
            "pool enrollment count must be positive".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (spk, utts) in set.speakers.iter().zip(&set.utterances) {
        let n = n_enroll.min(utts.len());
        let mut mean: Vec<f64> = Vec::new();
        for i in index::sample(rng, utts.len(), n).into_iter() {
            let v = supervector(utts[i])?;
            if mean.is_empty() {
                mean = vec![0.0; v.len()];
            }
            if v.len() != mean.len() {
                return Err(Error::shape("pool vector", &[mean.len()], &[v.len()]));
            }
            mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        if mean.iter().all(|&m| m == 0.0) {
            return Err(Error::DegenerateSupervector);
        }
        out.insert(spk.clone(), mean);
    }
    Ok(out)
}

/// Recomputes every pool vector with the current networks and bumps the
/// generation counter.
pub fn refresh_pool<R, F>(
    pool: &mut SpeakerVectorPool,
    set: &TrainingSet,
    n_enroll: usize,
    rng: &mut R,
    supervector: F,
) -> Result<()>
where
    R: Rng,
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    pool.vectors = compute_pool_vectors(set, n_enroll, rng, supervector)?;
    pool.generation += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub speaker: String,
    pub similarity: f64,
}

/// For each speaker, its most similar other speakers, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpostorTable {
    pub k: usize,
    pub neighbors: BTreeMap<String, Vec<Neighbor>>,
}

impl ImpostorTable {
    pub fn get(&self, speaker: &str) -> Option<&[Neighbor]> {
        self.neighbors.get(speaker).map(Vec::as_slice)
    }
}

/// Exhaustive cosine k-nearest-neighbor table; ties go to the
/// lexicographically smaller speaker id.
pub fn build_impostor_table(pool: &SpeakerVectorPool, k: usize) -> Result<ImpostorTable> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "impostor table needs at least 2 speakers, pool has {}",
            pool.len()
        )));
    }
    let entries: Vec<(&String, &Vec<f64>)> = pool.vectors.iter().collect();
    let lists = par::map_range(entries.len(), |q| -> Result<Vec<Neighbor>> {
        let (_, qv) = entries[q];
        let mut cands = Vec::with_capacity(entries.len() - 1);
        for (j, (id, v)) in entries.iter().enumerate() {
            if j != q {
                cands.push((cosine(qv, v)?, j, *id));
            }
        }
        // Entries are already in id order, so a stable sort keeps ties
        // lexicographic.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(cands
            .into_iter()
            .take(k)
            .map(|(s, _, id)| Neighbor {
                speaker: id.clone(),
                similarity: s,
            })
            .collect())
    });
    let mut neighbors = BTreeMap::new();
    for ((id, _), list) in entries.iter().zip(lists) {
        neighbors.insert((*id).clone(), list?);
    }
    Ok(ImpostorTable { k, neighbors })
}

/// Negative test utterances for one target, and whether the draw had to
/// repeat utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpostorDraw {
    /// `(utterance index, impostor speaker)` pairs.
    pub utterances: Vec<(usize, String)>,
    pub with_replacement: bool,
}

fn draw<R: Rng>(pool: Vec<(usize, String)>, count: usize, rng: &mut R) -> Result<ImpostorDraw> {
    if pool.is_empty() {
        return Err(Error::Data("no impostor utterances available".into()));
    }
    if pool.len() >= count {
        let picked = index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        Ok(ImpostorDraw {
            utterances: picked,
            with_replacement: false,
        })
    } else {
        let picked = (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        Ok(ImpostorDraw {
            utterances: picked,
            with_replacement: true,
        })
    }
}

fn utterances_of<'a>(set: &'a TrainingSet, speaker: &str) -> Result<&'a [usize]> {
    set.speakers
        .iter()
        .position(|s| s == speaker)
        .map(|i| set.utterances[i].as_slice())
        .ok_or_else(|| Error::UnknownSpeakers(vec![speaker.to_string()]))
}

/// `count` utterances drawn uniformly from the union of `speaker`'s listed
/// impostors' utterances, without replacement when the union is big enough.
pub fn sample_impostor_utterances<R: Rng>(
    table: &ImpostorTable,
    speaker: &str,
    set: &TrainingSet,
    count: usize,
    rng: &mut R,
) -> Result<ImpostorDraw> {
    let neighbors = table
        .get(speaker)
        .ok_or_else(|| Error::UnknownSpeakers(vec![speaker.to_string()]))?;
    let mut union = Vec::new();
    for n in neighbors {
        union.extend(
            utterances_of(set, &n.speaker)?
                .iter()
                .map(|&u| (u, n.speaker.clone())),
        );
    }
    draw(union, count, rng)
}

/// Random-negative ablation: `count` utterances drawn uniformly from all
/// other training speakers.
pub fn sample_random_impostors<R: Rng>(
    speaker: &str,
    set: &TrainingSet,
    count: usize,
    rng: &mut R,
) -> Result<ImpostorDraw> {
    utterances_of(set, speaker)?;
    let mut union = Vec::new();
    for (s, utts) in set.speakers.iter().zip(&set.utterances) {
        if s != speaker {
            union.extend(utts.iter().map(|&u| (u, s.clone())));
        }
    }
    draw(union, count, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(entries: &[(&str, Vec<f64>)]) -> SpeakerVectorPool {
        SpeakerVectorPool {
            vectors: entries
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            generation: 0,
        }
    }

    fn set(sizes: &[(&str, usize)]) -> TrainingSet {
        let mut next = 0;
        let mut s = TrainingSet {
            speakers: Vec::new(),
            utterances: Vec::new(),
            excluded: Vec::new(),
        };
        for (spk, n) in sizes {
            s.speakers.push(spk.to_string());
            s.utterances.push((next..next + n).collect());
            next += n;
        }
        s
    }

    #[test]
    fn nearest_by_cosine() {
        let p = pool(&[
            ("A", vec![1.0, 0.0]),
            ("B", vec![0.9, 0.1]),
            ("C", vec![-1.0, 0.0]),
        ]);
        let t = build_impostor_table(&p, 1).unwrap();
        assert_eq!(t.get("A").unwrap()[0].speaker, "B");
        assert_eq!(t.get("C").unwrap()[0].speaker, "B");
    }

    #[test]
    fn identical_vectors_are_mutual_neighbors() {
        let p = pool(&[
            ("x", vec![0.3, 0.4]),
            ("y", vec![0.3, 0.4]),
            ("z", vec![0.0, 1.0]),
        ]);
        let t = build_impostor_table(&p, 1).unwrap();
        assert_eq!(
            t.get("x").unwrap()[0],
            Neighbor {
                speaker: "y".into(),
                similarity: 1.0
            }
        );
        assert_eq!(t.get("y").unwrap()[0].speaker, "x");
    }

    #[test]
    fn k_is_clipped_and_ties_are_lexicographic() {
        let p = pool(&[
            ("d", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![0.0, 1.0]),
            ("a", vec![0.0, 2.0]),
        ]);
        let t = build_impostor_table(&p, 10).unwrap();
        for list in t.neighbors.values() {
            assert_eq!(list.len(), 3);
        }
        let d: Vec<&str> = t
            .get("d")
            .unwrap()
            .iter()
            .map(|n| n.speaker.as_str())
            .collect();
        assert_eq!(d, ["a", "b", "c"]);
    }

    #[test]
    fn table_errors() {
        assert!(build_impostor_table(&pool(&[("a", vec![1.0])]), 1).is_err());
        assert!(build_impostor_table(&pool(&[("a", vec![1.0]), ("b", vec![1.0])]), 0).is_err());
    }

    #[test]
    fn single_impostor_with_exact_count() {
        let p = pool(&[("s", vec![1.0, 0.0]), ("t", vec![1.0, 0.1])]);
        let t = build_impostor_table(&p, 1).unwrap();
        let s = set(&[("s", 3), ("t", 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = sample_impostor_utterances(&t, "s", &s, 5, &mut rng).unwrap();
        let mut got: Vec<usize> = d.utterances.iter().map(|(u, _)| *u).collect();
        got.sort();
        assert_eq!(got, vec![3, 4, 5, 6, 7]);
        assert!(!d.with_replacement);

        let more = sample_impostor_utterances(&t, "s", &s, 7, &mut rng).unwrap();
        assert!(more.with_replacement);
        assert!(more
            .utterances
            .iter()
            .all(|(u, spk)| spk == "t" && (3..8).contains(u)));
    }

    #[test]
    fn samples_come_from_listed_impostors_and_are_seeded() {
        let p = pool(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 0.2]),
            ("c", vec![1.0, 0.3]),
            ("d", vec![-1.0, 0.0]),
        ]);
        let t = build_impostor_table(&p, 2).unwrap();
        let s = set(&[("a", 4), ("b", 4), ("c", 4), ("d", 4)]);
        let d1 =
            sample_impostor_utterances(&t, "a", &s, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d2 =
            sample_impostor_utterances(&t, "a", &s, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(d1, d2);
        assert!(d1
            .utterances
            .iter()
            .all(|(_, spk)| spk == "b" || spk == "c"));

        let r = sample_random_impostors("a", &s, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.utterances.iter().all(|(u, spk)| spk != "a" && *u >= 4));
        assert!(sample_random_impostors("zz", &s, 1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn refresh_counts_generations_and_is_deterministic() {
        let s = set(&[("a", 6), ("b", 8)]);
        let constant = |u: usize| {
            Ok(if u < 6 {
                vec![1.0, 2.0]
            } else {
                vec![-1.0, 0.5]
            })
        };
        let mut pool = SpeakerVectorPool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            refresh_pool(&mut pool, &s, 6, &mut rng, constant).unwrap();
        }
        assert_eq!(pool.generation, 3);
        assert_eq!(pool.vectors["a"], vec![1.0, 2.0]);
        assert_eq!(pool.vectors["b"], vec![-1.0, 0.5]);

        let by_index = |u: usize| Ok(vec![1.0 + u as f64, 1.0]);
        let a = compute_pool_vectors(&s, 3, &mut ChaCha8Rng::seed_from_u64(9), by_index).unwrap();
        let b = compute_pool_vectors(&s, 3, &mut ChaCha8Rng::seed_from_u64(9), by_index).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.keys().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn pool_dump_roundtrip() {
        let p = pool(&[("a", vec![1.0, -0.5]), ("b", vec![0.25, 3.0])]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        p.save(&path).unwrap();
        assert_eq!(SpeakerVectorPool::load(&path).unwrap(), p);
    }
}
