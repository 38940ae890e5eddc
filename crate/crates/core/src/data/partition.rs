use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::encoder::{Sample, Split};
use crate::numerics::RngStream;

/// One client's private samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client: usize,
    pub samples: Vec<Sample>,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    /// Classes present locally, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.samples.iter().map(|s| s.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Label-skewed split: for each class, client proportions are drawn from a
/// symmetric Dirichlet(`beta`) and the class's samples are cut accordingly.
/// Shards left empty receive one sample from the currently largest shard.
pub fn dirichlet_partition(
    samples: &[Sample],
    num_clients: usize,
    beta: f64,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>, DataError> {
    if num_clients == 0 {
        return Err(DataError::Partition("need at least one client".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(DataError::Partition(format!("beta must be > 0, got {beta}")));
    }
    if samples.len() < num_clients {
        return Err(DataError::Partition(format!(
            "{} samples cannot fill {num_clients} clients",
            samples.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.class).or_default().push(*s);
    }

    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); num_clients];
    for members in by_class.values_mut() {
        rng.shuffle(members);
        let mut props: Vec<f64> = (0..num_clients).map(|_| rng.gamma(beta)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props = vec![0.0; num_clients];
            props[rng.below(num_clients)] = 1.0;
        }
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            shards[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = shards[largest].pop().expect("largest shard is nonempty");
        shards[empty].push(moved);
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client, mut samples)| {
            samples.sort_by_key(|s| s.id);
            ClientShard { client, samples }
        })
        .collect())
}

/// Disjoint base/novel class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

/// The first `ceil(fraction * num_classes)` ids are base, the rest novel.
pub fn base_novel_split(num_classes: usize, fraction: f64) -> Result<ClassSplit, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Split(format!("fraction {fraction} outside (0, 1)")));
    }
    // Tolerance keeps products such as 0.7 * 10 from rounding up.
    let n_base = ((fraction * num_classes as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_base == 0 || n_base >= num_classes {
        return Err(DataError::Split(format!(
            "{num_classes} classes at fraction {fraction} leaves one side empty"
        )));
    }
    Ok(ClassSplit {
        base: (0..n_base).collect(),
        novel: (n_base..num_classes).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoSplit {
    pub train_domains: Vec<usize>,
    pub test_domain: usize,
    pub shards: Vec<ClientShard>,
    /// Every sample of the held-out domain, regardless of its train/test tag.
    pub test_samples: Vec<Sample>,
}

/// Holds one domain out; each remaining domain's training samples are split
/// uniformly at random across `clients_per_domain` clients.
pub fn leave_one_domain_out(
    dataset: &Dataset,
    held_out: usize,
    clients_per_domain: usize,
    rng: &mut RngStream,
) -> Result<LodoSplit, DataError> {
    if dataset.num_domains < 2 {
        return Err(DataError::Partition("leave-one-domain-out needs two domains".into()));
    }
    if held_out >= dataset.num_domains {
        return Err(DataError::UnknownDomain(held_out));
    }
    if clients_per_domain == 0 {
        return Err(DataError::Partition("need at least one client per domain".into()));
    }
    let train_domains: Vec<usize> = (0..dataset.num_domains).filter(|&d| d != held_out).collect();
    let mut shards = Vec::new();
    for &domain in &train_domains {
        let mut members: Vec<Sample> = dataset
            .split(Split::Train)
            .filter(|s| s.domain == domain)
            .copied()
            .collect();
        if members.len() < clients_per_domain {
            return Err(DataError::Partition(format!(
                "domain {domain} has {} samples for {clients_per_domain} clients",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n = members.len();
        for k in 0..clients_per_domain {
            let (lo, hi) = (k * n / clients_per_domain, (k + 1) * n / clients_per_domain);
            let mut part = members[lo..hi].to_vec();
            part.sort_by_key(|s| s.id);
            shards.push(ClientShard {
                client: shards.len(),
                samples: part,
            });
        }
    }
    let test_samples = dataset
        .samples
        .iter()
        .filter(|s| s.domain == held_out)
        .copied()
        .collect();
    Ok(LodoSplit {
        train_domains,
        test_domain: held_out,
        shards,
        test_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, DomainSpec, TaskSpec};
    use std::collections::HashSet;

    fn dataset(domains: usize) -> Dataset {
        let spec = TaskSpec {
            num_classes: 6,
            domains: vec![DomainSpec::IDENTITY; domains],
            samples_per_class_per_domain: 12,
            test_samples_per_class_per_domain: 4,
            ..TaskSpec::default()
        };
        generate_task(&spec, 3).unwrap().0
    }

    fn assert_exact_partition(samples: &[Sample], shards: &[ClientShard]) {
        let total: usize = shards.iter().map(ClientShard::size).sum();
        assert_eq!(total, samples.len());
        let ids: HashSet<usize> = shards.iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
        assert_eq!(ids.len(), samples.len());
        assert!(shards.iter().all(|s| s.size() > 0));
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = dataset(1);
        let train = ds.train();
        let shards = dirichlet_partition(&train, 1, 0.5, &mut RngStream::new(0, "p")).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].samples, train);
    }

    #[test]
    fn partition_is_exact_and_nonempty() {
        let ds = dataset(2);
        let train = ds.train();
        for beta in [0.05, 0.5, 5.0] {
            for seed in 0..5 {
                let shards =
                    dirichlet_partition(&train, 10, beta, &mut RngStream::new(seed, "p")).unwrap();
                assert_exact_partition(&train, &shards);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = dataset(1);
        let train = ds.train();
        let mut rng = RngStream::new(0, "p");
        assert!(dirichlet_partition(&train, 0, 0.5, &mut rng).is_err());
        assert!(dirichlet_partition(&train, 3, 0.0, &mut rng).is_err());
        assert!(dirichlet_partition(&train[..2], 3, 0.5, &mut rng).is_err());
    }

    /// Mean over classes of the across-client variance of class proportions.
    fn proportion_variance(shards: &[ClientShard], classes: usize) -> f64 {
        let k = shards.len() as f64;
        let mut acc = 0.0;
        for c in 0..classes {
            let counts: Vec<f64> = shards
                .iter()
                .map(|s| s.samples.iter().filter(|x| x.class == c).count() as f64)
                .collect();
            let total: f64 = counts.iter().sum();
            let props: Vec<f64> = counts.iter().map(|n| n / total).collect();
            let mean = props.iter().sum::<f64>() / k;
            acc += props.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / k;
        }
        acc / classes as f64
    }

    #[test]
    fn larger_beta_means_less_skew() {
        let ds = dataset(4);
        let train = ds.train();
        let mut smooth = 0.0;
        let mut skewed = 0.0;
        for seed in 0..20 {
            let a = dirichlet_partition(&train, 5, 100.0, &mut RngStream::new(seed, "p")).unwrap();
            let b = dirichlet_partition(&train, 5, 0.1, &mut RngStream::new(seed, "p")).unwrap();
            smooth += proportion_variance(&a, 6);
            skewed += proportion_variance(&b, 6);
        }
        assert!(smooth < skewed, "{smooth} vs {skewed}");
    }

    #[test]
    fn split_examples() {
        let s = base_novel_split(10, 0.5).unwrap();
        assert_eq!(s.base, (0..5).collect::<Vec<_>>());
        assert_eq!(s.novel, (5..10).collect::<Vec<_>>());
        let s = base_novel_split(3, 0.5).unwrap();
        assert_eq!((s.base, s.novel), (vec![0, 1], vec![2]));
        assert_eq!(base_novel_split(10, 0.7).unwrap().base.len(), 7);
        assert!(base_novel_split(10, 0.0).is_err());
        assert!(base_novel_split(10, 1.0).is_err());
        assert!(base_novel_split(2, 0.99).is_err());
    }

    #[test]
    fn lodo_layout() {
        let ds = dataset(4);
        let split = leave_one_domain_out(&ds, 2, 3, &mut RngStream::new(1, "lodo")).unwrap();
        assert_eq!(split.train_domains, vec![0, 1, 3]);
        assert_eq!(split.shards.len(), 9);
        assert!(split
            .shards
            .iter()
            .all(|s| s.samples.iter().all(|x| x.domain != 2)));
        assert!(split.test_samples.iter().all(|x| x.domain == 2));
        let train: Vec<Sample> = ds.train().into_iter().filter(|s| s.domain != 2).collect();
        assert_exact_partition(&train, &split.shards);
    }

    #[test]
    fn lodo_errors() {
        let ds = dataset(3);
        let mut rng = RngStream::new(1, "lodo");
        assert!(matches!(
            leave_one_domain_out(&ds, 5, 3, &mut rng),
            Err(DataError::UnknownDomain(5))
        ));
        assert!(leave_one_domain_out(&dataset(1), 0, 3, &mut rng).is_err());
    }
}
