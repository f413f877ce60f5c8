//! Class-keyed momentum memory of paired consensus vectors and the
//! group-pairwise triplet objective built on it.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// The `A` and `B` slots of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusMemory {
    entries: BTreeMap<String, MemoryEntry>,
    beta: f64,
    alpha: f64,
    /// Use the hinged `max(0, .)` triplet instead of the plain difference.
    pub clamp: bool,
}

impl Default for ConsensusMemory {
    fn default() -> Self {
        ConsensusMemory::new(DEFAULT_BETA, DEFAULT_ALPHA).expect("defaults are valid")
    }
}

impl ConsensusMemory {
    pub fn new(beta: f64, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("memory momentum {beta} outside [0, 1)")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("triplet margin {alpha} must be positive")));
        }
        Ok(ConsensusMemory {
            entries: BTreeMap::new(),
            beta,
            alpha,
            clamp: false,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: &str) -> Option<&MemoryEntry> {
        self.entries.get(class_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &MemoryEntry)> {
        self.entries.iter()
    }

    fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.a.len())
    }

    /// `C <- beta * C + (1 - beta) * incoming` on both slots; an unseen
    /// class takes the incoming vectors as they are.
    pub fn update(&mut self, class_id: &str, vec_a: &[f64], vec_b: &[f64]) -> Result<()> {
        if vec_a.len() != vec_b.len() {
            return Err(contract_err!(
                "memory_update: slot dimensions {} and {} differ",
                vec_a.len(),
                vec_b.len()
            ));
        }
        if let Some(d) = self.dim() {
            if d != vec_a.len() {
                return Err(contract_err!(
                    "memory_update: class {class_id:?} has dimension {}, memory holds {d}",
                    vec_a.len()
                ));
            }
        }
        if !vec_a.iter().chain(vec_b).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("memory_update: non-finite vector for class {class_id:?}")));
        }
        let beta = self.beta;
        match self.entries.get_mut(class_id) {
            Some(e) => {
                for (m, &v) in e.a.iter_mut().zip(vec_a).chain(e.b.iter_mut().zip(vec_b)) {
                    *m = beta * *m + (1.0 - beta) * v;
                }
            }
            None => {
                self.entries.insert(
                    class_id.to_string(),
                    MemoryEntry {
                        a: vec_a.to_vec(),
                        b: vec_b.to_vec(),
                    },
                );
            }
        }
        Ok(())
    }

    /// Replaces the stored slots of a class without blending.
    pub fn set(&mut self, class_id: &str, entry: MemoryEntry) -> Result<()> {
        if entry.a.len() != entry.b.len() || self.dim().is_some_and(|d| d != entry.a.len()) {
            return Err(contract_err!("memory: entry for {class_id:?} has inconsistent dimension"));
        }
        self.entries.insert(class_id.to_string(), entry);
        Ok(())
    }

    /// Tensors named `mcm/<class>/A` and `mcm/<class>/B`.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        for (class, e) in &self.entries {
            out.insert(format!("mcm/{class}/A"), Tensor::from_f64(&[e.a.len()], &e.a).expect("sized"));
            out.insert(format!("mcm/{class}/B"), Tensor::from_f64(&[e.b.len()], &e.b).expect("sized"));
        }
        out
    }

    /// Restores entries from `mcm/<class>/{A,B}` tensors; other names are ignored.
    pub fn load_from(&mut self, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.entries.clear();
        for (name, t) in tensors {
            let Some(class) = name.strip_prefix("mcm/").and_then(|r| r.strip_suffix("/A")) else {
                continue;
            };
            let b = tensors
                .get(&format!("mcm/{class}/B"))
                .ok_or_else(|| Error::Checkpoint(format!("memory slot mcm/{class}/B is missing")))?;
            self.set(
                class,
                MemoryEntry {
                    a: t.to_f64_vec(),
                    b: b.to_f64_vec(),
                },
            )?;
        }
        Ok(())
    }
}

/// `||anchor - positive|| - ||anchor - negative|| + alpha`.
pub fn triplet_loss<T: Element>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    alpha: f64,
    clamp: bool,
) -> Result<Var> {
    let dp = tape.sub(anchor, positive)?;
    let dn = tape.sub(anchor, negative)?;
    let np = tape.l2_norm(dp);
    let nn = tape.l2_norm(dn);
    let diff = tape.sub(np, nn)?;
    let t = tape.add_scalar(diff, alpha);
    Ok(if clamp { tape.relu(t) } else { t })
}

/// Mean over all ordered class pairs `(i, j)` of the triplet with live
/// anchor/positive `pairs[i]` and negative `negatives[j]`. Negatives are
/// detached. The `i == j` term compares a pair against itself and is the
/// constant `alpha`.
pub fn mcm_loss_vars<T: Element>(
    tape: &mut Tape<T>,
    pairs: &[(Var, Var)],
    negatives: &[Var],
    alpha: f64,
    clamp: bool,
) -> Result<Var> {
    let n = pairs.len();
    if n == 0 || negatives.len() != n {
        return Err(contract_err!(
            "mcm_loss: {} live pairs and {} memory negatives",
            n,
            negatives.len()
        ));
    }
    let negatives: Vec<Var> = negatives.iter().map(|&v| tape.detach(v)).collect();
    let mut total: Option<Var> = None;
    for (i, &(a, p)) in pairs.iter().enumerate() {
        for (j, &neg) in negatives.iter().enumerate() {
            if i == j {
                continue;
            }
            let t = triplet_loss(tape, a, p, neg, alpha, clamp)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    let diagonal = n as f64 * alpha;
    let sum = match total {
        Some(acc) => tape.add_scalar(acc, diagonal),
        None => tape.scalar(diagonal),
    };
    Ok(tape.scale(sum, 1.0 / (n * n) as f64))
}

/// Loss over the batch classes in order, reading negatives from `mem`
/// (which should already hold this step's update).
pub fn mcm_loss<T: Element>(
    tape: &mut Tape<T>,
    batch_classes: &[String],
    mem: &ConsensusMemory,
    live: &BTreeMap<String, (Var, Var)>,
) -> Result<Var> {
    let mut pairs = Vec::with_capacity(batch_classes.len());
    let mut negatives = Vec::with_capacity(batch_classes.len());
    for class in batch_classes {
        let pair = live
            .get(class)
            .ok_or_else(|| contract_err!("mcm_loss: no live consensus for class {class:?}"))?;
        let entry = mem
            .get(class)
            .ok_or_else(|| contract_err!("mcm_loss: class {class:?} missing from memory"))?;
        pairs.push(*pair);
        negatives.push(tape.constant(Tensor::from_f64(&[entry.b.len()], &entry.b)?));
    }
    mcm_loss_vars(tape, &pairs, &negatives, mem.alpha, mem.clamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_from_zero() {
        let mut m = ConsensusMemory::default();
        m.set("c", MemoryEntry { a: vec![0.0; 2], b: vec![0.0; 2] }).unwrap();
        m.update("c", &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(m.get("c").unwrap().a, vec![0.9, 1.8]);
        assert!(m.update("c", &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn unseen_class_is_copied() {
        let mut m = ConsensusMemory::default();
        m.update("x", &[3.0], &[4.0]).unwrap();
        assert_eq!(m.get("x").unwrap(), &MemoryEntry { a: vec![3.0], b: vec![4.0] });
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(ConsensusMemory::new(1.0, 0.1).is_err());
        assert!(ConsensusMemory::new(0.1, 0.0).is_err());
    }

    #[test]
    fn coincident_positive_unit_negative() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let n = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let t = triplet_loss(&mut tape, a, a, n, 0.1, false).unwrap();
        assert!((tape.value(t).item() + 0.9).abs() < 1e-15);
        let t = triplet_loss(&mut tape, a, a, n, 0.1, true).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn single_class_loss_is_alpha() {
        let mut tape = Tape::<f64>::new();
        let mut m = ConsensusMemory::default();
        m.update("c", &[1.0, 2.0], &[0.5, 0.0]).unwrap();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, 0.0]).unwrap());
        let live = BTreeMap::from([("c".to_string(), (a, b))]);
        let l = mcm_loss(&mut tape, &["c".into()], &m, &live).unwrap();
        assert_eq!(tape.value(l).item(), 0.1);
    }

    #[test]
    fn memory_round_trips_through_tensors() {
        let mut m = ConsensusMemory::default();
        m.update("a", &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        m.update("b", &[5.0, 6.0], &[7.0, 8.0]).unwrap();
        let mut back = ConsensusMemory::default();
        back.load_from(&m.named_tensors()).unwrap();
        assert_eq!(back, m);
    }
}
