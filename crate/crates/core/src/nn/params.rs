use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::seed::Rng;

/// Which part of a model a parameter (or buffer) belongs to. Adapters select
/// the subset they are allowed to touch by tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroupTag {
    SharedBackbone,
    ClassHead,
    PretextHead,
    BnAffine,
    BnStats,
    Other,
}

impl ParamGroupTag {
    pub const ALL: [ParamGroupTag; 6] = [
        ParamGroupTag::SharedBackbone,
        ParamGroupTag::ClassHead,
        ParamGroupTag::PretextHead,
        ParamGroupTag::BnAffine,
        ParamGroupTag::BnStats,
        ParamGroupTag::Other,
    ];

    pub fn code(self) -> u8 {
        match self {
            ParamGroupTag::SharedBackbone => 0,
            ParamGroupTag::ClassHead => 1,
            ParamGroupTag::PretextHead => 2,
            ParamGroupTag::BnAffine => 3,
            ParamGroupTag::BnStats => 4,
            ParamGroupTag::Other => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Buffers are never optimized.
    pub fn is_trainable(self) -> bool {
        self != ParamGroupTag::BnStats
    }
}

impl fmt::Display for ParamGroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroupTag::SharedBackbone => "shared_backbone",
            ParamGroupTag::ClassHead => "class_head",
            ParamGroupTag::PretextHead => "pretext_head",
            ParamGroupTag::BnAffine => "bn_affine",
            ParamGroupTag::BnStats => "bn_stats",
            ParamGroupTag::Other => "other",
        };
        f.write_str(s)
    }
}

pub type TagSet = BTreeSet<ParamGroupTag>;

pub fn tags(list: &[ParamGroupTag]) -> TagSet {
    list.iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: ParamGroupTag,
    pub value: Tensor,
}

/// Flat, ordered store of every parameter and buffer in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tag: ParamGroupTag, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tag, value });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialized weight.
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        tag: ParamGroupTag,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, tag, Tensor::new(shape.to_vec(), data))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight, the usual linear-layer init.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        tag: ParamGroupTag,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, tag, Tensor::new(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_tags(&self, allowed: &TagSet) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| allowed.contains(&p.tag)).map(|(id, _)| id).collect()
    }

    pub fn count_with_tag(&self, tag: ParamGroupTag) -> usize {
        self.params.iter().filter(|p| p.tag == tag).count()
    }

    /// Tags of every entry whose value differs (bitwise) from `other`.
    pub fn changed_tags(&self, other: &ParamStore) -> TagSet {
        self.changed(other).into_iter().map(|(_, tag)| tag).collect()
    }

    /// Names and tags of entries whose values differ bitwise from `other`.
    pub fn changed(&self, other: &ParamStore) -> Vec<(String, ParamGroupTag)> {
        assert_eq!(self.params.len(), other.params.len(), "stores from different models");
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| {
                a.value.shape() != b.value.shape()
                    || a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .map(|(a, _)| (a.name.clone(), a.tag))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
