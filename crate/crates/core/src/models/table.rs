use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::seqspace::{prefix_key, Sequence, Token};

/// Sparse per-(context, prefix) storage. Absent keys take the owner's default.
/// Iteration is always in (context, prefix) order.
///
/// Serializes as `{"<ctx>": {"<dash-joined prefix>": value}}` with keys in
/// sorted order; the empty prefix is the empty string.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTable<V> {
    per_ctx: Vec<BTreeMap<Vec<Token>, V>>,
}

impl<V> PrefixTable<V> {
    pub fn new(contexts: u32) -> Self {
        Self { per_ctx: (0..contexts).map(|_| BTreeMap::new()).collect() }
    }

    pub fn contexts(&self) -> u32 {
        self.per_ctx.len() as u32
    }

    pub fn get(&self, ctx: u32, prefix: &[Token]) -> Option<&V> {
        self.per_ctx.get(ctx as usize)?.get(prefix)
    }

    pub fn get_mut(&mut self, ctx: u32, prefix: &[Token]) -> Option<&mut V> {
        self.per_ctx.get_mut(ctx as usize)?.get_mut(prefix)
    }

    pub fn insert(&mut self, ctx: u32, prefix: Vec<Token>, value: V) {
        self.per_ctx[ctx as usize].insert(prefix, value);
    }

    pub fn entry_or_insert_with(&mut self, ctx: u32, prefix: &[Token], f: impl FnOnce() -> V) -> &mut V {
        let map = &mut self.per_ctx[ctx as usize];
        if !map.contains_key(prefix) {
            map.insert(prefix.to_vec(), f());
        }
        map.get_mut(prefix).expect("just inserted")
    }

    pub fn len(&self) -> usize {
        self.per_ctx.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries sorted by (context, prefix).
    pub fn sorted_entries(&self) -> Vec<(u32, &[Token], &V)> {
        self.iter().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[Token], &V)> {
        self.per_ctx
            .iter()
            .enumerate()
            .flat_map(|(c, m)| m.iter().map(move |(k, v)| (c as u32, k.as_slice(), v)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (u32, &[Token], &mut V)> {
        self.per_ctx
            .iter_mut()
            .enumerate()
            .flat_map(|(c, m)| m.iter_mut().map(move |(k, v)| (c as u32, k.as_slice(), v)))
    }
}

impl<V: Serialize> Serialize for PrefixTable<V> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut outer: BTreeMap<String, BTreeMap<String, &V>> = BTreeMap::new();
        for (c, m) in self.per_ctx.iter().enumerate() {
            let inner = outer.entry(c.to_string()).or_default();
            for (k, v) in m {
                inner.insert(prefix_key(k), v);
            }
        }
        outer.serialize(serializer)
    }
}

impl<'de, V: DeserializeOwned> Deserialize<'de> for PrefixTable<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let outer: BTreeMap<String, BTreeMap<String, V>> = BTreeMap::deserialize(deserializer)?;
        let mut ctx_ids = Vec::with_capacity(outer.len());
        for k in outer.keys() {
            ctx_ids.push(k.parse::<u32>().map_err(|_| D::Error::custom(format!("bad context id '{k}'")))?);
        }
        let contexts = ctx_ids.iter().copied().max().map_or(0, |m| m + 1);
        let mut table = PrefixTable::new(contexts);
        for (ctx, (_, inner)) in ctx_ids.into_iter().zip(outer) {
            for (k, v) in inner {
                let seq: Sequence = k.parse().map_err(D::Error::custom)?;
                table.insert(ctx, seq.0, v);
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layout() {
        let mut t: PrefixTable<f64> = PrefixTable::new(2);
        t.insert(0, vec![], 0.5);
        t.insert(0, vec![1, 0], -1.0);
        t.insert(1, vec![3], 2.0);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"0":{"":0.5,"1-0":-1.0},"1":{"3":2.0}}"#);
        let back: PrefixTable<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn sorted_entries_are_ordered() {
        let mut t: PrefixTable<u8> = PrefixTable::new(2);
        t.insert(1, vec![0], 1);
        t.insert(0, vec![2], 2);
        t.insert(0, vec![1, 1], 3);
        let keys: Vec<_> = t.sorted_entries().into_iter().map(|(c, k, _)| (c, k.to_vec())).collect();
        assert_eq!(keys, vec![(0, vec![1, 1]), (0, vec![2]), (1, vec![0])]);
    }
}
