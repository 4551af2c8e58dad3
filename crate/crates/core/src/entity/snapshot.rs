//! Browsing: immutable deep copies of entity graphs.
//!
//! A [`Snapshot`] is a node table keyed by `(id, type)` in breadth-first
//! discovery order, starting at the root. The first reference to a node is the
//! edge that discovered it; every later reference to an already-visited node
//! is a back-reference. Cyclic graphs therefore produce finite snapshots.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use indexmap::IndexMap;

use super::{
    Capabilities, Entity, EntityError, EntityKey, EntityRef, Observer, OriginToken, PropertyKey, Subscription, Uri,
    Value,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotValue {
    Text(String),
    Integer(i64),
    Bytes(Vec<u8>),
    Ref(EntityKey),
}

impl SnapshotValue {
    fn from_value(value: &Value) -> Self {
        match value {
            Value::Text(s) => SnapshotValue::Text(s.clone()),
            Value::Integer(i) => SnapshotValue::Integer(*i),
            Value::Bytes(b) => SnapshotValue::Bytes(b.clone()),
            Value::Ref(e) => SnapshotValue::Ref(e.key()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotNode {
    pub capabilities: Capabilities,
    /// `None` when the node lies beyond the depth limit.
    pub properties: Option<Vec<(PropertyKey, SnapshotValue)>>,
}

impl SnapshotNode {
    pub fn get(&self, key: &str) -> Option<&SnapshotValue> {
        self.properties.as_ref()?.iter().find(|(k, _)| k.as_str() == key).map(|(_, v)| v)
    }

    fn same_properties(&self, other: &SnapshotNode) -> bool {
        match (&self.properties, &other.properties) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                if a.len() != b.len() {
                    return false;
                }
                let b: HashMap<&PropertyKey, &SnapshotValue> = b.iter().map(|(k, v)| (k, v)).collect();
                a.iter().all(|(k, v)| b.get(k) == Some(&v))
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("snapshot has no nodes")]
    Empty,
    #[error("duplicate node {0}")]
    DuplicateNode(EntityKey),
    #[error("reference to unknown node {0}")]
    DanglingRef(EntityKey),
    #[error("duplicate property {key} on {node}")]
    DuplicateProperty { node: EntityKey, key: PropertyKey },
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    root: EntityKey,
    nodes: IndexMap<EntityKey, SnapshotNode>,
}

impl Snapshot {
    /// Deep copy of everything reachable from `entity`. With `max_depth`,
    /// nodes at that distance from the root keep only id and type.
    pub fn capture<E: Entity + ?Sized>(entity: &E, max_depth: Option<usize>) -> Snapshot {
        Self::capture_inner(entity, max_depth, |_, _| {})
    }

    /// Like [`capture`](Self::capture), also returning a handle for every
    /// node reached through a reference.
    pub fn capture_with_refs<E: Entity + ?Sized>(
        entity: &E,
        max_depth: Option<usize>,
    ) -> (Snapshot, HashMap<EntityKey, EntityRef>) {
        let mut refs = HashMap::new();
        let snapshot = Self::capture_inner(entity, max_depth, |key, e| {
            refs.insert(key.clone(), e.clone());
        });
        (snapshot, refs)
    }

    fn capture_inner<E: Entity + ?Sized>(
        root: &E,
        max_depth: Option<usize>,
        mut on_node: impl FnMut(&EntityKey, &EntityRef),
    ) -> Snapshot {
        let expand = |depth: usize| max_depth.is_none_or(|m| depth < m);
        let root_key = root.key();
        let mut nodes = IndexMap::new();
        nodes.insert(root_key.clone(), SnapshotNode { capabilities: root.capabilities(), properties: None });
        let mut queue: VecDeque<(EntityKey, Option<EntityRef>, usize)> = VecDeque::new();
        if expand(0) {
            queue.push_back((root_key.clone(), None, 0));
        }
        while let Some((key, entity, depth)) = queue.pop_front() {
            let props = match &entity {
                Some(e) => e.properties(),
                None => root.properties(),
            };
            let mut out = Vec::with_capacity(props.len());
            for (k, v) in props {
                if let Value::Ref(child) = &v {
                    let child_key = child.key();
                    if !nodes.contains_key(&child_key) {
                        on_node(&child_key, child);
                        nodes.insert(
                            child_key.clone(),
                            SnapshotNode { capabilities: child.capabilities(), properties: None },
                        );
                        if expand(depth + 1) {
                            queue.push_back((child_key, Some(child.clone()), depth + 1));
                        }
                    }
                }
                out.push((k, SnapshotValue::from_value(&v)));
            }
            nodes[&key].properties = Some(out);
        }
        Snapshot { root: root_key, nodes }
    }

    /// Assembles a snapshot from a node table whose first entry is the root.
    pub fn from_nodes(nodes: Vec<(EntityKey, SnapshotNode)>) -> Result<Snapshot, SnapshotError> {
        let root = nodes.first().ok_or(SnapshotError::Empty)?.0.clone();
        let mut table = IndexMap::with_capacity(nodes.len());
        for (key, node) in nodes {
            if let Some(props) = &node.properties {
                let mut seen = HashSet::new();
                for (k, _) in props {
                    if !seen.insert(k) {
                        return Err(SnapshotError::DuplicateProperty { node: key, key: k.clone() });
                    }
                }
            }
            if table.contains_key(&key) {
                return Err(SnapshotError::DuplicateNode(key));
            }
            table.insert(key, node);
        }
        for node in table.values() {
            for (_, v) in node.properties.iter().flatten() {
                if let SnapshotValue::Ref(target) = v {
                    if !table.contains_key(target) {
                        return Err(SnapshotError::DanglingRef(target.clone()));
                    }
                }
            }
        }
        Ok(Snapshot { root, nodes: table })
    }

    pub fn root(&self) -> &EntityKey {
        &self.root
    }

    pub fn root_node(&self) -> &SnapshotNode {
        &self.nodes[&self.root]
    }

    pub fn node(&self, key: &EntityKey) -> Option<&SnapshotNode> {
        self.nodes.get(key)
    }

    /// Nodes in discovery order, root first.
    pub fn nodes(&self) -> impl Iterator<Item = (&EntityKey, &SnapshotNode)> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of references that point at an already-visited node.
    pub fn back_reference_count(&self) -> usize {
        let mut visited: HashSet<&EntityKey> = HashSet::from([&self.root]);
        let mut count = 0;
        for node in self.nodes.values() {
            for (_, v) in node.properties.iter().flatten() {
                if let SnapshotValue::Ref(target) = v {
                    if !visited.insert(target) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// Structural equality: same root, same node set, and per node the same
    /// property map. Capabilities and property order are not compared.
    pub fn same_as(&self, other: &Snapshot) -> bool {
        self.root == other.root
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().all(|(k, n)| other.nodes.get(k).is_some_and(|o| n.same_properties(o)))
    }

    /// Read-only entity view of the root node.
    pub fn materialize(self: &Arc<Self>) -> EntityRef {
        Arc::new(SnapshotEntity { snapshot: self.clone(), key: self.root.clone() })
    }

    /// Read-only entity view of any node.
    pub fn entity(self: &Arc<Self>, key: &EntityKey) -> Option<EntityRef> {
        self.nodes
            .contains_key(key)
            .then(|| Arc::new(SnapshotEntity { snapshot: self.clone(), key: key.clone() }) as EntityRef)
    }
}

/// Anything that can be browsed into a [`Snapshot`].
pub trait Browse {
    fn browse(&self) -> Cow<'_, Snapshot>;
}

impl Browse for Snapshot {
    fn browse(&self) -> Cow<'_, Snapshot> {
        Cow::Borrowed(self)
    }
}

impl<T: Entity + ?Sized> Browse for T {
    fn browse(&self) -> Cow<'_, Snapshot> {
        Cow::Owned(Snapshot::capture(self, None))
    }
}

impl<T: Browse + ?Sized> Browse for Arc<T> {
    fn browse(&self) -> Cow<'_, Snapshot> {
        (**self).browse()
    }
}

/// True iff both sides have the same id, type and property graph.
pub fn deep_equal<A: Browse + ?Sized, B: Browse + ?Sized>(a: &A, b: &B) -> bool {
    a.browse().same_as(&b.browse())
}

/// Immutable, unobservable entity backed by a snapshot node.
pub struct SnapshotEntity {
    snapshot: Arc<Snapshot>,
    key: EntityKey,
}

impl SnapshotEntity {
    fn node(&self) -> &SnapshotNode {
        &self.snapshot.nodes[&self.key]
    }

    fn resolve(&self, value: &SnapshotValue) -> Value {
        match value {
            SnapshotValue::Text(s) => Value::Text(s.clone()),
            SnapshotValue::Integer(i) => Value::Integer(*i),
            SnapshotValue::Bytes(b) => Value::Bytes(b.clone()),
            SnapshotValue::Ref(k) => {
                Value::Ref(Arc::new(SnapshotEntity { snapshot: self.snapshot.clone(), key: k.clone() }))
            }
        }
    }
}

impl Entity for SnapshotEntity {
    fn id(&self) -> &Uri {
        &self.key.id
    }

    fn entity_type(&self) -> &Uri {
        &self.key.entity_type
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::READ_ONLY
    }

    fn get(&self, key: &str) -> Option<Value> {
        self.node().get(key).map(|v| self.resolve(v))
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        self.node().properties.iter().flatten().map(|(k, v)| (k.clone(), self.resolve(v))).collect()
    }

    fn set(&self, _: &str, _: Value, _: &OriginToken) -> Result<(), EntityError> {
        Err(EntityError::NotChangeable)
    }

    fn remove(&self, _: &str, _: &OriginToken) -> Result<(), EntityError> {
        Err(EntityError::NotChangeable)
    }

    fn observe(&self, _: Observer) -> Result<Subscription, EntityError> {
        Err(EntityError::NotObservable)
    }

    fn key(&self) -> EntityKey {
        self.key.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::{platform_id, platform_type, MemoryEntity};

    fn o() -> OriginToken {
        OriginToken::new("t").unwrap()
    }

    fn node(n: &str) -> Arc<MemoryEntity> {
        MemoryEntity::new(platform_id("g", n), platform_type("node"))
    }

    #[test]
    fn leaf_snapshot_copies_id_type_properties() {
        let e = node("a");
        e.set("x", Value::Integer(1), &o()).unwrap();
        e.set("y", Value::Bytes(vec![1, 2]), &o()).unwrap();
        let s = Snapshot::capture(&*e, None);
        assert_eq!(s.root(), &e.key());
        assert_eq!(s.node_count(), 1);
        assert_eq!(s.root_node().get("x"), Some(&SnapshotValue::Integer(1)));
        assert_eq!(s.root_node().get("y"), Some(&SnapshotValue::Bytes(vec![1, 2])));
    }

    #[test]
    fn mutual_references_terminate_with_one_back_reference() {
        let a = node("a");
        let b = node("b");
        a.set("next", Value::Ref(b.clone()), &o()).unwrap();
        b.set("next", Value::Ref(a.clone()), &o()).unwrap();
        let s = Snapshot::capture(&*a, None);
        assert_eq!(s.node_count(), 2);
        assert_eq!(s.back_reference_count(), 1);
    }

    #[test]
    fn depth_zero_elides_properties() {
        let a = node("a");
        a.set("x", Value::Integer(1), &o()).unwrap();
        let s = Snapshot::capture(&*a, Some(0));
        assert_eq!(s.root(), &a.key());
        assert!(s.root_node().properties.is_none());
    }

    #[test]
    fn depth_one_keeps_children_as_stubs() {
        let a = node("a");
        let b = node("b");
        b.set("x", Value::Integer(1), &o()).unwrap();
        a.set("child", Value::Ref(b.clone()), &o()).unwrap();
        let s = Snapshot::capture(&*a, Some(1));
        assert!(s.root_node().properties.is_some());
        assert!(s.node(&b.key()).unwrap().properties.is_none());
    }

    #[test]
    fn materialized_snapshot_is_deep_equal() {
        let a = node("a");
        let b = node("b");
        a.set("name", Value::text("a"), &o()).unwrap();
        a.set("b", Value::Ref(b.clone()), &o()).unwrap();
        b.set("back", Value::Ref(a.clone()), &o()).unwrap();
        let s = Arc::new(Snapshot::capture(&*a, None));
        let view = s.materialize();
        assert!(deep_equal(&*view, &*s));
        assert!(deep_equal(&Snapshot::capture(&*view, None), &*s));
        assert_eq!(view.set("x", Value::Integer(1), &o()), Err(EntityError::NotChangeable));
    }

    #[test]
    fn deep_equal_detects_nested_difference() {
        let build = |v: i64| {
            let a = node("a");
            let b = node("b");
            b.set("v", Value::Integer(v), &o()).unwrap();
            a.set("b", Value::Ref(b), &o()).unwrap();
            a
        };
        let x = build(1);
        assert!(deep_equal(&*x, &*x));
        assert!(deep_equal(&*build(1), &*build(1)));
        assert!(!deep_equal(&*build(1), &*build(2)));
    }

    #[test]
    fn from_nodes_rejects_dangling_refs() {
        let a = platform_id("g", "a");
        let t = platform_type("node");
        let missing = EntityKey::new(platform_id("g", "zzz"), t.clone());
        let err = Snapshot::from_nodes(vec![(
            EntityKey::new(a, t),
            SnapshotNode {
                capabilities: Capabilities::FULL,
                properties: Some(vec![(PropertyKey::new("r").unwrap(), SnapshotValue::Ref(missing.clone()))]),
            },
        )])
        .unwrap_err();
        assert_eq!(err, SnapshotError::DanglingRef(missing));
    }
}
