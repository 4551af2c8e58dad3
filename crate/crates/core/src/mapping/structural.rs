use std::collections::HashMap;
use std::sync::{Arc, Weak};

use parking_lot::{Mutex, ReentrantMutex};

use super::{property_key, Diagnostic, MappingError, StructuralRules, Transform, TypeRule};
use crate::entity::{
    Capabilities, ChangeEvent, DeepWatch, Entity, EntityError, EntityKey, EntityRef, MemoryEntity, OriginToken,
    PropertyKey, Value, WriteHook,
};

/// A target model kept in sync with its source.
pub struct MappedModel {
    inner: Arc<Inner>,
    target_root: Arc<MemoryEntity>,
    watch: Mutex<Option<DeepWatch>>,
}

struct Inner {
    rules: StructuralRules,
    origin: OriginToken,
    // sequential context: at most one propagation or write-back at a time
    ctx: ReentrantMutex<()>,
    tables: Mutex<Tables>,
    diagnostics: Mutex<Vec<Diagnostic>>,
}

#[derive(Default)]
struct Tables {
    targets: HashMap<EntityKey, Arc<MemoryEntity>>,
    sources: HashMap<EntityKey, EntityRef>,
}

/// Derives the target model of `source_root` and keeps it synchronized in
/// both directions until the returned model is stopped or dropped.
pub fn derive(rules: StructuralRules, source_root: EntityRef) -> Result<MappedModel, MappingError> {
    rules.validate()?;
    if rules.rule_for(source_root.entity_type()).is_none() {
        return Err(MappingError::RuleMissing(source_root.entity_type().clone()));
    }
    let origin = OriginToken::new(format!("mapper:{}", rules.name)).expect("validated non-empty name");
    let inner = Arc::new(Inner {
        rules,
        origin,
        ctx: ReentrantMutex::new(()),
        tables: Mutex::new(Tables::default()),
        diagnostics: Mutex::new(Vec::new()),
    });
    let guard = inner.ctx.lock();
    // watch first so nothing between the initial read and the subscription
    // is lost; concurrent events wait on the context until the model exists
    let weak = Arc::downgrade(&inner);
    let watch = DeepWatch::new(
        &source_root,
        Arc::new(move |event: &ChangeEvent| {
            if let Some(inner) = weak.upgrade() {
                inner.propagate_forward(event);
            }
        }),
    );
    let mut touched = Vec::new();
    let target_root = inner.map_entity(&source_root, &mut touched).expect("root rule checked above");
    drop(guard);
    flush(touched);
    tracing::info!(
        mapper = %inner.rules.name,
        root = %target_root.id(),
        entities = inner.tables.lock().targets.len(),
        "model derived"
    );
    Ok(MappedModel { inner, target_root, watch: Mutex::new(Some(watch)) })
}

fn flush(touched: Vec<Arc<MemoryEntity>>) {
    for t in touched {
        t.flush();
    }
}

impl Inner {
    /// Target entity for `source`, created and filled if new. `None` when the
    /// source type has no rule.
    fn map_entity(
        self: &Arc<Self>,
        source: &EntityRef,
        touched: &mut Vec<Arc<MemoryEntity>>,
    ) -> Option<Arc<MemoryEntity>> {
        let mut work = Vec::new();
        let target = self.target_of(source, &mut work)?;
        self.fill(work, touched);
        Some(target)
    }

    /// Copies the properties of newly created targets from their sources.
    fn fill(self: &Arc<Self>, mut work: Vec<(EntityRef, Arc<MemoryEntity>)>, touched: &mut Vec<Arc<MemoryEntity>>) {
        while let Some((src, tgt)) = work.pop() {
            let rule = self.rules.rule_for(src.entity_type()).expect("only ruled entities are queued");
            for (k, v) in src.properties() {
                if let Some((tk, tv)) = self.map_property(rule, &src, k.as_str(), &v, &mut work) {
                    tgt.apply_deferred(&tk, Some(tv), &self.origin);
                }
            }
            touched.push(tgt);
        }
    }

    fn target_of(
        self: &Arc<Self>,
        source: &EntityRef,
        work: &mut Vec<(EntityRef, Arc<MemoryEntity>)>,
    ) -> Option<Arc<MemoryEntity>> {
        let key = source.key();
        if let Some(t) = self.tables.lock().targets.get(&key) {
            return Some(t.clone());
        }
        let Some(rule) = self.rules.rule_for(&key.entity_type) else {
            self.diagnose(Diagnostic::RuleMissing { entity: key.id.clone(), source_type: key.entity_type.clone() });
            return None;
        };
        let weak: Weak<Inner> = Arc::downgrade(self);
        let hook: WriteHook =
            Arc::new(move |target: &EntityKey, k: &PropertyKey, v: Option<Value>, o: &OriginToken| {
                match weak.upgrade() {
                    Some(inner) => inner.write_back(target, k, v, o),
                    None => Err(EntityError::Rejected("mapper stopped".into())),
                }
            });
        let caps = Capabilities { observable: true, changeable: source.capabilities().changeable };
        let target = MemoryEntity::builder(self.rules.id_rewrite.apply(&key.id), rule.target_type.clone())
            .capabilities(caps)
            .write_hook(hook)
            .build();
        let mut tables = self.tables.lock();
        tables.targets.insert(key, target.clone());
        tables.sources.insert(target.key(), source.clone());
        drop(tables);
        work.push((source.clone(), target.clone()));
        Some(target)
    }

    /// Target key and value for one source property, or `None` if it is not
    /// part of the target model.
    fn map_property(
        self: &Arc<Self>,
        rule: &TypeRule,
        source: &EntityRef,
        key: &str,
        value: &Value,
        work: &mut Vec<(EntityRef, Arc<MemoryEntity>)>,
    ) -> Option<(PropertyKey, Value)> {
        let key_rule = rule.by_source_key(key);
        let target_key = match (key_rule, value) {
            (Some(kr), _) => property_key(&kr.target),
            // unmapped references to ruled entities keep their key
            (None, Value::Ref(_)) => property_key(key),
            (None, _) => return None,
        };
        let mapped = match value {
            Value::Ref(child) => match key_rule.map(|kr| &kr.transform) {
                None | Some(Transform::Identity) => self.target_of(child, work).map(|t| Value::Ref(t as EntityRef)),
                Some(_) => None,
            },
            scalar => key_rule.and_then(|kr| kr.transform.forward(scalar)),
        };
        match mapped {
            Some(v) => Some((target_key, v)),
            None => {
                if !matches!(value, Value::Ref(_)) {
                    self.diagnose(Diagnostic::Untransformable {
                        entity: source.id().clone(),
                        key: key.to_owned(),
                        value: format!("{value:?}"),
                    });
                }
                None
            }
        }
    }

    fn propagate_forward(self: &Arc<Self>, event: &ChangeEvent) {
        // our own write-backs are applied to the target directly
        if event.origin == self.origin {
            return;
        }
        let guard = self.ctx.lock();
        let Some(target) = self.tables.lock().targets.get(&event.entity).cloned() else { return };
        let source = self.tables.lock().sources.get(&target.key()).cloned().expect("tables are paired");
        let rule = self.rules.rule_for(&event.entity.entity_type).expect("mapped entities have rules");
        let is_ref = |v: &Option<Value>| matches!(v, Some(Value::Ref(_)));
        let target_key = match rule.by_source_key(event.key.as_str()) {
            Some(kr) => property_key(&kr.target),
            None if is_ref(&event.old_value) || is_ref(&event.new_value) => event.key.clone(),
            None => return,
        };
        let mut work = Vec::new();
        // the current source value, not the event's: a stale event delivered
        // after a newer write-back must not roll the target back. A failed
        // read falls back to the event; a later event corrects it if needed.
        let current = match &event.new_value {
            Some(v) => Some(source.get(event.key.as_str()).unwrap_or_else(|| v.clone())),
            None => source.get(event.key.as_str()),
        };
        let mapped = current
            .as_ref()
            .and_then(|v| self.map_property(rule, &source, event.key.as_str(), v, &mut work))
            .map(|(_, v)| v);
        let mut touched = Vec::new();
        // new entities are complete before they become reachable
        self.fill(work, &mut touched);
        target.apply_deferred(&target_key, mapped, &self.origin);
        touched.push(target);
        drop(guard);
        flush(touched);
    }

    fn write_back(
        self: &Arc<Self>,
        target_key: &EntityKey,
        key: &PropertyKey,
        value: Option<Value>,
        origin: &OriginToken,
    ) -> Result<(), EntityError> {
        let guard = self.ctx.lock();
        let (target, source) = {
            let tables = self.tables.lock();
            let source = tables
                .sources
                .get(target_key)
                .cloned()
                .ok_or_else(|| EntityError::Rejected("unknown entity".into()))?;
            (tables.targets.get(&source.key()).cloned().expect("tables are paired"), source)
        };
        let rule = self.rules.rule_for(source.entity_type()).expect("mapped entities have rules");
        let Some(kr) = rule.by_target_key(key.as_str()) else {
            return Err(EntityError::Rejected(format!("{key} has no source mapping")));
        };
        let source_value = match &value {
            None => None,
            Some(Value::Ref(t)) => {
                let s = self.tables.lock().sources.get(&t.key()).cloned();
                match (s, &kr.transform) {
                    (Some(s), Transform::Identity) => Some(Value::Ref(s)),
                    _ => return Err(EntityError::InvalidValue(format!("{key}: reference outside the mapped model"))),
                }
            }
            Some(v) => Some(
                kr.transform
                    .inverse(v)
                    .ok_or_else(|| EntityError::InvalidValue(format!("{key}: {v:?} has no source value")))?,
            ),
        };
        match source_value {
            Some(v) => source.set(&kr.source, v, &self.origin)?,
            None => source.remove(&kr.source, &self.origin)?,
        }
        // the source may normalize what it was given; mirror what it holds
        let mut work = Vec::new();
        let current = source
            .get(&kr.source)
            .and_then(|v| self.map_property(rule, &source, &kr.source, &v, &mut work))
            .map(|(_, v)| v);
        let mut touched = Vec::new();
        self.fill(work, &mut touched);
        target.apply_deferred(key, current, origin);
        touched.push(target);
        drop(guard);
        flush(touched);
        Ok(())
    }

    fn diagnose(&self, d: Diagnostic) {
        tracing::warn!(mapper = %self.rules.name, diagnostic = ?d, "mapping diagnostic");
        let mut diags = self.diagnostics.lock();
        if !diags.contains(&d) {
            diags.push(d);
        }
    }
}

impl MappedModel {
    pub fn name(&self) -> &str {
        &self.inner.rules.name
    }

    pub fn rules(&self) -> &StructuralRules {
        &self.inner.rules
    }

    pub fn origin(&self) -> &OriginToken {
        &self.inner.origin
    }

    pub fn target_root(&self) -> EntityRef {
        self.target_root.clone()
    }

    pub fn target_for(&self, source: &EntityKey) -> Option<EntityRef> {
        self.inner.tables.lock().targets.get(source).map(|t| t.clone() as EntityRef)
    }

    pub fn source_for(&self, target: &EntityKey) -> Option<EntityRef> {
        self.inner.tables.lock().sources.get(target).cloned()
    }

    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        self.inner.diagnostics.lock().clone()
    }

    /// Stops forward propagation. Writes to the target still reach the source.
    pub fn stop(&self) {
        if let Some(w) = self.watch.lock().take() {
            w.cancel();
        }
    }
}

impl Drop for MappedModel {
    fn drop(&mut self) {
        self.stop();
    }
}

impl std::fmt::Debug for MappedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MappedModel").field("name", &self.name()).field("root", &self.target_root.key()).finish()
    }
}

/// Mappers applied one after the other, each to the previous target.
pub struct ChainedModel {
    stages: Vec<MappedModel>,
}

pub fn chain(source_root: EntityRef, stages: Vec<StructuralRules>) -> Result<ChainedModel, MappingError> {
    let mut built: Vec<MappedModel> = Vec::with_capacity(stages.len());
    let mut root = source_root;
    for rules in stages {
        let stage = derive(rules, root)?;
        root = stage.target_root();
        built.push(stage);
    }
    Ok(ChainedModel { stages: built })
}

impl ChainedModel {
    /// Target of the last stage; `None` without stages.
    pub fn target_root(&self) -> Option<EntityRef> {
        self.stages.last().map(|s| s.target_root())
    }

    pub fn stages(&self) -> &[MappedModel] {
        &self.stages
    }
}

impl Drop for ChainedModel {
    fn drop(&mut self) {
        for s in self.stages.iter().rev() {
            s.stop();
        }
    }
}
