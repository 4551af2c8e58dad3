//! Names used by the shipped tool-neutral models.

pub const CM_CHANGE_REQUEST: &str = "http://open-services.net/ns/cm#ChangeRequest";
pub const CM_CHANGE_REQUESTS: &str = "urn:opendip:type/cm/change-requests";
pub const AUTO_PLAN: &str = "http://open-services.net/ns/auto#AutomationPlan";
pub const AUTO_RESULT: &str = "http://open-services.net/ns/auto#AutomationResult";

pub const DCTERMS_TITLE: &str = "dcterms:title";
pub const DCTERMS_CREATED: &str = "dcterms:created";
pub const DCTERMS_IDENTIFIER: &str = "dcterms:identifier";
pub const CM_STATUS: &str = "oslc_cm:status";
pub const AUTO_VERDICT: &str = "oslc_auto:verdict";
pub const AUTO_RESULTS: &str = "oslc_auto:results";

pub const EVENT_LOG_TYPE: &str = "urn:opendip:type/event-model";
pub const EVENT_TYPE: &str = "urn:opendip:type/event";
pub const EVENT_TIMESTAMP: &str = "timestamp";
pub const EVENT_KIND: &str = "kind";
pub const EVENT_SUMMARY: &str = "summary";
pub const EVENT_SOURCE_MODEL: &str = "source-model";
pub const EVENT_SUBJECT: &str = "subject";

pub const MODEL_ISSUES: &str = "urn:opendip:model/issues";
pub const MODEL_BUILDS: &str = "urn:opendip:model/builds";
pub const MODEL_CHANGE_MANAGEMENT: &str = "urn:opendip:model/change-management";
pub const MODEL_AUTOMATION: &str = "urn:opendip:model/automation";
pub const MODEL_EVENTS: &str = "urn:opendip:model/events";

/// Kinds produced by the shipped event rules.
pub const EVENT_KINDS: [&str; 4] =
    ["change-request-created", "change-request-status-changed", "build-succeeded", "build-failed"];
