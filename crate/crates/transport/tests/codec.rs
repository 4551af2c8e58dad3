use opendip_core::{Capabilities, EntityKey, Uri};
use opendip_transport::message::{WireError, WireEvent, WireKind, WireNode, WireProperty, WireValue};
use opendip_transport::{Codec, ErrorCode, WireMessage};
use proptest::prelude::*;

fn uri() -> impl Strategy<Value = Uri> {
    ("[a-z][a-z0-9+.-]{0,5}", "[A-Za-z0-9/#._~%-]{1,20}").prop_map(|(s, r)| Uri::parse(format!("{s}:{r}")).unwrap())
}

fn key() -> impl Strategy<Value = EntityKey> {
    (uri(), uri()).prop_map(|(i, t)| EntityKey::new(i, t))
}

fn text() -> impl Strategy<Value = String> {
    // includes quotes, escapes, non-ASCII and control characters
    "(?s).{0,24}"
}

fn value() -> impl Strategy<Value = WireValue> {
    prop_oneof![
        text().prop_map(WireValue::Text),
        any::<i64>().prop_map(WireValue::Int),
        proptest::collection::vec(any::<u8>(), 0..32).prop_map(WireValue::Bytes),
        key().prop_map(WireValue::Ref),
    ]
}

fn caps() -> impl Strategy<Value = Capabilities> {
    (any::<bool>(), any::<bool>()).prop_map(|(observable, changeable)| Capabilities { observable, changeable })
}

fn prop_key() -> impl Strategy<Value = String> {
    "[a-z:_/-]{1,12}"
}

fn node() -> impl Strategy<Value = WireNode> {
    (
        uri(),
        uri(),
        caps(),
        proptest::option::of(proptest::collection::vec(
            (prop_key(), value()).prop_map(|(key, value)| WireProperty { key, value }),
            0..5,
        )),
    )
        .prop_map(|(id, entity_type, capabilities, properties)| WireNode {
            id,
            entity_type,
            capabilities,
            properties,
        })
}

fn event() -> impl Strategy<Value = WireEvent> {
    (key(), prop_key(), value(), value(), 0..3u8, "[a-z:-]{1,10}").prop_map(|(entity, key, a, b, kind, origin)| {
        let (kind, old_value, new_value) = match kind {
            0 => (WireKind::Added, None, Some(b)),
            1 => {
                // updates must change the value
                let b = if a == b { distinct_from(&a) } else { b };
                (WireKind::Updated, Some(a), Some(b))
            }
            _ => (WireKind::Removed, Some(a), None),
        };
        WireEvent { entity, key, kind, old_value, new_value, origin }
    })
}

fn distinct_from(v: &WireValue) -> WireValue {
    match v {
        WireValue::Int(i) => WireValue::Int(i.wrapping_add(1)),
        _ => WireValue::Int(0),
    }
}

fn code() -> impl Strategy<Value = ErrorCode> {
    prop_oneof![
        Just(ErrorCode::Forbidden),
        Just(ErrorCode::StaleTarget),
        Just(ErrorCode::Protocol),
        Just(ErrorCode::VersionMismatch),
        Just(ErrorCode::Shutdown),
        Just(ErrorCode::NotChangeable),
        Just(ErrorCode::Rejected),
        "x-[a-z]{1,6}".prop_map(ErrorCode::Other),
    ]
}

fn message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (any::<u32>(), text()).prop_map(|(version, peer_name)| WireMessage::Hello { version, peer_name }),
        proptest::option::of(uri().prop_map(|u| u.to_string()))
            .prop_map(|model_uri| WireMessage::RegistryRequest { model_uri }),
        (proptest::option::of(uri().prop_map(|u| u.to_string())), key())
            .prop_map(|(model_uri, root)| WireMessage::RootAnnounce { model_uri, root }),
        (key(), any::<bool>())
            .prop_map(|(target, include_descendants)| WireMessage::Subscribe { target, include_descendants }),
        key().prop_map(|target| WireMessage::Unsubscribe { target }),
        proptest::collection::vec(node(), 1..5).prop_map(|nodes| WireMessage::EntityState { nodes }),
        (any::<u64>(), event()).prop_map(|(correlation, event)| WireMessage::Change { correlation, event }),
        (any::<u64>(), key(), prop_key(), proptest::option::of(value()), "[a-z:-]{1,10}").prop_map(
            |(correlation, target, key, value, origin)| WireMessage::Set { correlation, target, key, value, origin }
        ),
        (any::<u64>(), proptest::option::of((code(), text()))).prop_map(|(correlation, err)| {
            WireMessage::SetResult {
                correlation,
                outcome: match err {
                    None => Ok(()),
                    Some((code, detail)) => Err(WireError { code, detail }),
                },
            }
        }),
        (code(), text()).prop_map(|(code, detail)| WireMessage::Error { code, detail }),
        any::<u64>().prop_map(|nonce| WireMessage::Ping { nonce }),
        any::<u64>().prop_map(|nonce| WireMessage::Pong { nonce }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn json_round_trip_is_structural(msg in message()) {
        let bytes = Codec::Json.encode(&msg);
        prop_assert_eq!(bytes.first(), Some(&b'{'));
        let back = Codec::Json.decode(&bytes).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn binary_round_trip_is_byte_exact(msg in message()) {
        let bytes = Codec::Binary.encode(&msg);
        let back = Codec::Binary.decode(&bytes).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(Codec::Binary.encode(&back), bytes);
    }

    #[test]
    fn truncated_binary_is_rejected(msg in message(), cut in any::<prop::sample::Index>()) {
        let bytes = Codec::Binary.encode(&msg);
        let n = cut.index(bytes.len());
        prop_assert!(Codec::Binary.decode(&bytes[..n]).is_err());
    }
}

#[test]
fn json_field_names() {
    let msg = WireMessage::Change {
        correlation: 7,
        event: WireEvent {
            entity: EntityKey::new(Uri::parse("urn:x:1").unwrap(), Uri::parse("urn:t:a").unwrap()),
            key: "status".into(),
            kind: WireKind::Updated,
            old_value: Some(WireValue::Text("Open".into())),
            new_value: Some(WireValue::Bytes(vec![0xff, 0x00])),
            origin: "ui".into(),
        },
    };
    let json: serde_json::Value = serde_json::from_slice(&Codec::Json.encode(&msg)).unwrap();
    assert_eq!(
        json,
        serde_json::json!({
            "type": "CHANGE",
            "correlation": 7,
            "event": {
                "entity": {"id": "urn:x:1", "type": "urn:t:a"},
                "key": "status",
                "kind": "updated",
                "old_value": {"t": "text", "v": "Open"},
                "new_value": {"t": "bytes", "v": "/wA="},
                "origin": "ui"
            }
        })
    );
    let set_result = WireMessage::SetResult {
        correlation: 1,
        outcome: Err(WireError { code: ErrorCode::StaleTarget, detail: "gone".into() }),
    };
    let json: serde_json::Value = serde_json::from_slice(&Codec::Json.encode(&set_result)).unwrap();
    assert_eq!(
        json,
        serde_json::json!({"type": "SET_RESULT", "correlation": 1, "ok": false,
            "error": {"code": "stale-target", "detail": "gone"}})
    );
}

#[test]
fn json_decoding_is_checked() {
    let bad = [
        r#"{"type":"NOPE"}"#,
        r#"{"type":"PING"}"#,
        r#"{"type":"SUBSCRIBE","target":{"id":"not a uri","type":"urn:t"}}"#,
        r#"{"type":"SET_RESULT","correlation":1,"ok":false}"#,
        r#"{"type":"ENTITY_STATE","nodes":[]}"#,
        r#"{"type":"CHANGE","correlation":1,"event":{"entity":{"id":"urn:a","type":"urn:t"},"key":"k","kind":"added","old_value":{"t":"int","v":1},"new_value":null,"origin":"o"}}"#,
        r#"{"type":"SET","correlation":1,"target":{"id":"urn:a","type":"urn:t"},"key":"","value":null,"origin":"o"}"#,
    ];
    for b in bad {
        assert!(Codec::Json.decode(b.as_bytes()).is_err(), "accepted {b}");
    }
    // include_descendants defaults to true
    let m = Codec::Json.decode(br#"{"type":"SUBSCRIBE","target":{"id":"urn:a","type":"urn:t"}}"#).unwrap();
    assert!(matches!(m, WireMessage::Subscribe { include_descendants: true, .. }));
}
