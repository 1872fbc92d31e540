mod common;

use common::*;
use hyper::StatusCode;
use serde_json::json;

#[tokio::test]
async fn lists_catalog_and_profiles() {
    let mut setup = Setup::shipped();
    setup.config.default_profile = Some("dswaney".into());
    let proxy = setup.start(None).await;
    let (status, catalog) = admin_get(proxy.admin_addr, "/api/transformations").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = catalog.as_array().unwrap().iter().map(|d| d["id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"JPG->GIF") && ids.contains(&"JP2->JPG"), "{ids:?}");
    let jp2 = catalog.as_array().unwrap().iter().find(|d| d["id"] == "JP2->JPG").unwrap();
    assert_eq!(jp2["source_mime"], "image/jp2");
    assert_eq!(jp2["translator"], "TRExternal");

    let (_, profiles) = admin_get(proxy.admin_addr, "/api/profiles").await;
    let profiles = profiles.as_array().unwrap();
    assert_eq!(profiles.len(), 2);
    assert_eq!(profiles[0]["id"], "dswaney");
    assert_eq!(profiles[0]["rules"], json!(["JPG->GIF", "XBM->PNG", "GIF->BMP"]));
    assert_eq!(profiles[0]["is_default"], true);
    assert_eq!(profiles[1]["is_default"], false);

    let (status, err) = admin_get(proxy.admin_addr, "/api/profiles/ghost").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "not-found");
}

#[tokio::test]
async fn put_patch_delete_round_trip_and_persist() {
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;

    let (status, created) =
        admin_call(admin, "PUT", "/api/profiles/kim", Some(json!({"rules": ["XBM->PNG"]})), &[]).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["rules"], json!(["XBM->PNG"]));
    let v1 = created["version"].as_str().unwrap().to_string();

    // Read your writes.
    let (_, fetched) = admin_get(admin, "/api/profiles/kim").await;
    assert_eq!(fetched, created);

    let (status, patched) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/kim",
        Some(json!({"add": ["JPG->GIF", "GIF->BMP"], "version": v1})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{patched}");
    assert_eq!(patched["rules"], json!(["XBM->PNG", "JPG->GIF", "GIF->BMP"]));
    let v2 = patched["version"].as_str().unwrap().to_string();
    assert_ne!(v1, v2);

    let on_disk = std::fs::read_to_string(setup.profiles_path()).unwrap();
    assert!(on_disk.contains("id=\"kim\""), "{on_disk}");

    // The persisted file loads back identically.
    let (status, summary) = admin_call(admin, "POST", "/api/reload", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary["profiles"], 3);
    let (_, after) = admin_get(admin, "/api/profiles/kim").await;
    assert_eq!(after["rules"], patched["rules"]);
    assert_eq!(after["version"], v2.as_str());

    let etag = format!("\"{v2}\"");
    let (status, _) = admin_call(admin, "DELETE", "/api/profiles/kim", None, &[("if-match", &etag)]).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = admin_get(admin, "/api/profiles/kim").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stale_or_missing_version_conflicts() {
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;
    let (_, doc) = admin_get(admin, "/api/profiles/mln").await;
    let version = doc["version"].as_str().unwrap().to_string();

    let (status, err) = admin_call(admin, "PUT", "/api/profiles/mln", Some(json!({"rules": []})), &[]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "version-conflict");

    let (status, _) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/mln",
        Some(json!({"remove": ["GIF->PNG"], "version": "0000000000000000"})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let etag = format!("\"{version}\"");
    let (status, doc) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/mln",
        Some(json!({"remove": ["GIF->PNG"]})),
        &[("if-match", &etag)],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["rules"], json!(["JP2->JPG"]));

    // The first writer won; the old token is now stale.
    let (status, _) =
        admin_call(admin, "PUT", "/api/profiles/mln", Some(json!({"rules": [], "version": version})), &[]).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn invalid_edits_are_422_with_reason() {
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;

    let (status, err) =
        admin_call(admin, "PUT", "/api/profiles/x", Some(json!({"rules": ["GIF->BMP", "GIF->PNG"]})), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "ambiguous-source");

    let (status, err) = admin_call(admin, "PUT", "/api/profiles/x", Some(json!({"rules": ["NOPE"]})), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "unknown-rule");

    let (_, doc) = admin_get(admin, "/api/profiles/mln").await;
    let v = doc["version"].as_str().unwrap();
    let (status, err) =
        admin_call(admin, "PATCH", "/api/profiles/mln", Some(json!({"add": ["GIF->BMP"], "version": v})), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "ambiguous-source");
    assert!(err["detail"].as_str().unwrap().contains("image/gif"), "{err}");

    let (status, err) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/mln",
        Some(json!({"add": ["GIF->BMP"], "remove": ["GIF->BMP"], "version": v})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "invalid-request");

    let (status, err) = admin_call(admin, "PUT", "/api/profiles/x", Some(json!({"rulez": []})), &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "invalid-request");

    // Nothing above changed the stored profile.
    let (_, after) = admin_get(admin, "/api/profiles/mln").await;
    assert_eq!(after, doc);
}

#[tokio::test]
async fn edits_steer_the_next_proxied_request() {
    let origin = Origin::start().await;
    let xbm = "#define a_width 1\n#define a_height 1\nstatic char a_bits[] = { 0x01 };\n";
    origin.serve("/a.xbm", Resource::new("image/x-xbitmap", xbm));
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;

    assert_eq!(get_via(proxy.proxy_addr, &origin.url("/a.xbm"), Some("dswaney")).await.content_type(), "image/png");

    let (_, doc) = admin_get(admin, "/api/profiles/dswaney").await;
    let (status, doc) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/dswaney",
        Some(json!({"remove": ["XBM->PNG"], "version": doc["version"]})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let off = get_via(proxy.proxy_addr, &origin.url("/a.xbm"), Some("dswaney")).await;
    assert_eq!(off.content_type(), "image/x-xbitmap");
    assert_eq!(off.body, xbm);

    let (status, _) = admin_call(
        admin,
        "PATCH",
        "/api/profiles/dswaney",
        Some(json!({"add": ["XBM->PNG"], "version": doc["version"]})),
        &[],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(get_via(proxy.proxy_addr, &origin.url("/a.xbm"), Some("dswaney")).await.content_type(), "image/png");
}

#[tokio::test]
async fn event_feed_paging_and_filters() {
    let origin = Origin::start().await;
    let xbm = "#define a_width 1\n#define a_height 1\nstatic char a_bits[] = { 0x01 };\n";
    origin.serve("/a.xbm", Resource::new("image/x-xbitmap", xbm));
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;
    for _ in 0..3 {
        get_via(proxy.proxy_addr, &origin.url("/a.xbm"), Some("dswaney")).await;
    }

    let (status, events) = admin_get(admin, "/api/events").await;
    assert_eq!(status, StatusCode::OK);
    let events = events.as_array().unwrap();
    assert_eq!(events.len(), 3);
    assert_eq!(events[0]["chain_ids"], json!(["XBM->PNG"]));
    assert_eq!(events[0]["profile_id"], "dswaney");
    assert_eq!(events[0]["cache_hit"], true);
    assert_eq!(events[2]["cache_hit"], false);
    assert_eq!(events[0]["request_url"], origin.url("/a.xbm"));

    let (_, page) = admin_get(admin, "/api/events?limit=1").await;
    assert_eq!(page.as_array().unwrap().len(), 1);

    for bad in ["limit=0", "limit=1001", "limit=abc", "since=yesterday"] {
        let (status, err) = admin_get(admin, &format!("/api/events?{bad}")).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
        assert_eq!(err["error"], "invalid-request");
    }

    let later = (chrono::Utc::now() + chrono::Duration::seconds(1)).to_rfc3339();
    let (_, none) = admin_get(admin, &format!("/api/events?since={}", later.replace('+', "%2B"))).await;
    assert_eq!(none, json!([]));
}

#[tokio::test]
async fn reload_rejects_a_broken_file_and_keeps_serving_the_old_rules() {
    let setup = Setup::shipped();
    let proxy = setup.start(None).await;
    let admin = proxy.admin_addr;
    std::fs::write(setup.profiles_path(), "<profile id=\"z\"><transform id=\"1\" rule=\"NOPE\"/></profile>").unwrap();
    let (status, err) = admin_call(admin, "POST", "/api/reload", None, &[]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "reload-failed");
    let (_, profiles) = admin_get(admin, "/api/profiles").await;
    assert_eq!(profiles.as_array().unwrap().len(), 2);

    std::fs::write(setup.profiles_path(), "<profile id=\"z\"/>").unwrap();
    let (status, summary) = admin_call(admin, "POST", "/api/reload", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary, json!({"transformations": 7, "profiles": 1}));
}
