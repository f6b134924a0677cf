//! Drive the exported C functions end to end on a synthetic city: load the
//! road network, label its panoramas, split, balance, and serialize, then
//! check the output against the generator's exact ground truth. Failure
//! paths must produce the documented status codes and messages.

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use streetlabel::datasetio::read_manifest;
use streetlabel::labelgen::{stream_rng, LabelOptions, Split};
use streetlabel::panograph::save_panos;
use streetlabel::roadmatch::ThresholdConfig;
use streetlabel::synthkit::{gen_city, gen_panos, CityParams, PanoParams, SynthCity};
use streetlabel_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_message() -> String {
    unsafe { CStr::from_ptr(sl_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    tmp: tempfile::TempDir,
    map: PathBuf,
    panos: PathBuf,
    city: SynthCity,
}

/// A city large enough that every labeler sees both classes on both sides
/// of the longitude split: 250 m blocks put mid-block panoramas beyond the
/// intersection-negative radius.
fn build_fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let params = CityParams {
        rows: 5,
        cols: 5,
        block_m: 250.0,
        seed: 11,
        ..CityParams::default()
    };
    let mut city = gen_city(&params).unwrap();
    let pano_params = PanoParams {
        spacing_m: 12.0,
        lateral_offset_m: 3.0,
        noise_m: 0.4,
        azimuth_noise_deg: 8.0,
        plaza_count: 2,
    };
    let mut rng = stream_rng(params.seed, &["panos"]);
    let panos = gen_panos(&mut city, &pano_params, &mut rng).unwrap();
    let map = tmp.path().join("city.osm");
    std::fs::write(&map, &city.xml).unwrap();
    let panos_path = tmp.path().join("panos.jsonl");
    save_panos(&panos, &panos_path).unwrap();
    Fixture {
        tmp,
        map,
        panos: panos_path,
        city,
    }
}

unsafe fn load_network(map: &Path) -> *mut sl_network {
    let mut net: *mut sl_network = ptr::null_mut();
    let rc = unsafe { sl_network_load_roads(cpath(map).as_ptr(), &mut net) };
    assert_eq!(rc, SL_OK, "{}", last_message());
    assert!(!net.is_null());
    net
}

#[test]
fn the_pipeline_runs_end_to_end_over_the_c_boundary() {
    let fx = build_fixture();
    unsafe {
        let version = CStr::from_ptr(sl_version()).to_str().unwrap();
        assert!(!version.is_empty());

        let net = load_network(&fx.map);
        assert!(sl_network_node_count(net) > 0);
        assert!(sl_network_way_count(net) > 0);
        assert!(sl_network_segment_count(net) >= sl_network_way_count(net));

        // Label with the default thresholds (NULL handle) and seed 42.
        let mut manifest: *mut sl_manifest = ptr::null_mut();
        let rc = sl_label_panos(net, cpath(&fx.panos).as_ptr(), 42, ptr::null(), &mut manifest);
        assert_eq!(rc, SL_OK, "{}", last_message());
        let labeled_len = sl_manifest_len(manifest);
        assert!(labeled_len > 0);

        // Every sample renders as one parseable JSON line; past-the-end
        // indexes are refused.
        let mut line: *mut c_char = ptr::null_mut();
        assert_eq!(sl_manifest_sample_json(manifest, 0, &mut line), SL_OK);
        let parsed: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(line).to_str().unwrap()).unwrap();
        for key in ["sample_id", "pano_id", "task", "crop", "label", "way_id"] {
            assert!(parsed.get(key).is_some(), "sample JSON lacks {key:?}");
        }
        sl_string_free(line);
        let mut oob: *mut c_char = ptr::null_mut();
        assert_eq!(
            sl_manifest_sample_json(manifest, labeled_len, &mut oob),
            SL_ERR_INDEX_OUT_OF_RANGE
        );
        assert!(last_message().contains("out of range"));

        // The labeled manifest, written through the boundary, must agree
        // with the synthetic city's exact expectations.
        let labeled_path = fx.tmp.path().join("labeled.jsonl");
        assert_eq!(
            sl_manifest_write_file(manifest, cpath(&labeled_path).as_ptr()),
            SL_OK,
            "{}",
            last_message()
        );
        let labeled = read_manifest(&labeled_path).unwrap();
        assert_eq!(labeled.header.seed, 42);
        let cfg = ThresholdConfig::default();
        let opts = LabelOptions {
            seed: 42,
            ..LabelOptions::default()
        };
        let report = fx.city.truth.verify_samples(labeled.samples(), &cfg, &opts);
        assert!(
            report.ok(),
            "ground-truth mismatches: {:?}",
            report.mismatches
        );
        assert!(
            labeled
                .verify_sources(Some(&fx.map), Some(&fx.panos))
                .unwrap(),
            "header digests must match the source files"
        );

        // Balancing an unsplit manifest is refused with a data error.
        assert_eq!(sl_manifest_balance(manifest, 42), SL_ERR_DATA);
        assert!(last_message().contains("split"));

        // Split west/east, then balance; all samples end up assigned.
        let mut boundary = f64::NAN;
        let rc = sl_manifest_split_longitude(manifest, cpath(&fx.panos).as_ptr(), &mut boundary);
        assert_eq!(rc, SL_OK, "{}", last_message());
        assert!(boundary.is_finite());
        let rc = sl_manifest_balance(manifest, 42);
        assert_eq!(rc, SL_OK, "{}", last_message());
        assert!(sl_manifest_len(manifest) >= labeled_len);

        let final_path = fx.tmp.path().join("balanced.jsonl");
        assert_eq!(
            sl_manifest_write_file(manifest, cpath(&final_path).as_ptr()),
            SL_OK
        );
        let balanced = read_manifest(&final_path).unwrap();
        assert!(balanced
            .samples()
            .iter()
            .all(|s| s.split != Split::Unassigned));

        // Writing the same handle twice is byte-identical, and a fresh
        // handle read back from the file writes those same bytes.
        let again = fx.tmp.path().join("again.jsonl");
        assert_eq!(sl_manifest_write_file(manifest, cpath(&again).as_ptr()), SL_OK);
        assert_eq!(
            std::fs::read(&final_path).unwrap(),
            std::fs::read(&again).unwrap()
        );
        let mut reread: *mut sl_manifest = ptr::null_mut();
        assert_eq!(
            sl_manifest_read_file(cpath(&final_path).as_ptr(), &mut reread),
            SL_OK,
            "{}",
            last_message()
        );
        let rewritten = fx.tmp.path().join("rewritten.jsonl");
        assert_eq!(
            sl_manifest_write_file(reread, cpath(&rewritten).as_ptr()),
            SL_OK
        );
        assert_eq!(
            std::fs::read(&final_path).unwrap(),
            std::fs::read(&rewritten).unwrap()
        );

        sl_manifest_free(reread);
        sl_manifest_free(manifest);
        sl_network_free(net);
    }
}

#[test]
fn balancing_is_deterministic_across_fresh_handles() {
    let fx = build_fixture();
    unsafe {
        let net = load_network(&fx.map);
        let mut manifest: *mut sl_manifest = ptr::null_mut();
        let rc = sl_label_panos(net, cpath(&fx.panos).as_ptr(), 7, ptr::null(), &mut manifest);
        assert_eq!(rc, SL_OK, "{}", last_message());
        let rc = sl_manifest_split_longitude(manifest, cpath(&fx.panos).as_ptr(), ptr::null_mut());
        assert_eq!(rc, SL_OK, "{}", last_message());
        let split_path = fx.tmp.path().join("split.jsonl");
        assert_eq!(
            sl_manifest_write_file(manifest, cpath(&split_path).as_ptr()),
            SL_OK
        );

        let mut outputs = Vec::new();
        for name in ["a.jsonl", "b.jsonl"] {
            let mut handle: *mut sl_manifest = ptr::null_mut();
            assert_eq!(
                sl_manifest_read_file(cpath(&split_path).as_ptr(), &mut handle),
                SL_OK
            );
            assert_eq!(sl_manifest_balance(handle, 9), SL_OK, "{}", last_message());
            let out = fx.tmp.path().join(name);
            assert_eq!(sl_manifest_write_file(handle, cpath(&out).as_ptr()), SL_OK);
            sl_manifest_free(handle);
            outputs.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);

        sl_manifest_free(manifest);
        sl_network_free(net);
    }
}

#[test]
fn thresholds_round_trip_by_key() {
    let defaults = ThresholdConfig::default();
    let cases: [(&str, f64, f64); 11] = [
        ("offroad_max_m", defaults.offroad_max_m, 12.5),
        ("inter_pos_max_m", defaults.inter_pos_max_m, 25.0),
        ("inter_neg_min_m", defaults.inter_neg_min_m, 120.0),
        ("driveable_tol_deg", defaults.driveable_tol_deg, 20.0),
        (
            "heading_max_offset_deg",
            defaults.heading_max_offset_deg,
            45.0,
        ),
        ("heading_excl_m", defaults.heading_excl_m, 25.0),
        ("bike_crop_offset_deg", defaults.bike_crop_offset_deg, 50.0),
        ("wrongway_tol_deg", defaults.wrongway_tol_deg, 15.0),
        ("crop_fov_deg", defaults.crop_fov_deg, 90.0),
        ("crop_px", f64::from(defaults.crop_px), 96.0),
        ("train_fraction", defaults.train_fraction, 0.75),
    ];
    unsafe {
        let t = sl_thresholds_new();
        assert!(!t.is_null());
        for (key, default, fresh) in cases {
            let key_c = c(key);
            let mut got = f64::NAN;
            assert_eq!(sl_thresholds_get(t, key_c.as_ptr(), &mut got), SL_OK);
            assert_eq!(got, default, "default for {key}");
            assert_eq!(sl_thresholds_set(t, key_c.as_ptr(), fresh), SL_OK);
            assert_eq!(sl_thresholds_get(t, key_c.as_ptr(), &mut got), SL_OK);
            assert_eq!(got, fresh, "round trip for {key}");
        }
        assert_eq!(sl_thresholds_validate(t), SL_OK, "{}", last_message());

        // Cross-field constraints surface on validate, not on set.
        assert_eq!(
            sl_thresholds_set(t, c("inter_pos_max_m").as_ptr(), 500.0),
            SL_OK
        );
        assert_eq!(sl_thresholds_validate(t), SL_ERR_VALIDATION);
        assert!(last_message().contains("inter_neg_min_m"));

        sl_thresholds_free(t);
    }
}

#[test]
fn failures_store_the_documented_codes_and_messages() {
    unsafe {
        // Missing input file.
        let mut net: *mut sl_network = ptr::null_mut();
        let missing = c("/nonexistent/city.osm");
        assert_eq!(
            sl_network_load_roads(missing.as_ptr(), &mut net),
            SL_ERR_MISSING_INPUT
        );
        assert!(last_message().contains("/nonexistent/city.osm"));
        assert!(net.is_null());

        // NULL arguments.
        assert_eq!(
            sl_network_load_roads(missing.as_ptr(), ptr::null_mut()),
            SL_ERR_NULL_ARGUMENT
        );
        assert_eq!(
            sl_network_load_roads(ptr::null(), &mut net),
            SL_ERR_NULL_ARGUMENT
        );
        let mut manifest: *mut sl_manifest = ptr::null_mut();
        assert_eq!(
            sl_label_panos(ptr::null(), missing.as_ptr(), 0, ptr::null(), &mut manifest),
            SL_ERR_NULL_ARGUMENT
        );

        // Non-UTF-8 path bytes.
        let bogus = CString::new(vec![0xff, 0xfe]).unwrap();
        assert_eq!(
            sl_network_load_roads(bogus.as_ptr(), &mut net),
            SL_ERR_INVALID_UTF8
        );
        assert!(last_message().contains("UTF-8"));

        // Unknown threshold keys and non-integral pixel sizes.
        let t = sl_thresholds_new();
        assert_eq!(
            sl_thresholds_set(t, c("no_such_key").as_ptr(), 1.0),
            SL_ERR_VALIDATION
        );
        assert!(last_message().contains("no_such_key"));
        assert_eq!(
            sl_thresholds_set(t, c("crop_px").as_ptr(), 227.5),
            SL_ERR_VALIDATION
        );
        sl_thresholds_free(t);

        // A file that is not a manifest.
        let tmp = tempfile::tempdir().unwrap();
        let garbage = tmp.path().join("garbage.jsonl");
        std::fs::write(&garbage, "not json at all\n").unwrap();
        assert_eq!(
            sl_manifest_read_file(cpath(&garbage).as_ptr(), &mut manifest),
            SL_ERR_PARSE
        );
        assert!(last_message().contains("garbage.jsonl"));

        // Frees accept NULL.
        sl_network_free(ptr::null_mut());
        sl_manifest_free(ptr::null_mut());
        sl_thresholds_free(ptr::null_mut());
        sl_string_free(ptr::null_mut());
    }
}
