//! C ABI for the streetlabel pipeline.
//!
//! Every function follows the same contract:
//!
//! * Heap objects cross the boundary as opaque pointers ([`sl_network`],
//!   [`sl_thresholds`], [`sl_manifest`]) that only this library creates and
//!   frees.
//! * Fallible calls return an integer status code; [`SL_OK`] is zero. After
//!   a failure, [`sl_last_error_message`] returns a human-readable message
//!   that stays valid on the calling thread until its next failing call.
//! * Panics never unwind across the boundary: they are caught and reported
//!   as [`SL_ERR_PANIC`].
//!
//! The matching C declarations live in `include/streetlabel.h`. The header
//! is maintained by hand and locked to this file by the `header_sync`
//! integration test, which fails the build if the exported symbols or
//! status codes drift apart.

#![warn(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use streetlabel::datasetio::{
    balance_manifest, file_digest, read_manifest, sample_to_json_line, split_by_longitude,
    write_manifest, Manifest, ManifestHeader,
};
use streetlabel::error::Error;
use streetlabel::geo::Projector;
use streetlabel::labelgen::{label_all, JunctionIndex, LabelOptions};
use streetlabel::osmnet::{
    default_allowlist, find_junctions, parse_osm_path, JunctionMode, RoadNetwork,
};
use streetlabel::panograph::{load_panos, PanoMeta};
use streetlabel::roadmatch::{
    filter_offroad, match_panos, SpatialIndex, ThresholdConfig, DEFAULT_CELL_SIZE_M,
};

/// Success.
pub const SL_OK: c_int = 0;
/// A required pointer argument was NULL.
pub const SL_ERR_NULL_ARGUMENT: c_int = 1;
/// A string argument was not valid UTF-8.
pub const SL_ERR_INVALID_UTF8: c_int = 2;
/// Bad configuration or bad argument values.
pub const SL_ERR_VALIDATION: c_int = 3;
/// An input path that does not exist.
pub const SL_ERR_MISSING_INPUT: c_int = 4;
/// Data that parsed fine but is semantically unusable.
pub const SL_ERR_DATA: c_int = 5;
/// An I/O failure on an existing path.
pub const SL_ERR_IO: c_int = 6;
/// Malformed input files: OSM XML, JSONL lines, or PNG data.
pub const SL_ERR_PARSE: c_int = 7;
/// An index argument past the end of the collection.
pub const SL_ERR_INDEX_OUT_OF_RANGE: c_int = 8;
/// An internal panic was caught at the boundary.
pub const SL_ERR_PANIC: c_int = 9;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

/// A road network parsed from OSM XML and filtered to driveable roads,
/// plus the source file's digest for manifest headers.
#[allow(non_camel_case_types)]
pub struct sl_network {
    network: RoadNetwork,
    map_digest: String,
}

/// The labeling thresholds, addressed by the same keys the CLI uses in
/// threshold config files.
#[allow(non_camel_case_types)]
pub struct sl_thresholds {
    cfg: ThresholdConfig,
}

/// A dataset manifest: header plus ordered labeled samples.
#[allow(non_camel_case_types)]
pub struct sl_manifest {
    manifest: Manifest,
}

fn set_last_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("NUL bytes stripped"));
}

/// Record `msg` and hand back `code`, for one-expression error returns.
fn fail(code: c_int, msg: &str) -> c_int {
    set_last_error(msg);
    code
}

fn status_of(e: &Error) -> c_int {
    match e {
        Error::Validation(_) => SL_ERR_VALIDATION,
        Error::MissingInput(_) => SL_ERR_MISSING_INPUT,
        Error::Data(_) => SL_ERR_DATA,
        Error::Io { .. } => SL_ERR_IO,
        Error::OsmXml { .. } | Error::JsonLine { .. } | Error::Image { .. } => SL_ERR_PARSE,
    }
}

fn core_err(e: Error) -> c_int {
    fail(status_of(&e), &e.to_string())
}

/// Run a fallible body, translating panics into [`SL_ERR_PANIC`].
fn run(f: impl FnOnce() -> Result<(), c_int>) -> c_int {
    let body = AssertUnwindSafe(|| match f() {
        Ok(()) => SL_OK,
        Err(code) => code,
    });
    match catch_unwind(body) {
        Ok(code) => code,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown cause".to_string());
            fail(SL_ERR_PANIC, &format!("internal panic: {msg}"))
        }
    }
}

/// Borrow a C string argument as UTF-8.
///
/// # Safety
/// `p` must be NULL or point at a NUL-terminated string.
unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, c_int> {
    if p.is_null() {
        return Err(fail(SL_ERR_NULL_ARGUMENT, &format!("{what} is NULL")));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(SL_ERR_INVALID_UTF8, &format!("{what} is not valid UTF-8")))
}

/// Borrow a handle argument.
///
/// # Safety
/// `p` must be NULL or a pointer this library handed out and not yet freed.
unsafe fn handle_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, c_int> {
    unsafe { p.as_ref() }.ok_or_else(|| fail(SL_ERR_NULL_ARGUMENT, &format!("{what} is NULL")))
}

/// Borrow a handle argument mutably.
///
/// # Safety
/// Same as [`handle_ref`], and the handle must not be aliased concurrently.
unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, c_int> {
    unsafe { p.as_mut() }.ok_or_else(|| fail(SL_ERR_NULL_ARGUMENT, &format!("{what} is NULL")))
}

/// The f64-typed threshold fields by config-file key; `crop_px` is handled
/// separately because it is integral.
fn f64_field<'a>(cfg: &'a mut ThresholdConfig, key: &str) -> Option<&'a mut f64> {
    Some(match key {
        "offroad_max_m" => &mut cfg.offroad_max_m,
        "inter_pos_max_m" => &mut cfg.inter_pos_max_m,
        "inter_neg_min_m" => &mut cfg.inter_neg_min_m,
        "driveable_tol_deg" => &mut cfg.driveable_tol_deg,
        "heading_max_offset_deg" => &mut cfg.heading_max_offset_deg,
        "heading_excl_m" => &mut cfg.heading_excl_m,
        "bike_crop_offset_deg" => &mut cfg.bike_crop_offset_deg,
        "wrongway_tol_deg" => &mut cfg.wrongway_tol_deg,
        "crop_fov_deg" => &mut cfg.crop_fov_deg,
        "train_fraction" => &mut cfg.train_fraction,
        _ => return None,
    })
}

/// Library version as a static NUL-terminated string. Never freed.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on the calling thread; the empty
/// string if nothing failed yet. Valid until this thread's next failing
/// call. Never freed by the caller.
#[no_mangle]
pub extern "C" fn sl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh thresholds handle with the default values. Free with
/// `sl_thresholds_free`.
#[no_mangle]
pub extern "C" fn sl_thresholds_new() -> *mut sl_thresholds {
    Box::into_raw(Box::new(sl_thresholds {
        cfg: ThresholdConfig::default(),
    }))
}

/// Set one threshold by key. Keys are the CLI config-file names:
/// `offroad_max_m`, `inter_pos_max_m`, `inter_neg_min_m`,
/// `driveable_tol_deg`, `heading_max_offset_deg`, `heading_excl_m`,
/// `bike_crop_offset_deg`, `wrongway_tol_deg`, `crop_fov_deg`, `crop_px`,
/// `train_fraction`. Cross-field constraints are checked later, by
/// `sl_thresholds_validate` or by the pipeline call, so keys may be set in
/// any order.
///
/// # Safety
/// `t` must be a live thresholds handle; `key` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sl_thresholds_set(
    t: *mut sl_thresholds,
    key: *const c_char,
    value: f64,
) -> c_int {
    run(|| {
        let t = unsafe { handle_mut(t, "thresholds") }?;
        let key = unsafe { cstr(key, "key") }?;
        if key == "crop_px" {
            let whole = value.is_finite() && value.fract() == 0.0;
            if !(whole && (1.0..=u32::MAX as f64).contains(&value)) {
                return Err(fail(
                    SL_ERR_VALIDATION,
                    &format!("crop_px wants a positive whole number, got {value}"),
                ));
            }
            t.cfg.crop_px = value as u32;
            return Ok(());
        }
        match f64_field(&mut t.cfg, key) {
            Some(field) => {
                *field = value;
                Ok(())
            }
            None => Err(fail(
                SL_ERR_VALIDATION,
                &format!("unknown threshold key {key:?}"),
            )),
        }
    })
}

/// Read one threshold by key into `*out`; `crop_px` is returned as a whole
/// double. Same key set as `sl_thresholds_set`.
///
/// # Safety
/// `t` must be a live thresholds handle; `key` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sl_thresholds_get(
    t: *const sl_thresholds,
    key: *const c_char,
    out: *mut f64,
) -> c_int {
    run(|| {
        let t = unsafe { handle_ref(t, "thresholds") }?;
        let key = unsafe { cstr(key, "key") }?;
        let out = unsafe { handle_mut(out, "out") }?;
        let mut cfg = t.cfg;
        if key == "crop_px" {
            *out = f64::from(cfg.crop_px);
            return Ok(());
        }
        match f64_field(&mut cfg, key) {
            Some(field) => {
                *out = *field;
                Ok(())
            }
            None => Err(fail(
                SL_ERR_VALIDATION,
                &format!("unknown threshold key {key:?}"),
            )),
        }
    })
}

/// Check the whole threshold set, including cross-field constraints such as
/// the intersection dead band needing a positive width.
///
/// # Safety
/// `t` must be a live thresholds handle.
#[no_mangle]
pub unsafe extern "C" fn sl_thresholds_validate(t: *const sl_thresholds) -> c_int {
    run(|| {
        let t = unsafe { handle_ref(t, "thresholds") }?;
        t.cfg.validate().map_err(core_err)
    })
}

/// Free a thresholds handle. NULL is a no-op.
///
/// # Safety
/// `t` must be NULL or a handle not yet freed; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn sl_thresholds_free(t: *mut sl_thresholds) {
    if !t.is_null() {
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Parse an OSM XML file (plain or gzip), keep the driveable roads, and
/// return the network through `*out`. Free with `sl_network_free`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sl_network_load_roads(
    path: *const c_char,
    out: *mut *mut sl_network,
) -> c_int {
    run(|| {
        let out = unsafe { handle_mut(out, "out") }?;
        let path = Path::new(unsafe { cstr(path, "path") }?);
        let (raw, _stats) = parse_osm_path(path).map_err(core_err)?;
        let (network, _removed) = raw.filter_roads(&default_allowlist());
        let map_digest = file_digest(path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(sl_network {
            network,
            map_digest,
        }));
        Ok(())
    })
}

/// Number of nodes in the road network; 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn sl_network_node_count(net: *const sl_network) -> usize {
    unsafe { net.as_ref() }.map_or(0, |n| n.network.node_count())
}

/// Number of ways in the road network; 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn sl_network_way_count(net: *const sl_network) -> usize {
    unsafe { net.as_ref() }.map_or(0, |n| n.network.way_count())
}

/// Number of polyline segments across all ways; 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn sl_network_segment_count(net: *const sl_network) -> usize {
    unsafe { net.as_ref() }.map_or(0, |n| n.network.segment_count())
}

/// Free a network handle. NULL is a no-op.
///
/// # Safety
/// `net` must be NULL or a handle not yet freed; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn sl_network_free(net: *mut sl_network) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Run the labeling pipeline: load panorama metadata from a JSONL file,
/// match each panorama to its nearest road, drop off-road panoramas, and
/// transfer the nine road-layout attributes onto perspective crop specs.
/// `thresholds` may be NULL for the defaults. The resulting manifest
/// (samples still unsplit) is returned through `*out`; free it with
/// `sl_manifest_free`.
///
/// # Safety
/// `net` must be a live network handle; `panos_path` NUL-terminated;
/// `thresholds` NULL or a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sl_label_panos(
    net: *const sl_network,
    panos_path: *const c_char,
    seed: u64,
    thresholds: *const sl_thresholds,
    out: *mut *mut sl_manifest,
) -> c_int {
    run(|| {
        let out = unsafe { handle_mut(out, "out") }?;
        let net = unsafe { handle_ref(net, "network") }?;
        let path = Path::new(unsafe { cstr(panos_path, "panos_path") }?);
        let cfg = unsafe { thresholds.as_ref() }.map_or_else(ThresholdConfig::default, |t| t.cfg);
        cfg.validate().map_err(core_err)?;

        let panos = load_panos(path).map_err(core_err)?;
        let bounds = net
            .network
            .geo_bounds()
            .ok_or_else(|| fail(SL_ERR_DATA, "the road network has no nodes"))?;
        let projector = Projector::new(bounds.center()).map_err(core_err)?;
        let index =
            SpatialIndex::build(&net.network, &projector, DEFAULT_CELL_SIZE_M).map_err(core_err)?;
        let matches = match_panos(&net.network, &projector, &index, &panos).map_err(core_err)?;
        let (kept, _dropped) = filter_offroad(matches, &cfg);
        let junctions = find_junctions(&net.network, &projector, JunctionMode::MinThreeArms);
        let jindex = JunctionIndex::build(junctions, &projector);
        let pano_map: BTreeMap<String, PanoMeta> = panos
            .into_iter()
            .map(|p| (p.pano_id.clone(), p))
            .collect();
        let opts = LabelOptions {
            seed,
            ..LabelOptions::default()
        };
        let samples = label_all(
            &net.network,
            &projector,
            &kept,
            &pano_map,
            &jindex,
            &cfg,
            &opts,
        )
        .map_err(core_err)?;

        let mut header = ManifestHeader::new(seed, cfg);
        header.map_digest = Some(net.map_digest.clone());
        header.pano_digest = Some(file_digest(path).map_err(core_err)?);
        let manifest = Manifest::new(header, samples).map_err(core_err)?;
        *out = Box::into_raw(Box::new(sl_manifest { manifest }));
        Ok(())
    })
}

/// Read a JSONL manifest file into a handle. Free with `sl_manifest_free`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_read_file(
    path: *const c_char,
    out: *mut *mut sl_manifest,
) -> c_int {
    run(|| {
        let out = unsafe { handle_mut(out, "out") }?;
        let path = Path::new(unsafe { cstr(path, "path") }?);
        let manifest = read_manifest(path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(sl_manifest { manifest }));
        Ok(())
    })
}

/// Write a manifest to a JSONL file, byte-identical for equal manifests.
///
/// # Safety
/// `m` must be a live manifest handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_write_file(
    m: *const sl_manifest,
    path: *const c_char,
) -> c_int {
    run(|| {
        let m = unsafe { handle_ref(m, "manifest") }?;
        let path = Path::new(unsafe { cstr(path, "path") }?);
        write_manifest(&m.manifest, path).map_err(core_err)
    })
}

/// Number of samples in the manifest; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live manifest handle.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_len(m: *const sl_manifest) -> usize {
    unsafe { m.as_ref() }.map_or(0, |m| m.manifest.len())
}

/// Assign every sample to the train or test split by panorama longitude:
/// panoramas are ranked west to east and the training side takes the
/// manifest header's `train_fraction`, ties going to train. The panorama
/// JSONL file supplies the locations. On success the manifest is updated
/// in place and the boundary longitude is written to `*boundary_out`
/// (pass NULL to skip it).
///
/// # Safety
/// `m` must be a live manifest handle; `panos_path` NUL-terminated;
/// `boundary_out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_split_longitude(
    m: *mut sl_manifest,
    panos_path: *const c_char,
    boundary_out: *mut f64,
) -> c_int {
    run(|| {
        let m = unsafe { handle_mut(m, "manifest") }?;
        let path = Path::new(unsafe { cstr(panos_path, "panos_path") }?);
        let panos = load_panos(path).map_err(core_err)?;
        let pano_map: BTreeMap<String, PanoMeta> = panos
            .into_iter()
            .map(|p| (p.pano_id.clone(), p))
            .collect();
        let samples = m.manifest.samples().to_vec();
        let fraction = m.manifest.header.config.train_fraction;
        let (boundary, split) =
            split_by_longitude(samples, &pano_map, fraction).map_err(core_err)?;
        m.manifest = Manifest::new(m.manifest.header.clone(), split).map_err(core_err)?;
        if let Some(b) = unsafe { boundary_out.as_mut() } {
            *b = boundary;
        }
        Ok(())
    })
}

/// Equalize class counts for every categorical task within each split by
/// re-listing randomly chosen minority samples, deterministically for a
/// given seed. Samples must already carry split assignments. The manifest
/// is updated in place.
///
/// # Safety
/// `m` must be a live manifest handle.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_balance(m: *mut sl_manifest, seed: u64) -> c_int {
    run(|| {
        let m = unsafe { handle_mut(m, "manifest") }?;
        m.manifest = balance_manifest(&m.manifest, seed).map_err(core_err)?;
        Ok(())
    })
}

/// Render sample `index` as its manifest JSON line (no trailing newline)
/// into a fresh NUL-terminated string at `*out`. Free the string with
/// `sl_string_free`.
///
/// # Safety
/// `m` must be a live manifest handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_sample_json(
    m: *const sl_manifest,
    index: usize,
    out: *mut *mut c_char,
) -> c_int {
    run(|| {
        let out = unsafe { handle_mut(out, "out") }?;
        let m = unsafe { handle_ref(m, "manifest") }?;
        let n = m.manifest.len();
        let sample = m.manifest.samples().get(index).ok_or_else(|| {
            fail(
                SL_ERR_INDEX_OUT_OF_RANGE,
                &format!("sample index {index} out of range for a manifest of {n}"),
            )
        })?;
        let line = sample_to_json_line(sample);
        *out = CString::new(line)
            .expect("JSON output has no NUL bytes")
            .into_raw();
        Ok(())
    })
}

/// Free a manifest handle. NULL is a no-op.
///
/// # Safety
/// `m` must be NULL or a handle not yet freed; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn sl_manifest_free(m: *mut sl_manifest) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Free a string returned through an out-parameter. NULL is a no-op.
///
/// # Safety
/// `s` must be NULL or a string this library returned, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn sl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
