/*
 * C interface for the streetlabel pipeline.
 *
 * Conventions:
 *   - Heap objects cross the boundary as opaque pointers created and freed
 *     by this library only.
 *   - Fallible calls return an int status code; SL_OK is zero. After a
 *     failure, sl_last_error_message returns a message that stays valid on
 *     the calling thread until its next failing call.
 *   - Internal panics never unwind into the caller; they surface as
 *     SL_ERR_PANIC.
 *
 * This header is maintained by hand; the header_sync integration test in
 * the streetlabel-ffi crate keeps it locked to the exported symbols and
 * status-code values.
 */

#ifndef STREETLABEL_H
#define STREETLABEL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every fallible function. */
enum sl_status {
    SL_OK = 0,
    SL_ERR_NULL_ARGUMENT = 1,
    SL_ERR_INVALID_UTF8 = 2,
    SL_ERR_VALIDATION = 3,
    SL_ERR_MISSING_INPUT = 4,
    SL_ERR_DATA = 5,
    SL_ERR_IO = 6,
    SL_ERR_PARSE = 7,
    SL_ERR_INDEX_OUT_OF_RANGE = 8,
    SL_ERR_PANIC = 9
};

/* A road network parsed from OSM XML and filtered to driveable roads. */
typedef struct sl_network sl_network_t;

/* Labeling thresholds, addressed by their config-file key names. */
typedef struct sl_thresholds sl_thresholds_t;

/* A dataset manifest: header plus ordered labeled samples. */
typedef struct sl_manifest sl_manifest_t;

/* Library version as a static string. Do not free. */
const char *sl_version(void);

/* Message for the most recent failure on the calling thread; the empty
 * string if nothing failed yet. Valid until this thread's next failing
 * call. Do not free. */
const char *sl_last_error_message(void);

/* ---- thresholds ------------------------------------------------------ */

/* Fresh thresholds with the default values. Release with
 * sl_thresholds_free. */
sl_thresholds_t *sl_thresholds_new(void);

/* Set one threshold by key: offroad_max_m, inter_pos_max_m,
 * inter_neg_min_m, driveable_tol_deg, heading_max_offset_deg,
 * heading_excl_m, bike_crop_offset_deg, wrongway_tol_deg, crop_fov_deg,
 * crop_px, train_fraction. crop_px wants a positive whole number.
 * Cross-field constraints are checked later, so keys may be set in any
 * order. */
int sl_thresholds_set(sl_thresholds_t *t, const char *key, double value);

/* Read one threshold by key into *out; crop_px comes back as a whole
 * double. */
int sl_thresholds_get(const sl_thresholds_t *t, const char *key, double *out);

/* Check the whole threshold set, including cross-field constraints. */
int sl_thresholds_validate(const sl_thresholds_t *t);

/* Release a thresholds handle. NULL is a no-op. */
void sl_thresholds_free(sl_thresholds_t *t);

/* ---- road networks --------------------------------------------------- */

/* Parse an OSM XML file (plain or gzip), keep the driveable roads, and
 * return the network through *out. Release with sl_network_free. */
int sl_network_load_roads(const char *path, sl_network_t **out);

/* Counts; each returns 0 for NULL. */
size_t sl_network_node_count(const sl_network_t *net);
size_t sl_network_way_count(const sl_network_t *net);
size_t sl_network_segment_count(const sl_network_t *net);

/* Release a network handle. NULL is a no-op. */
void sl_network_free(sl_network_t *net);

/* ---- labeling -------------------------------------------------------- */

/* Run the labeling pipeline: load panorama metadata from a JSONL file,
 * match each panorama to its nearest road, drop off-road panoramas, and
 * transfer the nine road-layout attributes onto perspective crop specs.
 * thresholds may be NULL for the defaults. The resulting manifest
 * (samples still unsplit) is returned through *out; release it with
 * sl_manifest_free. */
int sl_label_panos(const sl_network_t *net, const char *panos_path,
                   uint64_t seed, const sl_thresholds_t *thresholds,
                   sl_manifest_t **out);

/* ---- manifests ------------------------------------------------------- */

/* Read a JSONL manifest file. Release with sl_manifest_free. */
int sl_manifest_read_file(const char *path, sl_manifest_t **out);

/* Write a manifest to a JSONL file, byte-identical for equal manifests. */
int sl_manifest_write_file(const sl_manifest_t *m, const char *path);

/* Number of samples; 0 for NULL. */
size_t sl_manifest_len(const sl_manifest_t *m);

/* Assign every sample to the train or test split by panorama longitude:
 * panoramas rank west to east and the training side takes the manifest
 * header's train_fraction, ties going to train. The panorama JSONL file
 * supplies the locations. Updates the manifest in place and writes the
 * boundary longitude to *boundary_out (pass NULL to skip it). */
int sl_manifest_split_longitude(sl_manifest_t *m, const char *panos_path,
                                double *boundary_out);

/* Equalize class counts for every categorical task within each split by
 * re-listing randomly chosen minority samples, deterministically for a
 * given seed. Samples must already carry split assignments. Updates the
 * manifest in place. */
int sl_manifest_balance(sl_manifest_t *m, uint64_t seed);

/* Render sample `index` as its manifest JSON line (no trailing newline)
 * into a fresh NUL-terminated string at *out. Release the string with
 * sl_string_free. */
int sl_manifest_sample_json(const sl_manifest_t *m, size_t index, char **out);

/* Release a manifest handle. NULL is a no-op. */
void sl_manifest_free(sl_manifest_t *m);

/* Release a string returned through an out-parameter. NULL is a no-op. */
void sl_string_free(char *s);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* STREETLABEL_H */
