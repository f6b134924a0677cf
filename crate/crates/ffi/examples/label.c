/*
 * Minimal C consumer of the streetlabel library: load a road network,
 * label a panorama set with a custom crop size, dump one sample, and
 * write the manifest.
 *
 * Build (from the repository root, after `cargo build -p streetlabel-ffi`):
 *
 *   cc crates/ffi/examples/label.c -Icrates/ffi/include \
 *      -Ltarget/debug -lstreetlabel_ffi -Wl,-rpath,target/debug -o label
 *
 *   ./label city.osm panos.jsonl manifest.jsonl
 *
 * The c_caller integration test compiles and runs this file.
 */

#include <stdio.h>
#include "streetlabel.h"

static int die(const char *stage) {
    fprintf(stderr, "%s: %s\n", stage, sl_last_error_message());
    return 1;
}

int main(int argc, char **argv) {
    sl_network_t *net = NULL;
    sl_thresholds_t *thresholds = NULL;
    sl_manifest_t *manifest = NULL;
    char *line = NULL;

    if (argc != 4) {
        fprintf(stderr, "usage: %s MAP.osm PANOS.jsonl OUT.jsonl\n", argv[0]);
        return 64;
    }

    if (sl_network_load_roads(argv[1], &net) != SL_OK)
        return die("load roads");
    fprintf(stderr, "network: %zu nodes, %zu ways, %zu segments\n",
            sl_network_node_count(net), sl_network_way_count(net),
            sl_network_segment_count(net));

    thresholds = sl_thresholds_new();
    if (sl_thresholds_set(thresholds, "crop_px", 96.0) != SL_OK)
        return die("set crop_px");
    if (sl_thresholds_validate(thresholds) != SL_OK)
        return die("validate thresholds");

    if (sl_label_panos(net, argv[2], 5, thresholds, &manifest) != SL_OK)
        return die("label");

    if (sl_manifest_sample_json(manifest, 0, &line) != SL_OK)
        return die("sample json");
    fprintf(stderr, "first sample: %s\n", line);
    sl_string_free(line);

    if (sl_manifest_write_file(manifest, argv[3]) != SL_OK)
        return die("write manifest");

    /* One machine-readable line for callers of this program. */
    printf("%zu %s\n", sl_manifest_len(manifest), sl_version());

    sl_manifest_free(manifest);
    sl_thresholds_free(thresholds);
    sl_network_free(net);
    return 0;
}
