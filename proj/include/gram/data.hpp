#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gram/tensor.hpp"

namespace gram {

// Normalized images in planar NCHW float layout plus integer labels.
struct Dataset {
    size_t channels = 3, side = 32, classes = 10;
    std::vector<float> images;  // [N * channels * side * side]
    std::vector<int> labels;

    size_t size() const { return labels.size(); }
    size_t image_numel() const { return channels * side * side; }
    void validate() const;
};

enum class CifarVariant { c10, c100 };

struct Normalization {
    std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
    std::array<float, 3> stddev{0.2470f, 0.2435f, 0.2616f};
};

// One CIFAR binary file, streamed in chunks; limit=0 keeps every record.
// chunk_records is an implementation knob exposed so tests can prove the
// output does not depend on chunking.
Dataset load_cifar(const std::string& path, CifarVariant variant, size_t limit = 0,
                   const Normalization& norm = {}, size_t chunk_records = 1024);

Dataset load_cifar_files(const std::vector<std::string>& paths, CifarVariant variant,
                         size_t limit = 0, const Normalization& norm = {});

// Gaussian clusters, class k centered at k in every coordinate. dim must be
// s*s or 3*s*s for a square image layout. index_offset shifts the per-example
// noise keys so disjoint splits can share a seed without sharing samples.
Dataset synth_blobs(size_t classes, size_t per_class, size_t dim, uint64_t seed,
                    uint64_t index_offset = 0);

// Class-conditional textures: white noise pushed through a per-class 3x3
// mixing filter (second-order cue) plus a faint class-specific low-frequency
// offset (first-order cue). Exercises Gramian heads and keeps GAP-FC viable.
// The class definitions depend only on the seed; index_offset moves the
// per-example noise keys, giving held-out draws of the same classes.
Dataset synth_textures(size_t classes, size_t per_class, uint64_t seed, size_t side = 32,
                       float mean_cue = 0.3f, uint64_t index_offset = 0);

// Pad-4 random crop + horizontal flip. The deterministic core takes explicit
// crop offsets in [0, 2*pad] and a flip switch; the keyed wrapper derives them
// from (key, example index) so any epoch's augmentation is reproducible in
// isolation.
void augment_with(const float* src, size_t channels, size_t side, size_t pad, size_t dy, size_t dx,
                  bool flip, float* dst);
void augment_keyed(const float* src, size_t channels, size_t side, uint64_t key, uint64_t index,
                   float* dst);

// Assemble a batch tensor; augment=false copies pixels untouched.
TensorT<float> gather_batch(const Dataset& data, const std::vector<size_t>& indices, bool augment,
                            uint64_t aug_key);

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, size_t epoch);

struct MetricRow {
    size_t epoch = 0;
    std::string split;  // "train" or "val"
    double loss_ce = 0, loss_dec = 0, top1 = 0;
    double strength = 0, rho = 0, bound = 0;
    bool has_diag = false;  // train rows carry losses/top1 only
};

std::string format_metrics(const std::vector<MetricRow>& rows);
void emit_metrics(const std::vector<MetricRow>& rows, const std::string& path);
std::vector<MetricRow> parse_metrics(const std::string& csv_text);

struct ScatterPoint {
    double x = 0, y = 0;
    size_t head = 0;
    int label = 0;
};

std::string format_scatter(const std::vector<ScatterPoint>& points);
void emit_scatter(const std::vector<ScatterPoint>& points, const std::string& path);

// CSV header: head,example,dim_0..dim_{D-1},label
void emit_features(const std::vector<std::vector<float>>& per_head_embeddings,
                   const std::vector<int>& labels, const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace gram
