#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gram/data.hpp"
#include "gram/diagnostics.hpp"
#include "gram/ensemble.hpp"

namespace gram {

// Flat key=value run description; every key can also arrive as a CLI flag.
struct TrainConfig {
    // data
    std::string data = "textures";  // textures | blobs | cifar10 | cifar100
    std::vector<std::string> train_files, val_files;
    size_t limit = 5000;      // train examples; 0 keeps everything a file set offers
    size_t val_limit = 1000;  // same for the held-out split
    uint64_t data_seed = 7;   // synthetic generators only
    size_t classes = 10;
    bool augment = true;
    double texture_cue = 0.1;  // first-order class cue amplitude in the textures set

    // model
    size_t depth = 20, stem = 16;
    std::array<size_t, 3> channels{16, 32, 64};
    std::string head = "gram";  // gram | gap_fc | learned_token
    size_t reduced = 0;         // 0 means = channels[2]
    size_t cardinality = 1, attn_dim = 0, attn_heads = 1, heads = 5;
    std::string aggregate = "final";
    double lambda = -0.8;

    // optimization
    size_t epochs = 300, batch = 64;
    double lr = 1e-3, lr_factor = 0.1, momentum = 0.9, weight_decay = 5e-4;
    double clip_norm = 0;  // global gradient-norm cap; 0 disables
    std::string schedule = "step";  // step | cosine
    std::vector<size_t> milestones{150, 225};
    size_t eval_every = 1;
    uint64_t seed = 1;
    std::string out_dir = "run";

    void validate() const;  // throws ConfigError
};

// Small-footprint profile for trend experiments on a single desk machine.
TrainConfig desk_profile();

TrainConfig parse_config_text(const std::string& text);
// Inverse of parse_config_text: every field as one key=value line.
std::string format_config(const TrainConfig& c);
TrainConfig load_config(const std::string& path);
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);

EnsembleConfig model_config(const TrainConfig& cfg);
double lr_at(const TrainConfig& cfg, size_t epoch);
Dataset make_train_dataset(const TrainConfig& cfg);
Dataset make_val_dataset(const TrainConfig& cfg);

struct EvalOutcome {
    double top1 = 0, ce = 0, dec = 0;
    std::vector<double> per_head_top1;
    DiagnosticsReport diag;
    bool diag_valid = false;  // needs >= 2 heads and >= 2 examples
};

EvalOutcome evaluate_model(EnsembleT<float>& model, const Dataset& data, size_t batch,
                           double lambda);

struct TrainOutcome {
    std::vector<MetricRow> history;
    double final_top1 = 0, best_top1 = 0;
    size_t best_epoch = 0;
    std::string metrics_path, final_ckpt, best_ckpt;
};

// Runs the loop, writes metrics.csv plus best/final checkpoints under
// cfg.out_dir. resume_from restarts mid-run from a final checkpoint.
TrainOutcome train(const TrainConfig& cfg, const std::string& resume_from = "");

struct SweepRow {
    double value = 0;
    double top1 = 0, strength = 0, rho = 0, bound = 0;
    bool ok = false;
    std::string error;
};

// axis is "lambda" or "heads"; one training per value, failures recorded and
// skipped. Writes value,top1,strength,rho,bound rows to out_csv.
std::vector<SweepRow> sweep(const TrainConfig& base, const std::string& axis,
                            const std::vector<double>& values, const std::string& out_csv);

std::string format_metric_row(const MetricRow& row);

}  // namespace gram
