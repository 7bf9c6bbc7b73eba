#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gram/checkpoint.hpp"
#include "gram/diagnostics.hpp"
#include "gram/error.hpp"
#include "gram/trainer.hpp"

namespace {

using namespace gram;

struct CliOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
    std::optional<size_t> limit, heads, epochs, batch, depth;
    std::optional<double> lambda;
    std::optional<std::string> data, head, out_dir, aggregate;
};

void add_common(CLI::App* sub, CliOpts& o) {
    sub->add_option("--config", o.config_path, "key=value run description file");
    sub->add_option("--set", o.sets, "extra key=value override, repeatable");
    sub->add_option("--seed", o.seed, "training seed");
    sub->add_option("--limit", o.limit, "training examples to keep");
    sub->add_option("--heads", o.heads, "ensemble size");
    sub->add_option("--lambda", o.lambda, "decorrelation weight");
    sub->add_option("--out-dir", o.out_dir, "artifact directory");
    sub->add_option("--data", o.data, "textures | blobs | cifar10 | cifar100");
    sub->add_option("--head", o.head, "gram | gap_fc | learned_token");
    sub->add_option("--aggregate", o.aggregate, "final | multi");
    sub->add_option("--epochs", o.epochs, "training epochs");
    sub->add_option("--batch", o.batch, "batch size");
    sub->add_option("--depth", o.depth, "backbone depth (6n+2)");
}

TrainConfig build_config(const CliOpts& o) {
    TrainConfig cfg = o.config_path.empty() ? desk_profile() : load_config(o.config_path);
    for (const auto& kv : o.sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set wants key=value, got '" + kv + "'");
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) cfg.seed = *o.seed;
    if (o.limit) cfg.limit = *o.limit;
    if (o.heads) cfg.heads = *o.heads;
    if (o.lambda) cfg.lambda = *o.lambda;
    if (o.out_dir) cfg.out_dir = *o.out_dir;
    if (o.data) cfg.data = *o.data;
    if (o.head) cfg.head = *o.head;
    if (o.aggregate) cfg.aggregate = *o.aggregate;
    if (o.epochs) cfg.epochs = *o.epochs;
    if (o.batch) cfg.batch = *o.batch;
    if (o.depth) cfg.depth = *o.depth;
    return cfg;
}

void print_header(const TrainConfig& cfg) {
    std::string text = format_config(cfg);
    std::printf("# run configuration\n");
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        std::printf("# %s\n", text.substr(start, end - start).c_str());
        start = end + 1;
    }
}

void print_diag(const EvalOutcome& ev) {
    if (!ev.diag_valid) {
        std::printf("diagnostics need at least 2 heads and 2 examples; skipped\n");
        return;
    }
    std::printf("strength  %.6f\n", ev.diag.strength);
    std::printf("vote_rho  %.6f\n", ev.diag.rho);
    if (ev.diag.bound_valid)
        std::printf("err_bound %.6f\n", ev.diag.bound);
    else
        std::printf("err_bound n/a (strength not positive)\n");
}

// Chunked forward so feature export never holds the whole set in activations.
std::vector<std::vector<float>> embeddings_for(EnsembleT<float>& model, const Dataset& data,
                                               size_t count, std::vector<int>& labels_out) {
    const size_t n = std::min(count, data.size());
    if (n == 0) throw ConfigError("no examples to embed");
    std::vector<std::vector<float>> all(model.heads.size());
    std::vector<size_t> idx;
    for (size_t s = 0; s < n; s += 64) {
        const size_t e = std::min(n, s + 64);
        idx.resize(e - s);
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = s + i;
        const auto images = gather_batch(data, idx, false, 0);
        auto part = collect_embeddings(model, images);
        for (size_t h = 0; h < part.size(); ++h)
            all[h].insert(all[h].end(), part[h].begin(), part[h].end());
    }
    labels_out.assign(data.labels.begin(), data.labels.begin() + long(n));
    return all;
}

int run(int argc, char** argv) {
    CLI::App app{"Gramian-attention head ensembles: train, evaluate, inspect"};
    app.require_subcommand(1);
    CliOpts o;

    auto* train_cmd = app.add_subcommand("train", "fit a model and write metrics + checkpoints");
    std::string resume;
    add_common(train_cmd, o);
    train_cmd->add_option("--resume", resume, "continue from a final checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out split");
    std::string ckpt;
    std::vector<size_t> keep;
    add_common(eval_cmd, o);
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint to score")->required();
    eval_cmd->add_option("--keep", keep, "head indices to keep (prunes the rest)");

    auto* diag_cmd = app.add_subcommand("diagnose", "vote strength / correlation / bound");
    add_common(diag_cmd, o);
    diag_cmd->add_option("--ckpt", ckpt, "checkpoint to inspect")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "one training per value of an axis");
    std::string axis = "lambda";
    std::vector<double> values;
    add_common(sweep_cmd, o);
    sweep_cmd->add_option("--axis", axis, "lambda | heads");
    sweep_cmd->add_option("--values", values, "axis values, comma separated")
        ->required()
        ->delimiter(',');

    auto* export_cmd = app.add_subcommand("export-features", "pre-classifier embeddings as csv");
    size_t count = 512;
    add_common(export_cmd, o);
    export_cmd->add_option("--ckpt", ckpt, "checkpoint to read")->required();
    export_cmd->add_option("--count", count, "examples to embed");

    auto* plot_cmd = app.add_subcommand("plot", "2d projection of head embeddings as svg");
    add_common(plot_cmd, o);
    plot_cmd->add_option("--ckpt", ckpt, "checkpoint to read")->required();
    plot_cmd->add_option("--count", count, "examples to project");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    TrainConfig cfg = build_config(o);

    if (train_cmd->parsed()) {
        print_header(cfg);
        std::filesystem::create_directories(cfg.out_dir);
        write_text_file(cfg.out_dir + "/config.txt", format_config(cfg));
        const TrainOutcome res = train(cfg, resume);
        std::printf("final top1 %.4f  best top1 %.4f (epoch %zu)\n", res.final_top1, res.best_top1,
                    res.best_epoch);
        std::printf("metrics    %s\n", res.metrics_path.c_str());
        std::printf("checkpoint %s\n", res.final_ckpt.c_str());
        return 0;
    }

    if (sweep_cmd->parsed()) {
        std::filesystem::create_directories(cfg.out_dir);
        const auto rows = sweep(cfg, axis, values, cfg.out_dir + "/sweep.csv");
        for (const auto& r : rows)
            std::printf("%s=%g  top1 %.4f  rho %.4f  %s\n", axis.c_str(), r.value, r.top1, r.rho,
                        r.ok ? "ok" : r.error.c_str());
        std::printf("table %s/sweep.csv\n", cfg.out_dir.c_str());
        return 0;
    }

    LoadedCheckpoint lc = load_checkpoint(ckpt);
    if (lc.model.cfg.head.classes != cfg.classes)
        throw ConfigError("checkpoint was trained for " +
                          std::to_string(lc.model.cfg.head.classes) + " classes, config asks " +
                          std::to_string(cfg.classes));

    if (eval_cmd->parsed() || diag_cmd->parsed()) {
        EnsembleT<float> model =
            keep.empty() ? std::move(lc.model) : prune_heads(lc.model, keep);
        const Dataset data = make_val_dataset(cfg);
        const EvalOutcome ev = evaluate_model(model, data, cfg.batch, model.cfg.lambda);
        std::printf("examples  %zu\n", data.size());
        std::printf("top1      %.4f\n", ev.top1);
        std::printf("ce        %.6f\n", ev.ce);
        std::printf("dec       %.6f\n", ev.dec);
        for (size_t h = 0; h < ev.per_head_top1.size(); ++h)
            std::printf("head%zu     %.4f\n", h, ev.per_head_top1[h]);
        print_diag(ev);
        return 0;
    }

    // export-features and plot share the embedding pass.
    std::filesystem::create_directories(cfg.out_dir);
    const Dataset data = make_val_dataset(cfg);
    std::vector<int> labels;
    auto emb = embeddings_for(lc.model, data, count, labels);

    if (export_cmd->parsed()) {
        const std::string path = cfg.out_dir + "/features.csv";
        emit_features(emb, labels, path);
        std::printf("features %s\n", path.c_str());
        return 0;
    }

    const size_t n = labels.size(), h = emb.size();
    const size_t dim = emb[0].size() / n;
    std::vector<double> stacked;
    stacked.reserve(n * h * dim);
    for (const auto& e : emb)
        for (float v : e) stacked.push_back(double(v));
    const Pca2d pca = pca_2d(n * h, dim, stacked);
    std::vector<ScatterPoint> points(n * h);
    for (size_t i = 0; i < n * h; ++i)
        points[i] = {pca.proj[2 * i], pca.proj[2 * i + 1], i / n, labels[i % n]};
    const std::string path = cfg.out_dir + "/scatter.svg";
    emit_scatter(points, path);
    std::printf("scatter %s\n", path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
}
