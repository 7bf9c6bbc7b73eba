#include "gram/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include "gram/checkpoint.hpp"
#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

namespace {

size_t to_size(const std::string& v, const std::string& key) {
    try {
        return size_t(std::stoull(v));
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
    }
}

double to_double(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants a number, got '" + v + "'");
    }
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= v.size()) {
        size_t end = v.find(',', start);
        if (end == std::string::npos) end = v.size();
        if (end > start) out.push_back(v.substr(start, end - start));
        start = end + 1;
    }
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

// Round-robin over the class blocks the generators emit, so truncation keeps
// the label distribution balanced.
Dataset take_interleaved(const Dataset& full, size_t limit, size_t classes) {
    if (limit == 0 || limit >= full.size()) return full;
    const size_t per_class = full.size() / classes;
    Dataset out;
    out.channels = full.channels;
    out.side = full.side;
    out.classes = full.classes;
    const size_t numel = full.image_numel();
    out.images.reserve(limit * numel);
    out.labels.reserve(limit);
    for (size_t i = 0; i < limit; ++i) {
        const size_t src = (i % classes) * per_class + i / classes;
        out.images.insert(out.images.end(), full.images.begin() + long(src * numel),
                          full.images.begin() + long((src + 1) * numel));
        out.labels.push_back(full.labels[src]);
    }
    out.validate();
    return out;
}

// The two splits share the seed (and so the class definitions); the offset
// keys the validation draws away from every training example.
Dataset make_synth(const TrainConfig& cfg, size_t want, uint64_t index_offset) {
    const size_t per_class = (want + cfg.classes - 1) / cfg.classes;
    Dataset full = cfg.data == "textures"
                       ? synth_textures(cfg.classes, per_class, cfg.data_seed, 32,
                                        float(cfg.texture_cue), index_offset)
                       : synth_blobs(cfg.classes, per_class, 3 * 32 * 32, cfg.data_seed,
                                     index_offset);
    return take_interleaved(full, want, cfg.classes);
}

int argmax_row(const float* row, size_t k) {
    int best = 0;
    for (size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = int(j);
    return best;
}

using Momentum = std::map<std::string, std::vector<float>>;

// The attention-score backward scales with the Gramian token magnitude, so a
// converged confident model can emit step gradients ~1000x the usual norm on
// rare contested-softmax batches.  Capping the global norm keeps one such step
// from undoing the run while leaving ordinary steps untouched.
void clip_gradients(EnsembleT<float>& model, double max_norm) {
    double sq = 0;
    model.visit_params([&](const std::string&, TensorT<float>& p) {
        const float* g = p.grad();
        for (size_t i = 0; i < p.numel(); ++i) sq += double(g[i]) * double(g[i]);
    });
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const float scale = float(max_norm / norm);
    model.visit_params([&](const std::string&, TensorT<float>& p) {
        float* g = p.grad();
        for (size_t i = 0; i < p.numel(); ++i) g[i] *= scale;
    });
}

void sgd_step(EnsembleT<float>& model, Momentum& mom, double lr, double momentum, double wd) {
    model.visit_params([&](const std::string& name, TensorT<float>& p) {
        auto& m = mom[name];
        if (m.empty()) m.assign(p.numel(), 0.0f);
        float* w = p.data();
        const float* g = p.grad();
        for (size_t i = 0; i < p.numel(); ++i) {
            const float v = float(momentum) * m[i] + g[i] + float(wd) * w[i];
            m[i] = v;
            w[i] -= float(lr) * v;
        }
    });
}

}  // namespace

void TrainConfig::validate() const {
    if (data != "textures" && data != "blobs" && data != "cifar10" && data != "cifar100")
        throw ConfigError("config: unknown data kind '" + data + "'");
    if (data == "cifar10" && classes != 10)
        throw ConfigError("config: cifar10 has 10 classes, not " + std::to_string(classes));
    if (data == "cifar100" && classes != 100)
        throw ConfigError("config: cifar100 has 100 classes, not " + std::to_string(classes));
    if ((data == "cifar10" || data == "cifar100") && train_files.empty())
        throw ConfigError("config: " + data + " needs train_files");
    if (classes < 2) throw ConfigError("config: needs at least 2 classes");
    if (!(texture_cue > 0) || !std::isfinite(texture_cue))
        throw ConfigError("config: texture_cue must be positive");
    if (epochs == 0 || batch == 0) throw ConfigError("config: epochs and batch must be positive");
    if (eval_every == 0) throw ConfigError("config: eval_every must be positive");
    if (schedule != "step" && schedule != "cosine")
        throw ConfigError("config: unknown schedule '" + schedule + "'");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
        throw ConfigError("config: milestones must be nondecreasing");
    if (lr <= 0) throw ConfigError("config: lr must be positive");
    if (clip_norm < 0 || !std::isfinite(clip_norm))
        throw ConfigError("config: clip_norm must be zero or positive");
    head_kind_from_name(head);
    aggregate_from_name(aggregate);
    model_config(*this).validate();
}

TrainConfig desk_profile() {
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.limit = 5000;
    cfg.val_limit = 1000;
    cfg.stem = 8;
    cfg.channels = {8, 16, 32};
    cfg.milestones = {30, 45};
    return cfg;
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "data") cfg.data = value;
    else if (key == "train_files") cfg.train_files = split_list(value);
    else if (key == "val_files") cfg.val_files = split_list(value);
    else if (key == "limit") cfg.limit = to_size(value, key);
    else if (key == "val_limit") cfg.val_limit = to_size(value, key);
    else if (key == "data_seed") cfg.data_seed = to_size(value, key);
    else if (key == "classes") cfg.classes = to_size(value, key);
    else if (key == "augment") cfg.augment = to_size(value, key) != 0;
    else if (key == "texture_cue") cfg.texture_cue = to_double(value, key);
    else if (key == "depth") cfg.depth = to_size(value, key);
    else if (key == "stem") cfg.stem = to_size(value, key);
    else if (key == "channels") {
        const auto parts = split_list(value);
        if (parts.size() != 3) throw ConfigError("config: channels wants three values");
        for (size_t i = 0; i < 3; ++i) cfg.channels[i] = to_size(parts[i], key);
    } else if (key == "head") cfg.head = value;
    else if (key == "reduced") cfg.reduced = to_size(value, key);
    else if (key == "cardinality") cfg.cardinality = to_size(value, key);
    else if (key == "attn_dim") cfg.attn_dim = to_size(value, key);
    else if (key == "attn_heads") cfg.attn_heads = to_size(value, key);
    else if (key == "heads") cfg.heads = to_size(value, key);
    else if (key == "aggregate") cfg.aggregate = value;
    else if (key == "lambda") cfg.lambda = to_double(value, key);
    else if (key == "epochs") cfg.epochs = to_size(value, key);
    else if (key == "batch") cfg.batch = to_size(value, key);
    else if (key == "lr") cfg.lr = to_double(value, key);
    else if (key == "lr_factor") cfg.lr_factor = to_double(value, key);
    else if (key == "momentum") cfg.momentum = to_double(value, key);
    else if (key == "weight_decay") cfg.weight_decay = to_double(value, key);
    else if (key == "clip_norm") cfg.clip_norm = to_double(value, key);
    else if (key == "schedule") cfg.schedule = value;
    else if (key == "milestones") {
        cfg.milestones.clear();
        for (const auto& p : split_list(value)) cfg.milestones.push_back(to_size(p, key));
    } else if (key == "eval_every") cfg.eval_every = to_size(value, key);
    else if (key == "seed") cfg.seed = to_size(value, key);
    else if (key == "out_dir") cfg.out_dir = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    size_t line_no = 0, start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (const size_t hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                              line + "'");
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

TrainConfig load_config(const std::string& path) { return parse_config_text(read_text_file(path)); }

std::string format_config(const TrainConfig& c) {
    auto join_sz = [](const std::vector<size_t>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    auto join_str = [](const std::vector<std::string>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
        return s;
    };
    char num[64];
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) { out += k + '=' + v + '\n'; };
    kv("data", c.data);
    if (!c.train_files.empty()) kv("train_files", join_str(c.train_files));
    if (!c.val_files.empty()) kv("val_files", join_str(c.val_files));
    kv("limit", std::to_string(c.limit));
    kv("val_limit", std::to_string(c.val_limit));
    kv("data_seed", std::to_string(c.data_seed));
    kv("classes", std::to_string(c.classes));
    kv("augment", c.augment ? "1" : "0");
    std::snprintf(num, sizeof num, "%.17g", c.texture_cue);
    kv("texture_cue", num);
    kv("depth", std::to_string(c.depth));
    kv("stem", std::to_string(c.stem));
    kv("channels", std::to_string(c.channels[0]) + "," + std::to_string(c.channels[1]) + "," +
                       std::to_string(c.channels[2]));
    kv("head", c.head);
    kv("reduced", std::to_string(c.reduced));
    kv("cardinality", std::to_string(c.cardinality));
    kv("attn_dim", std::to_string(c.attn_dim));
    kv("attn_heads", std::to_string(c.attn_heads));
    kv("heads", std::to_string(c.heads));
    kv("aggregate", c.aggregate);
    std::snprintf(num, sizeof num, "%.17g", c.lambda);
    kv("lambda", num);
    kv("epochs", std::to_string(c.epochs));
    kv("batch", std::to_string(c.batch));
    std::snprintf(num, sizeof num, "%.17g", c.lr);
    kv("lr", num);
    std::snprintf(num, sizeof num, "%.17g", c.lr_factor);
    kv("lr_factor", num);
    std::snprintf(num, sizeof num, "%.17g", c.momentum);
    kv("momentum", num);
    std::snprintf(num, sizeof num, "%.17g", c.weight_decay);
    kv("weight_decay", num);
    std::snprintf(num, sizeof num, "%.17g", c.clip_norm);
    kv("clip_norm", num);
    kv("schedule", c.schedule);
    kv("milestones", join_sz(c.milestones));
    kv("eval_every", std::to_string(c.eval_every));
    kv("seed", std::to_string(c.seed));
    kv("out_dir", c.out_dir);
    return out;
}

EnsembleConfig model_config(const TrainConfig& cfg) {
    EnsembleConfig mc;
    mc.backbone.depth = cfg.depth;
    mc.backbone.input_channels = 3;
    mc.backbone.input_side = 32;
    mc.backbone.stem_channels = cfg.stem;
    mc.backbone.stage_channels = cfg.channels;
    mc.head.kind = head_kind_from_name(cfg.head);
    mc.head.in_channels = cfg.channels[2];
    mc.head.reduced = cfg.reduced != 0 ? cfg.reduced : cfg.channels[2];
    mc.head.cardinality = cfg.cardinality;
    mc.head.attn_dim = cfg.attn_dim;
    mc.head.attn_heads = cfg.attn_heads;
    mc.head.classes = cfg.classes;
    mc.num_heads = cfg.heads;
    mc.aggregate = aggregate_from_name(cfg.aggregate);
    mc.lambda = cfg.lambda;
    return mc;
}

double lr_at(const TrainConfig& cfg, size_t epoch) {
    if (cfg.schedule == "cosine")
        return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(epoch) / double(cfg.epochs)));
    double lr = cfg.lr;
    for (size_t m : cfg.milestones)
        if (epoch >= m) lr *= cfg.lr_factor;
    return lr;
}

Dataset make_train_dataset(const TrainConfig& cfg) {
    if (cfg.data == "cifar10" || cfg.data == "cifar100")
        return load_cifar_files(cfg.train_files,
                                cfg.data == "cifar10" ? CifarVariant::c10 : CifarVariant::c100,
                                cfg.limit);
    return make_synth(cfg, cfg.limit == 0 ? cfg.classes * 500 : cfg.limit, 0);
}

Dataset make_val_dataset(const TrainConfig& cfg) {
    if (cfg.data == "cifar10" || cfg.data == "cifar100") {
        if (cfg.val_files.empty())
            throw ConfigError("config: " + cfg.data + " needs val_files for evaluation");
        return load_cifar_files(cfg.val_files,
                                cfg.data == "cifar10" ? CifarVariant::c10 : CifarVariant::c100,
                                cfg.val_limit);
    }
    return make_synth(cfg, cfg.val_limit == 0 ? cfg.classes * 100 : cfg.val_limit,
                      uint64_t(1) << 32);
}

EvalOutcome evaluate_model(EnsembleT<float>& model, const Dataset& data, size_t batch,
                           double lambda) {
    if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
    if (batch == 0) throw ConfigError("evaluate: batch must be positive");

    const size_t n = data.size(), h = model.heads.size(), k = model.cfg.head.classes;
    EvalOutcome out;
    out.per_head_top1.assign(h, 0.0);
    VoteTable votes;
    votes.classes = k;
    votes.num_heads = h;
    votes.labels = data.labels;
    votes.preds.reserve(n * h);

    size_t correct = 0;
    double ce_acc = 0, dec_acc = 0;
    std::vector<size_t> idx;
    for (size_t s = 0; s < n; s += batch) {
        const size_t e = std::min(n, s + batch);
        idx.resize(e - s);
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = s + i;
        const auto images = gather_batch(data, idx, false, 0);
        auto preds = forward_all(model, images, BnMode::eval, static_cast<Tape*>(nullptr));
        const std::vector<int> labels(data.labels.begin() + long(s), data.labels.begin() + long(e));
        const auto lb = total_loss(preds, labels, float(lambda), static_cast<Tape*>(nullptr));
        ce_acc += double(lb.ce_sum) * double(e - s);
        dec_acc += double(lb.dec) * double(e - s);
        for (size_t i = 0; i < e - s; ++i) {
            if (argmax_row(preds.mean_probs.data() + i * k, k) == labels[i]) ++correct;
            for (size_t j = 0; j < h; ++j) {
                const int v = argmax_row(preds.per_head_probs[j].data() + i * k, k);
                votes.preds.push_back(v);
                if (v == labels[i]) out.per_head_top1[j] += 1.0;
            }
        }
    }
    out.top1 = double(correct) / double(n);
    out.ce = ce_acc / double(n);
    out.dec = dec_acc / double(n);
    for (auto& v : out.per_head_top1) v /= double(n);
    if (h >= 2 && n >= 2) {
        out.diag = diagnose(votes);
        out.diag_valid = true;
    }
    return out;
}

std::string format_metric_row(const MetricRow& row) {
    const std::string all = format_metrics({row});
    const size_t nl = all.find('\n');
    return all.substr(nl + 1, all.size() - nl - 2);
}

TrainOutcome train(const TrainConfig& cfg, const std::string& resume_from) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);

    const Dataset train_data = make_train_dataset(cfg);
    const Dataset val_data = make_val_dataset(cfg);
    if (train_data.size() == 0) throw ConfigError("train: empty training set");

    const EnsembleConfig mc = model_config(cfg);
    EnsembleT<float> model = build_model<float>(mc, cfg.seed);
    Momentum momentum;
    TrainOutcome out;
    size_t start_epoch = 0;

    if (!resume_from.empty()) {
        LoadedCheckpoint lc = load_checkpoint(resume_from);
        // Geometry must match; header text of both configs is the cheapest witness.
        if (lc.model.cfg.backbone.depth != mc.backbone.depth ||
            lc.model.cfg.head.kind != mc.head.kind || lc.model.cfg.num_heads != mc.num_heads ||
            lc.model.cfg.head.classes != mc.head.classes)
            throw ConfigError("resume: checkpoint geometry differs from the requested run");
        model = std::move(lc.model);
        start_epoch = lc.meta.epoch;
        out.best_top1 = lc.meta.best_top1;
        for (const auto& [k, v] : lc.meta.extra)
            if (k == "best_epoch") out.best_epoch = std::stoull(v);
        for (auto& [name, values] : lc.extra_blobs)
            if (name.rfind("mom.", 0) == 0) momentum[name.substr(4)] = std::move(values);
        std::string csv = "epoch,split,loss_ce,loss_dec,top1,strength,rho,bound\n";
        for (const auto& row : lc.meta.history) csv += row + '\n';
        out.history = parse_metrics(csv);
        if (start_epoch >= cfg.epochs)
            throw ConfigError("resume: checkpoint already covers " + std::to_string(start_epoch) +
                              " epochs");
    }

    const size_t n = train_data.size();
    const size_t k = mc.head.classes;
    out.metrics_path = cfg.out_dir + "/metrics.csv";
    out.final_ckpt = cfg.out_dir + "/ckpt_final.bin";
    out.best_ckpt = cfg.out_dir + "/ckpt_best.bin";

    auto meta_at = [&](size_t completed) {
        CheckpointMeta meta;
        meta.seed = cfg.seed;
        meta.epoch = completed;
        meta.best_top1 = out.best_top1;
        meta.extra.emplace_back("best_epoch", std::to_string(out.best_epoch));
        for (const auto& row : out.history) meta.history.push_back(format_metric_row(row));
        return meta;
    };
    auto momentum_blobs = [&]() {
        NamedBlobs blobs;
        model.visit_params([&](const std::string& name, TensorT<float>&) {
            auto it = momentum.find(name);
            if (it != momentum.end()) blobs.emplace_back("mom." + name, it->second);
        });
        return blobs;
    };

    for (size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);
        const auto perm = epoch_permutation(n, cfg.seed, epoch);
        const uint64_t aug_key = mix_keys(cfg.seed, epoch, 0xa06);

        double ce_acc = 0, dec_acc = 0;
        size_t correct = 0;
        for (size_t s = 0; s < n; s += cfg.batch) {
            const size_t e = std::min(n, s + cfg.batch);
            const std::vector<size_t> idx(perm.begin() + long(s), perm.begin() + long(e));
            const auto images = gather_batch(train_data, idx, cfg.augment, aug_key);
            std::vector<int> labels(e - s);
            for (size_t i = 0; i < idx.size(); ++i) labels[i] = train_data.labels[idx[i]];

            Tape tape;
            auto preds = forward_all(model, images, BnMode::train, &tape);
            auto lb = total_loss(preds, labels, float(cfg.lambda), &tape);
            if (!std::isfinite(double(lb.total.item())))
                throw StateError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(s / cfg.batch));
            model.visit_params([](const std::string&, TensorT<float>& p) { p.zero_grad(); });
            tape.backward(lb.total);
            if (cfg.clip_norm > 0) clip_gradients(model, cfg.clip_norm);
            sgd_step(model, momentum, lr, cfg.momentum, cfg.weight_decay);

            ce_acc += double(lb.ce_sum) * double(e - s);
            dec_acc += double(lb.dec) * double(e - s);
            for (size_t i = 0; i < e - s; ++i)
                if (argmax_row(preds.mean_probs.data() + i * k, k) == labels[i]) ++correct;
        }

        MetricRow trow;
        trow.epoch = epoch;
        trow.split = "train";
        trow.loss_ce = ce_acc / double(n);
        trow.loss_dec = dec_acc / double(n);
        trow.top1 = double(correct) / double(n);
        out.history.push_back(trow);

        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            const EvalOutcome ev = evaluate_model(model, val_data, cfg.batch, cfg.lambda);
            MetricRow vrow;
            vrow.epoch = epoch;
            vrow.split = "val";
            vrow.loss_ce = ev.ce;
            vrow.loss_dec = ev.dec;
            vrow.top1 = ev.top1;
            if (ev.diag_valid) {
                vrow.has_diag = true;
                vrow.strength = ev.diag.strength;
                vrow.rho = ev.diag.rho;
                vrow.bound = ev.diag.bound_valid ? ev.diag.bound : std::nan("");
            }
            out.history.push_back(vrow);
            out.final_top1 = ev.top1;
            if (ev.top1 > out.best_top1) {
                out.best_top1 = ev.top1;
                out.best_epoch = epoch;
                save_checkpoint(model, meta_at(epoch + 1), momentum_blobs(), out.best_ckpt);
            }
        }
        emit_metrics(out.history, out.metrics_path);
    }

    save_checkpoint(model, meta_at(cfg.epochs), momentum_blobs(), out.final_ckpt);
    return out;
}

std::vector<SweepRow> sweep(const TrainConfig& base, const std::string& axis,
                            const std::vector<double>& values, const std::string& out_csv) {
    if (axis != "lambda" && axis != "heads")
        throw ConfigError("sweep: axis must be 'lambda' or 'heads', not '" + axis + "'");
    if (values.empty()) throw ConfigError("sweep: no values given");

    std::vector<SweepRow> rows;
    for (const double v : values) {
        SweepRow row;
        row.value = v;
        TrainConfig cfg = base;
        char tag[64];
        std::snprintf(tag, sizeof tag, "%s_%g", axis.c_str(), v);
        cfg.out_dir = base.out_dir + "/" + tag;
        try {
            if (axis == "lambda") {
                cfg.lambda = v;
            } else {
                if (v < 1 || v != std::floor(v))
                    throw ConfigError("sweep: head count must be a positive integer, got " +
                                      std::to_string(v));
                cfg.heads = size_t(v);
            }
            const TrainOutcome res = train(cfg);
            row.top1 = res.final_top1;
            row.strength = row.rho = row.bound = std::nan("");
            for (auto it = res.history.rbegin(); it != res.history.rend(); ++it)
                if (it->split == "val") {
                    if (it->has_diag) {
                        row.strength = it->strength;
                        row.rho = it->rho;
                        row.bound = it->bound;
                    }
                    break;
                }
            row.ok = true;
        } catch (const std::exception& ex) {
            row.ok = false;
            row.error = ex.what();
            row.top1 = row.strength = row.rho = row.bound = std::nan("");
            std::fprintf(stderr, "sweep cell %s failed: %s\n", tag, ex.what());
        }
        rows.push_back(row);
    }

    std::string csv = "value,top1,strength,rho,bound\n";
    char buf[200];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", r.value, r.top1,
                      r.strength, r.rho, r.bound);
        csv += buf;
    }
    write_text_file(out_csv, csv);
    return rows;
}

}  // namespace gram
