#include "gram/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <map>

#include "gram/data.hpp"
#include "gram/error.hpp"

namespace gram {

namespace {

void require_little_endian() {
    const uint16_t probe = 0x0102;
    uint8_t first;
    std::memcpy(&first, &probe, 1);
    if (first != 0x02) throw StateError("checkpoint io expects a little-endian host");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw FormatError(path + ": truncated " + what + " at byte " + std::to_string(pos));
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

using HeaderPairs = std::vector<std::pair<std::string, std::string>>;

HeaderPairs parse_header(const std::string& text, const std::string& path) {
    HeaderPairs pairs;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError(path + ": header line without '=': '" + line + "'");
        pairs.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return pairs;
}

std::string header_get(const HeaderPairs& pairs, const std::string& key, const std::string& path) {
    for (const auto& [k, v] : pairs)
        if (k == key) return v;
    throw FormatError(path + ": header is missing key '" + key + "'");
}

void append_blob(std::string& out, const std::string& name, const float* data, size_t numel) {
    put_u32(out, uint32_t(name.size()));
    out += name;
    put_u64(out, numel);
    out.append(reinterpret_cast<const char*>(data), numel * sizeof(float));
}

bool bn_stats_ready(EnsembleT<float>& model, const std::string& context) {
    int seen_init = 0, seen_raw = 0;
    model.backbone.visit_bn([&](const std::string&, BnLayerT<float>& bn) {
        (bn.stats.initialized ? seen_init : seen_raw)++;
    });
    if (seen_init != 0 && seen_raw != 0)
        throw StateError(context + ": batch-norm layers disagree on running-stat state");
    return seen_init != 0;
}

}  // namespace

void save_checkpoint(EnsembleT<float>& model, const CheckpointMeta& meta,
                     const NamedBlobs& extra_blobs, const std::string& path) {
    require_little_endian();
    const auto& c = model.cfg;

    std::string header;
    auto kv = [&header](const std::string& k, const std::string& v) {
        header += k + '=' + v + '\n';
    };
    kv("depth", std::to_string(c.backbone.depth));
    kv("input_channels", std::to_string(c.backbone.input_channels));
    kv("input_side", std::to_string(c.backbone.input_side));
    kv("stem", std::to_string(c.backbone.stem_channels));
    kv("ch0", std::to_string(c.backbone.stage_channels[0]));
    kv("ch1", std::to_string(c.backbone.stage_channels[1]));
    kv("ch2", std::to_string(c.backbone.stage_channels[2]));
    kv("head", head_kind_name(c.head.kind));
    kv("in_channels", std::to_string(c.head.in_channels));
    kv("reduced", std::to_string(c.head.reduced));
    kv("cardinality", std::to_string(c.head.cardinality));
    kv("attn_dim", std::to_string(c.head.attn_dim));
    kv("attn_heads", std::to_string(c.head.attn_heads));
    kv("classes", std::to_string(c.head.classes));
    kv("num_heads", std::to_string(c.num_heads));
    kv("aggregate", aggregate_name(c.aggregate));
    kv("lambda", fmt_double(c.lambda));
    kv("seed", std::to_string(meta.seed));
    kv("epoch", std::to_string(meta.epoch));
    kv("best_top1", fmt_double(meta.best_top1));
    const bool bn_ready = bn_stats_ready(model, "save_checkpoint");
    kv("bn", bn_ready ? "1" : "0");
    for (const auto& row : meta.history) kv("hist", row);
    for (const auto& [k, v] : meta.extra) kv(k, v);

    std::string body;
    size_t blob_count = 0;
    model.visit_params([&](const std::string& name, TensorT<float>& t) {
        append_blob(body, name, t.data(), t.numel());
        ++blob_count;
    });
    if (bn_ready) {
        model.backbone.visit_bn([&](const std::string& name, BnLayerT<float>& bn) {
            append_blob(body, name + ".rmean", bn.stats.mean.data(), bn.stats.mean.size());
            append_blob(body, name + ".rvar", bn.stats.var.data(), bn.stats.var.size());
            blob_count += 2;
        });
    }
    for (const auto& [name, values] : extra_blobs) {
        append_blob(body, name, values.data(), values.size());
        ++blob_count;
    }

    std::string out = "GRMH";
    put_u32(out, kCheckpointVersion);
    put_u64(out, header.size());
    out += header;
    put_u64(out, blob_count);
    out += body;
    write_text_file(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    require_little_endian();
    const std::string raw = read_text_file(path);
    Reader rd{raw, 0, path};

    if (rd.bytes(4, "magic") != "GRMH") throw FormatError(path + ": bad magic, not a checkpoint");
    const uint32_t version = rd.u32("version");
    if (version != kCheckpointVersion)
        throw FormatError(path + ": unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
    const uint64_t header_len = rd.u64("header length");
    const HeaderPairs hdr = parse_header(rd.bytes(header_len, "header"), path);

    auto num = [&](const std::string& key) { return std::stoull(header_get(hdr, key, path)); };
    EnsembleConfig cfg;
    cfg.backbone.depth = num("depth");
    cfg.backbone.input_channels = num("input_channels");
    cfg.backbone.input_side = num("input_side");
    cfg.backbone.stem_channels = num("stem");
    cfg.backbone.stage_channels = {size_t(num("ch0")), size_t(num("ch1")), size_t(num("ch2"))};
    cfg.head.kind = head_kind_from_name(header_get(hdr, "head", path));
    cfg.head.in_channels = num("in_channels");
    cfg.head.reduced = num("reduced");
    cfg.head.cardinality = num("cardinality");
    cfg.head.attn_dim = num("attn_dim");
    cfg.head.attn_heads = num("attn_heads");
    cfg.head.classes = num("classes");
    cfg.num_heads = num("num_heads");
    cfg.aggregate = aggregate_from_name(header_get(hdr, "aggregate", path));
    cfg.lambda = std::stod(header_get(hdr, "lambda", path));
    cfg.validate();

    LoadedCheckpoint out{build_model<float>(cfg, 0), {}, {}};
    out.meta.seed = num("seed");
    out.meta.epoch = num("epoch");
    out.meta.best_top1 = std::stod(header_get(hdr, "best_top1", path));
    const bool bn_ready = header_get(hdr, "bn", path) == "1";
    static const char* kKnown[] = {"depth", "input_channels", "input_side", "stem", "ch0", "ch1",
                                   "ch2", "head", "in_channels", "reduced", "cardinality",
                                   "attn_dim", "attn_heads", "classes", "num_heads", "aggregate",
                                   "lambda", "seed", "epoch", "best_top1", "bn"};
    for (const auto& [k, v] : hdr) {
        if (k == "hist") {
            out.meta.history.push_back(v);
            continue;
        }
        bool known = false;
        for (const char* w : kKnown) known = known || k == w;
        if (!known) out.meta.extra.emplace_back(k, v);
    }

    const uint64_t blob_count = rd.u64("blob count");
    NamedBlobs blobs;
    blobs.reserve(blob_count);
    for (uint64_t i = 0; i < blob_count; ++i) {
        const uint32_t name_len = rd.u32("blob name length");
        const std::string name = rd.bytes(name_len, "blob name");
        const uint64_t numel = rd.u64("blob size");
        rd.need(numel * sizeof(float), "blob data");
        std::vector<float> values(numel);
        std::memcpy(values.data(), raw.data() + rd.pos, numel * sizeof(float));
        rd.pos += numel * sizeof(float);
        blobs.emplace_back(name, std::move(values));
    }
    if (rd.pos != raw.size())
        throw FormatError(path + ": " + std::to_string(raw.size() - rd.pos) +
                          " trailing bytes after last blob");

    std::map<std::string, size_t> index;
    for (size_t i = 0; i < blobs.size(); ++i) index.emplace(blobs[i].first, i);
    std::vector<bool> consumed(blobs.size(), false);
    auto take = [&](const std::string& name, float* dst, size_t numel) {
        auto it = index.find(name);
        if (it == index.end())
            throw FormatError(path + ": checkpoint is missing blob '" + name + "'");
        const auto& values = blobs[it->second].second;
        if (values.size() != numel)
            throw FormatError(path + ": blob '" + name + "' holds " +
                              std::to_string(values.size()) + " values, model expects " +
                              std::to_string(numel));
        std::memcpy(dst, values.data(), numel * sizeof(float));
        consumed[it->second] = true;
    };

    out.model.visit_params(
        [&](const std::string& name, TensorT<float>& t) { take(name, t.data(), t.numel()); });
    if (bn_ready)
        out.model.backbone.visit_bn([&](const std::string& name, BnLayerT<float>& bn) {
            const size_t c = bn.gamma.numel();  // fresh models carry empty stat vectors
            bn.stats.mean.assign(c, 0.0f);
            bn.stats.var.assign(c, 0.0f);
            take(name + ".rmean", bn.stats.mean.data(), c);
            take(name + ".rvar", bn.stats.var.data(), c);
            bn.stats.initialized = true;
        });
    for (size_t i = 0; i < blobs.size(); ++i)
        if (!consumed[i]) out.extra_blobs.push_back(std::move(blobs[i]));
    return out;
}

}  // namespace gram
