#include "gram/backbone.hpp"

#include <cmath>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

void BackboneConfig::validate() const {
    if (depth < 8 || (depth - 2) % 6 != 0)
        throw ConfigError("backbone depth " + std::to_string(depth) +
                          " is not of the 6n+2 family (20, 32, ..., 110)");
    for (size_t i = 1; i < stage_channels.size(); ++i)
        if (stage_channels[i] < stage_channels[i - 1])
            throw ConfigError("stage channels must be nondecreasing");
    if (input_side % 4 != 0)
        throw ConfigError("input side " + std::to_string(input_side) +
                          " must be divisible by 4 (two stride-2 stages)");
    if (input_channels == 0 || stem_channels == 0) throw ConfigError("zero channel count");
}

const char* aggregate_name(Aggregate a) { return a == Aggregate::final_stage ? "final" : "multi"; }

Aggregate aggregate_from_name(const std::string& s) {
    if (s == "final") return Aggregate::final_stage;
    if (s == "multi") return Aggregate::multi;
    throw ConfigError("unknown aggregation mode '" + s + "' (final|multi)");
}

namespace {

template <class T>
TensorT<T> he_conv(size_t co, size_t ci, size_t k, Rng& rng) {
    const T std = T(std::sqrt(2.0 / double(ci * k * k)));
    return TensorT<T>::randn({co, ci, k, k}, rng, std, true);
}

template <class T>
BnLayerT<T> unit_bn(size_t c) {
    return {TensorT<T>::full({c}, T(1), true), TensorT<T>::zeros({c}, true), {}};
}

}  // namespace

template <class T>
BackboneT<T> build_backbone(const BackboneConfig& cfg, uint64_t seed) {
    cfg.validate();
    BackboneT<T> net;
    net.cfg = cfg;
    Rng rng(seed);
    net.stem = he_conv<T>(cfg.stem_channels, cfg.input_channels, 3, rng);
    net.stem_bn = unit_bn<T>(cfg.stem_channels);

    size_t in_c = cfg.stem_channels;
    const size_t n = cfg.blocks_per_stage();
    for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
        const size_t out_c = cfg.stage_channels[s];
        std::vector<BasicBlockT<T>> blocks;
        for (size_t b = 0; b < n; ++b) {
            BasicBlockT<T> blk;
            blk.stride = (s > 0 && b == 0) ? 2 : 1;
            blk.conv1 = he_conv<T>(out_c, in_c, 3, rng);
            blk.bn1 = unit_bn<T>(out_c);
            blk.conv2 = he_conv<T>(out_c, out_c, 3, rng);
            blk.bn2 = unit_bn<T>(out_c);
            blk.has_proj = (blk.stride != 1 || in_c != out_c);
            if (blk.has_proj) {
                blk.proj = he_conv<T>(out_c, in_c, 1, rng);
                blk.bnp = unit_bn<T>(out_c);
            }
            blocks.push_back(std::move(blk));
            in_c = out_c;
        }
        net.stages.push_back(std::move(blocks));
    }
    const size_t final_c = cfg.stage_channels.back();
    for (size_t s = 0; s + 1 < cfg.stage_channels.size(); ++s)
        net.agg_proj.push_back(he_conv<T>(final_c, cfg.stage_channels[s], 1, rng));
    return net;
}

template <class T>
void BackboneT<T>::visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    fn("stem.w", stem);
    fn("stem.bn.g", stem_bn.gamma);
    fn("stem.bn.b", stem_bn.beta);
    for (size_t s = 0; s < stages.size(); ++s)
        for (size_t b = 0; b < stages[s].size(); ++b) {
            auto& blk = stages[s][b];
            const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
            fn(p + "conv1.w", blk.conv1);
            fn(p + "bn1.g", blk.bn1.gamma);
            fn(p + "bn1.b", blk.bn1.beta);
            fn(p + "conv2.w", blk.conv2);
            fn(p + "bn2.g", blk.bn2.gamma);
            fn(p + "bn2.b", blk.bn2.beta);
            if (blk.has_proj) {
                fn(p + "proj.w", blk.proj);
                fn(p + "bnp.g", blk.bnp.gamma);
                fn(p + "bnp.b", blk.bnp.beta);
            }
        }
    for (size_t s = 0; s < agg_proj.size(); ++s)
        fn("agg" + std::to_string(s) + ".w", agg_proj[s]);
}

template <class T>
void BackboneT<T>::visit_bn(const std::function<void(const std::string&, BnLayerT<T>&)>& fn) {
    fn("stem.bn", stem_bn);
    for (size_t s = 0; s < stages.size(); ++s)
        for (size_t b = 0; b < stages[s].size(); ++b) {
            auto& blk = stages[s][b];
            const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
            fn(p + "bn1", blk.bn1);
            fn(p + "bn2", blk.bn2);
            if (blk.has_proj) fn(p + "bnp", blk.bnp);
        }
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> BackboneT<T>::params() {
    std::vector<std::pair<std::string, TensorT<T>>> out;
    visit_params([&](const std::string& name, TensorT<T>& t) { out.emplace_back(name, t); });
    return out;
}

template <class T>
size_t BackboneT<T>::param_count() {
    size_t n = 0;
    visit_params([&](const std::string&, TensorT<T>& t) { n += t.numel(); });
    return n;
}

template <class T>
StageFeaturesT<T> backbone_forward(BackboneT<T>& net, const TensorT<T>& images, BnMode mode,
                                   std::type_identity_t<TapeT<T>*> tape) {
    const auto& cfg = net.cfg;
    if (images.ndim() != 4 || images.dim(1) != cfg.input_channels ||
        images.dim(2) != cfg.input_side || images.dim(3) != cfg.input_side)
        throw DimError("backbone expects [Nx" + std::to_string(cfg.input_channels) + "x" +
                       std::to_string(cfg.input_side) + "x" + std::to_string(cfg.input_side) +
                       "] images, got " + shape_str(images.shape()));

    const T momentum = T(0.1), eps = T(1e-5);
    auto bn = [&](const TensorT<T>& x, BnLayerT<T>& l) {
        return batchnorm2d(x, l.gamma, l.beta, l.stats, mode, momentum, eps, tape);
    };

    StageFeaturesT<T> feats;
    auto h = relu(bn(conv2d(images, net.stem, 1, 1, tape), net.stem_bn), tape);
    for (auto& stage : net.stages) {
        for (auto& blk : stage) {
            auto y = bn(conv2d(h, blk.conv1, blk.stride, 1, tape), blk.bn1);
            y = bn(conv2d(relu(y, tape), blk.conv2, 1, 1, tape), blk.bn2);
            auto skip = blk.has_proj ? bn(conv2d(h, blk.proj, blk.stride, 0, tape), blk.bnp) : h;
            h = relu(add(y, skip, tape), tape);
        }
        feats.maps.push_back(h);
    }
    feats.tokens = nchw_to_tokens(feats.maps.back(), tape);
    return feats;
}

template <class T>
TensorT<T> aggregate_stages(BackboneT<T>& net, const StageFeaturesT<T>& feats, Aggregate mode,
                            std::type_identity_t<TapeT<T>*> tape) {
    if (mode == Aggregate::final_stage) return feats.tokens;
    const auto& last = feats.maps.back();
    auto acc = last;
    for (size_t s = 0; s + 1 < feats.maps.size(); ++s) {
        const auto& m = feats.maps[s];
        if (m.dim(2) % last.dim(2) != 0)
            throw DimError("stage grid " + std::to_string(m.dim(2)) +
                           " not divisible by final grid " + std::to_string(last.dim(2)));
        const size_t factor = m.dim(2) / last.dim(2);
        auto pooled = factor == 1 ? m : avg_pool2d(m, factor, tape);
        acc = add(acc, conv2d(pooled, net.agg_proj[s], 1, 0, tape), tape);
    }
    return nchw_to_tokens(acc, tape);
}

#define GRAMNET_INSTANTIATE_BACKBONE(T)                                                       \
    template struct BackboneT<T>;                                                             \
    template BackboneT<T> build_backbone<T>(const BackboneConfig&, uint64_t);                 \
    template StageFeaturesT<T> backbone_forward<T>(BackboneT<T>&, const TensorT<T>&, BnMode,  \
                                                   TapeT<T>*);                                \
    template TensorT<T> aggregate_stages<T>(BackboneT<T>&, const StageFeaturesT<T>&, Aggregate, \
                                            TapeT<T>*);

GRAMNET_INSTANTIATE_BACKBONE(float)
GRAMNET_INSTANTIATE_BACKBONE(double)
#undef GRAMNET_INSTANTIATE_BACKBONE

}  // namespace gram
