#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include "gram/ops.hpp"
#include "gram/tensor.hpp"

namespace gram {

// CIFAR-style residual net: 3x3 stem, three stages of basic blocks, depth 6n+2.
struct BackboneConfig {
    size_t depth = 20;
    size_t input_channels = 3;
    size_t input_side = 32;
    size_t stem_channels = 16;
    std::array<size_t, 3> stage_channels{16, 32, 64};

    void validate() const;  // throws ConfigError
    size_t blocks_per_stage() const { return (depth - 2) / 6; }
};

template <class T>
struct BnLayerT {
    TensorT<T> gamma, beta;
    BnStats<T> stats;
};

template <class T>
struct BasicBlockT {
    TensorT<T> conv1, conv2;  // [Cout,Cin,3,3]
    BnLayerT<T> bn1, bn2;
    TensorT<T> proj;  // 1x1 downsample conv when shape changes, else unallocated
    BnLayerT<T> bnp;
    size_t stride = 1;
    bool has_proj = false;
};

template <class T>
struct BackboneT {
    BackboneConfig cfg;
    TensorT<T> stem;
    BnLayerT<T> stem_bn;
    std::vector<std::vector<BasicBlockT<T>>> stages;
    std::vector<TensorT<T>> agg_proj;  // 1x1 maps from each earlier stage to final width

    // Fixed construction-order traversal; checkpoint blob order derives from it.
    void visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn);
    void visit_bn(const std::function<void(const std::string&, BnLayerT<T>&)>& fn);
    std::vector<std::pair<std::string, TensorT<T>>> params();
    size_t param_count();
};

template <class T>
struct StageFeaturesT {
    std::vector<TensorT<T>> maps;  // one NCHW map per stage
    TensorT<T> tokens;             // final map as [N x HW x C]
};

enum class Aggregate { final_stage, multi };

const char* aggregate_name(Aggregate a);
Aggregate aggregate_from_name(const std::string& s);  // throws ConfigError

template <class T>
BackboneT<T> build_backbone(const BackboneConfig& cfg, uint64_t seed);

template <class T>
StageFeaturesT<T> backbone_forward(BackboneT<T>& net, const TensorT<T>& images, BnMode mode,
                                   std::type_identity_t<TapeT<T>*> tape);

// final: the token view of the last stage map (same storage). multi: earlier
// stages pooled to the final grid, 1x1-projected to the final width, summed in.
template <class T>
TensorT<T> aggregate_stages(BackboneT<T>& net, const StageFeaturesT<T>& feats, Aggregate mode,
                            std::type_identity_t<TapeT<T>*> tape);

using Backbone = BackboneT<float>;
using StageFeatures = StageFeaturesT<float>;

}  // namespace gram
