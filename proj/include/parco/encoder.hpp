#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "parco/autodiff.hpp"
#include "parco/params.hpp"

// Temporal geometry encoder: Fourier lifting with a learnable basis, static
// kNN edge convolutions with channel-wise max pooling per frame, and
// single-head self-attention over the stacked per-frame codes.
namespace parco::encoder {

struct EncoderConfig {
    std::size_t m = 32;                                  // Fourier bases
    std::size_t k = 8;                                   // kNN neighbors
    std::size_t d = 128;                                 // latent width
    std::vector<std::size_t> edge_conv_widths{64, 64, 128};
    std::size_t attn_layers = 2;
    std::size_t window_T = 4;
    std::size_t points_per_frame = 256;                  // M
    double fourier_sigma = 1.0;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);

struct EdgeConvWeights {
    ad::Var w_self;  // F' x F, acts on f_i
    ad::Var w_nbr;   // F' x F, acts on f_j - f_i
    ad::Var bias;    // 1 x F'
};

struct AttentionWeights {
    ad::Var wq, wk, wv;  // d x d
};

struct EncoderWeights {
    ad::Var basis;  // m x 3
    std::vector<EdgeConvWeights> edge_conv;
    ad::Var proj_w;  // d x C_last
    ad::Var proj_b;  // 1 x d
    std::vector<AttentionWeights> attention;
};

/// Parameter indices inside a ParamStore.
struct EncoderLayout {
    std::size_t basis = 0;
    std::vector<std::array<std::size_t, 3>> edge_conv;
    std::size_t proj_w = 0, proj_b = 0;
    std::vector<std::array<std::size_t, 3>> attention;

    EncoderWeights bind(std::span<const ad::Var> vars) const;
};

/// Registers and initializes encoder parameters under the "encoder." prefix.
EncoderLayout register_encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng);

/// Row i = [cos(2 pi B p_i), sin(2 pi B p_i)], cos block first.
ad::Var fourier_lift(ad::Var points, ad::Var basis);

struct KnnGraph {
    std::size_t k = 0;
    std::vector<std::uint32_t> neighbors;  // row-major M x k

    std::size_t points() const { return k ? neighbors.size() / k : 0; }
    std::uint32_t at(std::size_t i, std::size_t j) const { return neighbors[i * k + j]; }
};

/// k nearest neighbors per point (self excluded), ordered by distance with
/// ties broken by the smaller index. Requires M > k.
KnnGraph knn_graph(const ad::Tensor& points, std::size_t k);

/// out_i = max_j ReLU(W_self f_i + W_nbr (f_j - f_i) + b), per channel.
ad::Var edge_conv(ad::Var features, const KnnGraph& graph, const EdgeConvWeights& w);

/// Per-frame code: lift -> edge convs on a graph built once from raw
/// coordinates -> max over points -> affine projection to d. Returns 1 x d.
ad::Var encode_frame(ad::Tape& tape, const ad::Tensor& points, const EncoderWeights& w, std::size_t k);

/// Z + softmax(Q K^T / sqrt(d)) V with Q = Z W_Q, K = Z W_K, V = Z W_V.
/// When weights_out is set it receives the T x T attention matrix.
ad::Var self_attention_layer(ad::Var z, const AttentionWeights& w, ad::Var* weights_out = nullptr);

/// Encodes every frame, stacks the codes in time order, runs the attention
/// stack (skipped when use_attention is false) and returns the last row.
ad::Var aggregate_window(ad::Tape& tape, std::span<const ad::Tensor> frames, const EncoderWeights& w, std::size_t k,
                         bool use_attention = true);

}  // namespace parco::encoder
