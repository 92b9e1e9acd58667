#include "parco/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace parco::encoder {

using ad::Tensor;
using ad::Var;

void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"m", c.m},
         {"k", c.k},
         {"d", c.d},
         {"edge_conv_widths", c.edge_conv_widths},
         {"attn_layers", c.attn_layers},
         {"window_T", c.window_T},
         {"points_per_frame", c.points_per_frame},
         {"fourier_sigma", c.fourier_sigma}};
}

EncoderWeights EncoderLayout::bind(std::span<const Var> vars) const {
    EncoderWeights w;
    w.basis = vars[basis];
    for (const auto& e : edge_conv) w.edge_conv.push_back({vars[e[0]], vars[e[1]], vars[e[2]]});
    w.proj_w = vars[proj_w];
    w.proj_b = vars[proj_b];
    for (const auto& a : attention) w.attention.push_back({vars[a[0]], vars[a[1]], vars[a[2]]});
    return w;
}

EncoderLayout register_encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    if (cfg.edge_conv_widths.empty()) throw std::invalid_argument("encoder needs at least one edge-conv layer");
    EncoderLayout layout;
    layout.basis = store.add("encoder.fourier_B", normal_tensor(rng, cfg.m, 3, cfg.fourier_sigma));
    std::size_t in = 2 * cfg.m;
    for (std::size_t l = 0; l < cfg.edge_conv_widths.size(); ++l) {
        const std::size_t out = cfg.edge_conv_widths[l];
        const double bound = 1.0 / std::sqrt(static_cast<double>(2 * in));
        const std::string p = "encoder.edge_conv" + std::to_string(l) + ".";
        layout.edge_conv.push_back({store.add(p + "w_self", uniform_tensor(rng, out, in, bound)),
                                    store.add(p + "w_nbr", uniform_tensor(rng, out, in, bound)),
                                    store.add(p + "bias", uniform_tensor(rng, 1, out, bound))});
        in = out;
    }
    const double pb = 1.0 / std::sqrt(static_cast<double>(in));
    layout.proj_w = store.add("encoder.proj.w", uniform_tensor(rng, cfg.d, in, pb));
    layout.proj_b = store.add("encoder.proj.b", uniform_tensor(rng, 1, cfg.d, pb));
    const double ab = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (std::size_t l = 0; l < cfg.attn_layers; ++l) {
        const std::string p = "encoder.attn" + std::to_string(l) + ".";
        layout.attention.push_back({store.add(p + "wq", uniform_tensor(rng, cfg.d, cfg.d, ab)),
                                    store.add(p + "wk", uniform_tensor(rng, cfg.d, cfg.d, ab)),
                                    store.add(p + "wv", uniform_tensor(rng, cfg.d, cfg.d, ab))});
    }
    return layout;
}

Var fourier_lift(Var points, Var basis) {
    if (basis.shape().cols != 3) throw ad::ShapeError("fourier_lift: basis must be m x 3, got " + basis.shape().str());
    if (points.shape().cols != 3) throw ad::ShapeError("fourier_lift: points must be M x 3, got " + points.shape().str());
    Var proj = ad::scale(ad::matmul(points, basis, ad::Trans::b), 2.0 * std::numbers::pi);
    const std::array<Var, 2> parts{ad::cos(proj), ad::sin(proj)};
    return ad::concat_last_axis(parts);
}

KnnGraph knn_graph(const Tensor& points, std::size_t k) {
    const std::size_t m = points.rows();
    if (points.cols() != 3) throw ad::ShapeError("knn_graph: points must be M x 3, got " + points.shape().str());
    if (k == 0 || m <= k) throw std::invalid_argument("knn_graph: need M > k (M=" + std::to_string(m) + ", k=" + std::to_string(k) + ")");
    KnnGraph g;
    g.k = k;
    g.neighbors.resize(m * k);
    std::vector<std::pair<double, std::uint32_t>> cand(m - 1);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t c = 0;
        for (std::size_t j = 0; j < m; ++j) {
            if (j == i) continue;
            double d2 = 0.0;
            for (std::size_t a = 0; a < 3; ++a) {
                const double diff = points(i, a) - points(j, a);
                d2 += diff * diff;
            }
            cand[c++] = {d2, static_cast<std::uint32_t>(j)};
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        for (std::size_t j = 0; j < k; ++j) g.neighbors[i * k + j] = cand[j].second;
    }
    return g;
}

Var edge_conv(Var features, const KnnGraph& graph, const EdgeConvWeights& w) {
    const std::size_t m = features.shape().rows;
    if (graph.points() != m)
        throw std::invalid_argument("edge_conv: graph has " + std::to_string(graph.points()) + " points, features " +
                                    std::to_string(m));
    for (std::uint32_t j : graph.neighbors)
        if (j >= m) throw std::out_of_range("edge_conv: neighbor index " + std::to_string(j) + " out of range");

    // W_self f_i + W_nbr (f_j - f_i) = (W_self - W_nbr) f_i + W_nbr f_j, evaluated per point then gathered per edge
    Var self_term = ad::matmul(features, w.w_self, ad::Trans::b);
    Var nbr_term = ad::matmul(features, w.w_nbr, ad::Trans::b);
    Var center = ad::sub(self_term, nbr_term);
    std::vector<std::uint32_t> rows_i(m * graph.k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < graph.k; ++j) rows_i[i * graph.k + j] = static_cast<std::uint32_t>(i);
    Var edges = ad::add(ad::gather_rows(center, std::move(rows_i)), ad::gather_rows(nbr_term, graph.neighbors));
    edges = ad::relu(ad::add(edges, w.bias));
    return ad::reduce_max_axis(edges, graph.k);
}

Var encode_frame(ad::Tape& tape, const Tensor& points, const EncoderWeights& w, std::size_t k) {
    const KnnGraph graph = knn_graph(points, k);
    Var h = fourier_lift(tape.constant(points), w.basis);
    for (const EdgeConvWeights& layer : w.edge_conv) h = edge_conv(h, graph, layer);
    Var pooled = ad::reduce_max_axis(h, points.rows());
    return ad::add(ad::matmul(pooled, w.proj_w, ad::Trans::b), w.proj_b);
}

Var self_attention_layer(Var z, const AttentionWeights& w, Var* weights_out) {
    const double d = static_cast<double>(z.shape().cols);
    Var q = ad::matmul(z, w.wq);
    Var k = ad::matmul(z, w.wk);
    Var v = ad::matmul(z, w.wv);
    Var attn = ad::softmax_rows(ad::scale(ad::matmul(q, k, ad::Trans::b), 1.0 / std::sqrt(d)));
    if (weights_out) *weights_out = attn;
    return ad::add(ad::matmul(attn, v), z);
}

Var aggregate_window(ad::Tape& tape, std::span<const Tensor> frames, const EncoderWeights& w, std::size_t k,
                     bool use_attention) {
    if (frames.empty()) throw std::invalid_argument("aggregate_window: empty window");
    std::vector<Var> codes;
    codes.reserve(frames.size());
    for (const Tensor& f : frames) codes.push_back(encode_frame(tape, f, w, k));
    Var z = ad::concat_rows(codes);
    if (use_attention)
        for (const AttentionWeights& a : w.attention) z = self_attention_layer(z, a);
    return ad::gather_rows(z, {static_cast<std::uint32_t>(frames.size() - 1)});
}

}  // namespace parco::encoder
