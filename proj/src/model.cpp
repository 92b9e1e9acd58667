#include "parco/model.hpp"

#include <stdexcept>

namespace parco::model {

using ad::Tensor;
using ad::Var;

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"encoder", c.encoder}, {"sdfnet", c.sdf}, {"use_attention", c.use_attention}};
}

encoder::EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    encoder::EncoderConfig c;
    c.m = j.value("m", c.m);
    c.k = j.value("k", c.k);
    c.d = j.value("d", c.d);
    c.edge_conv_widths = j.value("edge_conv_widths", c.edge_conv_widths);
    c.attn_layers = j.value("attn_layers", c.attn_layers);
    c.window_T = j.value("window_T", c.window_T);
    c.points_per_frame = j.value("points_per_frame", c.points_per_frame);
    c.fourier_sigma = j.value("fourier_sigma", c.fourier_sigma);
    return c;
}

sdfnet::SdfConfig sdf_config_from_json(const nlohmann::json& j) {
    sdfnet::SdfConfig c;
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.layers = j.value("L", c.layers);
    c.modulator_width = j.value("modulator_width", c.modulator_width);
    c.omega0 = j.value("omega0", c.omega0);
    return c;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("sdfnet")) c.sdf = sdf_config_from_json(j.at("sdfnet"));
    c.use_attention = j.value("use_attention", c.use_attention);
    return c;
}

Model Model::create(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.encoder.window_T == 0) throw std::invalid_argument("window_T must be positive");
    if (cfg.sdf.layers < 2) throw std::invalid_argument("sdfnet needs at least 2 layers");
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    m.enc = encoder::register_encoder(m.params, cfg.encoder, rng);
    m.sdf = sdfnet::register_sdfnet(m.params, cfg.sdf, cfg.encoder.d, rng);
    return m;
}

BoundModel bind(const Model& model, ad::Tape& tape) { return bind(model, model.params.bind(tape)); }

BoundModel bind(const Model& model, std::vector<Var> vars) {
    if (vars.size() != model.params.size()) throw std::invalid_argument("bind: parameter count mismatch");
    BoundModel b;
    b.vars = std::move(vars);
    b.enc = model.enc.bind(b.vars);
    b.siren = model.sdf.bind_siren(b.vars);
    b.mods = model.sdf.bind_modulators(b.vars);
    return b;
}

Var encode(const Model& model, const BoundModel& bound, ad::Tape& tape, std::span<const Tensor> window) {
    return encoder::aggregate_window(tape, window, bound.enc, model.cfg.encoder.k, model.cfg.use_attention);
}

Tensor infer_latent(const Model& model, std::span<const Tensor> window) {
    ad::Tape tape(false);
    const BoundModel b = bind(model, tape);
    return encode(model, b, tape, window).value();
}

std::vector<double> query(const Model& model, const Tensor& z, const Tensor& points, std::size_t threads) {
    return sdfnet::batch_query(points, z, model.params, model.sdf, model.cfg.sdf, threads);
}

sdfnet::Checkpoint to_checkpoint(const Model& model) {
    sdfnet::Checkpoint c;
    c.header["model"] = model.cfg;
    c.names = model.params.names();
    c.tensors.assign(model.params.values().begin(), model.params.values().end());
    return c;
}

Model from_checkpoint(const sdfnet::Checkpoint& ckpt) {
    if (!ckpt.header.contains("model")) throw std::runtime_error("checkpoint has no model config");
    Model m = Model::create(model_config_from_json(ckpt.header.at("model")), 0);
    std::vector<bool> seen(m.params.size(), false);
    for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
        if (!m.params.contains(ckpt.names[i])) continue;
        const std::size_t idx = m.params.index_of(ckpt.names[i]);
        if (ckpt.tensors[i].shape() != m.params[idx].shape())
            throw std::runtime_error("checkpoint tensor " + ckpt.names[i] + " has shape " + ckpt.tensors[i].shape().str() +
                                     ", expected " + m.params[idx].shape().str());
        m.params[idx] = ckpt.tensors[i];
        seen[idx] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i]) throw std::runtime_error("checkpoint is missing tensor " + m.params.name(i));
    return m;
}

}  // namespace parco::model
