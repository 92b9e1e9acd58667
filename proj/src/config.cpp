#include "parco/config.hpp"

#include <fstream>
#include <set>
#include <vector>

namespace parco::config {

namespace {

using nlohmann::json;

// Reads keys from one section and remembers which ones were consumed, so the
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& root, const std::string& name) : name_(name) {
        if (root.contains(name)) {
            node_ = root.at(name);
            if (!node_.is_object()) throw ConfigError("config section '" + name + "' must be an object");
        } else {
            node_ = json::object();
        }
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!node_.contains(key)) return;
        try {
            out = node_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
        }
    }

    void finish() const {
        for (const auto& [key, value] : node_.items())
            if (!seen_.count(key)) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
    }

private:
    std::string name_;
    json node_;
    std::set<std::string> seen_;
};

const char* const kSections[] = {"data", "encoder", "sdfnet", "loss", "optimizer", "run", "eval"};

template <class T>
void require(bool ok, const std::string& key, const T& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
}

}  // namespace

RunConfig parse(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* s : kSections) known = known || key == s;
        if (!known) throw ConfigError("unknown config key '" + key + "'");
    }
    RunConfig c;

    Section data(j, "data");
    data.read("n_sequences", c.data.n_sequences);
    data.read("frames_per_sequence", c.data.frames_per_sequence);
    data.read("n_points", c.data.n_points);
    data.read("seed", c.data.seed);
    data.read("amplitude_scale", c.data.amplitude_scale);
    data.read("identity", c.data.identity);
    data.read("fill", c.data.fill);
    data.finish();

    auto& e = c.model.encoder;
    Section enc(j, "encoder");
    enc.read("m", e.m);
    enc.read("k", e.k);
    enc.read("d", e.d);
    enc.read("edge_conv_widths", e.edge_conv_widths);
    enc.read("attn_layers", e.attn_layers);
    enc.read("window_T", e.window_T);
    enc.read("points_per_frame", e.points_per_frame);
    enc.read("fourier_sigma", e.fourier_sigma);
    enc.read("use_attention", c.model.use_attention);
    enc.finish();

    auto& s = c.model.sdf;
    Section sdf(j, "sdfnet");
    sdf.read("hidden_width", s.hidden_width);
    sdf.read("L", s.layers);
    sdf.read("modulator_width", s.modulator_width);
    sdf.read("omega0", s.omega0);
    sdf.finish();

    Section loss(j, "loss");
    loss.read("lambda_surface", c.loss.surface);
    loss.read("lambda_normal", c.loss.normal);
    loss.read("lambda_eik", c.loss.eikonal);
    loss.read("lambda_z", c.loss.latent);
    loss.read("alpha", c.loss.alpha);
    loss.finish();

    Section opt(j, "optimizer");
    std::vector<double> betas{c.adam.beta1, c.adam.beta2};
    opt.read("lr", c.adam.lr);
    opt.read("steps", c.steps);
    opt.read("betas", betas);
    opt.read("eps", c.adam.eps);
    opt.finish();
    require(betas.size() == 2, "optimizer.betas", "expected two values");
    c.adam.beta1 = betas[0];
    c.adam.beta2 = betas[1];

    Section run(j, "run");
    run.read("seed", c.run.seed);
    run.read("surface_batch", c.run.surface_batch);
    run.read("query_batch", c.run.query_batch);
    run.read("checkpoint_interval", c.run.checkpoint_interval);
    run.read("holdout", c.run.holdout);
    run.finish();

    Section ev(j, "eval");
    ev.read("grid_res", c.eval.grid_res);
    ev.read("half_extent", c.eval.half_extent);
    ev.read("cd_variant", c.eval.cd_variant);
    ev.read("augment_seed", c.eval.augment_seed);
    ev.read("first", c.eval.first);
    ev.read("stride", c.eval.stride);
    ev.read("max_frames", c.eval.max_frames);
    ev.read("max_mean_cd", c.eval.max_mean_cd);
    ev.read("min_tsr", c.eval.min_tsr);
    ev.finish();

    require(c.data.n_sequences > 0, "data.n_sequences", "must be positive");
    require(c.data.frames_per_sequence > 0, "data.frames_per_sequence", "must be positive");
    require(c.data.n_points >= 64, "data.n_points", "must be at least 64");
    require(c.data.fill > 0.0 && c.data.fill <= 1.0, "data.fill", "must lie in (0, 1]");
    require(e.m > 0 && e.d > 0 && !e.edge_conv_widths.empty(), "encoder", "m, d and edge_conv_widths must be non-empty");
    require(e.k > 0 && e.points_per_frame > e.k, "encoder.points_per_frame", "must exceed k");
    require(e.window_T > 0, "encoder.window_T", "must be positive");
    require(s.hidden_width > 0 && s.modulator_width > 0, "sdfnet", "widths must be positive");
    require(s.layers >= 2, "sdfnet.L", "must be at least 2");
    require(c.adam.lr > 0.0, "optimizer.lr", "must be positive");
    require(c.steps > 0, "optimizer.steps", "must be positive");
    require(c.run.surface_batch > 0 && c.run.query_batch > 0, "run", "batch sizes must be positive");
    require(c.eval.grid_res >= 2, "eval.grid_res", "must be at least 2");
    require(c.eval.cd_variant == geometry::kChamferVariant, "eval.cd_variant",
            std::string("only '") + geometry::kChamferVariant + "' is implemented");
    try {
        c.loss.validate();
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(ex.what());
    }
    return c;
}

RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse(j);
}

json to_json(const RunConfig& c) {
    json j;
    j["data"] = {{"n_sequences", c.data.n_sequences}, {"frames_per_sequence", c.data.frames_per_sequence},
                 {"n_points", c.data.n_points},       {"seed", c.data.seed},
                 {"amplitude_scale", c.data.amplitude_scale}, {"identity", c.data.identity},
                 {"fill", c.data.fill}};
    j["encoder"] = c.model.encoder;
    j["encoder"]["use_attention"] = c.model.use_attention;
    j["sdfnet"] = c.model.sdf;
    j["loss"] = c.loss;
    j["optimizer"] = {{"lr", c.adam.lr}, {"steps", c.steps}, {"betas", {c.adam.beta1, c.adam.beta2}}, {"eps", c.adam.eps}};
    j["run"] = {{"seed", c.run.seed},
                {"surface_batch", c.run.surface_batch},
                {"query_batch", c.run.query_batch},
                {"checkpoint_interval", c.run.checkpoint_interval},
                {"holdout", c.run.holdout}};
    j["eval"] = {{"grid_res", c.eval.grid_res},       {"half_extent", c.eval.half_extent},
                 {"cd_variant", c.eval.cd_variant},   {"augment_seed", c.eval.augment_seed},
                 {"first", c.eval.first},             {"stride", c.eval.stride},
                 {"max_frames", c.eval.max_frames},   {"max_mean_cd", c.eval.max_mean_cd},
                 {"min_tsr", c.eval.min_tsr}};
    return j;
}

void echo(const RunConfig& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream os(dir / "config.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "config.json").string());
    os << to_json(c).dump(2) << '\n';
}

data::GenerationConfig RunConfig::generation() const {
    data::GenerationConfig g;
    g.n_frames = data.frames_per_sequence;
    g.n_points = data.n_points;
    g.amplitude_scale = data.amplitude_scale;
    g.identity = data.identity;
    g.fill = data.fill;
    return g;
}

training::TrainConfig RunConfig::train() const {
    training::TrainConfig t;
    t.steps = steps;
    t.adam = adam;
    t.surface_batch = run.surface_batch;
    t.query_batch = run.query_batch;
    t.seed = run.seed;
    t.checkpoint_interval = run.checkpoint_interval;
    return t;
}

eval::EvalOptions RunConfig::eval_options(std::size_t threads) const {
    eval::EvalOptions o;
    o.extraction.grid_res = eval.grid_res;
    o.extraction.half_extent = eval.half_extent;
    o.extraction.threads = threads;
    o.augment_seed = eval.augment_seed;
    o.first = eval.first;
    o.stride = eval.stride;
    o.max_frames = eval.max_frames;
    return o;
}

}  // namespace parco::config
