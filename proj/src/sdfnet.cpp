#include "parco/sdfnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace parco::sdfnet {

using ad::Tensor;
using ad::Var;

namespace {

Var affine(Var h, Var w, Var b, Var shift, double s) {
    Var pre = ad::matmul(h, w, ad::Trans::b);
    if (s != 1.0) pre = ad::scale(pre, s);
    if (b.valid()) pre = ad::add(pre, b);
    if (shift.valid()) pre = ad::add(pre, shift);
    return pre;
}

void check_shifts(std::span<const Var> shifts, const SirenWeights& w) {
    if (w.weight.size() < 2 || w.weight.size() != w.bias.size())
        throw std::invalid_argument("SIREN needs at least two layers with matching biases");
    if (!shifts.empty() && shifts.size() != w.weight.size() - 1)
        throw std::invalid_argument("expected " + std::to_string(w.weight.size() - 1) + " shifts, got " +
                                    std::to_string(shifts.size()));
}

Var shift_at(std::span<const Var> shifts, std::size_t l) { return shifts.empty() ? Var{} : shifts[l]; }

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void to_json(nlohmann::json& j, const SdfConfig& c) {
    j = {{"hidden_width", c.hidden_width}, {"L", c.layers}, {"modulator_width", c.modulator_width}, {"omega0", c.omega0}};
}

SirenWeights SdfLayout::bind_siren(std::span<const Var> vars) const {
    SirenWeights w;
    for (std::size_t i : siren_w) w.weight.push_back(vars[i]);
    for (std::size_t i : siren_b) w.bias.push_back(vars[i]);
    return w;
}

ModulatorWeights SdfLayout::bind_modulators(std::span<const Var> vars) const {
    ModulatorWeights m;
    for (const auto& l : mod_w) m.weight.push_back({vars[l[0]], vars[l[1]], vars[l[2]]});
    for (const auto& l : mod_b) m.bias.push_back({vars[l[0]], vars[l[1]], vars[l[2]]});
    return m;
}

SdfLayout register_sdfnet(ParamStore& store, const SdfConfig& cfg, std::size_t latent_dim, Rng& rng) {
    if (cfg.layers < 2) throw std::invalid_argument("SIREN needs L >= 2");
    const std::size_t width = cfg.hidden_width;
    SdfLayout layout;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t in = l == 0 ? 3 : width;
        const std::size_t out = l + 1 == cfg.layers ? 1 : width;
        // first layer U(-1/in, 1/in); later layers U(-sqrt(6/in), sqrt(6/in)) since omega0 is not applied there
        const double bound = l == 0 ? 1.0 / static_cast<double>(in) : std::sqrt(6.0 / static_cast<double>(in));
        const double bias_bound = 1.0 / std::sqrt(static_cast<double>(in));
        const std::string p = "siren.layer" + std::to_string(l) + ".";
        layout.siren_w.push_back(store.add(p + "w", uniform_tensor(rng, out, in, bound)));
        layout.siren_b.push_back(store.add(p + "b", uniform_tensor(rng, 1, out, bias_bound)));
    }
    const std::size_t h = cfg.modulator_width;
    for (std::size_t l = 0; l + 1 < cfg.layers; ++l) {
        const std::string p = "modulator" + std::to_string(l) + ".";
        std::array<std::size_t, 3> w{}, b{};
        const double b0 = 1.0 / std::sqrt(static_cast<double>(latent_dim));
        const double b1 = 1.0 / std::sqrt(static_cast<double>(h));
        w[0] = store.add(p + "fc0.w", uniform_tensor(rng, h, latent_dim, b0));
        b[0] = store.add(p + "fc0.b", uniform_tensor(rng, 1, h, b0));
        w[1] = store.add(p + "fc1.w", uniform_tensor(rng, h, h, b1));
        b[1] = store.add(p + "fc1.b", uniform_tensor(rng, 1, h, b1));
        w[2] = store.add(p + "out.w", Tensor(width, h));
        b[2] = store.add(p + "out.b", Tensor(1, width));
        layout.mod_w.push_back(w);
        layout.mod_b.push_back(b);
    }
    return layout;
}

std::vector<Var> modulate(Var z, const ModulatorWeights& mods) {
    std::vector<Var> shifts;
    shifts.reserve(mods.weight.size());
    for (std::size_t l = 0; l < mods.weight.size(); ++l) {
        const auto& w = mods.weight[l];
        const auto& b = mods.bias[l];
        if (w[0].shape().cols != z.shape().cols)
            throw ad::ShapeError("modulate: latent " + z.shape().str() + " does not match modulator input " +
                                 w[0].shape().str());
        Var a = ad::relu(affine(z, w[0], b[0], {}, 1.0));
        a = ad::relu(affine(a, w[1], b[1], {}, 1.0));
        shifts.push_back(affine(a, w[2], b[2], {}, 1.0));
    }
    return shifts;
}

Var sdf_forward(ad::Tape& tape, const Tensor& x, std::span<const Var> shifts, const SirenWeights& w, double omega0,
                SdfTrace* trace) {
    check_shifts(shifts, w);
    const std::size_t last = w.weight.size() - 1;
    Var h = tape.constant(x);
    for (std::size_t l = 0; l < last; ++l) {
        Var pre = affine(h, w.weight[l], w.bias[l], shift_at(shifts, l), l == 0 ? omega0 : 1.0);
        if (trace) trace->pre_activations.push_back(pre.value());
        h = ad::sin(pre);
    }
    return affine(h, w.weight[last], w.bias[last], {}, 1.0);
}

SdfWithGrad sdf_forward_with_grad(ad::Tape& tape, const Tensor& x, std::span<const Var> shifts, const SirenWeights& w,
                                  double omega0) {
    check_shifts(shifts, w);
    const std::size_t last = w.weight.size() - 1;
    std::vector<ad::DualLayer> layers;
    for (std::size_t l = 0; l < last; ++l) {
        layers.push_back({ad::OpKind::matmul, w.weight[l], w.bias[l], shift_at(shifts, l), l == 0 ? omega0 : 1.0});
        layers.push_back({ad::OpKind::sin});
    }
    layers.push_back({ad::OpKind::matmul, w.weight[last], w.bias[last], {}, 1.0});
    ad::DualVar d = ad::dual_forward(tape, x, layers);
    return {d.value, d.gradient()};
}

std::vector<double> batch_query(const Tensor& points, const Tensor& z, const ParamStore& params,
                                const SdfLayout& layout, const SdfConfig& cfg, std::size_t threads) {
    std::vector<Tensor> shift_values;
    {
        ad::Tape tape(false);
        const auto vars = params.bind(tape);
        for (Var s : modulate(tape.constant(z), layout.bind_modulators(vars))) shift_values.push_back(s.value());
    }

    constexpr std::size_t kChunk = 8192;
    const std::size_t n = points.rows();
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<double> field(n);

    auto run_chunk = [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const std::size_t end = std::min(n, begin + kChunk);
        Tensor x(end - begin, 3);
        std::copy(points.values().begin() + static_cast<std::ptrdiff_t>(begin * 3),
                  points.values().begin() + static_cast<std::ptrdiff_t>(end * 3), x.values().begin());
        ad::Tape tape(false);
        std::vector<Var> vars(params.size());
        for (std::size_t i : layout.siren_w) vars[i] = tape.leaf(params[i]);
        for (std::size_t i : layout.siren_b) vars[i] = tape.leaf(params[i]);
        std::vector<Var> shifts;
        for (const Tensor& s : shift_values) shifts.push_back(tape.constant(s));
        Var out = sdf_forward(tape, x, shifts, layout.bind_siren(vars), cfg.omega0);
        std::copy(out.value().values().begin(), out.value().values().end(),
                  field.begin() + static_cast<std::ptrdiff_t>(begin));
    };

    threads = std::max<std::size_t>(1, std::min(threads, chunks));
    if (threads == 1) {
        for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t c = t; c < chunks; c += threads) run_chunk(c);
            });
        for (auto& th : pool) th.join();
    }
    return field;
}

// ---- checkpoint -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (ckpt.names.size() != ckpt.tensors.size()) throw std::invalid_argument("checkpoint name/tensor count mismatch");
    nlohmann::json header = ckpt.header;
    auto& table = header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const Tensor& t = ckpt.tensors[i];
        table.push_back({{"name", ckpt.names[i]}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
        offset += 8 * t.size();
    }
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write("PCSD", 4);
    put_u32(os, kCheckpointVersion);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Tensor& t : ckpt.tensors)
        for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PCSD", 4) != 0)
        throw std::runtime_error(path.string() + ": not a PCSD checkpoint");
    const std::uint32_t version = get_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t len = get_u64(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint header truncated");
    Checkpoint ck;
    ck.header = nlohmann::json::parse(text);
    const std::streampos payload = is.tellg();
    for (const auto& entry : ck.header.at("tensors")) {
        const auto rows = entry.at("shape").at(0).get<std::size_t>();
        const auto cols = entry.at("shape").at(1).get<std::size_t>();
        is.seekg(payload + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        Tensor t(rows, cols);
        for (double& v : t.values()) v = std::bit_cast<double>(get_u64(is));
        ck.names.push_back(entry.at("name").get<std::string>());
        ck.tensors.push_back(std::move(t));
    }
    ck.header.erase("tensors");
    return ck;
}

}  // namespace parco::sdfnet
